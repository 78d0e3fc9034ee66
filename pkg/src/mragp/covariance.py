# File: src/mragp/covariance.py

"""Covariance functions, taper functions and the modulating functions T_m."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.distance import cdist
from scipy.special import gamma, kv

from .errors import ConfigError, GeometryError
from .geometry import Domain, PartitionTree, as_points

COVARIANCE_FAMILIES = ("exponential", "matern")

# Correlation level defining the effective range.
EFFECTIVE_RANGE_CORRELATION = 0.05

_KANTER_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True)
class CovarianceModel:
    """Stationary isotropic covariance C_0 with variance sigma2 and range kappa."""

    family: str = "exponential"
    sigma2: float = 0.95
    kappa: float = 0.05
    nu: float = 0.5

    def __post_init__(self) -> None:
        if self.family not in COVARIANCE_FAMILIES:
            raise ConfigError(
                f"Unknown covariance family '{self.family}', expected one of {COVARIANCE_FAMILIES}"
            )
        for name in ("sigma2", "kappa", "nu"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"Covariance parameter {name} must be positive, got {value}")
        if self.family == "exponential" and self.nu != 0.5:
            object.__setattr__(self, "nu", 0.5)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "sigma2": self.sigma2, "kappa": self.kappa, "nu": self.nu}


def correlation(model: CovarianceModel, h: Any) -> np.ndarray:
    """Correlation C_0 / sigma2 as a function of Euclidean distance h."""
    x = np.asarray(h, dtype=float) / model.kappa
    if model.family == "exponential" or model.nu == 0.5:
        return np.exp(-x)
    if model.nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if model.nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    nu = model.nu
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = (2.0 ** (1.0 - nu) / gamma(nu)) * x**nu * kv(nu, x)
    out = np.where(x == 0.0, 1.0, out)
    return np.nan_to_num(out, nan=0.0, posinf=0.0)


def cov_from_distance(model: CovarianceModel, h: Any) -> np.ndarray:
    """C_0 evaluated at distances h."""
    return model.sigma2 * correlation(model, h)


def cov(model: CovarianceModel, s1: Any, s2: Any) -> float:
    """C_0(s1, s2) for two single points."""
    p1 = np.atleast_1d(np.asarray(s1, dtype=float))
    p2 = np.atleast_1d(np.asarray(s2, dtype=float))
    return float(cov_from_distance(model, np.linalg.norm(p1 - p2)))


def cov_matrix(model: CovarianceModel, X: np.ndarray, Y: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense cross-covariance C_0(X, Y) for (n, d) and (k, d) point arrays."""
    Y = X if Y is None else Y
    return cov_from_distance(model, cdist(X, Y))


def effective_range(model: CovarianceModel) -> float:
    """Distance at which the correlation drops to 5%."""
    if model.family == "exponential":
        return model.kappa * math.log(1.0 / EFFECTIVE_RANGE_CORRELATION)
    upper = model.kappa
    while float(correlation(model, upper)) > EFFECTIVE_RANGE_CORRELATION:
        upper *= 2.0
    return float(
        brentq(
            lambda h: float(correlation(model, h)) - EFFECTIVE_RANGE_CORRELATION,
            0.0,
            upper,
            xtol=1e-14 * upper,
        )
    )


def recommended_taper(model: CovarianceModel, domain: Domain) -> Tuple[float, int]:
    """Taper range d0 = 2*rho and the smallest r0 with level-0 knot spacing <= 2*rho/3.

    Returns:
        Tuple of (d0, r0)
    """
    rho = effective_range(model)
    per_axis = int(math.ceil(1.5 * float(np.max(domain.extent)) / rho))
    per_axis = max(per_axis, 1)
    return 2.0 * rho, per_axis**domain.dim


def kanter(x: Any) -> Union[float, np.ndarray]:
    """Kanter's compactly supported correlation function.

    Args:
        x: Scaled distance(s), must be non-negative

    Returns:
        Taper value(s) in [0, 1]; zero for x >= 1
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("Kanter's function is defined for non-negative arguments only")
    out = np.zeros_like(arr)
    inside = arr < 1.0
    small = inside & (arr < _KANTER_SERIES_CUTOFF)
    regular = inside & ~small
    xs = arr[regular]
    two_pi_x = 2.0 * math.pi * xs
    out[regular] = (1.0 - xs) * np.sin(two_pi_x) / two_pi_x + (1.0 - np.cos(two_pi_x)) / (
        2.0 * math.pi**2 * xs
    )
    xt = arr[small]
    out[small] = 1.0 - (2.0 * math.pi**2 / 3.0) * xt**2 + (math.pi**2 / 3.0) * xt**3
    out = np.clip(out, 0.0, 1.0)
    if out.ndim == 0:
        return float(out)
    return out


TAPER_FAMILIES: Dict[str, Callable[[Any], Union[float, np.ndarray]]] = {"kanter": kanter}


@dataclass(frozen=True)
class TaperSpec:
    """Taper T_m(s1, s2) = T*(|s1 - s2| / d_m) with d_m = d0 / J**(m/dim)."""

    d0: float
    J: int
    dim: int = 1
    base: str = "kanter"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.d0) and self.d0 > 0):
            raise ConfigError(f"Taper range d0 must be positive, got {self.d0}")
        if self.J < 2:
            raise ConfigError(f"Taper factor J must be at least 2, got {self.J}")
        if self.base not in TAPER_FAMILIES:
            raise ConfigError(f"Unknown taper family '{self.base}'")

    def range_at(self, m: int) -> float:
        return self.d0 / self.J ** (m / self.dim)

    def evaluate(self, x: Any) -> Union[float, np.ndarray]:
        return TAPER_FAMILIES[self.base](x)


@dataclass(frozen=True)
class Modulator:
    """Either the block rule over a partition tree or a per-level taper."""

    kind: str
    tree: Optional[PartitionTree] = None
    taper: Optional[TaperSpec] = None

    def __post_init__(self) -> None:
        if self.kind == "block" and self.tree is None:
            raise ConfigError("Block modulator requires a partition tree")
        if self.kind == "taper" and self.taper is None:
            raise ConfigError("Taper modulator requires a taper specification")
        if self.kind not in ("block", "taper"):
            raise ConfigError(f"Unknown modulator kind '{self.kind}'")

    @classmethod
    def block(cls, tree: PartitionTree) -> "Modulator":
        return cls(kind="block", tree=tree)

    @classmethod
    def tapered(cls, spec: TaperSpec) -> "Modulator":
        return cls(kind="taper", taper=spec)

    @property
    def is_block(self) -> bool:
        return self.kind == "block"

    def pair_values(self, m: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """T_m at the paired rows of X and Y."""
        if len(X) == 0:
            return np.zeros(0)
        if self.is_block:
            assert self.tree is not None
            same = self.tree.region_codes(X, m) == self.tree.region_codes(Y, m)
            return same.astype(float)
        assert self.taper is not None
        dist = np.linalg.norm(np.asarray(X) - np.asarray(Y), axis=1)
        return np.asarray(self.taper.evaluate(dist / self.taper.range_at(m)), dtype=float)

    def matrix(self, m: int, X: np.ndarray, Y: Optional[np.ndarray] = None) -> np.ndarray:
        """Dense T_m(X, Y)."""
        Y = X if Y is None else Y
        if self.is_block:
            assert self.tree is not None
            cx = self.tree.region_codes(X, m)
            cy = self.tree.region_codes(Y, m)
            return (cx[:, None] == cy[None, :]).astype(float)
        assert self.taper is not None
        dist = cdist(X, Y)
        return np.asarray(self.taper.evaluate(dist / self.taper.range_at(m)), dtype=float)

    def to_dict(self) -> Dict[str, Any]:
        if self.is_block:
            assert self.tree is not None
            return {"kind": "block", "tree": self.tree.to_dict()}
        assert self.taper is not None
        return {
            "kind": "taper",
            "d0": self.taper.d0,
            "J": self.taper.J,
            "dim": self.taper.dim,
            "base": self.taper.base,
        }


def modulate(mod: Modulator, m: int, s1: Any, s2: Any) -> float:
    """T_m(s1, s2) for a single pair of points."""
    dim = mod.tree.domain.dim if mod.tree is not None else mod.taper.dim  # type: ignore[union-attr]
    p1 = as_points(s1, dim)
    p2 = as_points(s2, dim)
    if len(p1) != 1 or len(p2) != 1:
        raise GeometryError("modulate expects two single points")
    return float(mod.pair_values(m, p1, p2)[0])


def support_radius(
    mod: Modulator, m: int
) -> Union[float, List[Tuple[Tuple[float, ...], Tuple[float, ...]]]]:
    """Taper range d_m, or the level-m region boxes for the block rule."""
    if mod.is_block:
        assert mod.tree is not None
        return mod.tree.region_boxes(m)
    assert mod.taper is not None
    return mod.taper.range_at(m)
