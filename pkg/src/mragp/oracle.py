# File: src/mragp/oracle.py

"""Dense reference implementations: exact GP, exact decomposition, dense M-RA and simulation.

Everything here is plain O(n^3) dense linear algebra without shortcuts. It
exists to check the sparse code paths and to simulate data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np
from scipy import linalg

from .covariance import CovarianceModel, Modulator, cov_matrix
from .errors import DataError, NotPositiveDefiniteError
from .geometry import KnotHierarchy, as_points
from .mra import Observations
from .sparse import JITTER_RELATIVE

MAX_DENSE_N = 5000
MAX_DECOMPOSITION_N = 2000


def _guard(n: int, limit: int, what: str) -> None:
    if n > limit:
        raise DataError(f"{what} is limited to {limit} locations, got {n}")


def dense_cholesky(A: np.ndarray, jitter: bool = True) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, retrying once with 1e-10 relative diagonal jitter.

    Returns:
        Tuple of (L, jitter applied)
    """
    try:
        return linalg.cholesky(A, lower=True), 0.0
    except linalg.LinAlgError as exc:
        if not jitter:
            raise NotPositiveDefiniteError(f"Dense matrix is not positive definite: {exc}") from exc
        shift = JITTER_RELATIVE * float(np.max(np.abs(np.diag(A))))
        logging.warning("Dense Cholesky failed; retrying with diagonal jitter %.3e", shift)
        try:
            return linalg.cholesky(A + shift * np.eye(A.shape[0]), lower=True), shift
        except linalg.LinAlgError as second:
            raise NotPositiveDefiniteError(
                f"Dense matrix is not positive definite after jitter {shift:.3e}"
            ) from second


def _gaussian_logdensity(cov: np.ndarray, z: np.ndarray) -> float:
    L, _ = dense_cholesky(cov)
    alpha = linalg.solve_triangular(L, z, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (z.size * math.log(2.0 * math.pi) + logdet + float(alpha @ alpha))


def _conditional(
    cov_ss: np.ndarray, cov_ps: np.ndarray, cov_pp: np.ndarray, z: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    L, _ = dense_cholesky(cov_ss)
    factor = (L, True)
    mean = cov_ps @ linalg.cho_solve(factor, z)
    cov = cov_pp - cov_ps @ linalg.cho_solve(factor, cov_ps.T)
    return mean, 0.5 * (cov + cov.T)


@dataclass
class DenseGP:
    """Exact GP at a set of locations with its dense factor."""

    model: CovarianceModel
    locations: np.ndarray
    covariance: np.ndarray
    factor: np.ndarray
    jitter: float = 0.0

    @classmethod
    def build(
        cls, model: CovarianceModel, locations: np.ndarray, noise: Optional[np.ndarray] = None
    ) -> "DenseGP":
        _guard(len(locations), MAX_DENSE_N, "The dense GP")
        covariance = cov_matrix(model, locations)
        if noise is not None:
            covariance = covariance + np.diag(np.broadcast_to(noise, (len(locations),)))
        factor, jitter = dense_cholesky(covariance)
        return cls(model, locations, covariance, factor, jitter)


def dense_gp_loglik(model: CovarianceModel, obs: Observations) -> float:
    """Exact log-density of N(0, C_0(S, S) + V_eps) at z."""
    _guard(obs.n, MAX_DENSE_N, "The dense log-likelihood")
    cov = cov_matrix(model, obs.locations) + np.diag(obs.noise)
    return _gaussian_logdensity(cov, obs.values)


def dense_gp_krige(
    model: CovarianceModel, obs: Observations, SP: Any
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact kriging mean and covariance of y(S^P) given z."""
    _guard(obs.n, MAX_DENSE_N, "Dense kriging")
    points = as_points(SP, obs.locations.shape[1])
    cov_ss = cov_matrix(model, obs.locations) + np.diag(obs.noise)
    return _conditional(
        cov_ss, cov_matrix(model, points, obs.locations), cov_matrix(model, points), obs.values
    )


@dataclass
class ExactDecomposition:
    """Orthogonal multi-resolution decomposition of C_0 at S.

    terms[m] = a_m(S) Omega_m^{-1} a_m(S)' and remainders[m] = w_m(S, S) for
    m = 0..M+1, so C_0(S, S) = sum(terms) + remainders[M+1].
    """

    a: List[np.ndarray]
    omega: List[np.ndarray]
    terms: List[np.ndarray]
    remainders: List[np.ndarray]

    def reconstruct(self) -> np.ndarray:
        return np.sum(self.terms, axis=0) + self.remainders[-1]


def exact_decomposition(
    model: CovarianceModel, knots: KnotHierarchy, S: Any
) -> ExactDecomposition:
    """Dense w_m, a_m, Omega_m recursion without modulation."""
    points = as_points(S, knots.domain.dim)
    _guard(len(points), MAX_DECOMPOSITION_N, "The exact decomposition")
    _guard(knots.total, MAX_DECOMPOSITION_N, "The exact decomposition")
    n = len(points)
    X = np.vstack([points, knots.stacked()])
    offsets = n + knots.offsets()
    w = cov_matrix(model, X)
    a, omega, terms, remainders = [], [], [], [w[:n, :n].copy()]
    for m in range(knots.M + 1):
        idx = slice(offsets[m], offsets[m + 1])
        om = w[idx, idx]
        L, _ = dense_cholesky(om, jitter=False)
        projected = linalg.cho_solve((L, True), w[idx, :])
        update = w[:, idx] @ projected
        a.append(w[:n, idx].copy())
        omega.append(om.copy())
        terms.append(update[:n, :n])
        w = w - update
        remainders.append(w[:n, :n].copy())
    return ExactDecomposition(a=a, omega=omega, terms=terms, remainders=remainders)


@dataclass
class DenseMRA:
    """Dense M-RA quantities at S: basis blocks, prior precisions and C_M(S, S)."""

    B_blocks: List[np.ndarray]
    Lambda_blocks: List[np.ndarray]
    C_M: np.ndarray

    @property
    def B(self) -> np.ndarray:
        return np.hstack(self.B_blocks)

    @property
    def Lambda(self) -> np.ndarray:
        return linalg.block_diag(*self.Lambda_blocks)


def dense_mra(
    model: CovarianceModel, knots: KnotHierarchy, mod: Modulator, S: Any
) -> DenseMRA:
    """Literal dense evaluation of the modulated recursion v_m, b_m, Lambda_m."""
    points = as_points(S, knots.domain.dim)
    _guard(len(points) + knots.total, MAX_DENSE_N, "The dense M-RA")
    n = len(points)
    X = np.vstack([points, knots.stacked()])
    offsets = n + knots.offsets()
    v = cov_matrix(model, X) * mod.matrix(0, X)
    B_blocks, Lambda_blocks = [], []
    C_M = np.zeros((n, n))
    for m in range(knots.M + 1):
        idx = slice(offsets[m], offsets[m + 1])
        lam = v[idx, idx]
        basis = v[:, idx]
        L, _ = dense_cholesky(lam)
        projected = linalg.cho_solve((L, True), basis.T)
        B_blocks.append(basis[:n].copy())
        Lambda_blocks.append(lam.copy())
        C_M += basis[:n] @ projected[:, :n]
        if m < knots.M:
            v = (v - basis @ projected) * mod.matrix(m + 1, X)
    return DenseMRA(B_blocks=B_blocks, Lambda_blocks=Lambda_blocks, C_M=C_M)


def dense_mra_krige(
    model: CovarianceModel,
    knots: KnotHierarchy,
    mod: Modulator,
    obs: Observations,
    SP: Any,
) -> Tuple[np.ndarray, np.ndarray]:
    """Kriging mean and covariance of y_M(S^P) under the dense C_M."""
    points = as_points(SP, knots.domain.dim)
    joint = dense_mra(model, knots, mod, np.vstack([obs.locations, points])).C_M
    n = obs.n
    cov_ss = joint[:n, :n] + np.diag(obs.noise)
    return _conditional(cov_ss, joint[n:, :n], joint[n:, n:], obs.values)


def make_rng(seed: int, replicate: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, replicate, stream).

    Stream 0 draws field values; other streams serve locations and splits.
    """
    key = np.random.SeedSequence([seed, replicate, stream])
    return np.random.Generator(np.random.Philox(key))


def sample_gp(
    model: CovarianceModel,
    S: Any,
    noise: Any = 0.0,
    seed: int = 0,
    replicate: int = 0,
) -> np.ndarray:
    """Draw z = y(S) + eps with y ~ GP(0, C_0) and eps ~ N(0, diag(noise)).

    Repeated locations share one latent value. The draw is deterministic per
    (seed, replicate).
    """
    points = np.asarray(S, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    n = len(points)
    if n == 0:
        raise DataError("Cannot simulate at zero locations")
    _guard(n, MAX_DENSE_N, "Simulation")
    noise_vec = np.broadcast_to(np.asarray(noise, dtype=float), (n,))
    if np.any(noise_vec < 0):
        raise DataError("Noise variances must be non-negative")
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    L, _ = dense_cholesky(cov_matrix(model, unique))
    rng = make_rng(seed, replicate)
    latent = L @ rng.standard_normal(len(unique))
    eps = np.sqrt(noise_vec) * rng.standard_normal(n)
    return latent[inverse] + eps
