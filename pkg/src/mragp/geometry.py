# File: src/mragp/geometry.py

"""Domains, recursive J-ary partitions and multi-resolution knot sets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import GeometryError

SUPPORTED_DIMS = (1, 2)
SUPPORTED_PARTITION_J = (2, 4)
KNOT_LAYOUTS = ("lattice", "boundary")

# Minimum admissible knot spacing relative to the domain extent.
MIN_SPACING = 1e-12


def as_points(values: Any, dim: int) -> np.ndarray:
    """Coerce scalars, flat arrays or (n, d) arrays into an (n, d) float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise GeometryError(f"Expected points of dimension {dim}, got array of shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box D = [lower, upper] in one or two dimensions."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self) -> None:
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if len(lower) != len(upper):
            raise GeometryError("Domain bounds must have the same length")
        if len(lower) not in SUPPORTED_DIMS:
            raise GeometryError(
                f"Only 1-D and 2-D domains are supported, got dimension {len(lower)}"
            )
        for lo, hi in zip(lower, upper):
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise GeometryError(f"Invalid domain bounds: lower={lower}, upper={upper}")

    @classmethod
    def unit(cls, dim: int = 1) -> "Domain":
        """The unit interval or unit square."""
        return cls(lower=(0.0,) * dim, upper=(1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lower_array(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def upper_array(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.upper_array - self.lower_array

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, points: Any) -> np.ndarray:
        """Boolean mask of points inside the closed box."""
        pts = as_points(points, self.dim)
        return np.all((pts >= self.lower_array) & (pts <= self.upper_array), axis=1)

    def check_points(self, points: Any) -> np.ndarray:
        """Return points as an (n, d) array, raising if any lies outside the domain."""
        pts = as_points(points, self.dim)
        inside = self.contains(pts)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise GeometryError(f"Point {pts[bad].tolist()} lies outside domain {self}")
        return pts

    def to_dict(self) -> Dict[str, Any]:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Domain":
        return cls(lower=tuple(data["lower"]), upper=tuple(data["upper"]))


def _cell_index(coords: np.ndarray, lower: float, extent: float, cells: int) -> np.ndarray:
    """Half-open cell index along one axis; the global upper edge joins the last cell."""
    edges = lower + extent * (np.arange(cells + 1) / cells)
    idx = np.searchsorted(edges, coords, side="right") - 1
    return np.clip(idx, 0, cells - 1)


@dataclass(frozen=True)
class PartitionTree:
    """Recursive J-ary partition of a domain into half-open boxes.

    Level m has J**m regions. In 1-D every region is cut into J equal
    intervals; in 2-D with J=4 regions are quartered, with J=2 the split axis
    alternates (x at odd levels, y at even levels).
    """

    domain: Domain
    J: int
    M: int

    def __post_init__(self) -> None:
        if self.J not in SUPPORTED_PARTITION_J:
            raise GeometryError(f"Partition factor J must be one of {SUPPORTED_PARTITION_J}")
        if self.M < 0:
            raise GeometryError("Partition depth M must be non-negative")

    def cells(self, m: int) -> Tuple[int, ...]:
        """Number of regions along each axis at level m."""
        if self.domain.dim == 1:
            return (self.J**m,)
        if self.J == 4:
            return (2**m, 2**m)
        return (2 ** ((m + 1) // 2), 2 ** (m // 2))

    def _cell_indices(self, pts: np.ndarray, m: int) -> List[np.ndarray]:
        lower, extent = self.domain.lower_array, self.domain.extent
        return [
            _cell_index(pts[:, axis], lower[axis], extent[axis], count)
            for axis, count in enumerate(self.cells(m))
        ]

    def _digits(self, pts: np.ndarray, m: int) -> List[np.ndarray]:
        """0-based child index chosen at each level 1..m."""
        digits = []
        previous = self._cell_indices(pts, 0)
        for level in range(1, m + 1):
            current = self._cell_indices(pts, level)
            if self.domain.dim == 1:
                digit = current[0] - self.J * previous[0]
            elif self.J == 4:
                digit = (current[0] - 2 * previous[0]) + 2 * (current[1] - 2 * previous[1])
            else:
                axis = (level - 1) % 2
                digit = current[axis] - 2 * previous[axis]
            digits.append(digit.astype(np.int64))
            previous = current
        return digits

    def region_codes(self, points: Any, m: int) -> np.ndarray:
        """Integer region label at level m, ordered so that sibling regions are contiguous."""
        pts = self.domain.check_points(points)
        code = np.zeros(len(pts), dtype=np.int64)
        for digit in self._digits(pts, m):
            code = code * self.J + digit
        return code

    def region_path(self, s: Any, m: int) -> Tuple[int, ...]:
        """1-based index path (j_1, ..., j_m) of the level-m region containing s."""
        pts = self.domain.check_points(s)
        if len(pts) != 1:
            raise GeometryError("region_path expects a single point")
        return tuple(int(d[0]) + 1 for d in self._digits(pts, m))

    def region_boxes(self, m: int) -> List[Tuple[Tuple[float, ...], Tuple[float, ...]]]:
        """Level-m regions as (lower, upper) corners, in region-code order."""
        counts = self.cells(m)
        lower, extent = self.domain.lower_array, self.domain.extent
        grids = np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")
        boxes = []
        centers = []
        for flat in zip(*[g.ravel() for g in grids]):
            lo = tuple(
                float(lower[a] + extent[a] * (flat[a] / counts[a])) for a in range(len(flat))
            )
            hi = tuple(
                float(lower[a] + extent[a] * ((flat[a] + 1) / counts[a])) for a in range(len(flat))
            )
            boxes.append((lo, hi))
            centers.append([(a + b) / 2 for a, b in zip(lo, hi)])
        order = np.argsort(self.region_codes(np.asarray(centers), m), kind="stable")
        return [boxes[i] for i in order]

    def to_dict(self) -> Dict[str, Any]:
        return {"domain": self.domain.to_dict(), "J": self.J, "M": self.M}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PartitionTree":
        return cls(domain=Domain.from_dict(data["domain"]), J=int(data["J"]), M=int(data["M"]))


def build_partition_tree(domain: Domain, J: int, M: int) -> PartitionTree:
    """Build the recursive partition used by the block modulator."""
    return PartitionTree(domain=domain, J=J, M=M)


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class KnotHierarchy:
    """Knot sets Q_0, ..., Q_M with r_m = r0 * J**m knots at level m."""

    domain: Domain
    levels: Tuple[np.ndarray, ...]
    r0: int
    J: int
    layout: str = "lattice"
    allow_duplicates: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        levels = tuple(_readonly(as_points(q, self.domain.dim)) for q in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise GeometryError("A knot hierarchy needs at least one level")
        for m, q in enumerate(levels):
            if len(q) == 0:
                raise GeometryError(f"Knot level {m} is empty")
            self.domain.check_points(q)
        if not self.allow_duplicates:
            dup = self.duplicates()
            if dup:
                level, index, first = dup[0]
                raise GeometryError(
                    f"Knot {levels[level][index].tolist()} at level {level} repeats a knot of "
                    f"level {first}; all knot locations must be unique"
                )

    @property
    def M(self) -> int:
        return len(self.levels) - 1

    @property
    def sizes(self) -> List[int]:
        return [len(q) for q in self.levels]

    @property
    def total(self) -> int:
        """Stacked number of knots r."""
        return int(sum(self.sizes))

    def stacked(self) -> np.ndarray:
        return np.vstack(self.levels)

    def level_of_stacked(self) -> np.ndarray:
        return np.repeat(np.arange(self.M + 1), self.sizes)

    def offsets(self) -> np.ndarray:
        """Start index of each level in the stacked ordering (length M+2)."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    def first_level(self, points: Any) -> np.ndarray:
        """Coarsest level at which each point is a knot; M+1 when it is no knot."""
        pts = as_points(points, self.domain.dim)
        lookup: Dict[Tuple[float, ...], int] = {}
        for m in range(self.M, -1, -1):
            for q in self.levels[m]:
                lookup[tuple(q)] = m
        return np.array([lookup.get(tuple(p), self.M + 1) for p in pts], dtype=np.int64)

    def duplicates(self) -> List[Tuple[int, int, int]]:
        """(level, index, coarser level) for each knot repeating a coarser knot."""
        found = []
        for m in range(1, self.M + 1):
            first = self.first_level(self.levels[m])
            for i in np.flatnonzero(first < m):
                found.append((m, int(i), int(first[i])))
        return found

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain": self.domain.to_dict(),
            "r0": self.r0,
            "J": self.J,
            "layout": self.layout,
            "levels": [q.tolist() for q in self.levels],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KnotHierarchy":
        domain = Domain.from_dict(data["domain"])
        return cls(
            domain=domain,
            levels=tuple(np.asarray(q, dtype=float) for q in data["levels"]),
            r0=int(data["r0"]),
            J=int(data["J"]),
            layout=str(data.get("layout", "lattice")),
        )


def _near_square(count: int) -> Tuple[int, int]:
    """Factor count = a * b with a >= b and the pair as square as possible."""
    b = int(math.isqrt(count))
    while count % b:
        b -= 1
    return count // b, b


def _lattice_shape(domain: Domain, r0: int, J: int, m: int) -> Tuple[int, ...]:
    if domain.dim == 1:
        return (r0 * J**m,)
    if J in SUPPORTED_PARTITION_J:
        gx, gy = PartitionTree(domain, J, max(m, 0)).cells(m)
        a, b = _near_square(r0)
        # Put the larger sub-lattice factor on the axis with fewer regions.
        if gx > gy:
            a, b = b, a
        return (gx * a, gy * b)
    return _near_square(r0 * J**m)


def _lattice_level(domain: Domain, shape: Tuple[int, ...]) -> np.ndarray:
    lower, extent = domain.lower_array, domain.extent
    spacing = extent / np.asarray(shape)
    if np.any(spacing < MIN_SPACING * np.max(extent)):
        raise GeometryError(f"Knot spacing {spacing.min():.3e} is degenerate for this domain")
    axes = [lower[a] + extent[a] * ((np.arange(c) + 0.5) / c) for a, c in enumerate(shape)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in grids])


def _drop_repeats(level: np.ndarray, coarser: List[np.ndarray], tol: float) -> np.ndarray:
    if not coarser:
        return level
    previous = np.vstack(coarser)
    keep = np.ones(len(level), dtype=bool)
    for i, q in enumerate(level):
        if np.any(np.max(np.abs(previous - q), axis=1) <= tol):
            keep[i] = False
    return level[keep]


def _boundary_level(domain: Domain, c: int, J: int, m: int, finest: bool = False) -> np.ndarray:
    """c knots around each level-(m+1) boundary, or a uniform cell-centred fill at level M.

    The fill has the same count, c (J - 1) J**m, and for J = 2 with c = 1 it
    coincides with the boundary placement.
    """
    lower, extent = domain.lower[0], domain.extent[0]
    denom = J ** (m + 1)
    if extent / denom < MIN_SPACING * extent:
        raise GeometryError("Boundary knot spacing is degenerate for this domain")
    if finest:
        return _lattice_level(domain, (c * (J - 1) * J**m,))
    ks = np.array([k for k in range(1, denom) if k % J != 0])
    centers = lower + extent * (ks / denom)
    if c == 1:
        return centers.reshape(-1, 1)
    delta = extent / (2.0 * c * J ** (m + 2))
    offsets = (np.arange(c) - (c - 1) / 2.0) * delta
    return np.sort((centers[:, None] + offsets[None, :]).ravel()).reshape(-1, 1)


def build_regular_knots(
    domain: Domain, r0: int, J: int, M: int, layout: str = "lattice"
) -> KnotHierarchy:
    """Build a deterministic knot hierarchy.

    Args:
        domain: Box containing all knots
        r0: Knots per region at level 0 (lattice) or per boundary cluster times J-1 (boundary)
        J: Growth factor of the knot count per level
        M: Finest resolution index
        layout: "lattice" (cell-centred grids, unique across levels) or "boundary"
            (1-D only, knots on the region boundaries of the next level and a
            uniform fill at level M)

    Returns:
        KnotHierarchy with M+1 levels
    """
    if r0 < 1 or J < 2 or M < 0:
        raise GeometryError(f"Invalid knot parameters r0={r0}, J={J}, M={M}")
    if layout not in KNOT_LAYOUTS:
        raise GeometryError(f"Unknown knot layout '{layout}', expected one of {KNOT_LAYOUTS}")

    levels: List[np.ndarray] = []
    if layout == "boundary":
        if domain.dim != 1:
            raise GeometryError("The boundary knot layout is only defined for 1-D domains")
        if r0 % (J - 1):
            raise GeometryError(f"Boundary layout needs r0 to be a multiple of J-1={J - 1}")
        c = r0 // (J - 1)
        for m in range(M + 1):
            levels.append(_boundary_level(domain, c, J, m, finest=(m == M)))
    else:
        tol = MIN_SPACING * float(np.max(domain.extent))
        for m in range(M + 1):
            level = _lattice_level(domain, _lattice_shape(domain, r0, J, m))
            target = len(level)
            level = _drop_repeats(level, levels, tol)
            if len(level) != target:
                logging.warning(
                    "Dropped %d knots at level %d that repeat coarser knots",
                    target - len(level),
                    m,
                )
            if abs(len(level) - target) > J:
                raise GeometryError(
                    f"Level {m} lost {target - len(level)} knots to deduplication; "
                    "choose an even J or a different r0"
                )
            levels.append(level)

    knots = KnotHierarchy(domain=domain, levels=tuple(levels), r0=r0, J=J, layout=layout)
    logging.debug("Built %s knot hierarchy with sizes %s", layout, knots.sizes)
    return knots


def region_path(tree: PartitionTree, s: Any, m: int) -> Tuple[int, ...]:
    """Index path of the level-m region containing s (half-open convention)."""
    return tree.region_path(s, m)
