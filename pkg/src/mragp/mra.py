# File: src/mragp/mra.py

"""Multi-resolution approximation: prior recursion, posterior, likelihood and prediction.

The prior is built stage by stage. At stage k the level-k remainder
covariances W_{m,k} are final: Lambda_k = W_{k,k} is factored once, its
(full or selected) inverse S_k is formed, and every W_{m,l} with m, l > k is
updated on its precomputed support pattern. Data and prediction locations
run through the same per-stage update, so predictions replay the stored
stages instead of rebuilding them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .covariance import CovarianceModel, Modulator, cov_from_distance
from .errors import DataError, GeometryError, PatternError, SingularBasisError
from .geometry import KnotHierarchy, as_points
from .sparse import (
    SparseMatrix,
    SparsePattern,
    SPDFactor,
    block_diagonal,
    factorize,
    ordering,
    selected_inverse,
    solve,
)

INVERSE_MODES = ("full", "selected")

# Pairs per chunk in the sparse row-dot updates.
_ROWDOT_CHUNK = 200_000
# Identity columns per triangular solve when forming full inverses or variances.
_SOLVE_CHUNK = 256
# Maximum number of linear combinations relative to the number of basis functions.
COMBO_LIMIT_FACTOR = 10


@dataclass(frozen=True)
class PairPattern:
    """Pairs (i, j) with T_m(x_i, y_j) != 0, in row-major order, with their distances."""

    rows: np.ndarray
    cols: np.ndarray
    dist: np.ndarray
    shape: Tuple[int, int]

    @classmethod
    def from_pairs(
        cls, rows: np.ndarray, cols: np.ndarray, dist: np.ndarray, shape: Tuple[int, int]
    ) -> "PairPattern":
        order = np.lexsort((cols, rows))
        return cls(
            rows=np.asarray(rows, dtype=np.int64)[order],
            cols=np.asarray(cols, dtype=np.int64)[order],
            dist=np.asarray(dist, dtype=float)[order],
            shape=shape,
        )

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def csr(self, values: np.ndarray) -> sp.csr_matrix:
        """CSR matrix on this pattern; explicit zeros are kept."""
        indptr = np.zeros(self.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.shape[0]), out=indptr[1:])
        return sp.csr_matrix((np.asarray(values, dtype=float), self.cols, indptr), shape=self.shape)


def _matching_pairs(codes_a: np.ndarray, codes_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(codes_b, kind="stable")
    sorted_b = codes_b[order]
    start = np.searchsorted(sorted_b, codes_a, side="left")
    end = np.searchsorted(sorted_b, codes_a, side="right")
    counts = end - start
    rows = np.repeat(np.arange(codes_a.size, dtype=np.int64), counts)
    offsets = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = order[np.repeat(start, counts) + offsets]
    return rows, cols


def support_pairs(mod: Modulator, m: int, X: np.ndarray, Y: np.ndarray) -> PairPattern:
    """Support pattern {(i, j): T_m(x_i, y_j) != 0}."""
    shape = (len(X), len(Y))
    if len(X) == 0 or len(Y) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PairPattern(empty, empty, np.zeros(0), shape)
    if mod.is_block:
        assert mod.tree is not None
        rows, cols = _matching_pairs(mod.tree.region_codes(X, m), mod.tree.region_codes(Y, m))
        dist = np.linalg.norm(X[rows] - Y[cols], axis=1)
        return PairPattern.from_pairs(rows, cols, dist, shape)
    assert mod.taper is not None
    radius = mod.taper.range_at(m)
    neighbours = cKDTree(Y).query_ball_point(X, r=radius)
    counts = np.fromiter((len(n) for n in neighbours), dtype=np.int64, count=len(X))
    rows = np.repeat(np.arange(len(X), dtype=np.int64), counts)
    cols = (
        np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbours])
        if counts.sum()
        else np.zeros(0, dtype=np.int64)
    )
    dist = np.linalg.norm(X[rows] - Y[cols], axis=1)
    taper = np.asarray(mod.taper.evaluate(dist / radius))
    keep = (dist < radius) & (taper > 0)
    return PairPattern.from_pairs(rows[keep], cols[keep], dist[keep], shape)


def _modulation(mod: Modulator, level: int, pattern: PairPattern) -> Any:
    # Block supports are nested: every pattern entry shares its region at coarser levels.
    if mod.is_block:
        return 1.0
    assert mod.taper is not None
    return np.asarray(mod.taper.evaluate(pattern.dist / mod.taper.range_at(level)), dtype=float)


def _rowdot(
    left: sp.csr_matrix, right: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray
) -> np.ndarray:
    """(left @ right.T)[rows, cols] without forming the full product."""
    out = np.empty(rows.size)
    for start in range(0, rows.size, _ROWDOT_CHUNK):
        stop = min(start + _ROWDOT_CHUNK, rows.size)
        prod = left[rows[start:stop]].multiply(right[cols[start:stop]])
        out[start:stop] = np.asarray(prod.sum(axis=1)).ravel()
    return out


@dataclass
class _LocationState:
    """Running W^k(X, Q_l) for a location set X over levels 0..max_level."""

    points: np.ndarray
    first_level: np.ndarray
    patterns: List[PairPattern]
    values: List[np.ndarray]
    final: Dict[int, sp.csr_matrix] = field(default_factory=dict)

    @property
    def max_level(self) -> int:
        return len(self.patterns) - 1


@dataclass
class RecursionWorkspace:
    """Stage outputs kept after the prior is built.

    knot_blocks[(m, l)] is the final W^l_{m,l} (r_m x r_l, m >= l; m == l is
    Lambda_l), inverses[k] is S_k and factors[k] the Cholesky factor of Lambda_k.
    """

    model: CovarianceModel
    knots: KnotHierarchy
    mod: Modulator
    inverse_mode: str
    knot_first: List[np.ndarray]
    knot_patterns: Dict[Tuple[int, int], PairPattern] = field(default_factory=dict)
    knot_blocks: Dict[Tuple[int, int], sp.csr_matrix] = field(default_factory=dict)
    inverses: List[sp.csr_matrix] = field(default_factory=list)
    factors: List[SPDFactor] = field(default_factory=list)
    stage: int = -1

    def new_state(self, X: np.ndarray, max_level: Optional[int] = None) -> _LocationState:
        top = self.knots.M if max_level is None else max_level
        patterns = [support_pairs(self.mod, m, X, self.knots.levels[m]) for m in range(top + 1)]
        values = [
            cov_from_distance(self.model, pat.dist) * _modulation(self.mod, 0, pat)
            for pat in patterns
        ]
        return _LocationState(
            points=X,
            first_level=self.knots.first_level(X),
            patterns=patterns,
            values=values,
        )

    def finalize(self, state: _LocationState, k: int) -> sp.csr_matrix:
        """Freeze level k of a state, zeroing rows and columns that coincide with coarser knots."""
        pat = state.patterns[k]
        vals = np.array(state.values[k], dtype=float)
        mask = (state.first_level[pat.rows] < k) | (self.knot_first[k][pat.cols] < k)
        vals[mask] = 0.0
        block = pat.csr(vals)
        state.final[k] = block
        return block

    def advance(self, state: _LocationState, k: int) -> None:
        """Apply the stage-k update to levels k+1..max_level of a state."""
        if k >= state.max_level:
            return
        projected = (state.final[k] @ self.inverses[k]).tocsr()
        for level in range(k + 1, state.max_level + 1):
            pat = state.patterns[level]
            update = _rowdot(projected, self.knot_blocks[(level, k)], pat.rows, pat.cols)
            state.values[level] = (state.values[level] - update) * _modulation(
                self.mod, k + 1, pat
            )

    def replay(self, X: np.ndarray) -> List[sp.csr_matrix]:
        """Basis blocks b_m(X) for new locations using the stored stages."""
        state = self.new_state(X)
        for k in range(self.knots.M + 1):
            self.finalize(state, k)
            self.advance(state, k)
        return [state.final[m] for m in range(self.knots.M + 1)]


@dataclass
class PriorFactors:
    """Basis blocks B_m = b_m(S) and prior precision blocks Lambda_m."""

    model: CovarianceModel
    knots: KnotHierarchy
    mod: Modulator
    locations: np.ndarray
    B_blocks: List[sp.csr_matrix]
    Lambda_blocks: List[SparseMatrix]
    workspace: RecursionWorkspace
    inverse_mode: str = "full"

    @property
    def n(self) -> int:
        return int(self.locations.shape[0])

    @property
    def r(self) -> int:
        return self.knots.total

    @property
    def M(self) -> int:
        return self.knots.M

    @cached_property
    def B(self) -> sp.csc_matrix:
        """Stacked n x r basis matrix with its structural pattern."""
        return _hstack(self.B_blocks, (self.n, self.r))

    @cached_property
    def Lambda(self) -> SparseMatrix:
        return block_diagonal(self.Lambda_blocks)

    @property
    def logdet_lambda(self) -> float:
        return float(sum(f.logdet for f in self.workspace.factors))

    def block_keys(self) -> List[Tuple[int, int]]:
        """(level, region code) per stacked knot, for the block-hierarchical ordering."""
        keys: List[Tuple[int, int]] = []
        tree = self.mod.tree
        for m, q in enumerate(self.knots.levels):
            codes = tree.region_codes(q, m) if tree is not None else np.zeros(len(q), dtype=int)
            keys.extend((m, int(c)) for c in codes)
        return keys

    def summary(self) -> Dict[str, Any]:
        """Model state and factor metadata for run records."""
        return {
            "model": self.model.to_dict(),
            "modulator": self.mod.to_dict(),
            "knots": {
                "r0": self.knots.r0,
                "J": self.knots.J,
                "M": self.M,
                "sizes": self.knots.sizes,
            },
            "inverse_mode": self.inverse_mode,
            "n": self.n,
            "nnz_B": int(sum(b.nnz for b in self.B_blocks)),
            "nnz_Lambda": int(sum(lam.nnz for lam in self.Lambda_blocks)),
            "jitter": [f.jitter for f in self.workspace.factors],
        }


def _hstack(blocks: Sequence[sp.spmatrix], shape: Tuple[int, int]) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    offset = 0
    for block in blocks:
        coo = block.tocoo()
        rows.append(coo.row)
        cols.append(coo.col + offset)
        vals.append(coo.data)
        offset += block.shape[1]
    matrix = SparseMatrix.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), shape
    )
    return matrix.to_scipy()


def _selected_pattern(knots: KnotHierarchy, mod: Modulator, k: int) -> SparsePattern:
    """G_k: level-k knot pairs closer than (2 + 2/J) d_k, plus the diagonal."""
    assert mod.taper is not None
    q = knots.levels[k]
    radius = (2.0 + 2.0 / mod.taper.J) * mod.taper.range_at(k)
    pairs = cKDTree(q).query_pairs(r=radius, output_type="ndarray")
    if pairs.size:
        close = np.linalg.norm(q[pairs[:, 0]] - q[pairs[:, 1]], axis=1) < radius
        pairs = pairs[close]
    diag = np.arange(len(q))
    rows = np.concatenate([diag, pairs[:, 0], pairs[:, 1]]) if pairs.size else diag
    cols = np.concatenate([diag, pairs[:, 1], pairs[:, 0]]) if pairs.size else diag
    return SparsePattern.from_coords(rows, cols, (len(q), len(q)))


def _full_inverse(lam: SparseMatrix, factor: SPDFactor) -> sp.csr_matrix:
    """Lambda^{-1}, nonzero only within connected components of the pattern."""
    n = lam.shape[0]
    _, labels = connected_components(lam.pattern.to_scipy(), directed=False)
    rows, cols, vals = [], [], []
    for start in range(0, n, _SOLVE_CHUNK):
        block_cols = np.arange(start, min(n, start + _SOLVE_CHUNK))
        rhs = np.zeros((n, block_cols.size))
        rhs[block_cols, np.arange(block_cols.size)] = 1.0
        x = solve(factor, rhs)
        r, c = np.nonzero(labels[:, None] == labels[block_cols][None, :])
        rows.append(r)
        cols.append(block_cols[c])
        vals.append(x[r, c])
    inverse = SparseMatrix.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n), symmetric=True
    )
    return inverse.to_scipy().tocsr()


def _precision_ordering(mod: Modulator, pattern: SparsePattern, dim: int) -> np.ndarray:
    # Block precisions are disjoint region cliques and 1-D tapers are banded.
    hint = "natural" if mod.is_block or dim == 1 else "amd"
    return ordering(pattern, hint)


def _finalize_precision(ws: RecursionWorkspace, state: _LocationState, k: int) -> SparseMatrix:
    block = ws.finalize(state, k)
    pat = state.patterns[k]
    vals = np.asarray(block.data, dtype=float).copy()
    duplicated = ws.knot_first[k] < k
    if np.any(duplicated):
        # Weights of repeated knots have an identically zero basis; give them unit precision.
        diag = (pat.rows == pat.cols) & duplicated[pat.rows]
        vals[diag] = 1.0
        logging.warning(
            "Level %d has %d knots repeating coarser knots; their weights are decoupled",
            k,
            int(duplicated.sum()),
        )
    return SparseMatrix.from_triplets(pat.rows, pat.cols, vals, pat.shape, symmetric=True)


def build_prior(
    model: CovarianceModel,
    knots: KnotHierarchy,
    mod: Modulator,
    S: Any,
    inverse_mode: str = "full",
    max_workers: int = 1,
) -> PriorFactors:
    """Run the stage recursion and return the basis and prior precision blocks.

    Args:
        model: Covariance function C_0
        knots: Knot hierarchy Q_0..Q_M
        mod: Block or taper modulator
        S: Observation locations (n, d)
        inverse_mode: "full" inverts each Lambda_k within connected components;
            "selected" (taper only) computes Lambda_k^{-1} on the pattern G_k
        max_workers: Threads used for the independent updates of one stage

    Returns:
        PriorFactors with a workspace for later prediction
    """
    if inverse_mode not in INVERSE_MODES:
        raise PatternError(
            f"Unknown inverse mode '{inverse_mode}', expected one of {INVERSE_MODES}"
        )
    if inverse_mode == "selected" and mod.is_block:
        raise PatternError("Selected inversion is only defined for the taper modulator")
    dim = knots.domain.dim
    points = knots.domain.check_points(S)
    if len(points) == 0:
        raise DataError("build_prior needs at least one location")

    ws = RecursionWorkspace(
        model=model,
        knots=knots,
        mod=mod,
        inverse_mode=inverse_mode,
        knot_first=[knots.first_level(q) for q in knots.levels],
    )
    knot_states = [ws.new_state(q, max_level=m) for m, q in enumerate(knots.levels)]
    for m, state in enumerate(knot_states):
        for l, pat in enumerate(state.patterns):
            ws.knot_patterns[(m, l)] = pat
    data_state = ws.new_state(points)
    executor = ThreadPoolExecutor(max_workers=max_workers) if max_workers > 1 else None

    lambdas: List[SparseMatrix] = []
    try:
        for k in range(knots.M + 1):
            for m in range(k + 1, knots.M + 1):
                ws.knot_blocks[(m, k)] = ws.finalize(knot_states[m], k)
            lam = _finalize_precision(ws, knot_states[k], k)
            ws.knot_blocks[(k, k)] = lam.to_scipy().tocsr()
            lambdas.append(lam)

            if inverse_mode == "selected":
                g_pattern = _selected_pattern(knots, mod, k)
                extended = lam.with_pattern(lam.pattern.union(g_pattern))
                factor = factorize(extended, _precision_ordering(mod, extended.pattern, dim))
                inverse = selected_inverse(factor, g_pattern).to_scipy().tocsr()
            else:
                factor = factorize(lam, _precision_ordering(mod, lam.pattern, dim))
                inverse = _full_inverse(lam, factor)
            ws.factors.append(factor)
            ws.inverses.append(inverse)
            logging.debug(
                "Stage %d: r_k=%d nnz(Lambda_k)=%d nnz(L)=%d nnz(S_k)=%d",
                k,
                lam.shape[0],
                lam.nnz,
                factor.nnz,
                inverse.nnz,
            )

            ws.finalize(data_state, k)
            pending = knot_states[k + 1 :] + [data_state]
            if executor is not None:
                list(executor.map(lambda st, stage=k: ws.advance(st, stage), pending))
            else:
                for st in pending:
                    ws.advance(st, k)
            ws.stage = k
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    B_blocks = [data_state.final[m] for m in range(knots.M + 1)]
    logging.debug(
        "Built prior: n=%d r=%d nnz(B)=%d",
        len(points),
        knots.total,
        sum(b.nnz for b in B_blocks),
    )
    return PriorFactors(
        model=model,
        knots=knots,
        mod=mod,
        locations=points,
        B_blocks=B_blocks,
        Lambda_blocks=lambdas,
        workspace=ws,
        inverse_mode=inverse_mode,
    )


def basis_at(prior: PriorFactors, X: Any) -> sp.csc_matrix:
    """Stacked basis matrix b(X)' (n_X x r) via the prediction recursion."""
    points = prior.knots.domain.check_points(X)
    return _hstack(prior.workspace.replay(points), (len(points), prior.r))


@dataclass(frozen=True)
class Observations:
    """Locations S, data z and measurement-error variances (diagonal of V_eps)."""

    locations: np.ndarray
    values: np.ndarray
    noise: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        locations = np.asarray(self.locations, dtype=float)
        if locations.ndim == 1:
            locations = locations.reshape(-1, 1)
        noise = np.broadcast_to(np.asarray(self.noise, dtype=float), values.shape).copy()
        if values.size == 0:
            raise DataError("Observations need at least one value")
        if locations.shape[0] != values.size:
            raise DataError(
                f"{locations.shape[0]} locations do not match {values.size} observed values"
            )
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(locations))):
            raise DataError("Observations must be finite")
        if np.any(noise < 0) or not np.all(np.isfinite(noise)):
            raise DataError("Noise variances must be finite and non-negative")
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise", noise)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def noiseless(self) -> bool:
        return bool(np.all(self.noise == 0))


@dataclass
class PosteriorState:
    """Factor of Lambda_tilde = Lambda + B' V^{-1} B, posterior mean weights and cached terms."""

    nu_tilde: np.ndarray
    z_tilde: np.ndarray
    logdet_prior: float
    logdet_posterior: float
    logdet_noise: float
    data_quadratic: float
    factor: Optional[SPDFactor] = None
    Lambda_tilde: Optional[SparseMatrix] = None
    noiseless: bool = False


def _check_alignment(prior: PriorFactors, locations: np.ndarray) -> None:
    if locations.shape != prior.locations.shape or not np.array_equal(
        locations, prior.locations
    ):
        raise DataError("Observation locations differ from the locations the prior was built on")


def posterior_pattern(prior: PriorFactors) -> SparsePattern:
    """pattern(Lambda) union pattern(B)' pattern(B), free of numerical cancellation."""
    B = prior.B
    ones = sp.csc_matrix((np.ones(B.nnz), B.indices, B.indptr), shape=B.shape)
    gram = (ones.T @ ones).tocsc()
    return prior.Lambda.pattern.union(SparsePattern.from_scipy(gram))


def assemble_posterior(prior: PriorFactors, obs: Observations) -> PosteriorState:
    """Assemble and factor Lambda_tilde, then solve for the posterior mean weights."""
    _check_alignment(prior, obs.locations)
    if np.any(obs.noise <= 0):
        raise DataError(
            "Every noise variance must be positive; use the noiseless path when tau2 = 0"
        )
    B = prior.B
    weights = sp.diags(1.0 / obs.noise)
    lam = prior.Lambda
    pattern = posterior_pattern(prior)
    values = (lam.to_scipy() + (B.T @ weights @ B)).tocsr()
    gathered = SparseMatrix.on_pattern(pattern, values)
    rows, cols = pattern.coords()
    lam_tilde = SparseMatrix.from_triplets(
        rows, cols, gathered.values, pattern.shape, symmetric=True
    )

    if prior.mod.is_block:
        perm = ordering(pattern, "block", block_keys=prior.block_keys())
    else:
        perm = ordering(pattern, "amd")
    factor = factorize(lam_tilde, perm)
    z_tilde = np.asarray(B.T @ (obs.values / obs.noise)).ravel()
    nu_tilde = solve(factor, z_tilde)
    logging.debug(
        "Posterior: r=%d nnz(Lambda_tilde)=%d nnz(L)=%d", prior.r, lam_tilde.nnz, factor.nnz
    )
    return PosteriorState(
        nu_tilde=nu_tilde,
        z_tilde=z_tilde,
        logdet_prior=prior.logdet_lambda,
        logdet_posterior=factor.logdet,
        logdet_noise=float(np.sum(np.log(obs.noise))),
        data_quadratic=float(np.sum(obs.values**2 / obs.noise)),
        factor=factor,
        Lambda_tilde=lam_tilde,
    )


def loglikelihood(prior: PriorFactors, post: PosteriorState, obs: Observations) -> float:
    """log L(theta) of the data under N(0, B Lambda^{-1} B' + V_eps)."""
    if post.noiseless:
        return loglikelihood_noiseless(prior, obs.values)
    n = obs.n
    neg2 = (
        n * math.log(2.0 * math.pi)
        - post.logdet_prior
        + post.logdet_posterior
        + post.logdet_noise
        + post.data_quadratic
        - float(post.z_tilde @ post.nu_tilde)
    )
    return -0.5 * neg2


def _knot_order(prior: PriorFactors) -> np.ndarray:
    """Row index in S of every stacked knot; raises unless S and Q coincide."""
    if prior.n != prior.r:
        raise DataError(
            f"The noiseless path needs the locations to equal the knots (n={prior.n}, r={prior.r})"
        )
    lookup = {tuple(p): i for i, p in enumerate(prior.locations)}
    order = [lookup.get(tuple(q)) for q in prior.knots.stacked()]
    if any(i is None for i in order) or len(set(order)) != prior.n:
        raise DataError("The noiseless path needs the locations to equal the knots")
    return np.asarray(order, dtype=np.int64)


def _noiseless_solve(prior: PriorFactors, y: np.ndarray) -> Tuple[np.ndarray, float]:
    order = _knot_order(prior)
    square = prior.B.tocsr()[order].tocsc()
    try:
        lu = splu(square)
    except RuntimeError as exc:
        raise SingularBasisError(f"The square basis matrix is singular: {exc}") from exc
    diag_u = np.abs(lu.U.diagonal())
    if np.any(diag_u == 0) or not np.all(np.isfinite(diag_u)):
        raise SingularBasisError("The square basis matrix is singular")
    y_tilde = lu.solve(np.asarray(y, dtype=float)[order])
    return y_tilde, float(np.sum(np.log(diag_u)))


def loglikelihood_noiseless(prior: PriorFactors, y: Any) -> float:
    """log-likelihood of N(0, B Lambda^{-1} B') when S equals the knots."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != prior.n:
        raise DataError(f"Expected {prior.n} values, got {y.size}")
    y_tilde, logabsdet = _noiseless_solve(prior, y)
    logdet_sigma = 2.0 * logabsdet - prior.logdet_lambda
    quad = float(y_tilde @ (prior.Lambda.to_scipy() @ y_tilde))
    return -0.5 * (y.size * math.log(2.0 * math.pi) + logdet_sigma + quad)


def assemble_noiseless_posterior(prior: PriorFactors, y: Any) -> PosteriorState:
    """Degenerate posterior eta = B^{-1} y for noise-free data observed at the knots."""
    y = np.asarray(y, dtype=float).ravel()
    y_tilde, logabsdet = _noiseless_solve(prior, y)
    return PosteriorState(
        nu_tilde=y_tilde,
        z_tilde=np.zeros(0),
        logdet_prior=prior.logdet_lambda,
        logdet_posterior=2.0 * logabsdet,
        logdet_noise=0.0,
        data_quadratic=0.0,
        noiseless=True,
    )


@dataclass(frozen=True)
class PredictionResult:
    """Posterior predictive means and standard deviations at S^P."""

    locations: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    combo_cov: Optional[np.ndarray] = None


def predict(
    prior: PriorFactors,
    post: PosteriorState,
    SP: Any,
    combos: Optional[Any] = None,
) -> PredictionResult:
    """Kriging mean B^P nu_tilde and pointwise sd from triangular solves of B^P rows.

    Args:
        prior: Prior the posterior was built from
        post: Posterior state
        SP: Prediction locations (n_P, d)
        combos: Optional (q, n_P) matrix of linear combinations whose joint
            posterior covariance is returned; q is limited to 10 * r

    Returns:
        PredictionResult
    """
    try:
        points = prior.knots.domain.check_points(SP)
    except GeometryError as exc:
        raise GeometryError(f"Prediction location outside the domain: {exc}") from exc
    BP = basis_at(prior, points).tocsr()
    mean = np.asarray(BP @ post.nu_tilde).ravel()

    combo_matrix = None
    if combos is not None:
        combo_matrix = sp.csr_matrix(combos if sp.issparse(combos) else np.atleast_2d(combos))
        if combo_matrix.shape[1] != len(points):
            raise DataError(
                f"Combination matrix has {combo_matrix.shape[1]} columns, expected {len(points)}"
            )
        if combo_matrix.shape[0] > COMBO_LIMIT_FACTOR * prior.r:
            raise DataError(
                f"At most {COMBO_LIMIT_FACTOR * prior.r} linear combinations are supported"
            )

    if post.noiseless or post.factor is None:
        sd = np.zeros(len(points))
        combo_cov = None
        if combo_matrix is not None:
            combo_cov = np.zeros((combo_matrix.shape[0], combo_matrix.shape[0]))
        return PredictionResult(points, mean, sd, combo_cov)

    variances = np.empty(len(points))
    for start in range(0, len(points), _SOLVE_CHUNK):
        stop = min(start + _SOLVE_CHUNK, len(points))
        rhs = BP[start:stop].T.toarray()
        y = post.factor.forward(rhs)
        variances[start:stop] = np.sum(y**2, axis=0)
    sd = np.sqrt(np.maximum(variances, 0.0))

    combo_cov = None
    if combo_matrix is not None:
        y = post.factor.forward((combo_matrix @ BP).T.toarray())
        combo_cov = y.T @ y
    return PredictionResult(points, mean, sd, combo_cov)


def mra_cov_matrix(prior: PriorFactors, X: Any, Y: Any) -> np.ndarray:
    """C_M(X, Y) = sum_m b_m(X)' Lambda_m^{-1} b_m(Y) as a dense matrix."""
    ws = prior.workspace
    domain = prior.knots.domain
    bx = ws.replay(domain.check_points(X))
    by = ws.replay(domain.check_points(Y))
    out = np.zeros((bx[0].shape[0], by[0].shape[0]))
    for m, factor in enumerate(ws.factors):
        right = by[m].T.toarray()
        out += np.asarray(bx[m] @ solve(factor, right))
    return out


def mra_cov(
    prior: PriorFactors, s1: Any, s2: Any, workspace: Optional[RecursionWorkspace] = None
) -> float:
    """C_M(s1, s2) for two single points."""
    if workspace is not None and workspace is not prior.workspace:
        raise DataError("Workspace does not belong to this prior")
    dim = prior.knots.domain.dim
    return float(mra_cov_matrix(prior, as_points(s1, dim), as_points(s2, dim))[0, 0])
