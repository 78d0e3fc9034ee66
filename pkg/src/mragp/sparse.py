# File: src/mragp/sparse.py

"""Sparse symmetric kernels: patterns, orderings, Cholesky, solves and selected inversion.

Matrices are column-compressed. Patterns are structural: an entry that is
present in a pattern stays present even when its value is exactly zero, so
fill and selected-inverse coverage can be reasoned about independently of
numerical cancellation.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.linalg import spsolve_triangular

from .errors import NotPositiveDefiniteError, PatternError

ORDERING_HINTS = ("natural", "amd", "block")
_HINT_ALIASES = {"amd-like": "amd", "block-hierarchical": "block"}

# Relative size of the diagonal jitter used on the single retry.
JITTER_RELATIVE = 1e-10


def _canonical_triplets(
    rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sum duplicates and return (indptr, indices, data) in sorted CSC order, zeros kept."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    n_rows, n_cols = shape
    out_of_bounds = rows.size and (
        rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols
    )
    if out_of_bounds:
        raise PatternError(f"Index out of bounds for shape {shape}")
    keys = cols * n_rows + rows
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    data = np.bincount(inverse, weights=vals, minlength=unique_keys.size)
    out_cols = unique_keys // n_rows
    indices = unique_keys % n_rows
    indptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(out_cols, minlength=n_cols), out=indptr[1:])
    return indptr, indices, data


@dataclass(frozen=True)
class SparsePattern:
    """Structural nonzero positions in compressed-column form."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        indptr = np.array(self.indptr, dtype=np.int64)
        indices = np.array(self.indices, dtype=np.int64)
        if indptr.shape != (self.n_cols + 1,) or indptr[-1] != indices.size:
            raise PatternError("Malformed column pointer array")
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_rows):
            raise PatternError("Row index out of bounds")
        same_column = np.diff(np.repeat(np.arange(self.n_cols), np.diff(indptr))) == 0
        if np.any(same_column & (np.diff(indices) <= 0)):
            raise PatternError("Row indices must be strictly increasing within each column")
        indptr.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)

    @classmethod
    def from_coords(cls, rows: Any, cols: Any, shape: Tuple[int, int]) -> "SparsePattern":
        rows = np.asarray(rows, dtype=np.int64)
        indptr, indices, _ = _canonical_triplets(rows, cols, np.zeros(rows.size), shape)
        return cls(shape[0], shape[1], indptr, indices)

    @classmethod
    def from_scipy(cls, mat: Any) -> "SparsePattern":
        coo = sp.coo_matrix(mat)
        return cls.from_coords(coo.row, coo.col, coo.shape)

    @classmethod
    def diagonal(cls, n: int) -> "SparsePattern":
        return cls(n, n, np.arange(n + 1), np.arange(n))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def column(self, j: int) -> np.ndarray:
        return self.indices[self.indptr[j] : self.indptr[j + 1]]

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        cols = np.repeat(np.arange(self.n_cols, dtype=np.int64), np.diff(self.indptr))
        return self.indices.copy(), cols

    def keys(self) -> np.ndarray:
        """Sorted linear keys col * n_rows + row."""
        rows, cols = self.coords()
        return cols * self.n_rows + rows

    def to_scipy(self) -> sp.csc_matrix:
        return sp.csc_matrix(
            (np.ones(self.nnz), self.indices.copy(), self.indptr.copy()), shape=self.shape
        )

    def transpose(self) -> "SparsePattern":
        rows, cols = self.coords()
        return SparsePattern.from_coords(cols, rows, (self.n_cols, self.n_rows))

    def union(self, other: "SparsePattern") -> "SparsePattern":
        if self.shape != other.shape:
            raise PatternError(f"Pattern shapes differ: {self.shape} vs {other.shape}")
        r1, c1 = self.coords()
        r2, c2 = other.coords()
        return SparsePattern.from_coords(
            np.concatenate([r1, r2]), np.concatenate([c1, c2]), self.shape
        )

    def lower(self) -> "SparsePattern":
        rows, cols = self.coords()
        keep = rows >= cols
        return SparsePattern.from_coords(rows[keep], cols[keep], self.shape)

    def permuted(self, perm: np.ndarray) -> "SparsePattern":
        """Pattern of A[perm][:, perm]."""
        inv = inverse_permutation(perm)
        rows, cols = self.coords()
        return SparsePattern.from_coords(inv[rows], inv[cols], self.shape)

    def contains(self, other: "SparsePattern") -> bool:
        return bool(np.all(np.isin(other.keys(), self.keys(), assume_unique=True)))

    def is_symmetric(self) -> bool:
        return self.n_rows == self.n_cols and np.array_equal(self.keys(), self.transpose().keys())

    def bandwidth(self) -> int:
        rows, cols = self.coords()
        return int(np.max(np.abs(rows - cols))) if rows.size else 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsePattern):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.keys(), other.keys())

    def __hash__(self) -> int:
        return hash((self.shape, self.keys().tobytes()))


@dataclass(frozen=True)
class SparseMatrix:
    """Values aligned with a SparsePattern (explicit zeros are allowed)."""

    pattern: SparsePattern
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.pattern.nnz,):
            raise PatternError("Values are not aligned with the pattern")
        if not np.all(np.isfinite(values)):
            raise PatternError("Sparse matrix values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_triplets(
        cls,
        rows: Any,
        cols: Any,
        vals: Any,
        shape: Tuple[int, int],
        symmetric: bool = False,
    ) -> "SparseMatrix":
        """Build from coordinates; duplicates are summed.

        With symmetric=True the result is (A + A') / 2 on the union of both patterns.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if symmetric:
            rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
            vals = np.concatenate([vals, vals]) / 2.0
        indptr, indices, data = _canonical_triplets(rows, cols, vals, shape)
        return cls(SparsePattern(shape[0], shape[1], indptr, indices), data)

    @classmethod
    def from_scipy(cls, mat: Any, symmetric: bool = False) -> "SparseMatrix":
        coo = sp.coo_matrix(mat)
        return cls.from_triplets(coo.row, coo.col, coo.data, coo.shape, symmetric=symmetric)

    @classmethod
    def from_dense(cls, arr: Any, symmetric: bool = False) -> "SparseMatrix":
        dense = np.asarray(arr, dtype=float)
        rows, cols = np.nonzero(dense)
        return cls.from_triplets(rows, cols, dense[rows, cols], dense.shape, symmetric=symmetric)

    @classmethod
    def on_pattern(cls, pattern: SparsePattern, mat: Any) -> "SparseMatrix":
        """Values of a scipy or dense matrix gathered at the positions of pattern."""
        rows, cols = pattern.coords()
        if sp.issparse(mat):
            vals = np.asarray(sp.csr_matrix(mat)[rows, cols]).ravel()
        else:
            vals = np.asarray(mat, dtype=float)[rows, cols]
        return cls(pattern, vals)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pattern.shape

    @property
    def nnz(self) -> int:
        return self.pattern.nnz

    def to_scipy(self) -> sp.csc_matrix:
        """CSC copy that keeps explicit zeros."""
        return sp.csc_matrix(
            (self.values.copy(), self.pattern.indices.copy(), self.pattern.indptr.copy()),
            shape=self.shape,
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def lookup(self, rows: Any, cols: Any) -> Tuple[np.ndarray, np.ndarray]:
        """Values at (rows, cols) plus a mask of which positions are in the pattern."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        keys = self.pattern.keys()
        query = cols * self.pattern.n_rows + rows
        if keys.size == 0:
            return np.zeros(query.shape), np.zeros(query.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, query), keys.size - 1)
        found = keys[pos] == query
        return np.where(found, self.values[pos], 0.0), found

    def with_pattern(self, pattern: SparsePattern) -> "SparseMatrix":
        """Re-express on a superset pattern, new positions holding explicit zeros."""
        if not pattern.contains(self.pattern):
            raise PatternError("Target pattern does not contain the matrix pattern")
        rows, cols = pattern.coords()
        vals, _ = self.lookup(rows, cols)
        return SparseMatrix(pattern, vals)

    def add_diagonal(self, shift: Union[float, np.ndarray]) -> "SparseMatrix":
        n = self.shape[0]
        shifts = np.broadcast_to(np.asarray(shift, dtype=float), (n,))
        rows, cols = self.pattern.coords()
        diag_rows, diag_cols = np.arange(n), np.arange(n)
        return SparseMatrix.from_triplets(
            np.concatenate([rows, diag_rows]),
            np.concatenate([cols, diag_cols]),
            np.concatenate([self.values, shifts]),
            self.shape,
        )


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=perm.dtype)
    return inv


def _adjacency(pattern: SparsePattern) -> List[Set[int]]:
    rows, cols = pattern.coords()
    adj: List[Set[int]] = [set() for _ in range(pattern.n_cols)]
    for i, j in zip(rows.tolist(), cols.tolist()):
        if i != j:
            adj[i].add(j)
            adj[j].add(i)
    return adj


def _minimum_degree(pattern: SparsePattern) -> np.ndarray:
    """Greedy minimum-degree elimination order on the explicit elimination graph."""
    adj = _adjacency(pattern)
    n = len(adj)
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    eliminated = np.zeros(n, dtype=bool)
    order: List[int] = []
    while heap:
        degree, v = heapq.heappop(heap)
        if eliminated[v] or degree != len(adj[v]):
            continue
        eliminated[v] = True
        order.append(v)
        neighbours = adj[v]
        for u in neighbours:
            adj[u].discard(v)
            adj[u].update(w for w in neighbours if w != u)
        for u in neighbours:
            heapq.heappush(heap, (len(adj[u]), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


def ordering(
    pattern: SparsePattern,
    hint: str = "amd",
    block_keys: Optional[Sequence[Tuple[int, int]]] = None,
) -> np.ndarray:
    """Fill-reducing permutation p; the factored matrix is A[p][:, p].

    Args:
        pattern: Square symmetric pattern
        hint: "natural", "amd" (minimum degree) or "block" (finest level first,
            regions contiguous)
        block_keys: Per-index (level, region code) pairs, required for "block"

    Returns:
        Permutation array mapping new position to original index
    """
    if pattern.n_rows != pattern.n_cols:
        raise PatternError("Ordering requires a square pattern")
    n = pattern.n_cols
    hint = _HINT_ALIASES.get(hint, hint)
    if hint == "natural":
        return np.arange(n, dtype=np.int64)
    if hint == "amd":
        return _minimum_degree(pattern)
    if hint == "block":
        if block_keys is None or len(block_keys) != n:
            raise PatternError(
                "Block-hierarchical ordering needs one (level, region) key per index"
            )
        keys = np.asarray(block_keys, dtype=np.int64)
        return np.lexsort((np.arange(n), keys[:, 1], -keys[:, 0])).astype(np.int64)
    raise PatternError(f"Unknown ordering hint '{hint}', expected one of {ORDERING_HINTS}")


def symbolic_cholesky(lower: SparsePattern) -> Tuple[np.ndarray, np.ndarray]:
    """Column structure of the Cholesky factor of a (permuted) symmetric pattern.

    Uses the elimination-tree union rule: the structure of column j is the
    lower part of A[:, j] merged with the structures of its tree children.

    Returns:
        (indptr, indices) of L with the diagonal first in every column
    """
    n = lower.n_cols
    children: List[List[int]] = [[] for _ in range(n)]
    below: List[np.ndarray] = []
    for j in range(n):
        col = lower.column(j)
        parts = [col[col > j]]
        for c in children[j]:
            parts.append(below[c][below[c] != j])
        rows = np.unique(np.concatenate(parts)) if len(parts) > 1 else parts[0]
        below.append(rows)
        if rows.size:
            children[int(rows[0])].append(j)
    counts = np.array([1 + b.size for b in below], dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.empty(indptr[-1], dtype=np.int64)
    for j in range(n):
        indices[indptr[j]] = j
        indices[indptr[j] + 1 : indptr[j + 1]] = below[j]
    return indptr, indices


class _PivotFailure(Exception):
    def __init__(self, column: int, pivot: float):
        super().__init__(column, pivot)
        self.column = column
        self.pivot = pivot


def _numeric_cholesky(
    lower: sp.csc_matrix, Lp: np.ndarray, Li: np.ndarray, shift: float
) -> np.ndarray:
    """Left-looking simplicial Cholesky on a fixed symbolic structure."""
    n = lower.shape[0]
    Lx = np.empty(Li.size)
    work = np.zeros(n)
    # Row structure: for each j, the columns k < j with L[j, k] structurally nonzero.
    row_lists: List[List[int]] = [[] for _ in range(n)]
    for k in range(n):
        for i in Li[Lp[k] + 1 : Lp[k + 1]].tolist():
            row_lists[i].append(k)
    next_pos = Lp[:-1].copy()
    Ap, Ai, Ax = lower.indptr, lower.indices, lower.data
    for j in range(n):
        start, end = Lp[j], Lp[j + 1]
        rows_j = Li[start:end]
        work[Ai[Ap[j] : Ap[j + 1]]] = Ax[Ap[j] : Ap[j + 1]]
        work[j] += shift
        for k in row_lists[j]:
            p = next_pos[k]
            stop = Lp[k + 1]
            work[Li[p:stop]] -= Lx[p:stop] * Lx[p]
            next_pos[k] = p + 1
        pivot = work[j]
        if not (pivot > 0.0 and math.isfinite(pivot)):
            raise _PivotFailure(j, float(pivot))
        ljj = math.sqrt(pivot)
        Lx[start] = ljj
        Lx[start + 1 : end] = work[rows_j[1:]] / ljj
        work[rows_j] = 0.0
        next_pos[j] = start + 1
    return Lx


@dataclass
class SPDFactor:
    """P A P' = L L' with A the original matrix and p the permutation."""

    perm: np.ndarray
    L: sp.csc_matrix
    logdet: float
    jitter: float = 0.0
    _L_csr: sp.csr_matrix = field(init=False, repr=False)
    _LT_csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._L_csr = sp.csr_matrix(self.L)
        self._LT_csr = sp.csr_matrix(self.L.T)

    @property
    def n(self) -> int:
        return int(self.L.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.L.nnz)

    @property
    def pattern(self) -> SparsePattern:
        return SparsePattern(self.n, self.n, self.L.indptr, self.L.indices)

    def forward(self, rhs: np.ndarray) -> np.ndarray:
        """L^{-1} P rhs."""
        permuted = np.asarray(rhs, dtype=float)[self.perm]
        return spsolve_triangular(self._L_csr, permuted, lower=True)

    def backward(self, y: np.ndarray) -> np.ndarray:
        """P' L'^{-1} y."""
        x = spsolve_triangular(self._LT_csr, np.asarray(y, dtype=float), lower=False)
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def reconstruct(self) -> sp.csc_matrix:
        """P' L L' P, the factored matrix in original ordering."""
        LLt = (self.L @ self.L.T).tocsc()
        inv = inverse_permutation(self.perm)
        return sp.csc_matrix(LLt[inv][:, inv])


def _permuted_lower(A: SparseMatrix, perm: np.ndarray) -> sp.csc_matrix:
    inv = inverse_permutation(perm)
    rows, cols = A.pattern.coords()
    new_rows, new_cols = inv[rows], inv[cols]
    keep = new_rows >= new_cols
    indptr, indices, data = _canonical_triplets(
        new_rows[keep], new_cols[keep], A.values[keep], A.shape
    )
    return sp.csc_matrix((data, indices, indptr), shape=A.shape)


def factorize(A: SparseMatrix, perm: Optional[np.ndarray] = None, jitter: bool = True) -> SPDFactor:
    """Cholesky-factor a symmetric sparse matrix.

    Args:
        A: Symmetric matrix; its full pattern (explicit zeros included) drives the symbolic step
        perm: Permutation from ordering(); natural order when omitted
        jitter: Retry once with a 1e-10 relative diagonal shift when a pivot is not positive

    Returns:
        SPDFactor with cached log-determinant
    """
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise PatternError("Cannot factor a non-square matrix")
    perm = np.arange(n, dtype=np.int64) if perm is None else np.asarray(perm, dtype=np.int64)
    lower = _permuted_lower(A, perm)
    Lp, Li = symbolic_cholesky(SparsePattern(n, n, lower.indptr, lower.indices))

    shift = 0.0
    try:
        Lx = _numeric_cholesky(lower, Lp, Li, shift)
    except _PivotFailure as failure:
        max_diag = float(np.max(np.abs(lower.diagonal()))) if n else 0.0
        if not jitter or max_diag == 0.0:
            raise NotPositiveDefiniteError(
                f"Matrix is not positive definite (pivot {failure.pivot:.3e} "
                f"at column {failure.column})"
            ) from failure
        shift = JITTER_RELATIVE * max_diag
        logging.warning(
            "Pivot %.3e at column %d is not positive; retrying with diagonal jitter %.3e",
            failure.pivot,
            failure.column,
            shift,
        )
        try:
            Lx = _numeric_cholesky(lower, Lp, Li, shift)
        except _PivotFailure as second:
            raise NotPositiveDefiniteError(
                f"Matrix is not positive definite after jitter {shift:.3e} "
                f"(pivot {second.pivot:.3e} at column {second.column})"
            ) from second

    L = sp.csc_matrix((Lx, Li, Lp), shape=(n, n))
    logdet = 2.0 * float(np.sum(np.log(Lx[Lp[:-1]])))
    logging.debug("Factored %dx%d matrix: nnz(A)=%d nnz(L)=%d", n, n, A.nnz, Li.size)
    return SPDFactor(perm=perm, L=L, logdet=logdet, jitter=shift)


def solve(F: SPDFactor, rhs: Any) -> np.ndarray:
    """Solve A x = rhs for a vector or a tall matrix of right-hand sides."""
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != F.n:
        raise ValueError(f"Right-hand side has {b.shape[0]} rows, factor has dimension {F.n}")
    if b.size == 0:
        return b.copy()
    return F.backward(F.forward(b))


def selected_inverse(F: SPDFactor, pattern: SparsePattern) -> SparseMatrix:
    """Entries of A^{-1} at the positions of pattern (Takahashi recurrence).

    The recurrence runs over the filled pattern of L. Requested positions that
    the fill does not cover raise PatternError.
    """
    n = F.n
    if pattern.shape != (n, n):
        raise PatternError(f"Pattern shape {pattern.shape} does not match factor dimension {n}")
    Lp, Li, Lx = F.L.indptr, F.L.indices, F.L.data
    fill_keys = np.repeat(np.arange(n, dtype=np.int64), np.diff(Lp)) * n + Li

    inv = inverse_permutation(F.perm)
    rows, cols = pattern.coords()
    pr, pc = inv[rows], inv[cols]
    lo, hi = np.maximum(pr, pc), np.minimum(pr, pc)
    query = hi * n + lo
    pos = np.searchsorted(fill_keys, query)
    covered = pos < fill_keys.size
    covered[covered] = fill_keys[pos[covered]] == query[covered]
    if not np.all(covered):
        bad = int(np.flatnonzero(~covered)[0])
        raise PatternError(
            f"Requested inverse entry ({rows[bad]}, {cols[bad]}) is outside the factor fill"
        )

    Z = np.zeros(Li.size)
    for j in range(n - 1, -1, -1):
        start, end = Lp[j], Lp[j + 1]
        ljj = Lx[start]
        idx = Li[start + 1 : end]
        lvals = Lx[start + 1 : end]
        if idx.size:
            block = np.empty((idx.size, idx.size))
            for a, col in enumerate(idx.tolist()):
                cstart, cend = Lp[col], Lp[col + 1]
                col_rows = Li[cstart:cend]
                tail = idx[a:]
                where = cstart + np.searchsorted(col_rows, tail)
                vals = Z[where]
                block[a:, a] = vals
                block[a, a:] = vals
            zij = -(block @ lvals) / ljj
            Z[start + 1 : end] = zij
            Z[start] = 1.0 / (ljj * ljj) - float(lvals @ zij) / ljj
        else:
            Z[start] = 1.0 / (ljj * ljj)

    return SparseMatrix(pattern, Z[pos])


def export_matrix_market(matrix: Union[SparseMatrix, sp.spmatrix], path: Union[str, Path]) -> Path:
    """Write a sparse matrix in Matrix Market text format with 17 significant digits."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    mat = matrix.to_scipy() if isinstance(matrix, SparseMatrix) else sp.coo_matrix(matrix)
    mmwrite(str(target), mat, precision=17)
    return target


def block_diagonal(blocks: Iterable[SparseMatrix]) -> SparseMatrix:
    """Stack square sparse blocks along the diagonal, keeping their patterns."""
    rows, cols, vals = [], [], []
    offset = 0
    for block in blocks:
        r, c = block.pattern.coords()
        rows.append(r + offset)
        cols.append(c + offset)
        vals.append(block.values)
        offset += block.shape[0]
    if not rows:
        return SparseMatrix.from_triplets([], [], [], (0, 0))
    return SparseMatrix.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (offset, offset)
    )
