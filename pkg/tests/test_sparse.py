# File: tests/test_sparse.py

"""Tests for sparse patterns, orderings, Cholesky factorization and selected inversion."""

import logging

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from mragp.errors import NotPositiveDefiniteError, PatternError
from mragp.sparse import (
    SparseMatrix,
    SparsePattern,
    block_diagonal,
    export_matrix_market,
    factorize,
    ordering,
    selected_inverse,
    solve,
    symbolic_cholesky,
)
from tests.helpers.components import spd_matrix
from tests.test_utils import assert_matrix_close


def arrow_matrix(n: int) -> np.ndarray:
    """Dense first row and column on a dominant diagonal."""
    A = np.eye(n) * n
    A[0, 1:] = A[1:, 0] = 1.0
    return A


def tridiagonal(n: int) -> np.ndarray:
    return 4.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)


class TestPatterns:
    """Structural patterns and pattern-aligned matrices."""

    def test_explicit_zeros_are_kept(self):
        """A stored zero stays part of the pattern."""
        A = SparseMatrix.from_triplets([0, 1, 1], [0, 1, 0], [0.0, 2.0, 0.0], (2, 2))
        assert A.nnz == 3
        assert A.to_scipy().nnz == 3

    def test_duplicates_are_summed(self):
        """Repeated coordinates add up."""
        A = SparseMatrix.from_triplets([0, 0], [0, 0], [1.5, 2.5], (1, 1))
        assert A.values.tolist() == [4.0]

    def test_symmetric_triplets(self):
        """symmetric=True averages A and its transpose."""
        A = SparseMatrix.from_triplets([1], [0], [2.0], (2, 2), symmetric=True)
        np.testing.assert_array_equal(A.to_dense(), [[0.0, 1.0], [1.0, 0.0]])
        assert A.pattern.is_symmetric()

    def test_out_of_bounds(self):
        """Coordinates outside the shape raise PatternError."""
        with pytest.raises(PatternError):
            SparsePattern.from_coords([2], [0], (2, 2))

    def test_union_lower_transpose(self):
        """Set operations on patterns."""
        p = SparsePattern.from_coords([0, 2], [0, 1], (3, 3))
        q = SparsePattern.diagonal(3)
        union = p.union(q)
        assert union.nnz == 4
        assert union.contains(p) and union.contains(q)
        assert p.transpose().coords()[0].tolist() == [0, 1]
        assert union.lower() == union
        assert union.transpose().lower() == q
        assert p.bandwidth() == 1

    def test_with_pattern_fills_zeros(self):
        """Re-expression on a superset keeps values and adds explicit zeros."""
        A = SparseMatrix.from_dense(np.diag([1.0, 2.0]))
        full = SparsePattern.from_coords([0, 1, 0, 1], [0, 0, 1, 1], (2, 2))
        B = A.with_pattern(full)
        assert B.nnz == 4
        np.testing.assert_array_equal(B.to_dense(), np.diag([1.0, 2.0]))
        with pytest.raises(PatternError):
            B.with_pattern(SparsePattern.diagonal(2))

    def test_lookup(self):
        """lookup returns values with a presence mask."""
        A = SparseMatrix.from_dense(arrow_matrix(4))
        vals, found = A.lookup([0, 1, 2], [3, 2, 2])
        assert vals.tolist() == [1.0, 0.0, 4.0]
        assert found.tolist() == [True, False, True]

    def test_add_diagonal_and_block_diagonal(self):
        """Diagonal shifts and block stacking keep values in place."""
        A = SparseMatrix.from_dense([[1.0, 0.5], [0.5, 1.0]]).add_diagonal(1.0)
        np.testing.assert_array_equal(A.diagonal(), [2.0, 2.0])
        stacked = block_diagonal([A, SparseMatrix.from_dense([[3.0]])])
        assert stacked.shape == (3, 3)
        assert stacked.to_dense()[2, 2] == 3.0
        assert stacked.to_dense()[0, 2] == 0.0

    def test_non_finite_values(self):
        """NaN values are rejected."""
        with pytest.raises(PatternError):
            SparseMatrix.from_triplets([0], [0], [np.nan], (1, 1))


class TestOrdering:
    """Fill-reducing permutations."""

    def test_natural(self):
        """The natural ordering is the identity."""
        pattern = SparsePattern.diagonal(5)
        assert ordering(pattern, "natural").tolist() == [0, 1, 2, 3, 4]

    def test_minimum_degree_is_permutation(self):
        """The minimum-degree order visits every index once."""
        A = SparseMatrix.from_dense(spd_matrix(25, seed=4, density=0.15))
        perm = ordering(A.pattern, "amd")
        assert sorted(perm.tolist()) == list(range(25))

    def test_minimum_degree_avoids_arrow_fill(self):
        """Eliminating the hub last leaves an arrow matrix without fill."""
        n = 12
        A = SparseMatrix.from_dense(arrow_matrix(n))
        natural = factorize(A)
        amd = factorize(A, ordering(A.pattern, "amd"))
        assert natural.nnz == n * (n + 1) // 2
        assert amd.nnz == 2 * n - 1
        assert amd.perm[-1] == 0 or amd.perm[-2] == 0

    def test_block_hint(self):
        """Finest level first, regions contiguous, ties by index."""
        pattern = SparsePattern.diagonal(4)
        perm = ordering(pattern, "block", block_keys=[(0, 0), (1, 1), (1, 0), (0, 0)])
        assert perm.tolist() == [2, 1, 0, 3]

    def test_aliases(self):
        """The long hint names map to the short ones."""
        pattern = SparsePattern.diagonal(3)
        keys = [(0, 0)] * 3
        assert ordering(pattern, "block-hierarchical", keys).tolist() == [0, 1, 2]
        assert sorted(ordering(pattern, "amd-like").tolist()) == [0, 1, 2]

    def test_invalid_hints(self):
        """Unknown hints and missing block keys raise PatternError."""
        pattern = SparsePattern.diagonal(3)
        with pytest.raises(PatternError):
            ordering(pattern, "metis")
        with pytest.raises(PatternError):
            ordering(pattern, "block")
        with pytest.raises(PatternError):
            ordering(SparsePattern.from_coords([0], [0], (2, 3)))


class TestFactorize:
    """Sparse Cholesky and solves."""

    def test_symbolic_structure(self):
        """The diagonal leads every column; a tridiagonal factor is bidiagonal."""
        lower = SparseMatrix.from_dense(tridiagonal(5)).pattern.lower()
        indptr, indices = symbolic_cholesky(lower)
        assert np.diff(indptr).tolist() == [2, 2, 2, 2, 1]
        assert indices[indptr[:-1]].tolist() == [0, 1, 2, 3, 4]

    def test_banded_factor_keeps_bandwidth(self):
        """In natural order the factor of a banded matrix has no entries outside the band."""
        n, band = 100, 3
        dense = 2.0 * band * np.eye(n)
        for k in range(1, band + 1):
            dense -= 0.5 * (np.eye(n, k=k) + np.eye(n, k=-k))
        A = SparseMatrix.from_dense(dense)
        perm = ordering(A.pattern, "natural")
        np.testing.assert_array_equal(perm, np.arange(n))
        indptr, indices = symbolic_cholesky(A.pattern.lower())
        columns = np.repeat(np.arange(n), np.diff(indptr))
        assert int(np.max(indices - columns)) <= A.pattern.bandwidth() == band
        assert factorize(A, perm).pattern.bandwidth() <= band

    @pytest.mark.parametrize("hint", ["natural", "amd"])
    def test_matches_dense(self, hint):
        """Reconstruction, log-determinant and solves agree with dense linear algebra."""
        dense = spd_matrix(30, seed=2)
        A = SparseMatrix.from_dense(dense)
        F = factorize(A, ordering(A.pattern, hint))
        assert_matrix_close(F.reconstruct(), dense, 1e-10, "P'LL'P")
        assert F.logdet == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-12)
        rhs = np.random.default_rng(5).standard_normal((30, 3))
        np.testing.assert_allclose(solve(F, rhs), np.linalg.solve(dense, rhs), atol=1e-10)
        np.testing.assert_allclose(
            solve(F, rhs[:, 0]), np.linalg.solve(dense, rhs[:, 0]), atol=1e-10
        )
        assert F.jitter == 0.0

    def test_zero_entries_drive_fill(self):
        """Stored zeros are part of the symbolic structure."""
        dense = np.eye(3) * 2.0
        A = SparseMatrix.from_triplets([0, 1, 2, 2], [0, 1, 2, 0], [2.0, 2.0, 2.0, 0.0], (3, 3))
        F = factorize(A)
        assert F.nnz == 4
        assert_matrix_close(F.reconstruct(), dense, 1e-14)

    def test_indefinite_raises(self):
        """A symmetric indefinite matrix fails even after the jitter retry."""
        A = SparseMatrix.from_dense([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError):
            factorize(A)

    def test_jitter_retry(self, caplog):
        """A singular PSD matrix succeeds on the retry with a tiny diagonal shift."""
        A = SparseMatrix.from_dense([[1.0, 1.0], [1.0, 1.0]])
        with caplog.at_level(logging.WARNING):
            F = factorize(A)
        assert F.jitter == pytest.approx(1e-10)
        assert "retrying with diagonal jitter" in caplog.text

    def test_no_jitter(self):
        """With jitter disabled the first pivot failure is final."""
        A = SparseMatrix.from_dense([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError):
            factorize(A, jitter=False)

    def test_solve_shape_mismatch(self):
        """The right-hand side must match the factor dimension."""
        F = factorize(SparseMatrix.from_dense(np.eye(3)))
        with pytest.raises(ValueError):
            solve(F, np.ones(4))
        assert solve(F, np.zeros((3, 0))).shape == (3, 0)

    def test_non_square(self):
        """Only square matrices can be factored."""
        with pytest.raises(PatternError):
            factorize(SparseMatrix.from_triplets([0], [0], [1.0], (2, 3)))


class TestSelectedInverse:
    """Inverse entries on the filled pattern."""

    @pytest.mark.parametrize("hint", ["natural", "amd"])
    def test_matches_dense_inverse(self, hint):
        """Entries on the pattern of A agree with the dense inverse."""
        dense = spd_matrix(25, seed=6, density=0.2)
        A = SparseMatrix.from_dense(dense)
        F = factorize(A, ordering(A.pattern, hint))
        S = selected_inverse(F, A.pattern)
        expected = SparseMatrix.on_pattern(A.pattern, np.linalg.inv(dense))
        np.testing.assert_allclose(S.values, expected.values, atol=1e-12)

    def test_full_fill_gives_full_inverse(self):
        """On the fill of the arrow matrix in natural order every entry is available."""
        dense = arrow_matrix(6)
        F = factorize(SparseMatrix.from_dense(dense))
        full = SparsePattern.from_scipy(np.ones((6, 6)))
        S = selected_inverse(F, full)
        assert_matrix_close(S, np.linalg.inv(dense), 1e-13, "inverse")

    def test_outside_fill(self):
        """A tridiagonal factor has no fill, so far corners are unavailable."""
        F = factorize(SparseMatrix.from_dense(tridiagonal(5)))
        with pytest.raises(PatternError, match="outside the factor fill"):
            selected_inverse(F, SparsePattern.from_coords([0], [4], (5, 5)))

    def test_shape_mismatch(self):
        """The requested pattern must have the factor's dimension."""
        F = factorize(SparseMatrix.from_dense(np.eye(2)))
        with pytest.raises(PatternError):
            selected_inverse(F, SparsePattern.diagonal(3))


def test_export_matrix_market(tmp_path):
    """Matrix Market output reads back with full precision."""
    A = SparseMatrix.from_dense([[1.0 / 3.0, 0.0], [0.1, 2.0]])
    path = export_matrix_market(A, tmp_path / "sub" / "A.mtx")
    assert path.exists()
    back = sp.csc_matrix(scipy.io.mmread(str(path)))
    np.testing.assert_array_equal(back.toarray(), A.to_dense())
