"""Triplet assembly, CSR compression and direct solves.

CSR storage is scipy's ``csr_matrix``; factorisation is SuperLU. Solves
are verified against a backward-error bound and fall back to partial
pivoting for the indefinite saddle-point systems of the coupled scheme.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SingularMatrixError(RuntimeError):
    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message if pivot is None else f"{message} (zero pivot at index {pivot})")
        self.pivot = pivot


class SolveAccuracyError(RuntimeError):
    pass


@dataclass
class Triplets:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.vals = np.asarray(self.vals, dtype=float).ravel()
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("triplet arrays differ in length")
        m, n = self.shape
        if len(self.rows) and (self.rows.min() < 0 or self.rows.max() >= m
                               or self.cols.min() < 0 or self.cols.max() >= n):
            raise IndexError(f"triplet index out of range for shape {self.shape}")


def compress(t: Triplets) -> sp.csr_matrix:
    """Sum duplicates into CSR.

    Entries are sorted by (row, col, value) before summation, so any
    permutation of the input produces bit-identical output.
    """
    m, n = t.shape
    if len(t.vals) == 0:
        return sp.csr_matrix((m, n))
    order = np.lexsort((t.vals, t.cols, t.rows))
    r, c, v = t.rows[order], t.cols[order], t.vals[order]
    new = np.ones(len(r), dtype=bool)
    new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.flatnonzero(new)
    data = np.add.reduceat(v, starts)
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.add.at(indptr, r[starts] + 1, 1)
    return sp.csr_matrix((data, c[starts], np.cumsum(indptr)), shape=(m, n))


class Pattern:
    """Precomputed compression for a fixed sequence of (row, col) slots.

    Assembly loops that produce triplets in the same order every time can
    reuse the sort and only redo the (ordered, hence deterministic) sums.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self.shape = shape
        self.order = np.lexsort((cols, rows))
        r, c = rows[self.order], cols[self.order]
        new = np.ones(len(r), dtype=bool)
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        self.starts = np.flatnonzero(new)
        self.indices = c[self.starts]
        counts = np.bincount(r[self.starts], minlength=shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)])

    def matrix(self, vals: np.ndarray) -> sp.csr_matrix:
        data = np.add.reduceat(np.asarray(vals)[self.order], self.starts)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def matvec(A: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} times {x.shape}")
    return A @ x


def _dense_pivot(A: sp.spmatrix) -> int | None:
    if A.shape[0] > 3000:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = scipy.linalg.lu_factor(A.toarray(), check_finite=False)
    small = np.flatnonzero(np.abs(np.diag(lu)) == 0.0)
    return int(small[0]) if len(small) else None


class _Permuted:
    """LU of ``A[order][:, order]`` that solves with ``A``."""

    def __init__(self, lu, order):
        self.lu, self.order = lu, order

    def solve(self, b):
        x = np.empty_like(b)
        x[self.order] = self.lu.solve(b[self.order])
        return x


def factorize(A: sp.spmatrix, pivoting: bool = False, order: np.ndarray | None = None):
    """Sparse LU of a square matrix.

    The default uses a minimum-degree ordering of ``A + A^T`` and prefers
    diagonal pivots, which keeps fill low for the structurally symmetric
    systems assembled here; SuperLU still picks an off-diagonal pivot when
    a diagonal entry is exactly zero. A caller-supplied symmetric
    permutation ``order`` replaces the minimum-degree ordering.
    ``pivoting=True`` switches to a column ordering with threshold partial
    pivoting and ignores ``order``.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix is not square: {A.shape}")
    if order is not None and not pivoting:
        order = np.asarray(order, dtype=np.int64)
        if not np.array_equal(np.sort(order), np.arange(A.shape[0])):
            raise ValueError("order is not a permutation of the unknowns")
        try:
            lu = spla.splu(sp.csc_matrix(A[order][:, order]), permc_spec="NATURAL",
                           diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SingularMatrixError(f"sparse LU failed: {exc}", _dense_pivot(A)) from exc
        return _Permuted(lu, order)
    if pivoting:
        kw = dict(permc_spec="COLAMD", diag_pivot_thresh=1.0)
    else:
        kw = dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options=dict(SymmetricMode=True))
    try:
        return spla.splu(A, **kw)
    except RuntimeError as exc:
        raise SingularMatrixError(f"sparse LU failed: {exc}", _dense_pivot(A)) from exc


def _invert_blocks(A: sp.csr_matrix, blocks: np.ndarray) -> sp.csr_matrix:
    """Inverse of the block-diagonal submatrix ``A[blocks, blocks]``.

    ``blocks`` is ``(n_blocks, bs)``; the result is indexed like the
    flattened ``blocks`` array.
    """
    nb, bs = blocks.shape
    r = np.repeat(blocks, bs, axis=1).reshape(nb, bs, bs)
    c = np.tile(blocks, (1, bs)).reshape(nb, bs, bs)
    D = np.asarray(A[r.ravel(), c.ravel()]).reshape(nb, bs, bs)
    Dinv = np.linalg.inv(D)
    base = (np.arange(nb) * bs)[:, None, None]
    rows = base + np.arange(bs)[None, :, None] + 0 * np.arange(bs)[None, None, :]
    cols = base + np.arange(bs)[None, None, :] + 0 * np.arange(bs)[None, :, None]
    return sp.csr_matrix((Dinv.ravel(), (rows.ravel(), cols.ravel())), shape=(nb * bs, nb * bs))


class Factorization:
    """Reusable LU with the accuracy contract of :func:`solve_direct`.

    ``condense`` optionally lists ``(n_blocks, bs)`` unknowns whose
    diagonal block is block diagonal and coupled to nothing else among
    themselves (element bubbles). They are eliminated first and the Schur
    complement is factorised. ``order`` is an elimination order of all
    unknowns (see :func:`factorize`); condensed unknowns are dropped from it.
    """

    def __init__(self, A: sp.spmatrix, condense: np.ndarray | None = None,
                 order: np.ndarray | None = None):
        self.A = sp.csr_matrix(A)
        self.normA = abs(self.A).sum(axis=1).max() if self.A.nnz else 0.0
        self.pivoting = False
        self.blocks = None
        n = self.A.shape[0]
        if condense is not None and len(condense):
            self.blocks = np.asarray(condense, dtype=np.int64)
            b = self.blocks.ravel()
            keep = np.ones(n, dtype=bool)
            keep[b] = False
            self.b, self.i = b, np.flatnonzero(keep)
            A_bb_inv = _invert_blocks(self.A, self.blocks)
            A_ib = self.A[self.i][:, b]
            self.A_bi = self.A[b][:, self.i]
            self.W = (A_ib @ A_bb_inv).tocsr()
            self.A_bb_inv = A_bb_inv
            S = (self.A[self.i][:, self.i] - self.W @ self.A_bi).tocsc()
            if order is not None:
                pos = np.empty(n, dtype=np.int64)
                pos[np.asarray(order)] = np.arange(n)
                order = np.argsort(pos[self.i], kind="stable")
            self._factor(S, order)
        else:
            self._factor(self.A, order)

    def _factor(self, M, order=None):
        try:
            self.lu = factorize(M, order=order)
        except SingularMatrixError:
            self._repivot()

    def _repivot(self):
        log.debug("refactorising with partial pivoting")
        self.pivoting = True
        self.blocks = None
        self.lu = factorize(self.A, pivoting=True)

    def _solve(self, b: np.ndarray) -> np.ndarray:
        if self.blocks is None:
            return self.lu.solve(b)
        rb = b[self.b]
        xi = self.lu.solve(b[self.i] - self.W @ rb)
        x = np.empty_like(b)
        x[self.i] = xi
        x[self.b] = self.A_bb_inv @ (rb - self.A_bi @ xi)
        return x

    def _refined(self, b):
        x = self._solve(b)
        if not np.all(np.isfinite(x)):
            return x, np.inf, 0.0
        for attempt in range(2):
            r = self.A @ x - b
            bound = 1e-10 * (self.normA * np.abs(x).max() + np.abs(b).max())
            err = np.abs(r).max()
            if err <= bound or attempt == 1:
                return x, err, bound
            x = x - self._solve(r)

    def solve(self, b: np.ndarray, check: bool = True) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if not check:
            x = self._solve(b)
            if not np.all(np.isfinite(x)):
                raise SingularMatrixError("solution contains non-finite values", _dense_pivot(self.A))
            return x
        x, err, bound = self._refined(b)
        if not err <= bound and not self.pivoting:
            self._repivot()
            x, err, bound = self._refined(b)
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("solution contains non-finite values", _dense_pivot(self.A))
        if not err <= bound:
            raise SolveAccuracyError(f"residual {err:.3e} exceeds bound {bound:.3e}")
        return x


def solve_direct(A: sp.spmatrix, b: np.ndarray, check: bool = True) -> np.ndarray:
    """Solve ``A x = b`` by sparse LU.

    The result is checked against
    ``|Ax - b|_inf <= 1e-10 (|A|_inf |x|_inf + |b|_inf)``; one step of
    iterative refinement, then a pivoting refactorisation, are tried
    before giving up.
    """
    return Factorization(A).solve(b, check)


def write_matrix_market(A: sp.spmatrix, path) -> None:
    """ASCII coordinate dump with 1-based indices."""
    C = sp.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for i, j, v in zip(C.row.tolist(), C.col.tolist(), C.data.tolist()):
            fh.write(f"{i + 1} {j + 1} {v!r}\n")
