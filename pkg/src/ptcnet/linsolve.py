"""Sparse direct solves for the Newton / pseudo-time systems.

Thin layer over SuperLU (``scipy.sparse.linalg.splu``) with a column
minimum-degree ordering and threshold partial pivoting.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message: str, pivot: int):
        super().__init__(f"{message} (pivot {pivot})")
        self.pivot = pivot


class Factorization:
    """LU factors of a square sparse matrix, reusable across right-hand sides."""

    def __init__(self, lu: spla.SuperLU, n: int, pivot_growth: float):
        self._lu = lu
        self.n = n
        self.pivot_growth = pivot_growth

    @property
    def L(self) -> sp.csc_matrix:
        return self._lu.L

    @property
    def U(self) -> sp.csc_matrix:
        return self._lu.U

    @property
    def perm_r(self) -> np.ndarray:
        return self._lu.perm_r

    @property
    def perm_c(self) -> np.ndarray:
        return self._lu.perm_c

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        return self._lu.solve(b, trans="T" if transpose else "N")


def factorize(A, pivot_threshold: float = 0.1, singular_rtol: float = 1e-14) -> Factorization:
    A = sp.csc_matrix(A, dtype=float)
    n, m = A.shape
    if n != m:
        raise ValueError("matrix must be square")
    amax = float(np.abs(A.data).max()) if A.nnz else 0.0
    if amax == 0.0:
        raise SingularMatrixError("zero matrix", 0)
    try:
        lu = spla.splu(A, permc_spec="COLAMD", diag_pivot_thresh=pivot_threshold)
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc), _first_bad_pivot(A)) from exc
    udiag = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(udiag <= singular_rtol * amax)
    if len(bad):
        raise SingularMatrixError("numerically singular", int(lu.perm_c[bad[0]]))
    growth = float(np.abs(lu.U.data).max()) / amax
    return Factorization(lu, n, float(growth))


def solve(f: Factorization, b: np.ndarray) -> np.ndarray:
    return f.solve(b)


def _first_bad_pivot(A: sp.csc_matrix) -> int:
    empty_col = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty_col):
        return int(empty_col[0])
    empty_row = np.flatnonzero(np.bincount(A.indices, minlength=A.shape[0]) == 0)
    if len(empty_row):
        return int(empty_row[0])
    if A.shape[0] <= 2000:
        _, _, U = la.lu(A.toarray())
        tiny = np.flatnonzero(np.abs(np.diag(U)) <= 1e-14 * np.abs(U).max())
        if len(tiny):
            return int(tiny[0])
    return -1
