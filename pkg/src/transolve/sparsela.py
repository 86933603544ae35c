"""Sparse and dense linear-algebra kernels.

Sparse matrices are ``scipy.sparse.csr_matrix`` objects kept in canonical
form (sorted, duplicate-free column indices).  The dense symmetric solver
is a diagonally pivoted LDL^T factorization that also handles the
semidefinite graph-Laplacian case with kernel ``span{1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

__all__ = [
    "IndefiniteMatrixError",
    "as_csr",
    "spmv",
    "transpose_spmv",
    "triple_product",
    "is_structurally_symmetric",
    "has_constant_kernel",
    "LDLFactor",
    "ldl_factor",
    "dense_sym_solve",
    "PcgResult",
    "pcg_jacobi",
    "read_matrix_market",
    "write_matrix_market",
]

_TINY = 1e-300


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """A pivot came out negative beyond the roundoff tolerance."""


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR copy: sorted indices, duplicates summed, float64."""
    A = sp.csr_matrix(A, dtype=float, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: {A.shape} @ {x.shape}")
    return A @ x


def transpose_spmv(A, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[0] != x.shape[0]:
        raise ValueError(f"shape mismatch: {A.shape}^T @ {x.shape}")
    return A.T @ x


def triple_product(P, A) -> sp.csr_matrix:
    """Galerkin product ``P^T A P`` in canonical CSR form."""
    if A.shape[0] != A.shape[1] or P.shape[0] != A.shape[0]:
        raise ValueError(f"incompatible shapes P{P.shape}, A{A.shape}")
    P = sp.csr_matrix(P)
    out = (P.T.tocsr() @ sp.csr_matrix(A) @ P).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def is_structurally_symmetric(A) -> bool:
    A = sp.csr_matrix(A)
    pattern = (A != 0).astype(np.int8)
    return (pattern != pattern.T).nnz == 0


def has_constant_kernel(A, rtol=1e-14) -> bool:
    """True when the row sums vanish up to roundoff (``A 1 = 0``)."""
    diag = np.abs(A.diagonal())
    scale = diag.max() if diag.size else 0.0
    return bool(np.abs(A @ np.ones(A.shape[0])).max() <= rtol * max(scale, _TINY))


@dataclass
class LDLFactor:
    """``A[perm][:, perm] = L diag(d) L^T`` restricted to the leading ``rank`` pivots."""

    perm: np.ndarray
    L: np.ndarray
    d: np.ndarray
    rank: int
    constant_kernel: bool = False

    @property
    def size(self) -> int:
        return self.perm.size

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        N, r = self.size, self.rank
        if self.constant_kernel:
            b = b - b.mean()
        bp = b[self.perm]
        out = np.zeros(N)
        if r:
            L1 = self.L[:r, :r]
            y = scipy.linalg.solve_triangular(L1, bp[:r], lower=True, unit_diagonal=True,
                                              check_finite=False)
            y /= self.d[:r]
            out[:r] = scipy.linalg.solve_triangular(L1, y, lower=True, trans="T",
                                                    unit_diagonal=True, check_finite=False)
        x = np.empty(N)
        x[self.perm] = out
        if self.constant_kernel:
            x -= x.mean()
        return x


def ldl_factor(A, semidefinite=None, rtol=None, row_sums=None) -> LDLFactor:
    """Diagonally pivoted LDL^T of a symmetric positive (semi)definite matrix.

    Parameters
    ----------
    A : array_like, shape (N, N)
        Dense (or sparse, densified) symmetric matrix.
    semidefinite : bool or None
        ``True`` declares ``A 1 = 0``: the last pivot is dropped and solves
        return the mean-zero solution.  ``None`` decides rank from ``rtol``.
    rtol : float, optional
        Pivots below ``rtol * max(diag)`` are treated as zero.  Defaults to
        ``10 * N * eps``.
    row_sums : array_like, optional
        Exact ``A @ 1``.  When given, every Schur-complement diagonal is
        rebuilt from the propagated row sums and the off-diagonal entries,
        which keeps tiny pivots of nearly singular M-matrices accurate.
    """
    W = np.array(A.toarray() if sp.issparse(A) else A, dtype=float, copy=True)
    N = W.shape[0]
    if W.shape != (N, N):
        raise ValueError("matrix must be square")
    perm = np.arange(N)
    d = np.zeros(N)
    scale = np.abs(np.diag(W)).max() if N else 0.0
    if rtol is None:
        rtol = 10.0 * N * np.finfo(float).eps
    tol = rtol * max(scale, _TINY)
    limit = N - 1 if semidefinite else N
    rs = None if row_sums is None else np.array(row_sums, dtype=float)
    rank = 0
    for k in range(limit):
        p = k + int(np.argmax(np.diag(W)[k:]))
        if p != k:
            W[[k, p], :] = W[[p, k], :]
            W[:, [k, p]] = W[:, [p, k]]
            perm[[k, p]] = perm[[p, k]]
            if rs is not None:
                rs[[k, p]] = rs[[p, k]]
        piv = W[k, k]
        if piv <= tol:
            if np.diag(W)[k:].min() < -tol:
                raise IndefiniteMatrixError(f"negative pivot {piv:.3e} at step {k}")
            break
        col = W[k + 1:, k] / piv
        W[k + 1:, k + 1:] -= np.outer(col, W[k, k + 1:])
        if rs is not None:
            rs[k + 1:] -= col * rs[k]
            T = W[k + 1:, k + 1:]
            dT = np.diag(T).copy()
            np.fill_diagonal(T, rs[k + 1:] - (T.sum(axis=1) - dT))
        W[k + 1:, k] = col
        d[k] = piv
        rank = k + 1
    if semidefinite and rank == N - 1 and N and W[N - 1, N - 1] < -tol:
        raise IndefiniteMatrixError("negative trailing pivot")
    L = np.tril(W, -1) + np.eye(N)
    if rank < N and not semidefinite:
        trailing = W[rank:, rank:]
        if trailing.size and np.abs(trailing).max() > 1e3 * tol:
            raise IndefiniteMatrixError("indefinite trailing block")
    return LDLFactor(perm=perm, L=L, d=d, rank=rank,
                     constant_kernel=bool(semidefinite) or rank < N)


def dense_sym_solve(A, b, semidefinite=None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    In the semidefinite case ``b`` is projected onto ``1^perp`` and the
    mean-zero solution is returned.
    """
    return ldl_factor(A, semidefinite=semidefinite).solve(b)


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def pcg_jacobi(A, b, tol=1e-11, max_iter=10000, x0=None, singular=None,
               kernel_image=None) -> PcgResult:
    """Conjugate gradients with the diagonal (Jacobi) preconditioner.

    Stops when ``||b - A x_k|| <= tol * ||b - A x_0||``.  For a singular
    Laplacian (``singular=True`` or detected from the row sums) the right-hand
    side and the final iterate are projected onto ``1^perp``.

    The iterate is kept as ``c 1 + x~`` with ``x~`` mean-zero, and residuals
    are formed as ``b - A x~ - c A 1`` using ``kernel_image = A 1`` (row sums
    by default).  For nearly singular Laplacians ``c`` is huge, and both
    ``A x`` and the recursively updated residual lose the digits that fix
    the constant mode.  When the recursive residual first meets ``tol`` the
    residual is recomputed this way and CG restarts once from it; the
    stopping test applies to the recursive residual of the restarted run.
    ``history`` holds the recursive relative residuals.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    N = b.size
    if singular is None:
        singular = has_constant_kernel(A)
    if singular:
        b = b - b.mean()
    kimg = A @ np.ones(N) if kernel_image is None else np.asarray(kernel_image, dtype=float)
    x = np.zeros(N) if x0 is None else np.array(x0, dtype=float)
    c = 0.0 if singular else x.mean()
    x -= x.mean()
    dinv = 1.0 / A.diagonal()

    def true_residual():
        return b - A @ x - c * kimg

    r = true_residual()
    r0 = np.linalg.norm(r)
    history = [1.0]
    if r0 == 0.0:
        return PcgResult(x + c, 0, True, history)
    converged = False
    k = 0
    restarts = 1
    while k < max_iter:
        z = dinv * r
        p = z.copy()
        rz = r @ z
        converged = False
        while k < max_iter:
            Ap = A @ p
            alpha = rz / (p @ Ap)
            step = alpha * p
            shift = step.mean()
            x += step - shift
            if not singular:
                c += shift
            r -= alpha * Ap
            k += 1
            rel = np.linalg.norm(r) / r0
            history.append(rel)
            if rel <= tol:
                converged = True
                break
            z = dinv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        if not converged or restarts == 0:
            break
        restarts -= 1
        r = true_residual()
        if np.linalg.norm(r) <= tol * r0:
            break
    return PcgResult(x + c, k, converged, history)


def read_matrix_market(path) -> sp.csr_matrix:
    return as_csr(scipy.io.mmread(str(path)))


def write_matrix_market(path, A, symmetric=None) -> None:
    A = sp.coo_matrix(A)
    if symmetric is None:
        symmetric = A.shape[0] == A.shape[1] and abs(A - A.T).max() == 0
    scipy.io.mmwrite(str(path), A, field="real",
                     symmetry="symmetric" if symmetric else "general")
