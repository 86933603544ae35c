"""Brute-force reference solutions for tiny instances.

These enumerate combinatorial structure instead of running an optimizer,
so they are independent of the primal-dual machinery they check.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "assignment_optimum",
    "transport_vertex_optimum",
    "birkhoff2_projection",
]


def assignment_optimum(C, mass=1.0):
    """Minimum of ``mass * sum_i C[i, pi(i)]`` over all permutations ``pi``.

    This is the optimal value of transport with uniform marginals ``mass``
    (Birkhoff-von Neumann).  Returns ``(value, plan)``.
    """
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n) or n > 9:
        raise ValueError("assignment oracle expects a square cost with n <= 9")
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        val = C[rows, perm].sum()
        if val < best:
            best, best_perm = val, perm
    X = np.zeros((n, n))
    X[rows, best_perm] = mass
    return float(mass * best), X


def transport_vertex_optimum(C, mu, nu, tol=1e-10):
    """Optimal balanced transport by enumerating basic feasible plans.

    ``C`` is ``m x n``, ``mu`` the column sums (length n) and ``nu`` the row
    sums (length m).  Every vertex of the transport polytope has at most
    ``m + n - 1`` nonzeros, so all supports of that size are tried.
    """
    C = np.asarray(C, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    m, n = C.shape
    if m * n > 16:
        raise ValueError("vertex enumeration is limited to m*n <= 16")
    # constraint matrix on column-major cells
    A = np.zeros((n + m, m * n))
    for j in range(n):
        for i in range(m):
            cell = i + j * m
            A[j, cell] = 1.0
            A[n + i, cell] = 1.0
    b = np.concatenate([mu, nu])
    c = C.ravel(order="F")
    k = min(m + n - 1, m * n)
    scale = max(1.0, np.abs(b).max())
    best, best_x = np.inf, None
    for support in itertools.combinations(range(m * n), k):
        cols = list(support)
        xs, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
        if np.any(xs < -tol * scale):
            continue
        if np.linalg.norm(A[:, cols] @ xs - b) > tol * scale * 10:
            continue
        val = float(c[cols] @ xs)
        if val < best:
            best = val
            best_x = np.zeros(m * n)
            best_x[cols] = np.maximum(xs, 0.0)
    if best_x is None:
        raise ValueError("no feasible vertex: marginals are inconsistent")
    return best, best_x.reshape((m, n), order="F")


def birkhoff2_projection(Phi, lower=None, upper=None):
    """Nearest 2x2 doubly stochastic matrix to ``Phi`` (Frobenius norm).

    Doubly stochastic 2x2 matrices are ``[[t, 1-t], [1-t, t]]``; the
    objective is a quadratic in ``t`` minimized at
    ``(Phi11 + Phi22 + 2 - Phi12 - Phi21) / 4`` and clipped to the interval
    allowed by the entrywise bounds (default ``[0, 1]``).
    """
    P = np.asarray(Phi, dtype=float)
    if P.shape != (2, 2):
        raise ValueError("Phi must be 2x2")
    lo = np.zeros((2, 2)) if lower is None else np.asarray(lower, dtype=float)
    up = np.ones((2, 2)) if upper is None else np.asarray(upper, dtype=float)
    t_lo = max(lo[0, 0], lo[1, 1], 1 - up[0, 1], 1 - up[1, 0], 0.0)
    t_hi = min(up[0, 0], up[1, 1], 1 - lo[0, 1], 1 - lo[1, 0], 1.0)
    if t_lo > t_hi + 1e-14:
        raise ValueError("bounds leave no doubly stochastic matrix")
    t = (P[0, 0] + P[1, 1] + 2 - P[0, 1] - P[1, 0]) / 4
    t = min(max(t, t_lo), t_hi)
    X = np.array([[t, 1 - t], [1 - t, t]])
    return X, 0.5 * float(np.sum((X - P) ** 2))
