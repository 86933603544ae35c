"""Reduction of semismooth Newton systems to bipartite graph Laplacians.

The Newton matrix ``eps I + H D^{-1} U H^T`` has the block form

    [[ eps I + K + T S T^T,  T S Pi^T        ],
     [ Pi S T^T,             eps + Pi S Pi^T ]]

with ``S = diag(s)``, ``K = diag(t)`` and ``T`` the column/row-sum operator.
Node order is the ``n`` column nodes followed by the ``m`` row nodes.  With
``Y`` the ``m x n`` matrix holding ``s`` (column-major), ``T S T^T`` equals
``[[diag(Y^T 1), Y^T], [Y, diag(Y 1)]]``; conjugating by
``Q = diag(I_n, -I_m)`` flips the off-diagonal blocks and produces the
Laplacian of the weighted bipartite graph with biadjacency ``Y``.  The
optional total-mass row (``Pi``) is eliminated by a rank-one
Sherman-Woodbury correction that reuses the Laplacian solver twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .amg import BIPARTITE, GAUSS_SEIDEL, AmgConfig, amg_solve, setup_hierarchy
from .sparsela import dense_sym_solve, ldl_factor, pcg_jacobi, write_matrix_market

__all__ = [
    "LinearSolverError",
    "ReducedLaplacianSystem",
    "SchurPieces",
    "ComponentSplit",
    "HybridPolicy",
    "LinearStats",
    "LaplacianSolver",
    "assemble_bipartite_laplacian",
    "schur_pieces",
    "schur_reduce",
    "bordered_residual",
    "split_components",
    "hybrid_solve",
    "solve_newton_system",
    "dense_newton_matrix",
    "dense_newton_solve",
    "export_laplacian",
]

REDUCTION_AMG_CONFIG = AmgConfig(smoother_fine=GAUSS_SEIDEL, interpolation=BIPARTITE)


class LinearSolverError(RuntimeError):
    """A component solve failed and no fallback was possible."""


@dataclass(frozen=True)
class ReducedLaplacianSystem:
    """``T = eps I + diag(t) + T0`` over ``n`` column nodes and ``m`` row nodes."""

    epsilon: float
    t: np.ndarray
    Y: sp.csr_matrix
    m: int
    n: int

    @property
    def size(self) -> int:
        return self.m + self.n

    @property
    def degrees(self) -> np.ndarray:
        col = np.asarray(self.Y.sum(axis=0)).ravel()
        row = np.asarray(self.Y.sum(axis=1)).ravel()
        return np.concatenate([col, row])

    @property
    def q_signs(self) -> np.ndarray:
        return np.concatenate([np.ones(self.n), -np.ones(self.m)])

    def kernel_image(self) -> np.ndarray:
        """``A 1`` for the Laplacian form ``A = eps I + K + A0``."""
        return self.epsilon + self.t

    def laplacian(self) -> sp.csr_matrix:
        """``eps I + K + A0`` with ``A0 = Q T0 Q`` the bipartite graph Laplacian."""
        Yt = self.Y.T
        A0 = sp.bmat([[None, -Yt], [-self.Y, None]], format="csr")
        diag = self.degrees + self.t + self.epsilon
        A = (A0 + sp.diags(diag)).tocsr()
        A.sort_indices()
        return A

    def matrix(self) -> sp.csr_matrix:
        """The unconjugated ``eps I + K + T S T^T``."""
        Q = sp.diags(self.q_signs)
        return (Q @ self.laplacian() @ Q).tocsr()

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        n = self.n
        out = (self.epsilon + self.t + self.degrees) * v
        out[:n] += self.Y.T @ v[n:]
        out[n:] += self.Y @ v[:n]
        return out


def assemble_bipartite_laplacian(s, t, epsilon, m, n) -> ReducedLaplacianSystem:
    """Package ``(s, t, eps)`` as a reduced system; ``s`` is vec(Y) column-major."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if s.shape != (m * n,) or t.shape != (m + n,):
        raise ValueError("s must have length m*n and t length m+n")
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("s and t must be nonnegative")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    Y = sp.csr_matrix(s.reshape((m, n), order="F"))
    Y.eliminate_zeros()
    return ReducedLaplacianSystem(float(epsilon), t.copy(), Y, m, n)


@dataclass(frozen=True)
class SchurPieces:
    """Rank-one coupling with the total-mass row: ``pi_tilde``, ``psi = T s``.

    ``shift`` is ``(eps + t)/2``, the part of ``T e`` (``e = 1/2``) not
    produced by the graph term.
    """

    pi_tilde: float
    psi: np.ndarray
    shift: np.ndarray


def schur_pieces(system, s) -> SchurPieces:
    s = np.asarray(s, dtype=float)
    pi_tilde = system.epsilon + float(s.sum())
    return SchurPieces(pi_tilde, system.degrees, 0.5 * (system.epsilon + system.t))


@dataclass
class ComponentSplit:
    labels: np.ndarray
    perm: np.ndarray
    blocks: list

    @property
    def count(self) -> int:
        return len(self.blocks)


def split_components(system) -> ComponentSplit:
    """Connected components of the bipartite graph of ``Y``.

    Nodes without edges form singleton components.  ``perm`` lists the nodes
    block by block.
    """
    Y = system.Y
    adj = sp.bmat([[None, Y.T], [Y, None]], format="csr")
    count, labels = connected_components(adj, directed=False)
    perm = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[perm], np.arange(count + 1))
    blocks = [perm[bounds[i]:bounds[i + 1]] for i in range(count)]
    return ComponentSplit(labels=labels, perm=perm, blocks=blocks)


@dataclass(frozen=True)
class HybridPolicy:
    """Dispatch rules for component solves.

    ``direct_threshold=None`` means ``max(64, ceil(M^(1/3)))``.  Components
    above the threshold use ``backend`` ("amg" or "pcg").  A failed
    iterative solve falls back to dense factorization when the component has
    at most ``fallback_max`` nodes.  Systems with a total-mass row get up to
    ``refine_steps`` rounds of iterative refinement with residuals evaluated
    in extended precision.
    """

    direct_threshold: int | None = None
    backend: str = "amg"
    tol: float = 1e-11
    max_iter: int = 200
    amg_config: AmgConfig = REDUCTION_AMG_CONFIG
    fallback_max: int = 4000
    refine_steps: int = 2

    def threshold(self, M) -> int:
        if self.direct_threshold is not None:
            return self.direct_threshold
        return max(64, math.ceil(M ** (1.0 / 3.0)))


@dataclass
class LinearStats:
    """Iteration counts of iterative component solves (one entry per solve)."""

    iterations: list = field(default_factory=list)
    fallbacks: int = 0

    def extend(self, other):
        self.iterations.extend(other.iterations)
        self.fallbacks += other.fallbacks

    @property
    def max(self) -> int:
        return max(self.iterations, default=0)

    @property
    def mean(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else 0.0


@dataclass
class _Block:
    nodes: np.ndarray
    kind: str
    A: sp.csr_matrix | None = None
    diag: np.ndarray | None = None
    factor: object = None
    hierarchy: object = None


class LaplacianSolver:
    """Reusable solver for ``T xi = z`` built once per reduced system.

    Works in the Laplacian domain: ``z`` is conjugated by ``Q``, each
    component block ``eps I + K_i + A0_i`` is solved independently, and the
    result is conjugated back.
    """

    def __init__(self, system, policy=None):
        self.system = system
        self.policy = policy or HybridPolicy()
        self.stats = LinearStats()
        self.split = split_components(system)
        M = system.size
        threshold = self.policy.threshold(M)
        A = system.laplacian()
        kimg = system.kernel_image()
        self.blocks = []
        for nodes in self.split.blocks:
            if nodes.size == 1:
                self.blocks.append(_Block(nodes, "scalar", diag=A.diagonal()[nodes]))
                continue
            Ab = A[nodes][:, nodes].tocsr()
            if nodes.size <= threshold:
                self.blocks.append(_Block(nodes, "direct", A=Ab, factor=self._factor(Ab, kimg[nodes])))
                continue
            block = _Block(nodes, self.policy.backend, A=Ab)
            if self.policy.backend == "amg":
                sides = (np.flatnonzero(nodes < system.n), np.flatnonzero(nodes >= system.n))
                block.hierarchy = setup_hierarchy(
                    Ab, self.policy.amg_config, kernel_image=kimg[nodes],
                    singular=not np.any(kimg[nodes] > 0), bipartite_sides=sides)
            elif self.policy.backend != "pcg":
                raise ValueError(f"unknown backend {self.policy.backend!r}")
            self.blocks.append(block)

    @staticmethod
    def _factor(Ab, kimg):
        singular = not np.any(kimg > 0)
        return ldl_factor(Ab.toarray(), semidefinite=singular,
                          row_sums=np.zeros(kimg.size) if singular else kimg)

    def _solve_iterative(self, block, rhs):
        pol = self.policy
        singular = block.hierarchy.singular if block.hierarchy is not None else \
            not np.any(self.system.kernel_image()[block.nodes] > 0)
        if block.kind == "amg":
            res = amg_solve(block.A, rhs, tol=pol.tol, max_iter=pol.max_iter,
                            hierarchy=block.hierarchy)
        else:
            res = pcg_jacobi(block.A, rhs, tol=pol.tol, max_iter=max(pol.max_iter, 20 * block.nodes.size),
                             singular=singular,
                             kernel_image=self.system.kernel_image()[block.nodes])
        self.stats.iterations.append(res.iterations)
        if res.converged:
            return res.x
        if block.nodes.size <= pol.fallback_max:
            self.stats.fallbacks += 1
            if block.factor is None:
                block.factor = self._factor(block.A, self.system.kernel_image()[block.nodes])
            return block.factor.solve(rhs)
        raise LinearSolverError(
            f"{block.kind} did not reach tol {pol.tol:g} on a component of size "
            f"{block.nodes.size}; last relative residual {res.history[-1]:.3e}")

    def solve(self, z) -> np.ndarray:
        q = self.system.q_signs
        rhs = q * np.asarray(z, dtype=float)
        u = np.zeros_like(rhs)
        for block in self.blocks:
            r = rhs[block.nodes]
            if block.kind == "scalar":
                if block.diag[0] > 0:
                    u[block.nodes] = r / block.diag
            elif block.kind == "direct":
                u[block.nodes] = block.factor.solve(r)
            else:
                u[block.nodes] = self._solve_iterative(block, r)
        return q * u


def hybrid_solve(system, z, policy=None, stats=None) -> np.ndarray:
    """Solve ``T xi = z`` by component splitting and direct/iterative dispatch."""
    solver = LaplacianSolver(system, policy)
    xi = solver.solve(z)
    if stats is not None:
        stats.extend(solver.stats)
    return xi


def schur_reduce(solver, pieces, z1, z2):
    """Solve the bordered system with the total-mass row eliminated.

    Returns ``(xi1, xi2)`` with ``T xi1 + psi xi2 = z1`` and
    ``psi^T xi1 + pi_tilde xi2 = z2``.

    Every cell is counted once in a column sum and once in a row sum, so
    ``psi = T S T^T e`` with ``e = 1/2``.  Hence ``psi = T e - g`` with
    ``g = (eps + t)/2``, and the Schur scalar
    ``pi_tilde - psi^T T^{-1} psi`` equals ``eps + e^T g - g^T T^{-1} g``.
    The second form avoids subtracting two numbers of size ``sum(s)`` whose
    difference is of size ``eps``.  The computed scalar is clipped below
    at ``eps``.
    """
    pt, psi, g = pieces.pi_tilde, pieces.psi, pieces.shift
    if pt <= 0:
        raise LinearSolverError("pi_tilde must be positive")
    e = np.full(psi.size, 0.5)
    w1 = solver.solve(z1)
    w2 = solver.solve(g)
    denom = (pt - psi @ e) + e @ g - g @ w2
    if not np.isfinite(denom):
        raise LinearSolverError(f"Schur scalar is not finite (pi_tilde {pt:.3e})")
    # a Schur complement of J is bounded below by its smallest eigenvalue,
    # at least eps; roundoff below that is clipped and left to refinement
    denom = max(denom, solver.system.epsilon)
    xi2 = (z2 - (e @ z1 - g @ w1)) / denom
    xi1 = w1 - xi2 * (e - w2)
    return xi1, xi2


def bordered_residual(system, xi, z) -> np.ndarray:
    """``z - J xi`` for the Newton matrix with total-mass row, in long double.

    ``J = eps I + diag(t, 0) + G S G^T`` is applied through ``Y``, so the
    only roundoff is that of the extended-precision accumulation.
    """
    ld = np.longdouble
    n, M = system.n, system.size
    Y = system.Y.tocoo()
    x = np.asarray(xi, dtype=ld)
    v = Y.data.astype(ld) * (x[Y.col] + x[n + Y.row] + x[M])
    out = ld(system.epsilon) * x
    out[:M] += system.t.astype(ld) * x[:M]
    np.add.at(out, Y.col, v)
    np.add.at(out, n + Y.row, v)
    out[M] += v.sum()
    return np.asarray(z, dtype=ld) - out


def solve_newton_system(system, z, s=None, r=0, policy=None, stats=None) -> np.ndarray:
    """Solve the full Newton system (with the total-mass row when ``r == 1``)."""
    z = np.asarray(z, dtype=float)
    policy = policy or HybridPolicy()
    solver = LaplacianSolver(system, policy)
    if r == 0:
        xi = solver.solve(z)
    else:
        M = system.size
        pieces = schur_pieces(system, s)
        xi1, xi2 = schur_reduce(solver, pieces, z[:M], float(z[M]))
        xi = np.concatenate([xi1, [xi2]])
        # the Schur scalar is a difference of O(t) terms, so refine
        for _ in range(policy.refine_steps):
            res = bordered_residual(system, xi, z)
            if not np.any(res):
                break
            d1, d2 = schur_reduce(solver, pieces, res[:M].astype(float), float(res[M]))
            xi = xi + np.concatenate([d1, [d2]])
    if stats is not None:
        stats.extend(solver.stats)
    return xi


def dense_newton_matrix(system, s=None, r=0) -> np.ndarray:
    """Dense ``eps I + K + G S G^T`` for testing and small fallbacks."""
    T = system.matrix().toarray()
    if r == 0:
        return T
    pieces = schur_pieces(system, s)
    M = system.size
    out = np.empty((M + 1, M + 1))
    out[:M, :M] = T
    out[:M, M] = out[M, :M] = pieces.psi
    out[M, M] = pieces.pi_tilde
    return out


def dense_newton_solve(system, z, s=None, r=0) -> np.ndarray:
    return dense_sym_solve(dense_newton_matrix(system, s, r), z, semidefinite=False)


def export_laplacian(system, path) -> None:
    """Write ``eps I + K + A0`` in Matrix Market coordinate format."""
    write_matrix_market(path, system.laplacian(), symmetric=True)
