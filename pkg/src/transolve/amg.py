"""Classical AMG W-cycle for nearly singular graph Laplacians.

Targets ``A = eps*I + Lambda + A0`` where ``A0`` is the Laplacian of a
connected graph and ``Lambda >= 0`` is diagonal.  The constant vector is
the (near-)kernel of every level because all prolongations satisfy
``P 1 = 1``; smoothers are augmented with an exact correction along it.

For ``eps = 0, Lambda = 0`` the operator is singular.  Such systems are
solved in the mean-zero subspace: the right-hand side is projected onto
``1^perp`` and iterates are re-centred after every cycle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .sparsela import as_csr, has_constant_kernel, ldl_factor, triple_product

__all__ = [
    "AmgConfig",
    "CfSplit",
    "Level",
    "AmgHierarchy",
    "AmgResult",
    "strength_of_connection",
    "strength_matrix",
    "cf_split",
    "bipartite_split",
    "build_interpolation",
    "galerkin_coarse",
    "smooth",
    "setup_hierarchy",
    "w_cycle",
    "amg_solve",
    "operator_complexity",
    "contraction_factor_estimate",
    "smoother_norm_estimate",
]

log = logging.getLogger(__name__)

JACOBI = "jacobi"
GAUSS_SEIDEL = "gauss-seidel"
IDEAL = "ideal"
STANDARD = "standard"
BIPARTITE = "bipartite"


@dataclass(frozen=True)
class AmgConfig:
    """Setup and cycle parameters.

    ``interpolation="bipartite"`` uses the two sides of a bipartite level-1
    graph as the F/C split (ideal interpolation, exact because ``A_FF`` is
    diagonal) and standard interpolation on all coarser levels.

    ``restrict_pattern`` keeps standard-interpolation weights only on the
    direct coarse neighbours of each fine node.  Without it the two-hop
    weights widen every coarse stencil and the operator complexity on
    9-point grids exceeds 3.
    """

    theta: int = 5
    omega: float = 0.5
    strength_delta: float = 0.25
    coarsest_max: int = 512
    direct_max: int = 512
    max_levels: int = 30
    stall_ratio: float = 0.9
    smoother_fine: str = JACOBI
    smoother_coarse: str = JACOBI
    interpolation: str = STANDARD
    restrict_pattern: bool = True

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError("theta must be >= 1")
        if not 0 < self.omega < 1 + 1e-12:
            raise ValueError("omega must lie in (0, 1]")
        if not 0 < self.strength_delta < 1:
            raise ValueError("strength_delta must lie in (0, 1)")
        if self.smoother_fine not in (JACOBI, GAUSS_SEIDEL):
            raise ValueError(f"unknown smoother {self.smoother_fine!r}")
        if self.smoother_coarse not in (JACOBI, GAUSS_SEIDEL):
            raise ValueError(f"unknown smoother {self.smoother_coarse!r}")
        if self.interpolation not in (IDEAL, STANDARD, BIPARTITE):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass(frozen=True)
class CfSplit:
    coarse: np.ndarray
    fine: np.ndarray

    @property
    def size(self) -> int:
        return self.coarse.size + self.fine.size


@dataclass
class Level:
    A: sp.csr_matrix
    P: sp.csr_matrix | None = None
    PT: sp.csr_matrix | None = None
    smoother: str = JACOBI
    kernel_image: np.ndarray | None = None   # A @ 1, propagated exactly
    eta: float = 0.0                         # 1^T A 1
    diag: np.ndarray | None = None
    lower: sp.csr_matrix | None = None       # D + L, Gauss-Seidel only
    upper: sp.csr_matrix | None = None       # D + U
    colors: tuple | None = None              # (first, second, A_sf, A_fs)
    factor: object = None                    # coarsest direct solver

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @property
    def nnz(self) -> int:
        return self.A.nnz


@dataclass
class AmgHierarchy:
    levels: list
    config: AmgConfig
    singular: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def sizes(self):
        return [lv.size for lv in self.levels]

    def table(self):
        """Rows ``(level, size, nnz)``, 1-based levels."""
        return [(i + 1, lv.size, lv.nnz) for i, lv in enumerate(self.levels)]


@dataclass
class AmgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    hierarchy: AmgHierarchy | None = None


# -- strength and splitting -------------------------------------------------------

def _offdiag_coo(A):
    A = A.tocoo()
    mask = (A.row != A.col) & (A.data != 0)
    return A.row[mask], A.col[mask], A.data[mask]


def _row_min_offdiag(A):
    N = A.shape[0]
    rows, _, vals = _offdiag_coo(A)
    out = np.full(N, np.inf)
    np.minimum.at(out, rows, vals)
    return out


def strength_of_connection(A, i, j) -> float:
    """``A_ij / max(min_k A_ik, min_k A_jk)`` over off-diagonal neighbours.

    Returns 0 when either node has no neighbours or ``A_ij = 0``.
    """
    A = sp.csr_matrix(A)
    aij = A[i, j]
    if aij == 0 or i == j:
        return 0.0

    def row_min(k):
        start, stop = A.indptr[k], A.indptr[k + 1]
        cols, vals = A.indices[start:stop], A.data[start:stop]
        vals = vals[(cols != k) & (vals != 0)]
        return vals.min() if vals.size else None

    mi, mj = row_min(i), row_min(j)
    if mi is None or mj is None:
        return 0.0
    return float(aij / max(mi, mj))


def strength_matrix(A, delta) -> sp.csr_matrix:
    """Boolean CSR pattern of strong connections ``s_A(i, j) > delta``."""
    A = as_csr(A)
    N = A.shape[0]
    rows, cols, vals = _offdiag_coo(A)
    rmin = _row_min_offdiag(A)
    denom = np.maximum(rmin[rows], rmin[cols])
    s = vals / denom
    keep = s > delta
    S = sp.csr_matrix((np.ones(keep.sum(), dtype=bool), (rows[keep], cols[keep])),
                      shape=(N, N))
    S.sort_indices()
    return S


def cf_split(A, delta=0.25) -> CfSplit:
    """Greedy maximal-independent-set C/F splitting in natural node order.

    The first unvisited node becomes coarse and its strong neighbours fine.
    Fine nodes left without a coarse strong neighbour are promoted.
    """
    S = strength_matrix(A, delta)
    N = S.shape[0]
    indptr, indices = S.indptr, S.indices
    visited = np.zeros(N, dtype=bool)
    is_coarse = np.zeros(N, dtype=bool)
    for i in range(N):
        if visited[i]:
            continue
        is_coarse[i] = True
        visited[i] = True
        visited[indices[indptr[i]:indptr[i + 1]]] = True
    # every fine node needs a coarse strong neighbour
    has_c = (S @ is_coarse.astype(float)) > 0
    orphan = ~is_coarse & ~has_c
    is_coarse |= orphan
    return CfSplit(coarse=np.flatnonzero(is_coarse), fine=np.flatnonzero(~is_coarse))


def bipartite_split(first, second) -> CfSplit:
    """F/C split along the sides of a bipartite graph; the larger side is fine."""
    first, second = np.asarray(first), np.asarray(second)
    if first.size >= second.size:
        return CfSplit(coarse=np.sort(second), fine=np.sort(first))
    return CfSplit(coarse=np.sort(first), fine=np.sort(second))


# -- interpolation ----------------------------------------------------------------

class _EmptyInterpolationRow(Exception):
    def __init__(self, nodes):
        super().__init__(f"{len(nodes)} fine nodes interpolate from nothing")
        self.nodes = nodes


def _interpolation_weights(A, split, kind, restrict_pattern=True):
    A = as_csr(A)
    F, C = split.fine, split.coarse
    A_FF = A[F][:, F]
    A_FC = A[F][:, C]
    d_F = A_FF.diagonal()
    Dinv = sp.diags(1.0 / d_F)
    if kind == IDEAL:
        off = A_FF - sp.diags(d_F)
        if off.count_nonzero() == 0:
            return -(Dinv @ A_FC)
        lu = spla.splu(A_FF.tocsc())
        W = -lu.solve(A_FC.toarray())
        W[np.abs(W) < 1e-15 * np.abs(W).max(initial=0.0)] = 0.0
        return sp.csr_matrix(W)
    # standard: one Jacobi sweep on A_FF W = -A_FC started from -D^{-1} A_FC
    W0 = -(Dinv @ A_FC)
    J = sp.identity(F.size, format="csr") - Dinv @ A_FF
    W = (W0 + J @ W0).tocsr()
    if restrict_pattern:
        W = W.multiply(A_FC != 0).tocsr()
    return W


def build_interpolation(A, split, kind=STANDARD, restrict_pattern=True) -> sp.csr_matrix:
    """Prolongation ``P`` (N x N_c) with coarse rows the identity and ``P 1 = 1``.

    Columns follow the order of ``split.coarse``.  Raises
    ``_EmptyInterpolationRow`` internally when a fine row sums to zero; the
    caller promotes those nodes (see :func:`_interpolation_with_repair`).
    """
    if kind == BIPARTITE:
        kind = IDEAL
    N = split.size
    F, C = split.fine, split.coarse
    W = _interpolation_weights(A, split, kind, restrict_pattern).tocoo()
    rows = np.concatenate([F[W.row], C])
    cols = np.concatenate([W.col, np.arange(C.size)])
    vals = np.concatenate([W.data, np.ones(C.size)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(N, C.size))
    P.sum_duplicates()
    P.eliminate_zeros()
    rowsum = np.asarray(P.sum(axis=1)).ravel()
    abssum = np.asarray(abs(P).sum(axis=1)).ravel()
    bad = rowsum <= 1e-12 * np.maximum(abssum, 1e-300)
    if bad.any():
        raise _EmptyInterpolationRow(np.flatnonzero(bad))
    P = as_csr(sp.diags(1.0 / rowsum) @ P)
    _fix_unit_rows(P)
    return P


def _fix_unit_rows(P, passes=4):
    """Adjust the last entry of each row so that ``P @ 1`` is exactly 1."""
    ones = np.ones(P.shape[1])
    for _ in range(passes):
        bad = np.flatnonzero(P @ ones != 1.0)
        if bad.size == 0:
            return
        for i in bad:
            lo, hi = P.indptr[i], P.indptr[i + 1]
            s = 0.0
            for v in P.data[lo:hi - 1]:
                s += v
            last = 1.0 - s
            if s + last != 1.0:
                last = np.nextafter(last, -np.inf if s + last > 1.0 else np.inf)
            P.data[hi - 1] = last


def _interpolation_with_repair(A, split, kind, restrict_pattern=True):
    while True:
        try:
            return split, build_interpolation(A, split, kind, restrict_pattern)
        except _EmptyInterpolationRow as exc:
            is_c = np.zeros(split.size, dtype=bool)
            is_c[split.coarse] = True
            is_c[exc.nodes] = True
            split = CfSplit(coarse=np.flatnonzero(is_c), fine=np.flatnonzero(~is_c))
            kind = STANDARD if kind == BIPARTITE else kind


def galerkin_coarse(A, P) -> sp.csr_matrix:
    """``P^T A P`` symmetrised against roundoff."""
    Ac = triple_product(P, A)
    Ac = as_csr(0.5 * (Ac + Ac.T))
    Ac.eliminate_zeros()
    return Ac


# -- smoothing --------------------------------------------------------------------

def _base_smoother(level, omega, r, transpose):
    if level.smoother == JACOBI:
        return omega * r / level.diag
    if level.colors is not None:
        first, second, A_sf, A_fs = level.colors
        x = np.zeros_like(r)
        if not transpose:
            x[first] = r[first] / level.diag[first]
            x[second] = (r[second] - A_sf @ x[first]) / level.diag[second]
        else:
            x[second] = r[second] / level.diag[second]
            x[first] = (r[first] - A_fs @ x[second]) / level.diag[first]
        return x
    if not transpose:
        return spla.spsolve_triangular(level.lower, r, lower=True)
    return spla.spsolve_triangular(level.upper, r, lower=False)


def _apply_rhat(level, omega, r, transpose, singular):
    """Kernel-augmented smoother applied to a residual ``r``."""
    if singular:
        return _base_smoother(level, omega, r, transpose)
    if level.eta <= 0:
        raise FloatingPointError("1^T A 1 <= 0 on a nonsingular level")
    if not transpose:
        c = r.sum() / level.eta
        return c + _base_smoother(level, omega, r - c * level.kernel_image, False)
    g = _base_smoother(level, omega, r, True)
    # R^T r - xi xi^T A R^T r / eta + xi xi^T r / eta
    return g + (r.sum() - level.kernel_image @ g) / level.eta


def smooth(level, x, rhs, omega=0.5, transpose=False, singular=False) -> np.ndarray:
    """One sweep ``x + Rhat (rhs - A x)`` (``Rhat^T`` when ``transpose``)."""
    return x + _apply_rhat(level, omega, rhs - level.A @ x, transpose, singular)


# -- setup -----------------------------------------------------------------------

def _prepare_level(A, smoother, kernel_image, colors=None):
    lv = Level(A=A, smoother=smoother, kernel_image=kernel_image,
               eta=float(kernel_image.sum()), diag=A.diagonal().copy())
    if np.any(lv.diag <= 0):
        raise ValueError("AMG requires a positive diagonal")
    if smoother == GAUSS_SEIDEL:
        if colors is not None:
            first, second = colors
            lv.colors = (first, second, A[second][:, first].tocsr(),
                         A[first][:, second].tocsr())
        else:
            lv.lower = sp.tril(A, format="csr")
            lv.upper = sp.triu(A, format="csr")
    return lv


def setup_hierarchy(A, config=None, kernel_image=None, singular=None,
                    bipartite_sides=None) -> AmgHierarchy:
    """Build the multilevel hierarchy.

    Parameters
    ----------
    A : sparse matrix
        Symmetric with positive diagonal.
    kernel_image : array, optional
        Exact ``A @ 1`` (e.g. ``eps + Lambda``); computed from ``A`` otherwise.
        Coarse levels get ``P^T`` of it, which is exact since ``P 1 = 1``.
    singular : bool, optional
        Treat ``A`` as a singular Laplacian.  Detected from the row sums
        when omitted.
    bipartite_sides : (array, array), optional
        The two colour classes of a bipartite level-1 graph; enables the
        bipartite F/C shortcut and the two-block Gauss-Seidel sweep.
    """
    config = config or AmgConfig()
    A = as_csr(A)
    if kernel_image is None:
        kernel_image = A @ np.ones(A.shape[0])
    kernel_image = np.asarray(kernel_image, dtype=float)
    if singular is None:
        singular = bool(np.all(kernel_image == 0)) or has_constant_kernel(A)
    levels = []
    colors = tuple(np.asarray(s) for s in bipartite_sides) if bipartite_sides else None
    current = A
    for depth in range(config.max_levels):
        smoother = config.smoother_fine if depth == 0 else config.smoother_coarse
        lv = _prepare_level(current, smoother, kernel_image,
                            colors if depth == 0 else None)
        levels.append(lv)
        N = current.shape[0]
        if N <= config.coarsest_max or depth == config.max_levels - 1:
            break
        kind = config.interpolation
        if kind == BIPARTITE and depth == 0 and colors is not None:
            split = bipartite_split(*colors)
        else:
            kind = STANDARD if kind == BIPARTITE else kind
            split = cf_split(current, config.strength_delta)
        if split.coarse.size == 0 or split.coarse.size > config.stall_ratio * N:
            log.debug("coarsening stalled at level %d (%d -> %d)", depth + 1, N,
                      split.coarse.size)
            break
        split, P = _interpolation_with_repair(current, split, kind,
                                              config.restrict_pattern)
        if split.coarse.size > config.stall_ratio * N:
            break
        lv.P = P
        lv.PT = P.T.tocsr()
        current = galerkin_coarse(current, P)
        kernel_image = lv.PT @ kernel_image
    last = levels[-1]
    if last.size <= config.direct_max:
        last.factor = ldl_factor(last.A.toarray(), semidefinite=singular,
                                 row_sums=np.zeros(last.size) if singular else last.kernel_image)
    return AmgHierarchy(levels=levels, config=config, singular=singular)


# -- cycling ---------------------------------------------------------------------

def w_cycle(hierarchy, zeta, e=None, level=0) -> np.ndarray:
    """One AMG W-cycle for ``A_level e = zeta`` starting from ``e``.

    Coarsest level: direct solve when factorized, else one ``Rhat`` sweep.
    Other levels: ``theta`` pre-sweeps with ``Rhat``, two recursive coarse
    corrections, ``theta`` post-sweeps with ``Rhat^T``.
    """
    cfg = hierarchy.config
    lv = hierarchy.levels[level]
    singular = hierarchy.singular
    e = np.zeros_like(zeta) if e is None else e.copy()
    if level == hierarchy.num_levels - 1:
        if lv.factor is not None:
            return e + lv.factor.solve(zeta - lv.A @ e)
        return smooth(lv, e, zeta, cfg.omega, False, singular)
    for _ in range(cfg.theta):
        e = smooth(lv, e, zeta, cfg.omega, False, singular)
    zc = lv.PT @ (zeta - lv.A @ e)
    ec = w_cycle(hierarchy, zc, None, level + 1)
    ec = w_cycle(hierarchy, zc, ec, level + 1)
    e = e + lv.P @ ec
    for _ in range(cfg.theta):
        e = smooth(lv, e, zeta, cfg.omega, True, singular)
    return e


def amg_solve(A, f, config=None, tol=1e-11, max_iter=100, x0=None, hierarchy=None,
              kernel_image=None, singular=None) -> AmgResult:
    """Stationary W-cycle iteration ``x <- x + B (f - A x)``.

    Stops when ``||A x - f|| <= tol * ||A x0 - f||``.  The iterate is kept
    as ``c 1 + x~`` with ``x~`` mean-zero and residuals are formed as
    ``f - A x~ - c A 1``; for tiny ``eps`` the constant part ``c`` is huge
    and forming ``A x`` directly would swamp the residual with roundoff.
    """
    if hierarchy is None:
        hierarchy = setup_hierarchy(A, config, kernel_image=kernel_image, singular=singular)
    fine = hierarchy.levels[0]
    A = fine.A
    f = np.asarray(f, dtype=float)
    if hierarchy.singular:
        f = f - f.mean()
    x = np.zeros(f.size) if x0 is None else np.array(x0, dtype=float)
    c = x.mean()
    x -= c
    if hierarchy.singular:
        c = 0.0

    def residual():
        return f - A @ x - c * fine.kernel_image

    r = residual()
    r0 = np.linalg.norm(r)
    history = [1.0]
    converged = r0 == 0.0
    it = 0
    while not converged and it < max_iter:
        x += w_cycle(hierarchy, r)
        shift = x.mean()
        x -= shift
        if not hierarchy.singular:
            c += shift
        r = residual()
        it += 1
        rel = np.linalg.norm(r) / r0
        history.append(rel)
        converged = rel <= tol
    return AmgResult(x + c, it, converged, history, hierarchy)


def operator_complexity(hierarchy) -> float:
    return sum(lv.nnz for lv in hierarchy.levels) / hierarchy.levels[0].nnz


# -- diagnostics -----------------------------------------------------------------

def _a_norm(A, x):
    return float(np.sqrt(max(x @ (A @ x), 0.0)))


def contraction_factor_estimate(hierarchy, trials=3, iters=40, seed=0) -> float:
    """Power-iteration estimate of ``||I - B A||_A`` for the W-cycle ``B``.

    Starting vectors are random and mean-zero; the largest estimate over
    ``trials`` starts is returned.
    """
    A = hierarchy.levels[0].A
    N = A.shape[0]
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(trials):
        x = rng.standard_normal(N)
        x -= x.mean()
        x /= _a_norm(A, x)
        rho = 0.0
        for _ in range(iters):
            y = x - w_cycle(hierarchy, A @ x)
            if hierarchy.singular:
                y -= y.mean()
            nrm = _a_norm(A, y)
            rho = nrm
            if nrm == 0.0:
                break
            x = y / nrm
        best = max(best, rho)
    return best


def smoother_norm_estimate(level, omega=0.5, singular=False, iters=200, seed=0) -> float:
    """``||I - Rhat A||_A`` via power iteration on its A-adjoint product."""
    A = level.A
    N = A.shape[0]
    x = np.random.default_rng(seed).standard_normal(N)
    x -= x.mean()
    x /= _a_norm(A, x)
    lam = 0.0
    for _ in range(iters):
        y = x - _apply_rhat(level, omega, A @ x, False, singular)
        y = y - _apply_rhat(level, omega, A @ y, True, singular)
        if singular:
            y -= y.mean()
        lam = _a_norm(A, y)
        if lam == 0.0:
            break
        x = y / lam
    return float(np.sqrt(lam))


def with_config(config, **changes) -> AmgConfig:
    return replace(config or AmgConfig(), **changes)
