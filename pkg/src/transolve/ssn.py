"""Semismooth Newton solver for the inner dual equation ``F_k(lambda) = 0``.

For the proximal step with weights ``D = diag(eta I_mn, tau I_n, tau I_m)``
the inner problem is the minimization of the strongly convex dual function

    F(lambda) = beta/2 |lambda|^2 - <lt, lambda>
                + supp_Sigma(prox(q)) + 1/2 |p|_D^2,

    q = w - H^T lambda,   p = proj_Sigma(D^{-1} q),   prox(q) = q - D p,

whose gradient is ``beta lambda - H p - lt``.  Newton systems are solved
through :mod:`transolve.reduction`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .problem import apply_constraint_operator, proj_box
from .reduction import HybridPolicy, LinearStats, assemble_bipartite_laplacian, \
    solve_newton_system

__all__ = [
    "InnerProblemView",
    "SsnConfig",
    "SsnResult",
    "SupportOverflowError",
    "primal_from_dual",
    "roundoff_level",
    "eval_Fk",
    "eval_dual_objective",
    "clarke_diagonal",
    "build_newton_system",
    "newton_matvec",
    "dense_newton_jacobian",
    "armijo_line_search",
    "ray_minimizer",
    "ssn_solve",
]

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class SupportOverflowError(FloatingPointError):
    """An unbounded coordinate received a positive support-function argument."""


@dataclass(frozen=True)
class InnerProblemView:
    """Data of one inner problem: ``beta_next``, ``eta``, ``tau``, ``w``, ``lambda_tilde``."""

    problem: object
    beta_next: float
    eta: float
    tau: float
    w: np.ndarray
    lambda_tilde: np.ndarray

    def __post_init__(self):
        if not self.beta_next > 0:
            raise ValueError("beta_next must be positive")
        if not (self.eta > 0 and self.tau > 0):
            raise ValueError("eta and tau must be positive")

    @property
    def weights(self) -> np.ndarray:
        """Diagonal of ``D``."""
        mn = self.problem.mn
        d = np.full(self.problem.num_primal, self.tau)
        d[:mn] = self.eta
        return d

    @property
    def bounds(self):
        return self.problem.sigma_bounds()


@dataclass(frozen=True)
class SsnConfig:
    tau_ls: float = 0.2
    delta_ls: float = 0.9
    j_max: int = 15
    tol: float = 1e-11
    tol_floor: float = 1e-11
    l_max: int = 50
    min_iterations: int = 1

    def __post_init__(self):
        if not 0 < self.tau_ls < 0.5:
            raise ValueError("tau_ls must lie in (0, 1/2)")
        if not 0 < self.delta_ls < 1:
            raise ValueError("delta_ls must lie in (0, 1)")
        if self.j_max < 1 or self.l_max < 1:
            raise ValueError("j_max and l_max must be positive")


@dataclass
class SsnResult:
    lam: np.ndarray
    iterations: int
    residual: float
    converged: bool
    status: str = "converged"
    linear_iterations: list = field(default_factory=list)   # per step, per component
    residual_history: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    step_exponents: list = field(default_factory=list)   # -1 marks a ray-minimizer step
    recoveries: int = 0


def _adjoint(view, lam):
    return apply_constraint_operator(view.problem, "adjoint", lam)


def _forward(view, u):
    return apply_constraint_operator(view.problem, "forward", u)


def roundoff_level(view, lam, diag=None) -> float:
    """Size of the rounding error in ``F(lambda)``.

    Free coordinates of ``p`` are ``q / d`` with ``q = w - H^T lambda``
    formed by cancellation, so each carries an error of about
    ``eps (|w| + |H^T lambda|) / d``; clipped coordinates are exact.
    """
    if diag is None:
        diag = clarke_diagonal(view, lam)
    scale = (np.abs(view.w) + np.abs(_adjoint(view, lam))) * diag / view.weights
    return float(10.0 * _EPS * np.linalg.norm(scale))


def primal_from_dual(view, lam) -> np.ndarray:
    """``proj_Sigma(D^{-1}(w - H^T lambda))``."""
    lower, upper = view.bounds
    return proj_box((view.w - _adjoint(view, lam)) / view.weights, lower, upper)


def eval_Fk(view, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    return view.beta_next * lam - _forward(view, primal_from_dual(view, lam)) - view.lambda_tilde


def _support(v, lower, upper, q):
    """Support function of the box at ``v``; zero where ``v == 0``."""
    out = 0.0
    pos = v > 0
    neg = v < 0
    if pos.any():
        up = upper[pos]
        inf = ~np.isfinite(up)
        if inf.any():
            vi = v[pos][inf]
            if np.any(vi > 1e-10 * np.maximum(1.0, np.abs(q[pos][inf]))):
                raise SupportOverflowError("positive argument on an unbounded coordinate")
        out += float(np.dot(v[pos][~inf], up[~inf]))
    if neg.any():
        lo = lower[neg]
        inf = ~np.isfinite(lo)
        if inf.any():
            vi = v[neg][inf]
            if np.any(-vi > 1e-10 * np.maximum(1.0, np.abs(q[neg][inf]))):
                raise SupportOverflowError("negative argument on an unbounded coordinate")
        out += float(np.dot(v[neg][~inf], lo[~inf]))
    return out


def eval_dual_objective(view, lam) -> float:
    """Inner dual objective whose gradient is :func:`eval_Fk`."""
    lam = np.asarray(lam, dtype=float)
    lower, upper = view.bounds
    d = view.weights
    q = view.w - _adjoint(view, lam)
    z = q / d
    p = proj_box(z, lower, upper)
    v = np.where((z > lower) & (z < upper), 0.0, q - d * p)
    value = 0.5 * view.beta_next * (lam @ lam) - view.lambda_tilde @ lam
    return float(value + _support(v, lower, upper, q) + 0.5 * np.dot(d * p, p))


def clarke_diagonal(view, lam) -> np.ndarray:
    """0/1 element of the Clarke Jacobian of the box projection.

    ``d_i = 1`` exactly when ``D^{-1}(w - H^T lambda)`` lies strictly inside
    the bounds; boundary points and fixed coordinates get 0.
    """
    lower, upper = view.bounds
    z = (view.w - _adjoint(view, lam)) / view.weights
    return ((z > lower) & (z < upper)).astype(float)


def build_newton_system(view, diag):
    """Generic-form data of ``beta I + H D^{-1} U H^T``.

    Returns ``(system, s, r)`` where ``system`` is the reduced Laplacian
    system with ``eps = beta_next``, ``s = d_x / eta``, ``t = d_yz / tau``.
    """
    p = view.problem
    mn = p.mn
    diag = np.asarray(diag, dtype=float)
    s = diag[:mn] / view.eta
    t = diag[mn:] / view.tau
    system = assemble_bipartite_laplacian(s, t, view.beta_next, p.m, p.n)
    return system, s, p.r


def newton_matvec(view, diag, v) -> np.ndarray:
    """Matrix-free ``(beta I + H D^{-1} U H^T) v``."""
    v = np.asarray(v, dtype=float)
    return view.beta_next * v + _forward(view, diag * _adjoint(view, v) / view.weights)


def dense_newton_jacobian(view, diag) -> np.ndarray:
    """Dense Newton matrix assembled column by column (small instances only)."""
    N = view.problem.num_dual
    eye = np.eye(N)
    return np.column_stack([newton_matvec(view, diag, eye[:, j]) for j in range(N)])


def armijo_line_search(view, lam, direction, config=None, F=None, fval=None):
    """Backtracking search ``lambda + delta^l xi`` with sufficient decrease.

    Returns ``(l, new_lambda, new_value)``; ``l`` is ``None`` when no step
    within ``l_max`` backtracks satisfies the test.  A roundoff allowance of
    a few ulps of the objective keeps the test meaningful near the minimum.
    """
    config = config or SsnConfig()
    F = eval_Fk(view, lam) if F is None else F
    fval = eval_dual_objective(view, lam) if fval is None else fval
    slope = float(F @ direction)
    allowance = 10.0 * _EPS * (1.0 + abs(fval))
    step = 1.0
    for ell in range(config.l_max + 1):
        trial = lam + step * direction
        tval = eval_dual_objective(view, trial)
        if tval <= fval + config.tau_ls * step * slope + allowance:
            return ell, trial, tval
        step *= config.delta_ls
    return None, lam, fval


def ray_minimizer(view, lam, direction, max_doublings=200):
    """Exact minimizer ``t > 0`` of the dual objective along ``lam + t xi``.

    The objective is convex and piecewise quadratic along the ray, so its
    derivative ``<F(lam + t xi), xi>`` is nondecreasing; the root is
    bracketed by doubling and located with Brent's method.  Returns ``None``
    when ``xi`` is not a descent direction.
    """
    def slope(t):
        return float(eval_Fk(view, lam + t * direction) @ direction)

    if slope(0.0) >= 0:
        return None
    hi = 1.0
    for _ in range(max_doublings):
        if slope(hi) >= 0:
            break
        hi *= 2.0
    else:
        return hi
    return brentq(slope, 0.0, hi, xtol=1e-14 * hi, rtol=4 * _EPS, maxiter=200)


def _recover_step(view, lam, fval, candidates):
    for xi in candidates:
        t = ray_minimizer(view, lam, xi)
        if t is None or t <= 0:
            continue
        trial = lam + t * xi
        tval = eval_dual_objective(view, trial)
        if tval < fval:
            return trial, tval
    return None, fval


def ssn_solve(view, lam0, config=None, policy=None) -> SsnResult:
    """Damped semismooth Newton iteration until ``|F(lambda)| <= tol``.

    Each step solves ``J xi = -F`` through the graph-Laplacian reduction,
    falls back to ``-F`` when ``xi`` is not a descent direction, and
    backtracks with the Armijo rule.  When ``l_max`` backtracks do not
    suffice (typically when almost every coordinate is clipped and ``J`` is
    close to ``beta I``, making the Newton step far too long) the step is
    taken to the exact minimizer along the Newton ray, or along ``-F``.
    Exhausting ``j_max`` or failing both recoveries returns the current
    iterate with a non-converged status.  The iteration also stops, with
    status ``"roundoff"``, once ``|F|`` is within :func:`roundoff_level`.
    """
    config = config or SsnConfig()
    policy = policy or HybridPolicy()
    lam = np.array(lam0, dtype=float)
    F = eval_Fk(view, lam)
    fval = eval_dual_objective(view, lam)
    res = float(np.linalg.norm(F))
    out = SsnResult(lam, 0, res, False, "max-iterations",
                    residual_history=[res], objective_history=[fval])
    j = 0
    while j < config.j_max:
        if res <= config.tol and j >= config.min_iterations:
            break
        if res == 0.0:
            break
        diag = clarke_diagonal(view, lam)
        if j >= config.min_iterations and res <= roundoff_level(view, lam, diag):
            out.status = "roundoff"
            break
        system, s, r = build_newton_system(view, diag)
        stats = LinearStats()
        xi = solve_newton_system(system, -F, s, r, policy, stats)
        out.linear_iterations.append(list(stats.iterations))
        if not np.all(np.isfinite(xi)) or F @ xi >= 0:
            log.debug("non-descent Newton direction; using -F")
            xi = -F
        ell, lam_new, fnew = armijo_line_search(view, lam, xi, config, F, fval)
        if ell is None:
            # damped Newton: shift the diagonal by |F| to shorten the step
            damped = replace(system, epsilon=system.epsilon + res)
            xi_d = solve_newton_system(damped, -F, s, r, policy, stats)
            ell, lam_new, fnew = armijo_line_search(view, lam, xi_d, config, F, fval)
            if ell is not None:
                ell = -2
        if ell is None:
            lam_new, fnew = _recover_step(view, lam, fval, (xi, -F))
            if lam_new is None:
                out.status = "line-search-stall"
                break
            ell = -1
            out.recoveries += 1
        lam, fval = lam_new, fnew
        F = eval_Fk(view, lam)
        res = float(np.linalg.norm(F))
        j += 1
        out.step_exponents.append(ell)
        out.residual_history.append(res)
        out.objective_history.append(fval)
    out.lam = lam
    out.iterations = j
    out.residual = res
    out.converged = res <= config.tol
    if out.converged:
        out.status = "converged"
    elif out.status == "max-iterations" and j < config.j_max:
        out.status = "stalled"
    return out
