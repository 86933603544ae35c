"""Inexact primal-dual outer loop.

Each outer step fixes a step size ``alpha_k``, forms the proximal weights
``tau = beta (1 + alpha) / alpha^2`` and ``eta = sigma + tau``, solves the
inner dual equation ``F_k(lambda) = 0`` with semismooth Newton, and updates

    u_{k+1} = proj_Sigma(D^{-1}(w - H^T lambda_{k+1})),
    v_{k+1} = u_{k+1} + (u_{k+1} - u_k) / alpha,
    beta_{k+1} = beta_k / (1 + alpha).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .problem import KktResidual, apply_constraint_operator, kkt_residuals, objective_h, \
    proj_sigma
from .reduction import HybridPolicy
from .ssn import InnerProblemView, SsnConfig, primal_from_dual, ssn_solve

__all__ = [
    "Constant",
    "Warmup",
    "Vanishing",
    "parse_schedule",
    "step_size_schedule",
    "IterateState",
    "StepParams",
    "IpdConfig",
    "TraceRow",
    "IpdResult",
    "IpdError",
    "LyapunovReference",
    "compute_step_params",
    "cold_start",
    "residual_scales",
    "lagrangian",
    "lyapunov_value",
    "ipd_solve",
    "config_to_dict",
    "config_from_dict",
    "recommended_schedule",
]

log = logging.getLogger(__name__)


# -- step-size schedules -------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def __call__(self, k, beta=None) -> float:
        return self.alpha

    def to_dict(self):
        return {"kind": "constant", "alpha": self.alpha}


@dataclass(frozen=True)
class Warmup:
    """``alpha_hi`` for ``k <= k0`` and ``alpha_lo`` afterwards."""

    alpha_hi: float = 10.0
    k0: int = 10
    alpha_lo: float = 0.5

    def __post_init__(self):
        if not (self.alpha_hi >= 1 > self.alpha_lo > 0):
            raise ValueError("warmup needs alpha_hi >= 1 > alpha_lo > 0")
        if self.k0 < 0:
            raise ValueError("k0 must be nonnegative")

    def __call__(self, k, beta=None) -> float:
        return self.alpha_hi if k <= self.k0 else self.alpha_lo

    def to_dict(self):
        return {"kind": "warmup", "alpha_hi": self.alpha_hi, "k0": self.k0,
                "alpha_lo": self.alpha_lo}


@dataclass(frozen=True)
class Vanishing:
    """Step sizes with ``alpha_k^2 = (k+1)^p beta_k^3 / beta_{k+1}^2``.

    With ``beta_{k+1} = beta_k / (1 + alpha_k)`` this reads
    ``alpha = q (1 + alpha)``, ``q = sqrt((k+1)^p beta_k)``, so
    ``alpha = q / (1 - q)``.  For ``q >= 1`` (only possible in the first
    steps) no positive root exists and ``alpha_max`` is used.
    """

    p: float = 1.0
    alpha_max: float = 10.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("p must be positive")
        if not self.alpha_max > 0:
            raise ValueError("alpha_max must be positive")

    def __call__(self, k, beta=None) -> float:
        if beta is None:
            raise ValueError("the vanishing schedule needs beta_k")
        q = math.sqrt((k + 1) ** self.p * beta)
        if q >= 1:
            return self.alpha_max
        return min(q / (1 - q), self.alpha_max)

    def to_dict(self):
        return {"kind": "vanishing", "p": self.p, "alpha_max": self.alpha_max}


def parse_schedule(value):
    """Schedule from a dict, an instance, or text like ``"constant:0.5"``,
    ``"warmup:10,10,0.5"`` or ``"vanishing:1"``."""
    if isinstance(value, (Constant, Warmup, Vanishing)):
        return value
    if isinstance(value, dict):
        value = dict(value)
        kind = value.pop("kind", "").lower()
        cls = {"constant": Constant, "warmup": Warmup, "vanishing": Vanishing}.get(kind)
        if cls is None:
            raise ValueError(f"unknown schedule kind {kind!r}")
        return cls(**value)
    if isinstance(value, str):
        kind, _, args = value.partition(":")
        vals = [float(v) for v in args.split(",") if v.strip()]
        kind = kind.strip().lower()
        if kind == "constant" and len(vals) == 1:
            return Constant(vals[0])
        if kind == "warmup" and len(vals) in (0, 3):
            return Warmup(vals[0], int(vals[1]), vals[2]) if vals else Warmup()
        if kind == "vanishing" and len(vals) in (1, 2):
            return Vanishing(*vals)
        raise ValueError(f"cannot parse schedule {value!r}")
    raise TypeError(f"unsupported schedule value {value!r}")


def step_size_schedule(kind, k, beta=None) -> float:
    return parse_schedule(kind)(k, beta)


def recommended_schedule(problem):
    """Warm-up schedule suited to the problem class.

    Quadratic problems (``sigma > 0``) use the default ``Warmup(10, 10, 0.5)``.
    Linear problems use ``Warmup(2, 10, 0.5)``: ten steps at ``alpha = 10``
    shrink ``beta`` to about ``1e-11``, where a cold-started inner solve on a
    linear program is badly conditioned and the outer loop stagnates.
    """
    if problem.sigma > 0:
        return Warmup()
    return Warmup(2.0, 10, 0.5)


# -- step parameters ---------------------------------------------------------------

@dataclass
class IterateState:
    beta: float
    u: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    k: int = 0

    def copy(self):
        return IterateState(self.beta, self.u.copy(), self.v.copy(), self.lam.copy(), self.k)


@dataclass(frozen=True)
class StepParams:
    alpha: float
    tau: float
    eta: float
    w: np.ndarray
    lambda_tilde: np.ndarray
    beta_next: float


def compute_step_params(state, alpha, problem) -> StepParams:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    beta = state.beta
    tau = beta * (1 + alpha) / alpha ** 2
    eta = problem.sigma + tau
    w = problem.c_tilde + beta * (state.u + alpha * state.v) / alpha ** 2
    beta_next = beta / (1 + alpha)
    Hu = apply_constraint_operator(problem, "forward", state.u)
    b = problem.b
    lt = beta_next * (state.lam - (Hu - b) / beta) - b
    return StepParams(alpha, tau, eta, w, lt, beta_next)


def cold_start(problem) -> IterateState:
    """Rank-one plan ``nu mu^T / sum(mu)`` clamped to the bounds, zero slacks."""
    mu, nu = problem.mu, problem.nu
    smu = mu.sum()
    if smu > 0:
        X = np.outer(nu, mu) / smu
        if problem.a is not None:
            X = np.outer(nu, mu) * problem.a / (smu * max(nu.sum(), 1e-300))
    else:
        X = np.zeros((problem.m, problem.n))
    u = np.zeros(problem.num_primal)
    u[:problem.mn] = X.ravel(order="F")
    u = proj_sigma(problem, u)
    return IterateState(1.0, u, u.copy(), np.zeros(problem.num_dual), 0)


def residual_scales(problem, u0, lam0, floor=1e-16) -> KktResidual:
    """Denominators of the relative KKT residual.

    The x-residual is normalized by its starting value.  The slack and
    feasibility residuals of a feasible start are exactly zero, so they are
    normalized by ``max(start value, |b|)``, where ``|b|`` is the feasibility
    residual of the zero plan.  All values are floored at ``floor``.
    """
    k0 = kkt_residuals(problem, u0, lam0)
    nb = float(np.linalg.norm(problem.b))
    return KktResidual(max(k0.res_x, floor), max(k0.res_y, nb, floor),
                       max(k0.res_z, nb, floor), max(k0.res_lambda, nb, floor))


# -- Lyapunov diagnostics -----------------------------------------------------------

def lagrangian(problem, u, lam) -> float:
    """``h(x) + <lambda, H u - b>`` (iterates stay in Sigma)."""
    x = u[:problem.mn]
    r = apply_constraint_operator(problem, "forward", u) - problem.b
    return objective_h(problem, x) + float(np.dot(lam, r))


@dataclass(frozen=True)
class LyapunovReference:
    u_star: np.ndarray
    lambda_star: np.ndarray


def lyapunov_value(state, reference, problem) -> float:
    us, ls = reference.u_star, reference.lambda_star
    gap = lagrangian(problem, state.u, ls) - lagrangian(problem, us, state.lam)
    dv = state.v - us
    dl = state.lam - ls
    return float(gap + 0.5 * state.beta * (dv @ dv + dl @ dl))


# -- driver ------------------------------------------------------------------------

@dataclass(frozen=True)
class IpdConfig:
    """Outer-loop settings.

    ``exact_inner_tol`` replaces the adaptive inner tolerance
    ``max(beta_k / (k+1)^2, ssn.tol_floor)`` by a fixed value.  The run
    stops as stagnated when the best relative residual has not improved for
    ``patience`` outer iterations (``None`` disables the check).  Once
    ``tau_k`` falls to about machine precision times the cost scale the
    inner equation can no longer be evaluated accurately, and further
    iterations only accumulate roundoff.
    """

    schedule: object = field(default_factory=Warmup)
    kkt_tol: float = 1e-6
    max_outer: int = 200
    ssn: SsnConfig = field(default_factory=SsnConfig)
    linear: HybridPolicy = field(default_factory=HybridPolicy)
    exact_inner_tol: float | None = None
    record_states: bool = False
    patience: int | None = 20

    def __post_init__(self):
        object.__setattr__(self, "schedule", parse_schedule(self.schedule))
        if not self.kkt_tol > 0:
            raise ValueError("kkt_tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")

    def inner_tol(self, beta, k) -> float:
        if self.exact_inner_tol is not None:
            return self.exact_inner_tol
        return max(beta / (k + 1) ** 2, self.ssn.tol_floor)


@dataclass(frozen=True)
class TraceRow:
    k: int
    alpha: float
    beta: float
    res_x: float
    res_y: float
    res_z: float
    res_lambda: float
    res: float
    it_ssn: int
    it_lin_max: int
    it_lin_avg: float
    ssn_residual: float
    ssn_status: str

    CSV_COLUMNS = ("k", "alpha", "beta", "res_x", "res_y", "res_z", "res_lambda",
                   "it_ssn", "it_lin_max", "it_lin_avg")

    def csv_row(self):
        return [getattr(self, c) for c in self.CSV_COLUMNS]


def config_to_dict(config) -> dict:
    """JSON-ready snapshot of an :class:`IpdConfig`."""
    ssn, lin = config.ssn, config.linear
    return {
        "schedule": config.schedule.to_dict(),
        "kkt_tol": config.kkt_tol,
        "max_outer": config.max_outer,
        "exact_inner_tol": config.exact_inner_tol,
        "patience": config.patience,
        "ssn": {"tau": ssn.tau_ls, "delta": ssn.delta_ls, "j_max": ssn.j_max,
                "tol_floor": ssn.tol_floor, "l_max": ssn.l_max},
        "linear": {"backend": lin.backend, "direct_threshold": lin.direct_threshold,
                   "tol": lin.tol, "max_iter": lin.max_iter,
                   "fallback_max": lin.fallback_max, "refine_steps": lin.refine_steps},
    }


def config_from_dict(d) -> IpdConfig:
    """Inverse of :func:`config_to_dict`; missing keys keep their defaults."""
    d = dict(d or {})
    unknown = set(d) - {"schedule", "kkt_tol", "max_outer", "exact_inner_tol", "patience",
                        "ssn", "linear"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    ssn_keys = {"tau": "tau_ls", "delta": "delta_ls", "j_max": "j_max",
                "tol_floor": "tol_floor", "l_max": "l_max"}
    ssn_in = d.pop("ssn", None) or {}
    bad = set(ssn_in) - set(ssn_keys)
    if bad:
        raise ValueError(f"unknown ssn keys: {sorted(bad)}")
    ssn = SsnConfig(**{ssn_keys[k]: v for k, v in ssn_in.items()})
    lin_in = dict(d.pop("linear", None) or {})
    linear = HybridPolicy(**lin_in)
    if "schedule" in d:
        d["schedule"] = parse_schedule(d["schedule"])
    return IpdConfig(ssn=ssn, linear=linear, **d)


@dataclass
class IpdResult:
    u: np.ndarray
    lam: np.ndarray
    state: IterateState
    status: str
    trace: list = field(default_factory=list)
    states: list = field(default_factory=list)
    linear_iterations: list = field(default_factory=list)
    best_residual: float = math.inf

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def total_ssn(self) -> int:
        return sum(r.it_ssn for r in self.trace)

    @property
    def linear_max(self) -> int:
        return max(self.linear_iterations, default=0)

    @property
    def linear_mean(self) -> float:
        return float(np.mean(self.linear_iterations)) if self.linear_iterations else 0.0

    @property
    def final_residual(self) -> float:
        """Relative residual of the returned iterate."""
        return self.best_residual


class IpdError(RuntimeError):
    """Inner-solver failure, carrying the outer iteration where it happened."""

    def __init__(self, k, cause):
        super().__init__(f"outer iteration {k}: {cause}")
        self.k = k
        self.cause = cause


def ipd_solve(problem, config=None, state=None, callback=None) -> IpdResult:
    """Run the outer loop until the relative KKT residual drops below ``kkt_tol``.

    The relative residual is the largest of the four KKT residuals divided
    by the scales of :func:`residual_scales`.  Without convergence the
    result carries the iterate with the smallest relative residual.
    """
    config = config or IpdConfig()
    state = cold_start(problem) if state is None else state.copy()
    kkt0 = residual_scales(problem, state.u, state.lam)
    result = IpdResult(state.u, state.lam, state, "max-outer")
    best, best_res, best_k = state, math.inf, 0
    if config.record_states:
        result.states.append(state.copy())
    for _ in range(config.max_outer):
        k = state.k
        alpha = config.schedule(k, state.beta)
        sp_ = compute_step_params(state, alpha, problem)
        view = InnerProblemView(problem, sp_.beta_next, sp_.eta, sp_.tau, sp_.w, sp_.lambda_tilde)
        ssn_cfg = replace(config.ssn, tol=config.inner_tol(state.beta, k))
        try:
            inner = ssn_solve(view, state.lam, ssn_cfg, config.linear)
        except (RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise IpdError(k, exc) from exc
        lam = inner.lam
        u = primal_from_dual(view, lam)
        v = u + (u - state.u) / alpha
        state = IterateState(sp_.beta_next, u, v, lam, k + 1)
        kkt = kkt_residuals(problem, u, lam, initial=kkt0)
        lin = [it for step in inner.linear_iterations for it in step]
        result.linear_iterations.extend(lin)
        row = TraceRow(k, alpha, state.beta, *kkt.as_tuple(), kkt.relative, inner.iterations,
                       max(lin, default=0), float(np.mean(lin)) if lin else 0.0,
                       inner.residual, inner.status)
        result.trace.append(row)
        if config.record_states:
            result.states.append(state.copy())
        if callback is not None:
            callback(state, row)
        log.debug("k=%d alpha=%g res=%.3e ssn=%d", k, alpha, kkt.relative, inner.iterations)
        if kkt.relative < best_res:
            best, best_res, best_k = state, kkt.relative, state.k
        if kkt.relative <= config.kkt_tol:
            result.status = "converged"
            break
        if config.patience is not None and state.k - best_k >= config.patience:
            result.status = "stagnated"
            break
    if result.status != "converged":
        state = best
    result.best_residual = best_res
    result.u, result.lam, result.state = state.u, state.lam, state
    return result
