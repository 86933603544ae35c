"""Generalized transport problems in vectorized affine form.

All plans are m x n matrices ``X`` and are flattened column-major,
``x[i + j*m] = X[i, j]``.  The constraint rows are ordered as

* ``n`` column-sum rows (``X.T @ 1 + y = mu``),
* ``m`` row-sum rows (``X @ 1 + z = nu``),
* ``r`` total-mass rows (``sum(X) = a``), ``r`` in {0, 1}.

The primal variable ``u = (x, y, z)`` lives in the box
``Sigma = [lower, upper] x Y x Z``; slack sets ``Y``/``Z`` are either the
nonnegative orthant or ``{0}``.  Infinite upper bounds are stored as
``np.inf`` and every routine that would multiply by a bound masks them out.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ConeKind",
    "CostKind",
    "ProblemError",
    "MassImbalanceError",
    "NegativityError",
    "InfeasibleFractionError",
    "DimensionError",
    "GeneralizedTransportProblem",
    "KktResidual",
    "build_optimal_transport",
    "build_birkhoff_projection",
    "build_partial_transport",
    "gen_cost",
    "apply_constraint_operator",
    "apply_g",
    "apply_gt",
    "objective_h",
    "proj_box",
    "proj_cone",
    "proj_sigma",
    "kkt_residuals",
    "problem_to_dict",
    "problem_from_dict",
    "save_problem",
    "load_problem",
]


class ConeKind(str, enum.Enum):
    NONNEGATIVE = "nonnegative"
    ZERO = "zero"


class CostKind(str, enum.Enum):
    RANDOM = "random"
    QUADRATIC_DISTANCE = "quadratic"


class ProblemError(ValueError):
    """Invalid problem data."""


class MassImbalanceError(ProblemError):
    pass


class NegativityError(ProblemError):
    pass


class InfeasibleFractionError(ProblemError):
    pass


class DimensionError(ProblemError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GeneralizedTransportProblem:
    """Data of ``min h(x)  s.t.  G x + I_Y y + I_Z z = b,  u in Sigma``.

    Vectors ``c``, ``phi``, ``lower`` and ``upper`` have length ``m*n`` in
    column-major order; ``mu`` has length ``n`` (column marginals) and ``nu``
    length ``m`` (row marginals).
    """

    m: int
    n: int
    c: np.ndarray
    sigma: float
    phi: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    a: float | None = None
    cone_y: ConeKind = ConeKind.ZERO
    cone_z: ConeKind = ConeKind.ZERO
    name: str = field(default="", compare=False)

    def __post_init__(self):
        m, n = int(self.m), int(self.n)
        if m < 1 or n < 1:
            raise DimensionError(f"plan dimensions must be positive, got {m}x{n}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)
        for key, size in (("c", m * n), ("phi", m * n), ("lower", m * n),
                          ("upper", m * n), ("mu", n), ("nu", m)):
            arr = np.asarray(getattr(self, key), dtype=float).ravel()
            if arr.shape != (size,):
                raise DimensionError(f"{key} must have length {size}, got {arr.size}")
            object.__setattr__(self, key, _frozen(arr))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "cone_y", ConeKind(self.cone_y))
        object.__setattr__(self, "cone_z", ConeKind(self.cone_z))
        if self.a is not None:
            object.__setattr__(self, "a", float(self.a))
        self._validate()

    def _validate(self):
        if not np.all(np.isfinite(self.c)):
            raise ProblemError("cost must be finite")
        lo, up = self.lower, self.upper
        if not np.all(np.isfinite(lo)) or np.any(lo < 0):
            raise ProblemError("lower bounds must be finite and nonnegative")
        if np.any(np.isnan(up)) or np.any(up < lo):
            raise ProblemError("upper bounds must satisfy lower <= upper")
        if np.any(self.mu < 0) or np.any(self.nu < 0):
            raise NegativityError("marginals must be nonnegative")
        if self.sigma < 0:
            raise ProblemError("sigma must be nonnegative")
        if self.sigma > 0 and np.any(self.phi < 0):
            raise NegativityError("anchor phi must be nonnegative when sigma > 0")
        if self.a is not None:
            amax = min(self.mu.sum(), self.nu.sum())
            if not (0 < self.a <= amax * (1 + 1e-12)):
                raise InfeasibleFractionError(
                    f"total mass a={self.a} must lie in (0, {amax}]")

    # -- sizes ---------------------------------------------------------------
    @property
    def r(self) -> int:
        return 0 if self.a is None else 1

    @property
    def mn(self) -> int:
        return self.m * self.n

    @property
    def num_primal(self) -> int:
        return self.m * self.n + self.n + self.m

    @property
    def num_dual(self) -> int:
        return self.m + self.n + self.r

    @property
    def pi_row(self) -> np.ndarray | None:
        return None if self.r == 0 else np.ones(self.mn)

    @property
    def b(self) -> np.ndarray:
        parts = [self.mu, self.nu]
        if self.r:
            parts.append([self.a])
        return np.concatenate(parts)

    @property
    def c_tilde(self) -> np.ndarray:
        """``(sigma*phi - c, 0, 0)``; minus the constant part of grad h."""
        out = np.zeros(self.num_primal)
        out[: self.mn] = self.sigma * self.phi - self.c
        return out

    def sigma_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper bounds of the full box ``Sigma`` (length mn+n+m)."""
        lo = np.zeros(self.num_primal)
        up = np.zeros(self.num_primal)
        lo[: self.mn] = self.lower
        up[: self.mn] = self.upper
        mn, n = self.mn, self.n
        if self.cone_y is ConeKind.NONNEGATIVE:
            up[mn:mn + n] = np.inf
        if self.cone_z is ConeKind.NONNEGATIVE:
            up[mn + n:] = np.inf
        return lo, up

    def split(self, u):
        """Views ``(x, y, z)`` of a primal vector."""
        mn, n = self.mn, self.n
        return u[:mn], u[mn:mn + n], u[mn + n:]

    def plan(self, x) -> np.ndarray:
        """Reshape a vectorized plan into its m x n matrix."""
        return np.asarray(x).reshape((self.m, self.n), order="F")


@dataclass(frozen=True)
class KktResidual:
    res_x: float
    res_y: float
    res_z: float
    res_lambda: float
    relative: float | None = None

    def as_tuple(self):
        return (self.res_x, self.res_y, self.res_z, self.res_lambda)

    def relative_to(self, initial: "KktResidual", floor: float = 1e-16) -> float:
        ratios = [v / max(v0, floor) for v, v0 in zip(self.as_tuple(), initial.as_tuple())]
        return max(ratios)


# -- builders ------------------------------------------------------------------

def _vec(M):
    return np.asarray(M, dtype=float).ravel(order="F")


def build_optimal_transport(C, mu, nu, rtol=1e-12) -> GeneralizedTransportProblem:
    """Balanced optimal transport ``min <C, X>`` over the transportation polytope.

    ``C`` is m x n, ``mu`` (length n) are the column sums and ``nu``
    (length m) the row sums of the plan.
    """
    C = np.asarray(C, dtype=float)
    mu = np.asarray(mu, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    if C.ndim != 2 or C.shape != (nu.size, mu.size):
        raise DimensionError(f"cost shape {C.shape} does not match ({nu.size}, {mu.size})")
    if np.any(mu < 0) or np.any(nu < 0):
        raise NegativityError("marginals must be nonnegative")
    smu, snu = mu.sum(), nu.sum()
    if abs(smu - snu) > rtol * max(smu, snu, 1e-300):
        raise MassImbalanceError(f"unbalanced marginals: sum(mu)={smu}, sum(nu)={snu}")
    m, n = C.shape
    return GeneralizedTransportProblem(
        m=m, n=n, c=_vec(C), sigma=0.0, phi=np.zeros(m * n),
        lower=np.zeros(m * n), upper=np.full(m * n, np.inf), mu=mu, nu=nu,
        name="ot")


def build_birkhoff_projection(Phi, fixed=None) -> GeneralizedTransportProblem:
    """Nearest doubly stochastic matrix in Frobenius norm.

    ``fixed`` is an iterable of ``(i, j, value)`` triples (0-based) pinning
    ``X[i, j] = value`` through equal lower and upper bounds.
    """
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != Phi.shape[1]:
        raise DimensionError("Phi must be square")
    if np.any(Phi < 0):
        raise NegativityError("Phi must be nonnegative")
    n = Phi.shape[0]
    lower = np.zeros(n * n)
    upper = np.full(n * n, np.inf)
    for i, j, value in fixed or ():
        i, j, value = int(i), int(j), float(value)
        if not (0 <= i < n and 0 <= j < n):
            raise DimensionError(f"fixed entry ({i}, {j}) out of bounds for n={n}")
        if not 0.0 <= value <= 1.0:
            raise ProblemError(f"fixed value {value} outside [0, 1]")
        lower[i + j * n] = upper[i + j * n] = value
    return GeneralizedTransportProblem(
        m=n, n=n, c=np.zeros(n * n), sigma=1.0, phi=_vec(Phi), lower=lower,
        upper=upper, mu=np.ones(n), nu=np.ones(n),
        name="birkhoff-fixed" if fixed else "birkhoff")


def build_partial_transport(C, mu, nu, a) -> GeneralizedTransportProblem:
    """Partial transport of a total mass ``a`` with marginal inequalities."""
    C = np.asarray(C, dtype=float)
    mu = np.asarray(mu, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    if C.ndim != 2 or C.shape != (nu.size, mu.size):
        raise DimensionError(f"cost shape {C.shape} does not match ({nu.size}, {mu.size})")
    if np.any(mu < 0) or np.any(nu < 0):
        raise NegativityError("marginals must be nonnegative")
    amax = min(mu.sum(), nu.sum())
    if not 0 < a <= amax * (1 + 1e-12):
        raise InfeasibleFractionError(f"fraction a={a} outside (0, {amax}]")
    m, n = C.shape
    return GeneralizedTransportProblem(
        m=m, n=n, c=_vec(C), sigma=0.0, phi=np.zeros(m * n),
        lower=np.zeros(m * n), upper=np.full(m * n, np.inf), mu=mu, nu=nu,
        a=min(float(a), amax), cone_y=ConeKind.NONNEGATIVE,
        cone_z=ConeKind.NONNEGATIVE, name="partial")


def gen_cost(kind, n: int, seed: int | None = None) -> np.ndarray:
    """Square cost matrices used in the benchmarks.

    ``random`` draws i.i.d. U[0, 1] entries from ``default_rng(seed)``.
    ``quadratic`` uses squared distances between the points of a uniform
    sqrt(n) x sqrt(n) grid on the unit square; point ``p`` sits at
    ``(p % k, p // k) * h`` with ``h = 1/(k-1)``.
    """
    kind = CostKind(kind)
    if kind is CostKind.RANDOM:
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, n))
    k = math.isqrt(n)
    if k * k != n:
        raise ProblemError(f"quadratic cost needs a perfect square size, got {n}")
    h = 1.0 / (k - 1) if k > 1 else 1.0
    p = np.arange(n)
    pts = np.column_stack([(p % k) * h, (p // k) * h])
    diff = pts[:, None, :] - pts[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# -- operators -------------------------------------------------------------------

def apply_g(problem, x) -> np.ndarray:
    """``G x`` = (column sums, row sums[, total mass])."""
    X = problem.plan(x)
    parts = [X.sum(axis=0), X.sum(axis=1)]
    if problem.r:
        parts.append([X.sum()])
    return np.concatenate(parts)


def apply_gt(problem, lam) -> np.ndarray:
    """``G^T lam`` as a vectorized m x n array."""
    m, n = problem.m, problem.n
    lam = np.asarray(lam, dtype=float)
    out = lam[None, :n] + lam[n:n + m, None]
    if problem.r:
        out = out + lam[n + m]
    return out.ravel(order="F")


def apply_constraint_operator(problem, direction: str, vector) -> np.ndarray:
    """Matrix-free ``H u`` (``direction="forward"``) or ``H^T lam`` ("adjoint")."""
    vector = np.asarray(vector, dtype=float)
    mn, m, n = problem.mn, problem.m, problem.n
    if direction == "forward":
        if vector.shape != (problem.num_primal,):
            raise DimensionError(
                f"forward expects length {problem.num_primal}, got {vector.shape}")
        x, y, z = problem.split(vector)
        out = apply_g(problem, x)
        out[:n] += y
        out[n:n + m] += z
        return out
    if direction == "adjoint":
        if vector.shape != (problem.num_dual,):
            raise DimensionError(
                f"adjoint expects length {problem.num_dual}, got {vector.shape}")
        out = np.empty(problem.num_primal)
        out[:mn] = apply_gt(problem, vector)
        out[mn:] = vector[:n + m]
        return out
    raise ValueError(f"unknown direction {direction!r}")


def objective_h(problem, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.mn,):
        raise DimensionError(f"x must have length {problem.mn}")
    val = float(problem.c @ x)
    if problem.sigma:
        d = x - problem.phi
        val += 0.5 * problem.sigma * float(d @ d)
    return val


def proj_box(v, lower, upper) -> np.ndarray:
    return np.minimum(np.maximum(v, lower), upper)


def proj_cone(v, kind) -> np.ndarray:
    if ConeKind(kind) is ConeKind.ZERO:
        return np.zeros_like(np.asarray(v, dtype=float))
    return np.maximum(v, 0.0)


def proj_sigma(problem, u) -> np.ndarray:
    lo, up = problem.sigma_bounds()
    return proj_box(u, lo, up)


def kkt_residuals(problem, u, lam, initial: KktResidual | None = None) -> KktResidual:
    """The four fixed-point residuals of the KKT system.

    When ``initial`` is given, ``relative`` is the largest ratio against it
    (denominators floored at 1e-16).
    """
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if u.shape != (problem.num_primal,) or lam.shape != (problem.num_dual,):
        raise DimensionError("inconsistent primal/dual dimensions")
    x, y, z = problem.split(u)
    m, n, s = problem.m, problem.n, problem.sigma
    grad_step = s * problem.phi + (1 - s) * x - problem.c - apply_gt(problem, lam)
    res_x = np.linalg.norm(x - proj_box(grad_step, problem.lower, problem.upper))
    res_y = np.linalg.norm(y - proj_cone(y - lam[:n], problem.cone_y))
    res_z = np.linalg.norm(z - proj_cone(z - lam[n:n + m], problem.cone_z))
    res_l = np.linalg.norm(apply_constraint_operator(problem, "forward", u) - problem.b)
    out = KktResidual(float(res_x), float(res_y), float(res_z), float(res_l))
    if initial is not None:
        out = KktResidual(*out.as_tuple(), relative=out.relative_to(initial))
    return out


# -- JSON i/o --------------------------------------------------------------------

def _rows(vec, m, n, null_inf=False):
    M = np.asarray(vec, dtype=float).reshape((m, n), order="F")
    if null_inf:
        return [[None if math.isinf(v) else float(v) for v in row] for row in M]
    return M.tolist()


def problem_to_dict(problem) -> dict:
    m, n = problem.m, problem.n
    return {
        "m": m, "n": n, "r": problem.r, "sigma": problem.sigma,
        "cost": _rows(problem.c, m, n),
        "phi": _rows(problem.phi, m, n),
        "lower": _rows(problem.lower, m, n),
        "upper": _rows(problem.upper, m, n, null_inf=True),
        "mu": problem.mu.tolist(), "nu": problem.nu.tolist(),
        "a": problem.a,
        "cone_y": problem.cone_y.value, "cone_z": problem.cone_z.value,
        "name": problem.name,
    }


def problem_from_dict(d) -> GeneralizedTransportProblem:
    try:
        m, n = int(d["m"]), int(d["n"])
        upper = np.array([[np.inf if v is None else v for v in row] for row in d["upper"]],
                         dtype=float)
        r = int(d.get("r", 0 if d.get("a") is None else 1))
        a = d.get("a")
        if (r == 1) != (a is not None):
            raise ProblemError("field 'r' inconsistent with 'a'")
        return GeneralizedTransportProblem(
            m=m, n=n, c=_vec(d["cost"]), sigma=d["sigma"], phi=_vec(d["phi"]),
            lower=_vec(d["lower"]), upper=upper.ravel(order="F"),
            mu=d["mu"], nu=d["nu"], a=a, cone_y=d["cone_y"], cone_z=d["cone_z"],
            name=d.get("name", ""))
    except (KeyError, TypeError) as exc:
        raise ProblemError(f"malformed problem document: {exc}") from exc


def save_problem(problem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=1))


def load_problem(path) -> GeneralizedTransportProblem:
    return problem_from_dict(json.loads(Path(path).read_text()))
