"""Inexact primal-dual solver for transport-like linear and quadratic programs.

The outer loop (:mod:`transolve.ipd`) solves a strongly convex dual
equation per step with semismooth Newton (:mod:`transolve.ssn`); Newton
systems reduce to bipartite graph Laplacians (:mod:`transolve.reduction`)
solved by algebraic multigrid (:mod:`transolve.amg`).
"""

__version__ = "0.1.0"

from .amg import AmgConfig, amg_solve, setup_hierarchy
from .ipd import Constant, IpdConfig, IpdResult, Vanishing, Warmup, ipd_solve
from .problem import (
    GeneralizedTransportProblem,
    build_birkhoff_projection,
    build_optimal_transport,
    build_partial_transport,
    gen_cost,
    kkt_residuals,
    load_problem,
    objective_h,
    save_problem,
)
from .reduction import HybridPolicy
from .ssn import SsnConfig

__all__ = [
    "__version__",
    "AmgConfig",
    "amg_solve",
    "setup_hierarchy",
    "Constant",
    "Warmup",
    "Vanishing",
    "IpdConfig",
    "IpdResult",
    "ipd_solve",
    "GeneralizedTransportProblem",
    "build_optimal_transport",
    "build_birkhoff_projection",
    "build_partial_transport",
    "gen_cost",
    "kkt_residuals",
    "objective_h",
    "load_problem",
    "save_problem",
    "HybridPolicy",
    "SsnConfig",
]
