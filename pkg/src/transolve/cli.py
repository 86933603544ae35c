"""Command-line entry point: ``transolve {gen, solve, bench-amg, oracle, report}``.

Exit codes: 0 success, 2 non-convergence, 3 invalid input, 4 internal
solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .amg import setup_hierarchy
from .bench import BENCH_AMG_CONFIG, bench_amg, bench_matrix, grid_laplacian
from .ipd import IpdConfig, IpdError, TraceRow, config_from_dict, config_to_dict, \
    ipd_solve, parse_schedule, recommended_schedule
from .oracle import assignment_optimum, birkhoff2_projection, transport_vertex_optimum
from .problem import ConeKind, ProblemError, build_birkhoff_projection, \
    build_optimal_transport, build_partial_transport, gen_cost, load_problem, \
    objective_h, problem_to_dict, save_problem
from .sparsela import read_matrix_market

__all__ = [
    "EXIT_OK",
    "EXIT_NOT_CONVERGED",
    "EXIT_INVALID_INPUT",
    "EXIT_INTERNAL",
    "PROBLEM_KINDS",
    "RunReport",
    "generate_problem",
    "cmd_gen",
    "cmd_solve",
    "cmd_bench_amg",
    "cmd_oracle",
    "cmd_report",
    "main",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INVALID_INPUT = 3
EXIT_INTERNAL = 4

PROBLEM_KINDS = ("ot-random", "ot-quadratic", "birkhoff", "birkhoff-fixed",
                 "partial-random", "partial-quadratic")

# fraction of Birkhoff entries pinned by the entry-constrained generator
FIXED_FRACTION = 0.05

ASSIGNMENT_MAX_N = 7
TINY_OT_MAX = 3
BIRKHOFF_ORACLE_N = 2


class InputError(ValueError):
    """Bad command-line input; mapped to exit code 3."""


# -- instance generation ---------------------------------------------------------

def _positive_marginal(rng, size):
    w = 1.0 - rng.random(size)      # uniform on (0, 1]
    return w / w.sum()


def generate_problem(kind, n, seed=0):
    """Seeded instance of one of :data:`PROBLEM_KINDS` with an ``n x n`` plan.

    Costs come from :func:`transolve.problem.gen_cost`; marginals are
    uniform on (0, 1] and normalized to unit mass.  ``birkhoff`` draws
    ``Phi`` uniform on [0, 1].  ``birkhoff-fixed`` draws ``Phi`` uniform on
    [0, 2/n] and pins a seeded 5% subset of entries to their ``Phi`` values;
    the smaller scale keeps the pinned mass per row and column well below
    one.  Partial kinds draw the transported mass uniform on (0, a_max].
    """
    if kind not in PROBLEM_KINDS:
        raise InputError(f"unknown kind {kind!r}; choose from {', '.join(PROBLEM_KINDS)}")
    n = int(n)
    if n < 1:
        raise InputError("n must be positive")
    cost_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(data_seq)
    if kind.startswith("birkhoff"):
        if kind == "birkhoff":
            return build_birkhoff_projection(rng.random((n, n)))
        Phi = rng.random((n, n)) * (2.0 / n)
        count = max(1, round(FIXED_FRACTION * n * n))
        cells = rng.choice(n * n, size=count, replace=False)
        fixed = [(c % n, c // n, Phi[c % n, c // n]) for c in np.sort(cells)]
        return build_birkhoff_projection(Phi, fixed)
    cost_kind = "random" if kind.endswith("random") else "quadratic"
    try:
        C = gen_cost(cost_kind, n, seed=cost_seq)
    except ProblemError as exc:
        raise InputError(str(exc)) from exc
    mu = _positive_marginal(rng, n)
    nu = _positive_marginal(rng, n)
    if kind.startswith("ot"):
        problem = build_optimal_transport(C, mu, nu)
    else:
        a_max = min(mu.sum(), nu.sum())
        problem = build_partial_transport(C, mu, nu, a_max * (1.0 - rng.random()))
    return replace(problem, name=kind)


def cmd_gen(kind, n, seed, out_path=None):
    """Write the generated problem JSON to ``out_path`` (stdout when ``None``)."""
    problem = generate_problem(kind, n, seed)
    if out_path is None:
        sys.stdout.write(json.dumps(problem_to_dict(problem), indent=1) + "\n")
    else:
        save_problem(problem, out_path)
    return problem


# -- solve -----------------------------------------------------------------------

@dataclass
class RunReport:
    """Outcome of one solve; totals are aggregations of ``trace``."""

    problem: dict
    config: dict
    trace: list
    status: str
    objective: float
    final_residual: float
    wall_time: float
    backend: str = "amg"
    error: str | None = None
    timestamp: str = ""
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.totals:
            self.totals = self.aggregate(self.trace, self.backend)

    @staticmethod
    def aggregate(trace, backend="amg") -> dict:
        lin_max = max((row["it_lin_max"] for row in trace), default=0)
        counts = [row["it_lin_avg"] for row in trace if row["it_lin_max"] > 0]
        return {
            "itIPD": len(trace),
            "itSsN": sum(row["it_ssn"] for row in trace),
            f"it{backend}_max": lin_max,
            f"it{backend}_aver": float(np.mean(counts)) if counts else 0.0,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _trace_dicts(trace):
    return [{c: getattr(row, c) for c in TraceRow.CSV_COLUMNS} for row in trace]


def write_trace_csv(trace, path_or_file) -> None:
    """CSV trace with the fixed :attr:`TraceRow.CSV_COLUMNS` header."""
    own = not hasattr(path_or_file, "write")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TraceRow.CSV_COLUMNS)
        for row in trace:
            w.writerow([_fmt(v) for v in row.csv_row()])
    finally:
        if own:
            fh.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def load_config(path=None, tol=None, schedule=None, backend=None,
                problem=None) -> IpdConfig:
    """Read a JSON config and apply command-line overrides.

    Without a schedule from either source, ``problem`` (when given) selects
    :func:`~transolve.ipd.recommended_schedule`.
    """
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise InputError("config must be a JSON object")
    if tol is not None:
        d["kkt_tol"] = tol
    if schedule is not None:
        d["schedule"] = schedule
    if "schedule" not in d and problem is not None:
        d["schedule"] = recommended_schedule(problem)
    if backend is not None:
        d.setdefault("linear", {})
        d["linear"] = dict(d["linear"], backend=backend)
    try:
        cfg = config_from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    if cfg.linear.backend not in ("amg", "pcg"):
        raise InputError(f"unknown backend {cfg.linear.backend!r}")
    return cfg


def cmd_solve(problem_path, config_path=None, report_path=None, backend=None,
              tol=None, schedule=None, trace_path=None):
    """Run the full solver; returns ``(report, exit_code)``.

    The JSON report goes to ``report_path`` and the CSV trace to
    ``trace_path`` (default: the report path with suffix ``.csv``).
    """
    try:
        problem = load_problem(problem_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read problem {problem_path}: {exc}") from exc
    cfg = load_config(config_path, tol, schedule, backend, problem)
    meta = {"name": problem.name, "m": problem.m, "n": problem.n, "r": problem.r,
            "path": str(problem_path)}
    start = time.perf_counter()
    error, code = None, EXIT_OK
    try:
        result = ipd_solve(problem, cfg)
        trace, status, u = result.trace, result.status, result.u
        res = result.final_residual
        if not result.converged:
            code = EXIT_NOT_CONVERGED
    except IpdError as exc:
        log.error("solver failure: %s", exc)
        trace, status, u, res = [], "failed", None, math.inf
        error, code = str(exc), EXIT_INTERNAL
    wall = time.perf_counter() - start
    objective = objective_h(problem, u[:problem.mn]) if u is not None else math.nan
    report = RunReport(meta, config_to_dict(cfg), _trace_dicts(trace), status,
                       float(objective), float(res), wall, cfg.linear.backend, error,
                       time.strftime("%Y-%m-%dT%H:%M:%S"))
    if report_path is not None:
        report.write(report_path)
        trace_path = trace_path or Path(report_path).with_suffix(".csv")
    if trace_path is not None:
        write_trace_csv(trace, trace_path)
    return report, code


# -- benchmark -----------------------------------------------------------------------

BENCH_COLUMNS = ("1/h", "eps", "itamg", "itpcg", "J", "opcom")


def cmd_bench_amg(grid_k=(4, 6), eps_list=(1e-4, 1e-6, 1e-8, 1e-10, 0.0), tol=1e-11,
                  out=None, seed=0, matrix=None, hierarchy_csv=None, config=None):
    """AMG-vs-PCG table on grid Laplacians (or a Matrix Market matrix).

    Writes CSV with :data:`BENCH_COLUMNS` to ``out`` (stdout when ``None``);
    ``hierarchy_csv`` receives ``level, size, nnz`` rows of the first
    hierarchy per matrix.  Returns the list of row dicts.
    """
    config = config or BENCH_AMG_CONFIG
    if matrix is not None:
        try:
            A = read_matrix_market(matrix)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read matrix {matrix}: {exc}") from exc
        if A.shape[0] != A.shape[1]:
            raise InputError("benchmark matrix must be square")
        rows = bench_matrix(A, eps_list, tol, config, seed)
        graphs = [("matrix", A)]
    else:
        ks = [int(k) for k in np.atleast_1d(grid_k)]
        if any(k < 1 or k > 8 for k in ks):
            raise InputError("grid_k must lie in 1..8")
        rows = bench_amg(ks, eps_list, tol, config, seed)
        graphs = [(2 ** k, grid_laplacian(k)) for k in ks]
    dicts = [r.as_dict() for r in rows]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for d in dicts:
        w.writerow({k: (round(v, 4) if k == "opcom" else v) for k, v in d.items()})
    _emit(buf.getvalue(), out)
    if hierarchy_csv is not None:
        with open(hierarchy_csv, "w", newline="") as fh:
            hw = csv.writer(fh, lineterminator="\n")
            hw.writerow(("graph", "level", "size", "nnz"))
            for label, A in graphs:
                h = setup_hierarchy(A, config, singular=True)
                for level, size, nnz in h.table():
                    hw.writerow((label, level, size, nnz))
    return dicts


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# -- oracle ------------------------------------------------------------------------

def _is_plain_transport(p):
    return (p.r == 0 and p.sigma == 0 and p.cone_y is ConeKind.ZERO
            and p.cone_z is ConeKind.ZERO and np.all(p.lower == 0)
            and np.all(np.isinf(p.upper)))


def _is_plain_birkhoff(p):
    return (p.r == 0 and p.sigma > 0 and p.m == p.n and np.all(p.mu == 1)
            and np.all(p.nu == 1) and np.all(p.c == 0))


def cmd_oracle(problem_path, out=None) -> dict:
    """Brute-force optimum of a tiny instance: ``{objective, plan, method}``."""
    try:
        p = load_problem(problem_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read problem {problem_path}: {exc}") from exc
    C = p.plan(p.c)
    if _is_plain_birkhoff(p):
        if p.n > BIRKHOFF_ORACLE_N:
            raise InputError(f"Birkhoff oracle handles n <= {BIRKHOFF_ORACLE_N}")
        lower = p.plan(p.lower)
        upper = p.plan(p.upper)
        if p.n == 1:
            value = 0.5 * p.sigma * float((1.0 - p.phi[0]) ** 2)
            plan, method = np.ones((1, 1)), "single-plan"
        else:
            plan, value = birkhoff2_projection(p.plan(p.phi), lower, np.minimum(upper, 1.0))
            value *= p.sigma
            method = "birkhoff-2x2"
    elif _is_plain_transport(p):
        mass = p.mu[0]
        if p.m == p.n and np.allclose(p.mu, mass, rtol=1e-14) \
                and np.allclose(p.nu, mass, rtol=1e-14):
            if p.n > ASSIGNMENT_MAX_N:
                raise InputError(f"assignment oracle handles n <= {ASSIGNMENT_MAX_N}")
            value, plan = assignment_optimum(C, mass)
            method = "assignment"
        else:
            if max(p.m, p.n) > TINY_OT_MAX:
                raise InputError(f"general transport oracle handles m, n <= {TINY_OT_MAX}")
            value, plan = transport_vertex_optimum(C, p.mu, p.nu)
            method = "vertex-enumeration"
    else:
        raise InputError("oracle supports plain transport and Birkhoff projection only")
    doc = {"objective": float(value), "plan": np.asarray(plan).tolist(), "method": method}
    _emit(json.dumps(doc, indent=1) + "\n", out)
    return doc


# -- report ----------------------------------------------------------------------

REPORT_COLUMNS = ("name", "m", "n", "status", "itIPD", "itSsN", "backend", "itlin_max",
                  "itlin_aver", "res", "objective", "time")


def cmd_report(report_paths, out=None) -> list:
    """Summarize JSON run reports as one CSV row each."""
    rows = []
    for path in report_paths:
        try:
            d = json.loads(Path(path).read_text())
            backend = d["backend"]
            totals = RunReport.aggregate(d["trace"], backend)
            rows.append({
                "name": d["problem"].get("name", ""), "m": d["problem"]["m"],
                "n": d["problem"]["n"], "status": d["status"],
                "itIPD": totals["itIPD"], "itSsN": totals["itSsN"], "backend": backend,
                "itlin_max": totals[f"it{backend}_max"],
                "itlin_aver": round(totals[f"it{backend}_aver"], 2),
                "res": d["final_residual"], "objective": d["objective"],
                "time": round(d["wall_time"], 3),
            })
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"cannot read report {path}: {exc}") from exc
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), out)
    return rows


# -- argument parsing ----------------------------------------------------------------

def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    ap = argparse.ArgumentParser(prog="transolve", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a problem instance (JSON)")
    g.add_argument("kind", choices=PROBLEM_KINDS)
    g.add_argument("-n", type=int, required=True, help="plan size n x n")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output path (default: stdout)")

    s = sub.add_parser("solve", help="solve a problem and write a JSON report and CSV trace")
    s.add_argument("problem")
    s.add_argument("--config", help="solver config JSON")
    s.add_argument("--tol", type=float, help="KKT tolerance (overrides config)")
    s.add_argument("--schedule", help='step sizes, e.g. "constant:10" or "warmup:10,10,0.5"')
    s.add_argument("--backend", choices=("amg", "pcg"))
    s.add_argument("--out", help="report JSON path (trace CSV next to it)")
    s.add_argument("--trace", help="trace CSV path")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    b = sub.add_parser("bench-amg", help="AMG vs PCG iteration counts on grid Laplacians")
    b.add_argument("--grid-k", type=int, nargs="+", default=[4, 6])
    b.add_argument("--eps", type=_float_list, default=[1e-4, 1e-6, 1e-8, 1e-10, 0.0],
                   help="comma-separated shifts")
    b.add_argument("--tol", type=float, default=1e-11)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--matrix", help="Matrix Market Laplacian instead of the grid")
    b.add_argument("--hierarchy-csv", help="write level sizes of each hierarchy here")
    b.add_argument("--out", help="CSV path (default: stdout)")

    o = sub.add_parser("oracle", help="brute-force optimum of a tiny instance")
    o.add_argument("problem")
    o.add_argument("--out")

    r = sub.add_parser("report", help="summarize run reports as CSV")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen":
            cmd_gen(args.kind, args.n, args.seed, args.out)
            return EXIT_OK
        if args.command == "solve":
            if args.schedule is not None:
                parse_schedule(args.schedule)
            report, code = cmd_solve(args.problem, args.config, args.out, args.backend,
                                     args.tol, args.schedule, args.trace)
            if args.out is None:
                sys.stdout.write(json.dumps(report.to_dict(), indent=1,
                                            default=_json_default) + "\n")
            return code
        if args.command == "bench-amg":
            cmd_bench_amg(args.grid_k, args.eps, args.tol, args.out, args.seed,
                          args.matrix, args.hierarchy_csv)
            return EXIT_OK
        if args.command == "oracle":
            cmd_oracle(args.problem, args.out)
            return EXIT_OK
        if args.command == "report":
            cmd_report(args.reports, args.out)
            return EXIT_OK
    except (InputError, ProblemError, ValueError, OSError) as exc:
        print(f"transolve: error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except Exception as exc:   # noqa: BLE001 - report any solver crash as exit 4
        log.exception("internal failure")
        print(f"transolve: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    parser.error(f"unknown command {args.command}")
    return EXIT_INVALID_INPUT


if __name__ == "__main__":
    sys.exit(main())
