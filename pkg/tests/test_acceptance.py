"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import functools
import time

import numpy as np
import scipy.sparse as sp

from oracles import random_newton_data, refined_dense_solve
from transolve.amg import AmgConfig, contraction_factor_estimate, operator_complexity, \
    setup_hierarchy
from transolve.bench import BENCH_AMG_CONFIG, bench_amg, grid_laplacian, path_laplacian, \
    square_grid_laplacian
from transolve.cli import cmd_oracle, generate_problem
from transolve.ipd import Constant, IpdConfig, LyapunovReference, ipd_solve, lyapunov_value, \
    recommended_schedule
from transolve.problem import (
    apply_constraint_operator, build_birkhoff_projection, build_optimal_transport,
    build_partial_transport, gen_cost, objective_h, save_problem,
)
from transolve.reduction import HybridPolicy, assemble_bipartite_laplacian, split_components, \
    solve_newton_system
from transolve.ssn import InnerProblemView, clarke_diagonal, dense_newton_jacobian, \
    eval_dual_objective, eval_Fk, newton_matvec

EPS_LIST = (1e-4, 1e-6, 1e-8, 1e-10, 0.0)


def _verdict(number, title, ok, detail):
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
    assert ok, detail


@functools.lru_cache(maxsize=None)
def _table1():
    rows = bench_amg([4, 6], EPS_LIST, tol=1e-11)
    return {(r.inv_h, r.eps): r for r in rows}


def test_criterion_01_amg_robustness():
    rows = _table1()
    worst = max(r.itamg for r in rows.values())
    counts = {k: r.itamg for k, r in sorted(rows.items())}
    _verdict(1, "AMG reaches 1e-11 in <= 15 W-cycles on 1/h in {16, 64}", worst <= 15,
             f"max itamg {worst}; {counts}")


def test_criterion_02_amg_vs_pcg_trend():
    rows = _table1()
    ok = True
    parts = []
    for eps in EPS_LIST:
        a, b = rows[(16, eps)], rows[(64, eps)]
        ratio = b.itpcg / a.itpcg
        damg = abs(b.itamg - a.itamg)
        ok &= ratio >= 2.5 and damg <= 5
        parts.append(f"eps={eps:g}: pcg x{ratio:.2f}, amg +{damg}")
    _verdict(2, "itpcg grows >= 2.5x from 1/h=16 to 64 while itamg moves <= 5", ok,
             "; ".join(parts))


def test_criterion_03_operator_complexity():
    ok = True
    parts = []
    for k in range(1, 9):
        h = setup_hierarchy(grid_laplacian(k), BENCH_AMG_CONFIG, singular=True)
        opcom = operator_complexity(h)
        ok &= opcom <= 2.0 and h.num_levels <= 7
        parts.append(f"1/h={2 ** k}: J={h.num_levels} opcom={opcom:.3f}")
    _verdict(3, "opcom <= 2.0 and J <= 7 for 1/h <= 256", ok, "; ".join(parts))


def test_criterion_04_oracle_equivalence(tmp_path):
    rng = np.random.default_rng(5)
    cfg = IpdConfig(kkt_tol=1e-7, max_outer=40)
    start = time.perf_counter()
    errs = []
    instances = []
    for _ in range(20):
        n = int(rng.integers(2, 7))
        instances.append(build_optimal_transport(rng.random((n, n)), np.ones(n), np.ones(n)))
    for _ in range(20):
        m, n = (int(v) for v in rng.integers(1, 4, 2))
        mu, nu = rng.random(n) + 0.1, rng.random(m) + 0.1
        nu *= mu.sum() / nu.sum()
        instances.append(build_optimal_transport(rng.random((m, n)), mu, nu))
    for i, p in enumerate(instances):
        path = tmp_path / f"p{i}.json"
        save_problem(p, path)
        oracle = cmd_oracle(path, out=tmp_path / f"o{i}.json")["objective"]
        res = ipd_solve(p, cfg)
        errs.append(abs(objective_h(p, res.u[:p.mn]) - oracle))
    elapsed = time.perf_counter() - start
    _verdict(4, "ipd objective within 1e-6 of brute-force oracle on 20 + 20 instances",
             max(errs) <= 1e-6 and elapsed < 60,
             f"max |diff| {max(errs):.2e}, {elapsed:.1f}s")


def test_criterion_05_birkhoff_outer_counts():
    cfg = IpdConfig(schedule=Constant(10), kkt_tol=1e-6)
    ok = True
    parts = []
    for n in (100, 300):
        Phi = np.random.default_rng(n).random((n, n))
        zeros = [(i, (i + 1) % n, 0.0) for i in range(n)] + [(i, (i + 3) % n, 0.0) for i in range(n)]
        cases = [("plain", build_birkhoff_projection(Phi)),
                 ("pinned zeros", build_birkhoff_projection(Phi, zeros)),
                 ("birkhoff-fixed", generate_problem("birkhoff-fixed", n, seed=1))]
        for label, p in cases:
            res = ipd_solve(p, cfg)
            ok &= res.converged and res.iterations <= 20 and res.final_residual <= 1e-6
            parts.append(f"n={n} {label}: itIPD={res.iterations} Res={res.final_residual:.1e}")
    _verdict(5, "Birkhoff projection itIPD <= 20 to Res <= 1e-6 with Constant(10)", ok,
             "; ".join(parts))


def test_criterion_06_linear_convergence():
    n = 100
    p = build_optimal_transport(gen_cost("quadratic", n), np.ones(n) / n, np.ones(n) / n)
    res = ipd_solve(p, IpdConfig(schedule=Constant(0.5), kkt_tol=1e-6, record_states=True,
                                 exact_inner_tol=1e-11))
    viol = [np.linalg.norm(apply_constraint_operator(p, "forward", s.u) - p.b)
            for s in res.states]
    C = viol[5] * 1.5 ** 5
    ratio = max(viol[k] / (C * 1.5 ** -k) for k in range(5, len(viol)))
    beta_err = max(abs(s.beta - 1.5 ** -s.k) / 1.5 ** -s.k for s in res.states)
    ok = res.converged and ratio <= 1.0 and beta_err <= 1e-14
    _verdict(6, "|Hu_k - b| <= C 1.5^-k with C fitted at k=5, beta_k = 1.5^-k", ok,
             f"{res.iterations} iterations, max ratio {ratio:.6f}, beta rel err {beta_err:.1e}")


def test_criterion_07_lyapunov_contraction():
    sched = Constant(0.5)
    worst = -np.inf
    parts = []
    for seed in range(2):
        rng = np.random.default_rng(seed)
        for n in (10, 30, 50):
            Phi = rng.random((n, n))
            for fixed in (None, [(i, (i + 1) % n, 0.0) for i in range(n)]):
                p = build_birkhoff_projection(Phi, fixed)
                ref = ipd_solve(p, IpdConfig(schedule=sched, kkt_tol=1e-12, max_outer=300,
                                             exact_inner_tol=1e-12))
                assert ref.converged
                reference = LyapunovReference(ref.u, ref.lam)
                run = ipd_solve(p, IpdConfig(schedule=sched, kkt_tol=1e-300, max_outer=30,
                                             exact_inner_tol=1e-12, record_states=True,
                                             patience=None))
                E = [lyapunov_value(s, reference, p) for s in run.states]
                for k, row in enumerate(run.trace):
                    worst = max(worst, E[k + 1] * (1 + row.alpha) - E[k] * (1 + 1e-6))
                parts.append(f"n={n}{'f' if fixed else ''}")
    _verdict(7, "E_{k+1}(1+alpha_k) <= E_k (1+1e-6) in exact-inner mode", worst <= 0,
             f"{len(parts)} instances, worst excess {worst:.2e}")


def test_criterion_08_ssn_derivative_checks():
    rng = np.random.default_rng(8)
    fd_worst = jac_worst = 0.0
    for kind, m, n in (("ot", 3, 4), ("partial", 6, 5), ("birkhoff", 6, 6), ("ot", 6, 6)):
        mu, nu = rng.random(n) + 0.1, rng.random(m) + 0.1
        if kind == "ot":
            nu *= mu.sum() / nu.sum()
            p = build_optimal_transport(rng.random((m, n)), mu, nu)
        elif kind == "partial":
            p = build_partial_transport(rng.random((m, n)), mu, nu, 0.7 * min(mu.sum(), nu.sum()))
        else:
            p = build_birkhoff_projection(rng.random((n, n)) * 2 / n)
        N = p.num_dual
        for _ in range(20):
            w = rng.standard_normal(p.num_primal)
            view = InnerProblemView(p, float(rng.uniform(0.1, 1)), float(rng.uniform(0.5, 2)),
                                    float(rng.uniform(0.1, 1)), w, rng.standard_normal(N))
            lam = 0.5 * rng.standard_normal(N)
            F = eval_Fk(view, lam)
            fd = np.array([(eval_dual_objective(view, lam + 1e-6 * e)
                            - eval_dual_objective(view, lam - 1e-6 * e)) / 2e-6
                           for e in np.eye(N)])
            fd_worst = max(fd_worst, np.linalg.norm(fd - F) / np.linalg.norm(F))
            diag = clarke_diagonal(view, lam)
            J = dense_newton_jacobian(view, diag)
            v = rng.standard_normal(N)
            jac_worst = max(jac_worst, np.linalg.norm(newton_matvec(view, diag, v) - J @ v)
                            / np.linalg.norm(J @ v))
            # independent dense assembly through H = [G, I_Y, I_Z]
            Jd = view.beta_next * np.eye(N)
            for i in np.flatnonzero(diag):
                h = apply_constraint_operator(p, "forward", np.eye(p.num_primal)[i])
                Jd += np.outer(h, h) / view.weights[i]
            jac_worst = max(jac_worst, np.linalg.norm(J - Jd) / np.linalg.norm(Jd))
    _verdict(8, "finite differences vs F_k <= 1e-5, matrix-free J_k vs dense <= 1e-12",
             fd_worst <= 1e-5 and jac_worst <= 1e-12,
             f"fd {fd_worst:.1e}, jacobian {jac_worst:.1e}")


def test_criterion_09_reduction_end_to_end():
    rng = np.random.default_rng(9)
    worst = 0.0
    bordered = multi = 0
    for _ in range(50):
        s, t, eps, m, n, r = random_newton_data(rng)
        system = assemble_bipartite_laplacian(s, t, eps, m, n)
        bordered += r
        multi += split_components(system).count > 1
        z = rng.standard_normal(m + n + r)
        pol = HybridPolicy(direct_threshold=int(rng.integers(1, 5)))
        xi = solve_newton_system(system, z, s, r, pol)
        ref = refined_dense_solve(s, t, eps, m, n, r, z)
        worst = max(worst, np.linalg.norm(xi - ref) / np.linalg.norm(ref))
    _verdict(9, "hybrid solve matches dense Newton solve to 1e-9 on 50 instances",
             worst <= 1e-9 and bordered > 0 and multi > 0,
             f"worst rel err {worst:.1e}, {bordered} with mass row, {multi} multi-component")


def _two_level_rho(L, eps):
    N = L.shape[0]
    A = (L + eps * sp.identity(N)).tocsr()
    cfg = AmgConfig(coarsest_max=8, direct_max=N, max_levels=2)
    h = setup_hierarchy(A, cfg, kernel_image=np.full(N, eps), singular=eps == 0)
    assert h.num_levels == 2
    return contraction_factor_estimate(h)


def test_criterion_10_two_level_contraction():
    graphs = {"path100": path_laplacian(100), "grid100": square_grid_laplacian(10),
              "path400": path_laplacian(400), "grid400": square_grid_laplacian(20),
              "path1600": path_laplacian(1600), "grid1600": square_grid_laplacian(40)}
    ok = True
    parts = []
    for name, L in graphs.items():
        rhos = [_two_level_rho(L, eps) for eps in (1e-4, 1e-6, 1e-8, 1e-10, 1e-14, 0.0)]
        spread = max(rhos) - min(rhos)
        ok &= spread <= 0.1 and max(rhos) < 1
        parts.append(f"{name}: rho {min(rhos):.3f}-{max(rhos):.3f}")
    _verdict(10, "two-level contraction varies <= 0.1 in eps and stays < 1 in N", ok,
             "; ".join(parts))


def test_criterion_11_partial_at_full_mass():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        C = rng.random((m, n))
        mu, nu = rng.random(n) + 0.1, rng.random(m) + 0.1
        nu *= mu.sum() / nu.sum()
        balanced = build_optimal_transport(C, mu, nu)
        partial = build_partial_transport(C, mu, nu, min(mu.sum(), nu.sum()))
        cfg = IpdConfig(kkt_tol=1e-8, schedule=recommended_schedule(balanced))
        rb, rp = ipd_solve(balanced, cfg), ipd_solve(partial, cfg)
        assert rb.converged and rp.converged
        diff = abs(objective_h(balanced, rb.u[:balanced.mn]) - objective_h(partial, rp.u[:partial.mn]))
        worst = max(worst, diff)
    _verdict(11, "partial transport at a = a_max equals balanced transport within 1e-6",
             worst <= 1e-6, f"max |diff| {worst:.2e} over 10 instances")
