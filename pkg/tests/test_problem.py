import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transolve.problem import (
    ConeKind, DimensionError, GeneralizedTransportProblem, InfeasibleFractionError,
    MassImbalanceError, NegativityError, ProblemError, apply_constraint_operator, build_birkhoff_projection,
    build_optimal_transport, build_partial_transport, gen_cost, kkt_residuals,
    load_problem, objective_h, problem_from_dict, problem_to_dict, proj_box,
    proj_cone, save_problem,
)


def _random_problem(rng, m, n, partial=False):
    C = rng.random((m, n))
    mu = rng.random(n) + 0.1
    nu = rng.random(m) + 0.1
    nu *= mu.sum() / nu.sum()
    if partial:
        return build_partial_transport(C, mu, nu, 0.5 * mu.sum())
    return build_optimal_transport(C, mu, nu)


def _explicit_H(p):
    """Kronecker assembly of the constraint matrix."""
    m, n = p.m, p.n
    T = np.vstack([np.kron(np.eye(n), np.ones((1, m))), np.kron(np.ones((1, n)), np.eye(m))])
    G = T if not p.r else np.vstack([T, np.ones((1, m * n))])
    IY = np.zeros((n + m + p.r, n))
    IY[:n] = np.eye(n)
    IZ = np.zeros((n + m + p.r, m))
    IZ[n:n + m] = np.eye(m)
    return np.hstack([G, IY, IZ])


def test_ot_field_mapping():
    p = build_optimal_transport([[0, 1], [1, 0]], [0.5, 0.5], [0.5, 0.5])
    assert np.array_equal(p.c, [0, 1, 1, 0])
    assert np.array_equal(p.b, [0.5, 0.5, 0.5, 0.5])
    assert p.sigma == 0 and p.r == 0
    assert np.all(p.lower == 0) and np.all(np.isinf(p.upper))
    assert p.cone_y is ConeKind.ZERO and p.cone_z is ConeKind.ZERO


def test_ot_marginal_checks():
    build_optimal_transport(np.zeros((2, 2)), [0.6, 0.4], [0.5, 0.5])
    with pytest.raises(MassImbalanceError):
        build_optimal_transport(np.zeros((2, 2)), [0.6, 0.6], [0.5, 0.5])
    with pytest.raises(NegativityError):
        build_optimal_transport(np.zeros((2, 2)), [1.5, -0.5], [0.5, 0.5])
    with pytest.raises(DimensionError):
        build_optimal_transport(np.zeros((3, 2)), [0.5, 0.5], [0.5, 0.5])


def test_birkhoff_fields():
    p = build_birkhoff_projection(np.eye(2))
    assert p.sigma == 1
    assert np.array_equal(p.phi, [1, 0, 0, 1])
    assert np.all(p.c == 0)
    assert np.array_equal(p.mu, [1, 1]) and np.array_equal(p.nu, [1, 1])


def test_birkhoff_fixed_entry_encoding():
    Phi = np.array([[0.3, 0.7], [0.7, 0.3]])
    p = build_birkhoff_projection(Phi, [(0, 0, 0.3)])
    assert p.lower[0] == p.upper[0] == 0.3
    assert np.all(p.lower[1:] == 0) and np.all(np.isinf(p.upper[1:]))
    with pytest.raises(ProblemError):
        build_birkhoff_projection(Phi, [(0, 0, 1.5)])
    with pytest.raises(DimensionError):
        build_birkhoff_projection(Phi, [(2, 0, 0.5)])


def test_partial_fields():
    p = build_partial_transport(np.ones((2, 2)), [1, 1], [1, 1], 1.0)
    assert p.r == 1 and p.num_dual == 5
    assert p.b[-1] == 1.0
    assert np.array_equal(p.pi_row, np.ones(4))
    assert p.cone_y is ConeKind.NONNEGATIVE and p.cone_z is ConeKind.NONNEGATIVE
    with pytest.raises(InfeasibleFractionError):
        build_partial_transport(np.ones((2, 2)), [1, 1], [2, 2], 3.0)


def test_quadratic_cost_hand_values():
    C = gen_cost("quadratic", 4)
    assert C[0, 1] == pytest.approx(1.0)
    assert C[0, 3] == pytest.approx(2.0)
    assert np.all(np.diag(C) == 0)
    with pytest.raises(ProblemError):
        gen_cost("quadratic", 5)


def test_random_cost_is_seeded():
    A = gen_cost("random", 6, seed=3)
    assert np.array_equal(A, gen_cost("random", 6, seed=3))
    assert A.min() >= 0 and A.max() <= 1
    assert not np.array_equal(A, gen_cost("random", 6, seed=4))


def test_forward_on_two_by_two():
    p = build_optimal_transport(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5])
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    u = np.concatenate([X.ravel(order="F"), np.zeros(4)])
    assert np.array_equal(apply_constraint_operator(p, "forward", u), [4, 6, 3, 7])


def test_adjoint_of_first_column_row():
    p = build_optimal_transport(np.zeros((3, 2)), [0.5, 0.5], np.ones(3) / 3)
    lam = np.zeros(p.num_dual)
    lam[0] = 1.0
    out = apply_constraint_operator(p, "adjoint", lam)
    assert np.array_equal(out[:6], [1, 1, 1, 0, 0, 0])
    assert np.array_equal(out[6:], [1, 0, 0, 0, 0])


def test_operator_dimension_errors():
    p = build_optimal_transport(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(DimensionError):
        apply_constraint_operator(p, "forward", np.zeros(3))
    with pytest.raises(DimensionError):
        apply_constraint_operator(p, "adjoint", np.zeros(3))


@pytest.mark.parametrize("partial", [False, True])
def test_matrix_free_matches_kronecker(partial):
    rng = np.random.default_rng(0)
    for m in range(1, 9, 3):
        for n in range(1, 9, 2):
            p = _random_problem(rng, m, n, partial)
            H = _explicit_H(p)
            u = rng.standard_normal(p.num_primal)
            lam = rng.standard_normal(p.num_dual)
            assert np.allclose(apply_constraint_operator(p, "forward", u), H @ u, atol=1e-13)
            assert np.allclose(apply_constraint_operator(p, "adjoint", lam), H.T @ lam, atol=1e-13)


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 50), n=st.integers(1, 50), partial=st.booleans(),
       seed=st.integers(0, 2**32 - 1))
def test_adjoint_identity(m, n, partial, seed):
    rng = np.random.default_rng(seed)
    p = _random_problem(rng, m, n, partial)
    u = rng.standard_normal(p.num_primal)
    lam = rng.standard_normal(p.num_dual)
    lhs = apply_constraint_operator(p, "forward", u) @ lam
    rhs = u @ apply_constraint_operator(p, "adjoint", lam)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, np.linalg.norm(u) * np.linalg.norm(lam))


def test_objective_values():
    p = build_optimal_transport([[1.0, 2.0], [3.0, 4.0]], [0.5, 0.5], [0.5, 0.5])
    x = np.array([0.1, 0.2, 0.3, 0.4])
    assert objective_h(p, x) == pytest.approx(p.c @ x)
    b = build_birkhoff_projection(np.array([[0.2, 0.8], [0.8, 0.2]]))
    assert objective_h(b, b.phi) == 0.0


def test_objective_sigma_two():
    q = GeneralizedTransportProblem(
        m=1, n=2, c=np.zeros(2), sigma=2.0, phi=np.zeros(2), lower=np.zeros(2),
        upper=np.full(2, np.inf), mu=np.ones(2), nu=np.array([2.0]))
    assert objective_h(q, np.array([1.0, 1.0])) == pytest.approx(2.0)


def test_proj_box_examples():
    out = proj_box(np.array([-1.0, 0.5, 9.0]), np.zeros(3), np.ones(3))
    assert np.array_equal(out, [0, 0.5, 1])
    v = np.array([0.2, 0.7])
    assert np.array_equal(proj_box(v, np.zeros(2), np.full(2, np.inf)), v)
    assert np.array_equal(proj_cone(np.array([-1.0, 2.0]), "nonnegative"), [0, 2])
    assert np.array_equal(proj_cone(np.array([-1.0, 2.0]), "zero"), [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 3)),
                min_size=1, max_size=20))
def test_proj_box_idempotent_and_nonexpansive(rows):
    a = np.array([r[0] for r in rows])
    b = np.array([r[1] for r in rows])
    lo = np.array([r[2] for r in rows])
    hi = lo + 1.0
    hi[::2] = np.inf
    pa = proj_box(a, lo, hi)
    assert np.array_equal(proj_box(pa, lo, hi), pa)
    assert np.linalg.norm(pa - proj_box(b, lo, hi)) <= np.linalg.norm(a - b) + 1e-12


def test_kkt_zero_start_gives_norm_b():
    rng = np.random.default_rng(1)
    p = _random_problem(rng, 3, 4)
    k = kkt_residuals(p, np.zeros(p.num_primal), np.zeros(p.num_dual))
    assert k.res_lambda == pytest.approx(np.linalg.norm(p.b))


def test_kkt_doubly_stochastic_anchor_is_exact():
    Phi = np.array([[0.3, 0.7], [0.7, 0.3]])
    p = build_birkhoff_projection(Phi)
    u = np.concatenate([p.phi, np.zeros(4)])
    k = kkt_residuals(p, u, np.zeros(p.num_dual))
    assert k.as_tuple() == (0.0, 0.0, 0.0, 0.0)


def test_kkt_feasibility_scales_linearly():
    rng = np.random.default_rng(2)
    p = _random_problem(rng, 3, 3)
    u = rng.random(p.num_primal)
    lam = np.zeros(p.num_dual)
    base = kkt_residuals(p, u, lam).res_lambda
    q = build_optimal_transport(p.plan(p.c), 4 * p.mu, 4 * p.nu)
    assert kkt_residuals(q, 4 * u, lam).res_lambda == pytest.approx(4 * base, rel=1e-12)


def test_kkt_relative_uses_initial():
    rng = np.random.default_rng(3)
    p = _random_problem(rng, 2, 3)
    u0 = np.zeros(p.num_primal)
    lam = np.zeros(p.num_dual)
    k0 = kkt_residuals(p, u0, lam)
    k = kkt_residuals(p, u0, lam, initial=k0)
    assert k.relative == pytest.approx(1.0)


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    for p in (_random_problem(rng, 2, 3, partial=True),
              build_birkhoff_projection(rng.random((3, 3)), [(0, 1, 0.0)])):
        d = problem_to_dict(p)
        assert problem_to_dict(problem_from_dict(d)) == d
        path = tmp_path / "p.json"
        save_problem(p, path)
        assert problem_to_dict(load_problem(path)) == d


def test_problem_json_layout():
    p = build_partial_transport([[1.0, 2.0]], [0.5, 0.5], [1.0], 0.5)
    d = problem_to_dict(p)
    assert d["cost"] == [[1.0, 2.0]]
    assert d["upper"] == [[None, None]]
    assert d["r"] == 1 and d["a"] == 0.5
