import numpy as np
import pytest
import scipy.linalg

from dynmpc.solvers import (
    NlpProblem,
    NumericalError,
    SynthesisError,
    dare_residual,
    solve_dare,
    solve_dlyap,
    solve_lp,
    solve_nlp,
    solve_periodic_riccati,
    solve_qp,
    solve_tv_riccati,
)

from oracles import (
    lp_by_vertex_enumeration,
    qp_by_active_set_enumeration,
    qp_by_projected_gradient,
    riccati_value_scalar,
    scalar_dare,
    tv_value_by_grid_dp,
)


# ----------------------------------------------------------------------
# DARE
# ----------------------------------------------------------------------

def test_dare_scalar_golden_ratio():
    P, K = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-9)
    assert K[0, 0] == pytest.approx(-(np.sqrt(5) - 1) / 2, abs=1e-9)


def test_dare_deadbeat_plant():
    Q0 = np.diag([2.0, 3.0])
    P, K = solve_dare(np.zeros((2, 2)), np.eye(2), Q0, np.eye(2))
    assert np.allclose(P, Q0, atol=1e-10)
    assert np.allclose(K, 0.0, atol=1e-10)


def test_dare_no_input_stable():
    P, K = solve_dare([[0.5]], np.zeros((1, 1)), [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert np.allclose(K, 0.0)


def test_dare_no_input_unstable_rejected():
    with pytest.raises(SynthesisError):
        solve_dare([[1.5]], np.zeros((1, 1)), [[1.0]], [[1.0]])


def test_dare_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        a = rng.uniform(-2, 2)
        b = rng.uniform(0.2, 2)
        q = rng.uniform(0.1, 3)
        r = rng.uniform(0.1, 3)
        P, K = solve_dare([[a]], [[b]], [[q]], [[r]])
        assert P[0, 0] == pytest.approx(scalar_dare(a, b, q, r), rel=1e-9)


def test_dare_random_stabilizable_residual_and_schur():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, n + 1))
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        # controllable with probability one -> stabilizable
        Q = np.eye(n) * rng.uniform(0.1, 2)
        R = np.eye(m) * rng.uniform(0.1, 2)
        P, K = solve_dare(A, B, Q, R)
        res = np.max(np.abs(dare_residual(A, B, Q, R, P)))
        assert res <= 1e-9 * max(1.0, np.max(np.abs(P)))
        assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1.0
        assert np.min(np.linalg.eigvalsh(P)) > 0


def test_dare_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        A = rng.normal(size=(n, n)) * 0.8
        B = rng.normal(size=(n, 1))
        Q = np.eye(n)
        R = np.array([[1.0]])
        P, _ = solve_dare(A, B, Q, R)
        P_ref = scipy.linalg.solve_discrete_are(A, B, Q, R)
        assert np.max(np.abs(P - P_ref)) <= 1e-7 * max(1, np.max(np.abs(P_ref)))


def test_dlyap_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        A = A / (np.max(np.abs(np.linalg.eigvals(A))) + 0.5)
        Q = np.eye(n)
        P = solve_dlyap(A, Q)
        P_ref = scipy.linalg.solve_discrete_lyapunov(A.T, Q)
        assert np.max(np.abs(P - P_ref)) <= 1e-8 * max(1, np.max(np.abs(P_ref)))


# ----------------------------------------------------------------------
# time-varying / periodic Riccati
# ----------------------------------------------------------------------

def test_tv_riccati_fixed_point_of_dare():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    Q = np.eye(2)
    R = np.array([[1.0]])
    P_inf, K_inf = solve_dare(A, B, Q, R)
    P_seq, K_seq = solve_tv_riccati([A] * 15, [B] * 15, Q, R, P_inf)
    for P in P_seq:
        assert np.max(np.abs(P - P_inf)) <= 1e-9
    for K in K_seq:
        assert np.max(np.abs(K - K_inf)) <= 1e-9


def test_tv_riccati_horizon_one_by_hand():
    P_seq, K_seq = solve_tv_riccati([[[1.0]]], [[[1.0]]], [[1.0]], [[1.0]],
                                    [[0.0]])
    assert P_seq[0][0, 0] == pytest.approx(1.0)
    assert K_seq[0][0, 0] == pytest.approx(0.0)


def test_tv_riccati_matches_scalar_recursion():
    rng = np.random.default_rng(3)
    a_seq = rng.uniform(-1.5, 1.5, size=12)
    b_seq = rng.uniform(0.5, 1.5, size=12)
    q, r, p_term = 1.0, 0.5, 2.0
    P_seq, K_seq = solve_tv_riccati(
        [[[a]] for a in a_seq], [[[b]] for b in b_seq], [[q]], [[r]],
        [[p_term]])
    ps, ks = riccati_value_scalar(a_seq, b_seq, q, r, p_term)
    for t in range(12):
        assert P_seq[t][0, 0] == pytest.approx(ps[t], rel=1e-12)
        assert K_seq[t][0, 0] == pytest.approx(ks[t], rel=1e-12, abs=1e-12)


def test_tv_riccati_vs_grid_dp():
    # alternating gains over 20 steps; value function checked on a grid
    a_seq = [0.5 if t % 2 == 0 else 2.0 for t in range(20)]
    b_seq = [1.0] * 20
    q = r = 1.0
    P_seq, _ = solve_tv_riccati(
        [[[a]] for a in a_seq], [[[b]] for b in b_seq], [[q]], [[r]], [[0.0]])
    x_grid = np.linspace(-4, 4, 4001)
    u_grid = np.linspace(-8, 8, 4001)
    V0 = tv_value_by_grid_dp(a_seq, b_seq, q, r, 0.0, x_grid, u_grid)
    for x in (-1.0, -0.3, 0.5, 1.0):
        v_riccati = P_seq[0][0, 0] * x * x
        v_grid = float(np.interp(x, x_grid, V0))
        assert abs(v_grid - v_riccati) <= 1e-3 * max(1.0, v_riccati)


def test_periodic_riccati_degenerate_period_equals_dare():
    A = np.array([[1.2, 0.3], [0.0, 0.9]])
    B = np.array([[0.0], [1.0]])
    Q = np.eye(2)
    R = np.array([[1.0]])
    P_seq, K_seq = solve_periodic_riccati([A], [B], Q, R)
    P_inf, K_inf = solve_dare(A, B, Q, R)
    assert np.max(np.abs(P_seq[0] - P_inf)) <= 1e-6
    assert np.max(np.abs(K_seq[0] - K_inf)) <= 1e-6


def test_periodic_riccati_unique_across_initializations():
    # independent fixed-point iteration from two different seeds
    a_seq = [1.5, 0.4]
    b_seq = [1.0, 0.8]
    q, r = 1.0, 0.5

    def fixed_point(p_start):
        p = p_start
        for _ in range(5000):
            p_old = p
            for t in (1, 0):
                a, b = a_seq[t], b_seq[t]
                p = q + a * p * a - (a * p * b) ** 2 / (r + b * p * b)
            if abs(p - p_old) < 1e-14:
                break
        return p

    p_from_1 = fixed_point(1.0)
    p_from_100 = fixed_point(100.0)
    assert p_from_1 == pytest.approx(p_from_100, abs=1e-8)
    P_seq, _ = solve_periodic_riccati(
        [[[a]] for a in a_seq], [[[b]] for b in b_seq], [[q]], [[r]])
    assert P_seq[0][0, 0] == pytest.approx(p_from_1, abs=1e-8)


def test_periodic_riccati_monodromy_schur():
    rng = np.random.default_rng(4)
    for _ in range(10):
        T = int(rng.integers(2, 5))
        A_seq = [rng.normal(size=(2, 2)) for _ in range(T)]
        B_seq = [rng.normal(size=(2, 1)) for _ in range(T)]
        P_seq, K_seq = solve_periodic_riccati(A_seq, B_seq, np.eye(2),
                                              [[1.0]])
        mono = np.eye(2)
        for t in range(T):
            mono = (A_seq[t] + B_seq[t] @ K_seq[t]) @ mono
        assert np.max(np.abs(np.linalg.eigvals(mono))) < 1.0
        # periodicity of the returned sequence under one more sweep
        P_check, _ = solve_tv_riccati(A_seq, B_seq, np.eye(2), [[1.0]],
                                      P_seq[0])
        assert np.max(np.abs(P_check[0] - P_seq[0])) <= 1e-6


# ----------------------------------------------------------------------
# LP
# ----------------------------------------------------------------------

def test_lp_box_max():
    rep = solve_lp([-1.0], bounds=[(0, 3)])
    assert rep.optimal
    assert rep.x[0] == pytest.approx(3.0)
    assert rep.value == pytest.approx(-3.0)


def test_lp_degenerate_equality():
    rep = solve_lp([0.0], A_eq=[[1.0]], b_eq=[1.0])
    assert rep.optimal
    assert rep.x[0] == pytest.approx(1.0)


def test_lp_infeasible_and_unbounded():
    rep = solve_lp([1.0], A_ub=[[1.0], [-1.0]], b_ub=[-1.0, -1.0])
    assert rep.status == "infeasible"
    rep = solve_lp([-1.0], bounds=[(0, None)])
    assert rep.status == "diverged"


def test_lp_random_vs_vertex_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = 5
        A = rng.normal(size=(8, n))
        b = rng.uniform(0.5, 2.0, size=8)
        c = rng.normal(size=n)
        box = 10.0
        # oracle sees the box as explicit rows
        A_full = np.vstack([A, np.eye(n), -np.eye(n)])
        b_full = np.concatenate([b, box * np.ones(2 * n)])
        v_oracle, _ = lp_by_vertex_enumeration(c, A_full, b_full)
        rep = solve_lp(c, A_ub=A, b_ub=b, bounds=[(-box, box)] * n)
        assert rep.optimal
        assert rep.value == pytest.approx(v_oracle, abs=1e-8)


# ----------------------------------------------------------------------
# QP
# ----------------------------------------------------------------------

def test_qp_unconstrained_scalar():
    rep = solve_qp([[1.0]], [-1.0])
    assert rep.optimal
    assert rep.x[0] == pytest.approx(1.0)


def test_qp_bound_active_with_multiplier():
    rep = solve_qp([[1.0]], [0.0], A_ub=[[-1.0]], b_ub=[-2.0])
    assert rep.optimal
    assert rep.x[0] == pytest.approx(2.0)
    assert rep.lam_ub[0] == pytest.approx(2.0)
    assert rep.active_set == [0]


def test_qp_random_box_vs_projected_gradient():
    rng = np.random.default_rng(6)
    for _ in range(15):
        n = 6
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.5 * np.eye(n)
        g = rng.normal(size=n)
        lo = -rng.uniform(0.1, 1.0, size=n)
        hi = rng.uniform(0.1, 1.0, size=n)
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([hi, -lo])
        rep = solve_qp(H, g, A_ub=A, b_ub=b)
        assert rep.optimal
        x_pg = qp_by_projected_gradient(H, g, lo, hi)
        v_pg = 0.5 * x_pg @ H @ x_pg + g @ x_pg
        assert rep.value <= v_pg + 1e-6
        assert abs(rep.value - v_pg) <= 1e-6


def test_qp_vs_active_set_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(15):
        n = 3
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.3 * np.eye(n)
        g = rng.normal(size=n)
        A = rng.normal(size=(6, n))
        b = rng.uniform(0.2, 1.5, size=6)
        v_oracle, _ = qp_by_active_set_enumeration(H, g, A, b)
        rep = solve_qp(H, g, A_ub=A, b_ub=b)
        assert rep.optimal
        assert rep.value == pytest.approx(v_oracle, abs=1e-8)


def test_qp_equality_constrained():
    rep = solve_qp(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0])
    assert rep.optimal
    assert np.allclose(rep.x, [0.5, 0.5], atol=1e-9)


def test_qp_infeasible():
    rep = solve_qp([[1.0]], [0.0], A_ub=[[1.0], [-1.0]], b_ub=[-1.0, -1.0])
    assert rep.status == "infeasible"


def test_qp_warm_start_deterministic():
    H = np.diag([1.0, 2.0])
    g = np.array([-1.0, -4.0])
    A = np.array([[1.0, 1.0]])
    b = np.array([1.0])
    rep1 = solve_qp(H, g, A_ub=A, b_ub=b)
    rep2 = solve_qp(H, g, A_ub=A, b_ub=b, x0=rep1.x,
                    working_set=rep1.active_set)
    assert rep2.optimal
    assert np.array_equal(rep1.x, rep2.x) or \
        np.max(np.abs(rep1.x - rep2.x)) <= 1e-12
    assert rep2.iterations <= rep1.iterations


# ----------------------------------------------------------------------
# NLP (SQP)
# ----------------------------------------------------------------------

def test_nlp_reduces_to_qp():
    H = np.diag([2.0, 1.0])
    g = np.array([-2.0, 1.0])
    A = np.array([[1.0, 1.0], [-1.0, 0.0]])
    b = np.array([1.5, 0.0])
    qp_rep = solve_qp(H, g, A_ub=A, b_ub=b)
    prob = NlpProblem(
        2,
        objective=lambda z: 0.5 * z @ H @ z + g @ z,
        gradient=lambda z: H @ z + g,
        x0=[0.2, 0.2],
        ineq=lambda z: A @ z - b,
        ineq_jac=lambda z: A,
        hessian=lambda z, lE, lI: H,
    )
    rep = solve_nlp(prob)
    assert rep.optimal
    assert abs(rep.value - qp_rep.value) <= 1e-6


def test_nlp_rosenbrock():
    def f(z):
        return (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2

    def grad(z):
        return np.array([
            -2 * (1 - z[0]) - 400 * z[0] * (z[1] - z[0] ** 2),
            200 * (z[1] - z[0] ** 2),
        ])

    prob = NlpProblem(2, objective=f, gradient=grad, x0=[-1.2, 1.0])
    rep = solve_nlp(prob)
    assert rep.optimal
    assert np.max(np.abs(rep.x - 1.0)) <= 1e-6
    assert np.max(np.abs(grad(rep.x))) <= 1e-6


def test_nlp_equality_symmetry():
    prob = NlpProblem(
        2,
        objective=lambda z: float(z @ z),
        gradient=lambda z: 2 * z,
        x0=[2.0, -1.0],
        eq=lambda z: np.array([z[0] + z[1] - 1.0]),
        eq_jac=lambda z: np.array([[1.0, 1.0]]),
    )
    rep = solve_nlp(prob)
    assert rep.optimal
    assert np.allclose(rep.x, [0.5, 0.5], atol=1e-7)


def test_nlp_nonlinear_constraint():
    # min x + y s.t. x^2 + y^2 = 1 -> (-1/sqrt2, -1/sqrt2)
    prob = NlpProblem(
        2,
        objective=lambda z: z[0] + z[1],
        gradient=lambda z: np.array([1.0, 1.0]),
        x0=[1.0, 0.2],
        eq=lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
        eq_jac=lambda z: np.array([[2 * z[0], 2 * z[1]]]),
    )
    rep = solve_nlp(prob)
    assert rep.optimal
    assert np.allclose(rep.x, -1 / np.sqrt(2), atol=1e-6)


def test_nlp_deterministic_bitwise():
    def make():
        H = np.diag([2.0, 1.0])
        return NlpProblem(
            2,
            objective=lambda z: 0.5 * z @ H @ z - z[0] + np.sin(z[1]) * 0.1,
            gradient=lambda z: H @ z - np.array([1.0, -0.1 * np.cos(z[1])]),
            x0=[0.7, -0.3],
            ineq=lambda z: np.array([z[0] + z[1] - 1.0]),
            ineq_jac=lambda z: np.array([[1.0, 1.0]]),
        )
    r1 = solve_nlp(make())
    r2 = solve_nlp(make())
    assert r1.status == r2.status
    assert np.array_equal(r1.x, r2.x)
    assert r1.value == r2.value


def test_nlp_diverged_status():
    prob = NlpProblem(
        1,
        objective=lambda z: float(np.exp(z[0])) if z[0] < 700 else np.inf,
        gradient=lambda z: np.array([np.exp(min(z[0], 700.0))]),
        x0=[800.0],
    )
    rep = solve_nlp(prob)
    assert rep.status in ("diverged", "max-iter", "optimal")
    # the report must not silently claim optimality with a bad KKT residual
    if rep.status == "optimal":
        assert rep.kkt_residual <= 1e-6
