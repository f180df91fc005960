import numpy as np
import pytest

from dynmpc.model import ConstraintSet, DynamicalSystem, Reference, StageCost
from dynmpc.solvers import SynthesisError, solve_dare
from dynmpc.terminal import (
    ReferenceManifold,
    TerminalIngredients,
    compute_alpha,
    ellipsoid_inclusion,
    lqr_residual,
    shift_terminal_cost,
    synth_terminal_economic,
    synth_terminal_economic_periodic,
    synth_terminal_parametrized,
    synth_terminal_setpoint,
    synth_terminal_trajectory,
    terminal_equality,
)

GOLDEN = (1 + np.sqrt(5)) / 2


def unit_box(n=1, m=1, margin=1e-6):
    return ConstraintSet(n, m, x_lo=-1, x_hi=1, u_lo=-1, u_hi=1,
                         interior_margin=margin)


# ----------------------------------------------------------------------
# lqr_residual
# ----------------------------------------------------------------------

def test_lqr_residual_zero_at_dare():
    A = np.array([[1.0, 0.2], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    Q = np.eye(2)
    R = np.array([[0.5]])
    P, K = solve_dare(A, B, Q, R)
    res = lqr_residual(A, B, K, P, P, Q, R)
    assert np.max(np.abs(res.matrix)) <= 1e-9


def test_lqr_residual_hand_case():
    # A=0, K=0: first term drops, residual = 0 - P + Q = 0 when P = Q
    Q = np.diag([2.0, 0.7])
    res = lqr_residual(np.zeros((2, 2)), np.ones((2, 1)), np.zeros((1, 2)),
                       Q, Q, Q, [[1.0]])
    assert np.max(np.abs(res.matrix)) == 0.0


def test_lqr_residual_scalar_matches_direct_formula():
    rng = np.random.default_rng(8)
    for _ in range(25):
        a, b, k, pp, pn, q, r = rng.uniform(-2, 2, size=7)
        q, r = abs(q) + 0.1, abs(r) + 0.1
        res = lqr_residual([[a]], [[b]], [[k]], [[pp]], [[pn]], [[q]],
                           [[r]])
        direct = (a + b * k) * pn * (a + b * k) - pp + q + k * r * k
        assert res.matrix[0, 0] == pytest.approx(direct, abs=1e-12)


# ----------------------------------------------------------------------
# compute_alpha
# ----------------------------------------------------------------------

def test_alpha2_closed_form_scalar():
    P = np.array([[GOLDEN]])
    K = np.array([[-(GOLDEN - 1)]])
    alpha = compute_alpha(None, P, K, None, unit_box(), (np.zeros(1),
                                                         np.zeros(1)))
    expected = min(GOLDEN, GOLDEN / (GOLDEN - 1) ** 2)
    assert alpha == pytest.approx(expected, rel=1e-12)


def test_alpha2_matches_grid_maximization():
    P = np.array([[GOLDEN]])
    K = np.array([[-(GOLDEN - 1)]])
    alpha = compute_alpha(None, P, K, None, unit_box(), (np.zeros(1),
                                                         np.zeros(1)))
    # dense scan: largest a with the whole set {P x^2 <= a} feasible
    for a, expect_ok in ((alpha * 0.999, True), (alpha * 1.001, False)):
        xs = np.linspace(-np.sqrt(a / P[0, 0]), np.sqrt(a / P[0, 0]), 2001)
        ok = all(abs(x) <= 1 + 1e-9 and abs(K[0, 0] * x) <= 1 + 1e-9
                 for x in xs)
        assert ok == expect_ok


def test_alpha_scales_quadratically_with_box():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    K = np.array([[-0.5, -0.4]])
    r = (np.zeros(2), np.zeros(1))
    big = ConstraintSet(2, 1, x_lo=-1, x_hi=1, u_lo=-1, u_hi=1)
    small = ConstraintSet(2, 1, x_lo=-0.5, x_hi=0.5, u_lo=-0.5, u_hi=0.5)
    a_big = compute_alpha(None, P, K, None, big, r)
    a_small = compute_alpha(None, P, K, None, small, r)
    assert a_small == pytest.approx(a_big / 4, rel=1e-12)


def test_alpha_linear_system_keeps_alpha2():
    sys = DynamicalSystem.linear([[1.0]], [[1.0]])
    P, K = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    Q = np.array([[1.0]])
    R = np.array([[1.0]])
    a2_only = compute_alpha(sys, P, K, None, unit_box(), (np.zeros(1),
                                                          np.zeros(1)))
    a_full = compute_alpha(sys, P, K, None, unit_box(),
                           (np.zeros(1), np.zeros(1)), stage=(Q, R),
                           epsilon=0.0)
    assert a_full == a2_only


# ----------------------------------------------------------------------
# synth_terminal_setpoint
# ----------------------------------------------------------------------

def test_setpoint_linear_alpha_exact():
    sys = DynamicalSystem.linear([[1.0]], [[1.0]])
    ing = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                  unit_box(), [[1.0]], [[1.0]], epsilon=0.0)
    assert ing.P[0, 0] == pytest.approx(GOLDEN, abs=1e-9)
    expected = min(GOLDEN, GOLDEN / (GOLDEN - 1) ** 2)
    assert ing.alpha == pytest.approx(expected, rel=1e-9)
    assert 0 < ing.rho < 1


def test_setpoint_cubic_sampled_decrease():
    sys = DynamicalSystem(1, 1, f=lambda x, u: x + u + x ** 3)
    Q = np.array([[1.0]])
    R = np.array([[1.0]])
    ing = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                  unit_box(), Q, R, epsilon=0.05)
    assert ing.alpha > 1e-12
    # independent re-sampling of the level set (different seed than synth)
    rng = np.random.default_rng(999)
    cost = StageCost.quadratic(Q, R)
    r = (np.zeros(1), np.zeros(1))
    for _ in range(1000):
        s = rng.uniform(-1, 1)
        x = np.array([s * np.sqrt(ing.alpha / ing.P[0, 0])])
        u = ing.law(x)
        xp = sys.f(x, u)
        slack = ing.value(x) - ing.value(xp) - cost.value(x, u, r)
        assert slack >= -1e-8


def test_setpoint_boundary_reference_rejected():
    sys = DynamicalSystem.linear([[1.0]], [[1.0]])
    box = ConstraintSet(1, 1, x_lo=-1, x_hi=1, u_lo=-1, u_hi=1,
                        interior_margin=1e-3)
    with pytest.raises(SynthesisError, match="T.1"):
        synth_terminal_setpoint(sys, (np.array([1.0]), np.zeros(1)), box,
                                [[1.0]], [[1.0]])


def test_setpoint_non_equilibrium_rejected():
    sys = DynamicalSystem.linear([[1.0]], [[1.0]])
    with pytest.raises(SynthesisError, match="equilibrium"):
        synth_terminal_setpoint(sys, (np.array([0.2]), np.array([0.3])),
                                unit_box(), [[1.0]], [[1.0]])


def test_setpoint_terminal_invariance_and_membership():
    # (T.1)-(T.2): terminal set maps into itself and stays feasible
    sys = DynamicalSystem(1, 1, f=lambda x, u: x + u + 0.5 * x ** 3)
    box = unit_box()
    ing = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)), box,
                                  [[1.0]], [[1.0]], epsilon=0.1)
    rng = np.random.default_rng(77)
    for _ in range(500):
        s = rng.uniform(-1, 1)
        x = np.array([s * np.sqrt(ing.alpha / ing.P[0, 0])])
        u = ing.law(x)
        assert box.contains(x, u)
        xp = sys.f(x, u)
        assert ing.value(xp) <= ing.rho * ing.value(x) + 1e-10


# ----------------------------------------------------------------------
# synth_terminal_trajectory
# ----------------------------------------------------------------------

def test_trajectory_constant_reference_reduces_to_setpoint():
    sys = DynamicalSystem.linear([[0.8]], [[1.0]])
    zset = unit_box()
    ing_sp = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)), zset,
                                     [[1.0]], [[1.0]], epsilon=1e-3)
    ref = Reference.periodic([[0.0]], [[0.0]])
    ing_tv = synth_terminal_trajectory(sys, ref, zset, [[1.0]], [[1.0]],
                                       epsilon=1e-3)
    assert ing_tv.P_seq[0][0, 0] == pytest.approx(ing_sp.P[0, 0], abs=1e-6)
    assert ing_tv.alpha == pytest.approx(ing_sp.alpha, rel=1e-4)


def test_trajectory_two_periodic_scalar():
    sys = DynamicalSystem(1, 1, f=lambda x, u: -x + u + 0.1 * x ** 2)
    a = 0.5
    u0 = -0.1 * a * a
    ref = Reference.periodic([[a], [-a]], [[u0], [u0]])
    zset = ConstraintSet(1, 1, x_lo=-2, x_hi=2, u_lo=-2, u_hi=2)
    ing = synth_terminal_trajectory(sys, ref, zset, [[1.0]], [[1.0]],
                                    epsilon=0.05)
    assert len(ing.P_seq) == 2
    # 2-periodicity: applying two more backward steps returns the same P
    from dynmpc.solvers import riccati_step
    Qe = np.array([[1.0 + 0.05]])
    A1, B1 = sys.jacobians(*ref.at(1))
    P1_back, _ = riccati_step(A1, B1, Qe, np.array([[1.0]]), ing.P_seq[0])
    assert np.max(np.abs(P1_back - ing.P_seq[1])) <= 1e-7
    A0, B0 = sys.jacobians(*ref.at(0))
    P0_back, _ = riccati_step(A0, B0, Qe, np.array([[1.0]]), ing.P_seq[1])
    assert np.max(np.abs(P0_back - ing.P_seq[0])) <= 1e-7


def test_trajectory_residual_every_time():
    sys = DynamicalSystem(1, 1, f=lambda x, u: -x + u + 0.1 * x ** 2)
    a = 0.4
    ref = Reference.periodic([[a], [-a]], [[-0.1 * a * a], [-0.1 * a * a]])
    zset = ConstraintSet(1, 1, x_lo=-2, x_hi=2, u_lo=-2, u_hi=2)
    eps = 0.02
    ing = synth_terminal_trajectory(sys, ref, zset, [[1.0]], [[1.0]],
                                    epsilon=eps)
    Qe = np.array([[1.0 + eps]])
    for t in range(2):
        A, B = sys.jacobians(*ref.at(t))
        res = lqr_residual(A, B, ing.K_seq[t], ing.P_seq[t],
                           ing.P_seq[(t + 1) % 2], Qe, [[1.0]])
        assert res.max_eig <= 1e-8


def test_trajectory_clamped_tail_is_dare():
    sys = DynamicalSystem.linear([[0.9]], [[1.0]])
    # consistent finite trajectory that ends at the origin equilibrium
    xs = [[0.4], [0.4 * 0.9 - 0.2], [(0.4 * 0.9 - 0.2) * 0.9 - 0.124], [0.0]]
    us = [[-0.2], [-0.124], [-(xs[2][0] * 0.9)], [0.0]]
    ref = Reference.trajectory(xs, us)
    zset = unit_box()
    ing = synth_terminal_trajectory(sys, ref, zset, [[1.0]], [[1.0]],
                                    epsilon=1e-3)
    P_tail, _ = solve_dare([[0.9]], [[1.0]], [[1.0 + 1e-3]], [[1.0]])
    assert np.max(np.abs(ing.P_seq[-1] - P_tail)) <= 1e-9
    # clamped indexing continues with the tail matrices
    assert np.max(np.abs(ing.P_at(50) - P_tail)) <= 1e-9


# ----------------------------------------------------------------------
# synth_terminal_parametrized
# ----------------------------------------------------------------------

def steady_manifold_scalar(lo=-0.8, hi=0.8, num=9):
    # steady states of x+ = x + u + 0.1 sin x: u_r = -0.1 sin(x_r)
    return ReferenceManifold(
        [np.linspace(lo, hi, num)],
        chart=lambda th: (np.array([th[0]]),
                          np.array([-0.1 * np.sin(th[0])])),
        theta_of=lambda r: np.atleast_1d(r[0][0]),
    )


def test_parametrized_linear_nodes_identical():
    sys = DynamicalSystem.linear([[0.7]], [[1.0]])
    man = ReferenceManifold(
        [np.linspace(-0.5, 0.5, 5)],
        chart=lambda th: (np.array([th[0]]), np.array([0.3 * th[0]])),
        theta_of=lambda r: np.atleast_1d(r[0][0]),
    )
    zset = ConstraintSet(1, 1, x_lo=-2, x_hi=2, u_lo=-2, u_hi=2)
    ing = synth_terminal_parametrized(sys, man, zset, [[1.0]], [[1.0]],
                                      epsilon=1e-3)
    Ps = ing.node_values["P"]
    assert np.max(np.abs(Ps - Ps[0])) <= 1e-10
    r_mid = (np.array([0.123]), np.array([0.3 * 0.123]))
    assert np.max(np.abs(ing.P_of(r_mid) - Ps[0])) <= 1e-10


def test_parametrized_nonlinear_verification():
    sys = DynamicalSystem(1, 1, f=lambda x, u: x + u + 0.1 * np.sin(x[0]))
    zset = ConstraintSet(1, 1, x_lo=-1, x_hi=1, u_lo=-1, u_hi=1)
    ing = synth_terminal_parametrized(sys, steady_manifold_scalar(), zset,
                                      [[1.0]], [[1.0]], epsilon=0.05,
                                      n_verify=10_000)
    # independent residual re-check on fresh sample points
    rng = np.random.default_rng(1234)
    Qrelax = np.array([[1.0 + 0.025]])
    for _ in range(500):
        th = rng.uniform(-0.8, 0.8)
        r = (np.array([th]), np.array([-0.1 * np.sin(th)]))
        A, B = sys.jacobians(r[0], r[1])
        res = lqr_residual(A, B, ing.K_of(r), ing.P_of(r), ing.P_of(r),
                           Qrelax, [[1.0]])
        assert res.max_eig <= 1e-10


def test_parametrized_accepts_five_state_three_axis():
    rng = np.random.default_rng(9)
    A = 0.5 * np.eye(5) + 0.1 * rng.normal(size=(5, 5))
    B = rng.normal(size=(5, 2))
    sys = DynamicalSystem.linear(A, B)

    def chart(th):
        # steady state for a held input plus two free input offsets
        u = np.array([th[0], th[1]]) * 0.1
        x = np.linalg.solve(np.eye(5) - A, B @ u) * (1 + 0.0 * th[2])
        return x, u

    man = ReferenceManifold(
        [np.linspace(-1, 1, 3)] * 3,
        chart=chart,
        theta_of=lambda r: np.array([r[1][0] / 0.1, r[1][1] / 0.1, 0.0]),
    )
    zset = ConstraintSet(5, 2, x_lo=-5, x_hi=5, u_lo=-5, u_hi=5)
    ing = synth_terminal_parametrized(sys, man, zset, np.eye(5), np.eye(2),
                                      epsilon=1e-3, n_verify=200)
    assert ing.node_values["P"].shape == (3, 3, 3, 5, 5)
    assert ing.alpha > 0


# ----------------------------------------------------------------------
# economic terminal ingredients
# ----------------------------------------------------------------------

def test_economic_quadratic_cost_gives_zero_p():
    sys = DynamicalSystem.linear([[0.9]], [[1.0]])
    zset = unit_box()
    Q = np.array([[1.0]])
    R = np.array([[1.0]])
    tracking = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                       zset, Q, R, epsilon=1e-3)
    cost = StageCost.quadratic(Q, R)
    ell = StageCost.economic(
        lambda x, u, p: cost.value(x, u, (np.zeros(1), np.zeros(1))))
    ing = synth_terminal_economic(sys, (np.zeros(1), np.zeros(1)), ell,
                                  tracking, zset)
    assert np.max(np.abs(ing.p)) <= 1e-9
    assert ing.alpha > 0


def test_economic_linear_cost_p_by_hand():
    # l_e = x + u^2 on x+ = 0.5 x + u at r = (0, 0):
    # K from tracking, Acl = 0.5 + K; grad phi = 1; p = -1/(Acl - 1)
    sys = DynamicalSystem.linear([[0.5]], [[1.0]])
    zset = unit_box()
    tracking = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                       zset, [[1.0]], [[1.0]], epsilon=1e-3)
    ell = StageCost.economic(lambda x, u, p: float(x[0] + u[0] ** 2))
    ing = synth_terminal_economic(sys, (np.zeros(1), np.zeros(1)), ell,
                                  tracking, zset)
    acl = 0.5 + tracking.K[0, 0]
    p_hand = -1.0 / (acl - 1.0)
    assert ing.p[0] == pytest.approx(p_hand, rel=1e-9)
    # first-order expansion of the decrease condition vanishes at r:
    # d/dx [V(f(x,kf)) - V(x) + l_e(x,kf) - l_e(r)] = 0 at x = x_r
    h = 1e-6

    def gap(xv):
        x = np.array([xv])
        u = ing.law(x)
        return (ing.value(sys.f(x, u)) - ing.value(x)
                + ell.value(x, u) - ell.value(np.zeros(1), np.zeros(1)))

    deriv = (gap(h) - gap(-h)) / (2 * h)
    assert abs(deriv) <= 1e-6


def test_economic_decrease_sampled():
    sys = DynamicalSystem.linear([[0.5]], [[1.0]])
    zset = unit_box()
    tracking = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                       zset, [[1.0]], [[1.0]], epsilon=1e-3)
    ell = StageCost.economic(
        lambda x, u, p: float(np.cos(x[0]) * 0.3 + x[0] + u[0] ** 2))
    ing = synth_terminal_economic(sys, (np.zeros(1), np.zeros(1)), ell,
                                  tracking, zset)
    ell_bar = ell.value(np.zeros(1), np.zeros(1))
    rng = np.random.default_rng(31)
    c0 = 0.25 * ing.p[0] ** 2 / ing.P[0, 0]
    e_c = -0.5 * ing.p[0] / ing.P[0, 0]
    for _ in range(1000):
        s = rng.uniform(-1, 1)
        x = np.array([e_c + s * np.sqrt((ing.alpha + c0) / ing.P[0, 0])])
        u = ing.law(x)
        xp = sys.f(x, u)
        slack = (-ell.value(x, u) + ell_bar
                 - (ing.value(xp) - ing.value(x)))
        assert slack >= -1e-8


# ----------------------------------------------------------------------
# shift_terminal_cost
# ----------------------------------------------------------------------

def test_shift_degenerate_period_identity():
    ref = Reference.periodic([[0.3]], [[0.1]])
    ell = StageCost.economic(lambda x, u, p: float(x[0] ** 2 + u[0]))
    shifted = shift_terminal_cost(lambda x, t: 7.0, ref, ell)
    assert shifted(np.zeros(1), 0) == 7.0
    assert shifted.offset(5) == 0.0


def test_shift_two_periodic_hand_telescoping():
    # reference stage values (a, b): offsets are (a/2, b/2); along the
    # reference the shifted decrease produces the uniform slack (a+b)/2
    sys = DynamicalSystem(1, 1, f=lambda x, u: -x + u)
    ref = Reference.periodic([[0.5], [-0.5]], [[0.0], [0.0]])
    a_val, b_val = 2.0, 1.0

    def fn(x, u, p):
        return a_val if x[0] > 0 else b_val

    ell = StageCost.economic(fn)
    shifted = shift_terminal_cost(lambda x, t: 0.0, ref, ell)
    assert shifted.offset(0) == pytest.approx(a_val / 2)
    assert shifted.offset(1) == pytest.approx(b_val / 2)
    assert shifted.offset(0) - shifted.offset(1) == pytest.approx(
        (a_val - b_val) / 2)
    assert shifted.ell_bar == pytest.approx((a_val + b_val) / 2)
    # telescoping along the reference orbit itself
    for t in range(2):
        xr, ur = ref.at(t)
        x_next = sys.f(xr, ur)
        lhs = (shifted(x_next, t + 1) - shifted(xr, t)
               + ell.value(xr, ur))
        assert lhs == pytest.approx(shifted.ell_bar, abs=1e-12)


def test_shift_sampled_decrease_scalar_periodic():
    sys = DynamicalSystem.linear([[-0.5]], [[1.0]])
    a = 0.4
    # orbit of x+ = -0.5x + u: x1 = -0.5 x0 + u0 with (a, -a):
    u0 = -a + 0.5 * a
    u1 = a - 0.5 * a
    ref = Reference.periodic([[a], [-a]], [[u0], [u1]])
    zset = ConstraintSet(1, 1, x_lo=-2, x_hi=2, u_lo=-2, u_hi=2)
    tracking = synth_terminal_trajectory(sys, ref, zset, [[1.0]], [[1.0]],
                                         epsilon=0.05)
    ell = StageCost.economic(
        lambda x, u, p: float((x[0] - 0.2) ** 2 + 0.5 * u[0] ** 2))
    econ = synth_terminal_economic_periodic(sys, ref, ell, tracking, zset)
    shifted = shift_terminal_cost(econ, ref, ell)
    rng = np.random.default_rng(55)
    for t in range(2):
        P = econ.P_seq[t]
        p = econ.p_seq[t]
        xr, ur = ref.at(t)
        c0 = 0.25 * p[0] ** 2 / P[0, 0]
        e_c = -0.5 * p[0] / P[0, 0]
        for _ in range(500):
            s = rng.uniform(-1, 1)
            e = e_c + s * np.sqrt(max(econ.alpha + c0, 0) / P[0, 0])
            x = xr + np.array([e])
            u = econ.law(x, t)
            xp = sys.f(x, u)
            slack = (shifted.ell_bar - ell.value(x, u)
                     - (shifted(xp, t + 1) - shifted(x, t)))
            assert slack >= -1e-8


def test_shift_preserves_argmin_in_x():
    ref = Reference.periodic([[0.1], [-0.1]], [[0.0], [0.0]])
    ell = StageCost.economic(lambda x, u, p: float(x[0] + 1.0))
    base = lambda x, t: float((x[0] - 0.05) ** 2)
    shifted = shift_terminal_cost(base, ref, ell)
    xs = np.linspace(-1, 1, 401)
    for t in range(2):
        base_vals = [base(np.array([x]), t) for x in xs]
        shift_vals = [shifted(np.array([x]), t) for x in xs]
        assert np.argmin(base_vals) == np.argmin(shift_vals)


# ----------------------------------------------------------------------
# terminal_equality / ellipsoid_inclusion
# ----------------------------------------------------------------------

def test_equality_variant_fields():
    ing = terminal_equality((np.array([0.5]), np.array([0.1])))
    assert ing.variant == "equality"
    assert ing.alpha == 0.0
    assert ing.value(np.array([3.0])) == 0.0
    assert ing.law(np.array([3.0]))[0] == 0.1
    assert ing.contains(np.array([0.5]))
    assert not ing.contains(np.array([0.6]))


def test_equality_controllability_hint_double_integrator():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    sys = DynamicalSystem.linear(A, B)
    ing = terminal_equality((np.zeros(2), np.zeros(1)), sys=sys)
    assert ing.min_horizon_hint == 2


def test_ellipsoid_inclusion_concentric():
    P = np.diag([2.0, 1.0])
    assert ellipsoid_inclusion(np.zeros(2), 1.0, np.zeros(2), 1.0, P)
    assert ellipsoid_inclusion(np.zeros(2), 0.5, np.zeros(2), 1.0, P)
    assert not ellipsoid_inclusion(np.zeros(2), 1.1, np.zeros(2), 1.0, P)


def test_ellipsoid_inclusion_scalar_interval():
    assert ellipsoid_inclusion([0.0], 1.0, [1.0], 4.0, [[1.0]])
    assert not ellipsoid_inclusion([0.0], 1.0, [1.0], 3.9, [[1.0]])


def test_ellipsoid_inclusion_no_false_positives():
    rng = np.random.default_rng(10)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.2 * np.eye(n)
        c1 = rng.normal(size=n)
        c2 = rng.normal(size=n)
        a1 = rng.uniform(0.1, 2.0)
        a2 = rng.uniform(0.1, 2.0)
        if not ellipsoid_inclusion(c1, a1, c2, a2, P):
            continue
        # dense boundary sampling of the inner ellipsoid
        w, V = np.linalg.eigh(P)
        P_inv_half = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
        D = rng.standard_normal(size=(300, n))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        pts = c1 + np.sqrt(a1) * D @ P_inv_half.T
        for z in pts:
            assert (z - c2) @ P @ (z - c2) <= a2 + 1e-9


def test_ingredients_roundtrip_dict():
    sys = DynamicalSystem.linear([[0.8]], [[1.0]])
    ing = synth_terminal_setpoint(sys, (np.zeros(1), np.zeros(1)),
                                  unit_box(), [[1.0]], [[1.0]],
                                  epsilon=1e-3)
    d = ing.to_dict()
    back = TerminalIngredients.from_dict(d)
    assert back.variant == ing.variant
    assert np.array_equal(back.P, ing.P)
    assert back.alpha == ing.alpha
    assert back.rho == ing.rho
    x = np.array([0.2])
    assert back.value(x) == ing.value(x)
    assert back.law(x)[0] == ing.law(x)[0]
