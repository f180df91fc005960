"""Benchmark library: construction, documented properties, and the frozen
characteristics the acceptance runs rely on."""

import math

import numpy as np
import pytest
from scipy.integrate import quad_vec
from scipy.linalg import eig, expm

from dynmpc.benchmarks import (BENCHMARK_IDS, BenchmarkSystem,
                               double_integrator, get_benchmark, msd_chain,
                               scalar_cubic, thermal, unicycle)
from dynmpc.solvers import riccati_step


# ----------------------------------------------------------------------
class TestChain:
    def test_exact_discretization_against_quadrature(self):
        # oracle: A = expm(Ac dt) and B = int_0^dt expm(Ac s) ds Bc,
        # rebuilt from scratch with an independent integrator
        b = msd_chain()
        nq = 6
        n = 12
        k, c, dt = 1.0, 0.1, 0.1
        K = np.zeros((nq, nq))
        K[0, 0] = k
        for i in range(nq - 1):
            K[i, i] += k
            K[i + 1, i + 1] += k
            K[i, i + 1] -= k
            K[i + 1, i] -= k
        Ac = np.zeros((n, n))
        Ac[:nq, nq:] = np.eye(nq)
        Ac[nq:, :nq] = -K
        Ac[nq:, nq:] = -c * np.eye(nq)
        Bc = np.zeros((n, 1))
        Bc[nq, 0] = 1.0
        A_oracle = expm(Ac * dt)
        B_oracle, _err = quad_vec(lambda s: expm(Ac * s) @ Bc, 0.0, dt,
                                  epsabs=1e-13, epsrel=1e-13)
        assert np.max(np.abs(b.extras["A"] - A_oracle)) < 1e-12
        assert np.max(np.abs(b.extras["B"] - B_oracle)) < 1e-12

    def test_open_loop_stable_but_slow(self):
        b = msd_chain()
        rho = max(abs(np.linalg.eigvals(b.extras["A"])))
        assert rho == pytest.approx(0.9950124791926838, abs=1e-12)
        assert rho < 1.0

    def test_strongly_non_minimum_phase(self):
        # transmission zeros from the system pencil [[A - zI, B], [C, 0]]
        b = msd_chain()
        A, B, C = b.extras["A"], b.extras["B"], b.extras["C"]
        n = A.shape[0]
        M = np.block([[A, B], [C, np.zeros((1, 1))]])
        E = np.zeros((n + 1, n + 1))
        E[:n, :n] = np.eye(n)
        zeros = eig(M, E, right=False)
        finite = zeros[np.isfinite(zeros)]
        outside = np.sum(np.abs(finite) > 1.0 + 1e-9)
        assert outside == 5
        assert np.max(np.abs(finite)) > 1e3

    def test_stage_weight_assembly(self):
        b = msd_chain(q_s=1e-3, r_weight=2.0)
        C = b.extras["C"]
        expect = C.T @ C + 1e-3 * np.eye(12)
        assert np.array_equal(b.extras["Qx"], expect)
        assert np.array_equal(b.stage.Q, expect)
        assert np.array_equal(b.stage.R, np.array([[2.0]]))

    def test_short_cheap_horizon_destabilizes(self):
        # the documented divergence pocket: N = 49, R = 0.005
        b = msd_chain(r_weight=0.005)
        A, B = b.extras["A"], b.extras["B"]
        Q, R = b.extras["Qx"], b.extras["R"]
        P = Q.copy()
        K = None
        for _ in range(49):
            P, K = riccati_step(A, B, Q, R, P)
        rho = max(abs(np.linalg.eigvals(A + B @ K)))
        assert rho > 1.0

    def test_parameter_overrides(self):
        b = msd_chain(n_mass=3, dt=0.2)
        assert b.sys.n == 6
        assert b.extras["dt"] == 0.2
        with pytest.raises(ValueError):
            msd_chain(n_mass=1)

    def test_default_initial_state_is_normalized(self):
        b = msd_chain()
        assert np.linalg.norm(b.x0) == pytest.approx(1.0, abs=1e-12)
        assert b.zset.contains(b.x0, np.zeros(1))


# ----------------------------------------------------------------------
class TestThermal:
    def test_period_and_band_structure(self):
        b = thermal()
        assert isinstance(b.zset, list) and len(b.zset) == 24
        for phase, z in enumerate(b.zset):
            if 8 <= phase <= 18:
                assert z.x_lo[0] == 20.0 and z.x_hi[0] == 24.0
            else:
                assert z.x_lo[0] == 18.0 and z.x_hi[0] == 26.0
            assert z.u_lo[0] == 0.0 and z.u_hi[0] == 3.0

    def test_uncooled_room_violates_comfort(self):
        b = thermal()
        x = b.x0.copy()
        for _ in range(100):
            x = b.sys.f(x, np.zeros(1))
        assert x[0] == pytest.approx(30.0, abs=1e-3)  # ambient
        assert all(z.violation(x, np.zeros(1)) > 0 for z in b.zset)

    def test_constant_orbit_is_strictly_feasible(self):
        b = thermal()
        x = np.array([22.0])
        u = np.array([1.6])
        assert np.max(np.abs(b.sys.f(x, u) - x)) < 1e-12  # equilibrium
        assert all(z.in_reference_set(x, u) for z in b.zset)

    def test_price_signal(self):
        b = thermal()
        price = b.extras["price"]
        assert price.period == 24
        assert price.at(0)[0] == 0.2
        assert price.at(13)[0] == 1.0
        assert price.at(9)[0] == 0.5
        assert np.array_equal(price.at(27), price.at(3))
        vals = b.extras["price_values"].ravel()
        assert set(np.unique(vals)) == {0.2, 0.5, 1.0}

    def test_stage_cost_and_analytic_derivatives(self):
        b = thermal()
        x = np.array([21.0])
        u = np.array([1.3])
        p = b.extras["price"].at(14)
        assert b.stage.value(x, u, param=p) == pytest.approx(
            1.0 * 1.3 + 0.01 * 1.3 ** 2, abs=1e-12)
        gx, gu = b.stage.gradient(x, u, param=p)
        assert gx[0] == 0.0
        assert gu[0] == pytest.approx(1.0 + 0.02 * 1.3, abs=1e-12)
        _, _, Huu = b.stage.hessian(x, u, param=p)
        assert Huu[0, 0] == pytest.approx(0.02, abs=1e-12)

    def test_discrete_levels_span_the_hull(self):
        b = thermal()
        lv = b.extras["levels"]
        assert lv == (0.0, 1.5, 3.0)
        assert b.zset[0].u_lo[0] == min(lv)
        assert b.zset[0].u_hi[0] == max(lv)


# ----------------------------------------------------------------------
class TestUnicycle:
    def test_analytic_jacobians_match_finite_differences(self):
        b = unicycle()
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = rng.uniform(-1, 1, 3)
            u = rng.uniform(-1, 1, 2)
            A, B = b.sys.jacobians(x, u)
            Afd, Bfd = b.sys.fd_jacobians(x, u)
            assert np.max(np.abs(A - Afd)) < 1e-7
            assert np.max(np.abs(B - Bfd)) < 1e-7

    def test_forward_motion(self):
        b = unicycle(dt=0.1)
        x1 = b.sys.f(np.zeros(3), np.array([1.0, 0.0]))
        assert np.allclose(x1, [0.1, 0.0, 0.0])

    def test_sideways_offset_is_in_the_constraint_set(self):
        b = unicycle()
        assert b.zset.contains(b.x0, np.zeros(2))


# ----------------------------------------------------------------------
class TestSmallPlants:
    def test_double_integrator_matrices(self):
        b = double_integrator()
        A, B, c, C, D = b.sys.linear_terms
        assert np.array_equal(A, [[1.0, 1.0], [0.0, 1.0]])
        assert np.array_equal(B, [[0.5], [1.0]])
        assert np.array_equal(C, [[1.0, 0.0]])
        assert np.array_equal(c, [0.0, 0.0])
        assert b.zset.contains(b.x0, np.zeros(1))

    def test_scalar_cubic_dynamics_and_jacobian(self):
        b = scalar_cubic()
        assert b.sys.f([0.5], [0.0])[0] == pytest.approx(0.625, abs=1e-15)
        A, B = b.sys.jacobians(np.array([0.5]), np.zeros(1))
        assert A[0, 0] == pytest.approx(1.0 + 3 * 0.25, abs=1e-15)
        assert B[0, 0] == 1.0
        Afd, Bfd = b.sys.fd_jacobians(np.array([0.5]), np.zeros(1))
        assert abs(A[0, 0] - Afd[0, 0]) < 1e-8


# ----------------------------------------------------------------------
class TestRegistry:
    def test_all_ids_construct(self):
        for bid in BENCHMARK_IDS:
            b = get_benchmark(bid)
            assert isinstance(b, BenchmarkSystem)
            assert b.id == bid
            assert b.notes  # every entry documents itself
            assert b.x0.shape == (b.sys.n,)

    def test_unknown_id_lists_the_alternatives(self):
        with pytest.raises(ValueError, match="msd-chain"):
            get_benchmark("no-such-plant")

    def test_parameters_are_forwarded(self):
        b = get_benchmark("msd-chain", r_weight=0.25)
        assert b.extras["R"][0, 0] == 0.25
        with pytest.raises(TypeError):
            get_benchmark("thermal", r_weight=1.0)

    def test_construction_is_deterministic(self):
        a = get_benchmark("msd-chain")
        b = get_benchmark("msd-chain")
        assert a.extras["A"].tobytes() == b.extras["A"].tobytes()
        assert a.extras["B"].tobytes() == b.extras["B"].tobytes()
