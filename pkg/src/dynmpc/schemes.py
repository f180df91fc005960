"""MPC optimization problems and one-step controllers.

Every scheme is transcribed by multiple shooting into an NlpProblem over
z = [u_0..u_{N-1}, x_1..x_N, extras] (x_0 enters as data) and solved by the
shared SQP kernel.  Warm starts come from the shifted previous solution with
the terminal law appended; candidates are verified feasible before they are
trusted.  Applied inputs and reported costs always come from a re-rolled
trajectory, never from the raw solver iterate.
"""

import numpy as np

from .model import Reference, rollout
from .solvers import NlpProblem, SolveReport, solve_dare, solve_nlp, \
    solve_tv_riccati
from .terminal import TerminalIngredients, shift_terminal_cost

_FD = 1e-6

_FIXED_REF_SCHEMES = ("stabilizing", "trajectory-tracking", "economic",
                      "periodic-economic")


class InfeasibleProblem(RuntimeError):
    """The optimization problem has no feasible point (reported, not hidden)."""


# ----------------------------------------------------------------------
# problem specification / solution / controller state
# ----------------------------------------------------------------------

class MpcProblemSpec:
    """Static description of one MPC scheme instance.

    scheme: stabilizing | trajectory-tracking | setpoint-tracking-artificial
    | periodic-tracking-artificial | planner-tracker | economic |
    periodic-economic | economic-self-tuning | periodic-economic-artificial
    | periodicity-constrained | unconstrained.
    """

    SCHEMES = (
        "stabilizing", "trajectory-tracking", "setpoint-tracking-artificial",
        "periodic-tracking-artificial", "planner-tracker", "economic",
        "periodic-economic", "economic-self-tuning",
        "periodic-economic-artificial", "periodicity-constrained",
        "unconstrained",
    )

    def __init__(self, scheme, sys, N, zset=None, stage=None, terminal=None,
                 ref=None, S=None, T=1, alpha_min=1e-8, beta=0.0,
                 beta_adaptive=False, M=1, nu=1, signal=None,
                 shifted_terminal=True, terminal_weight=None,
                 rollout_horizon=0, economic_terminal_mode="equality"):
        if scheme not in self.SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.scheme = scheme
        self.sys = sys
        self.N = int(N)
        self.zset = zset
        self.stage = stage
        self.terminal = terminal
        self.ref = ref
        self.S = None if S is None else np.atleast_2d(np.asarray(S, float))
        self.T = int(T)
        self.alpha_min = float(alpha_min)
        self.beta = float(beta)
        self.beta_adaptive = bool(beta_adaptive)
        self.M = int(M)
        self.nu = int(nu)
        self.signal = signal
        self.shifted_terminal = bool(shifted_terminal)
        self.terminal_weight = terminal_weight
        self.rollout_horizon = int(rollout_horizon)
        self.economic_terminal_mode = economic_terminal_mode
        if self.T < 1:
            raise ValueError("period T must be at least 1")
        if self.nu < 1:
            raise ValueError("application length nu must be at least 1")
        if self.nu > 1 and scheme not in _FIXED_REF_SCHEMES:
            raise ValueError("multi-step application needs a fixed reference")
        needs_terminal = (
            scheme not in ("unconstrained", "periodicity-constrained")
            and self.N > 0
            and not (scheme in ("economic-self-tuning",
                                "periodic-economic-artificial")
                     and economic_terminal_mode == "equality"))
        if scheme == "unconstrained":
            if terminal is not None:
                raise ValueError("the unconstrained scheme forbids terminal "
                                 "ingredients")
        elif needs_terminal and terminal is None:
            raise ValueError(f"{scheme} requires terminal ingredients")
        if scheme in ("setpoint-tracking-artificial",
                      "periodic-tracking-artificial", "planner-tracker") \
                and not self.alpha_min > 0:
            raise ValueError("alpha_min must be positive when the terminal "
                             "scaling is a decision variable")
        self._lq_cache = None

    def zset_at(self, t):
        """Constraint set at absolute time t (lists cycle periodically)."""
        if isinstance(self.zset, (list, tuple)):
            return self.zset[t % len(self.zset)]
        return self.zset


class MpcSolution:
    """One solved MPC instance: inputs, predictions, values, candidate."""

    def __init__(self, u_seq, x_pred, value, report, r_seq=None, alpha=None,
                 offset_value=0.0, candidate=None, candidate_ok=None,
                 shifted_offset=0.0):
        self.u_seq = np.asarray(u_seq, float)
        self.x_pred = np.asarray(x_pred, float)
        self.value = float(value)
        self.report = report
        self.r_seq = r_seq
        self.alpha = alpha
        self.offset_value = float(offset_value)
        self.candidate = candidate
        self.candidate_ok = candidate_ok
        self.shifted_offset = float(shifted_offset)
        self.ref_period_cost = None

    @property
    def u0(self):
        return self.u_seq[0]


class ControllerState:
    """Per-closed-loop memory: warm starts, kappa, beta, planner data."""

    def __init__(self, spec, t0=0):
        self.spec = spec
        self.t = int(t0)
        self.prev = None
        self.kappa = np.inf
        self.beta = spec.beta
        self.reference = spec.ref
        self.ref_alpha = None if spec.terminal is None else \
            spec.terminal.alpha
        self.planner_countdown = spec.M
        self.planner_info = None
        self.stationary_steps = 0
        self.last_r = None


# ----------------------------------------------------------------------
# generic NLP assembly over a flat decision vector
# ----------------------------------------------------------------------

class _OcpBuilder:
    def __init__(self, dim):
        self.dim = dim
        self.obj_terms = []    # (value(z), add_grad(z, g))
        self.hess_terms = []   # add_hess(z, H)
        self.eqs = []          # (size, fun(z), jac(z))
        self.lin_A = []
        self.lin_b = []
        self.ineqs = []        # (size, fun(z), jac(z))

    def add_obj(self, value, add_grad, add_hess=None):
        self.obj_terms.append((value, add_grad))
        if add_hess is not None:
            self.hess_terms.append(add_hess)

    def add_eq(self, size, fun, jac):
        self.eqs.append((int(size), fun, jac))

    def add_lin_ineq(self, A, b):
        self.lin_A.append(np.atleast_2d(np.asarray(A, float)))
        self.lin_b.append(np.asarray(b, float).ravel())

    def add_ineq(self, size, fun, jac):
        self.ineqs.append((int(size), fun, jac))

    def objective(self, z):
        return float(sum(v(z) for v, _ in self.obj_terms))

    def gradient(self, z):
        g = np.zeros(self.dim)
        for _, ag in self.obj_terms:
            ag(z, g)
        return g

    def hessian(self, z, lamE, lamI):
        H = np.zeros((self.dim, self.dim))
        for ah in self.hess_terms:
            ah(z, H)
        return H

    def eq(self, z):
        if not self.eqs:
            return np.zeros(0)
        return np.concatenate([fun(z) for _, fun, _ in self.eqs])

    def eq_jac(self, z):
        if not self.eqs:
            return np.zeros((0, self.dim))
        return np.vstack([jac(z) for _, _, jac in self.eqs])

    def _lin(self):
        if not self.lin_A:
            return np.zeros((0, self.dim)), np.zeros(0)
        return np.vstack(self.lin_A), np.concatenate(self.lin_b)

    def ineq(self, z):
        A, b = self._lin()
        parts = [A @ z - b] if A.shape[0] else []
        parts += [fun(z) for _, fun, _ in self.ineqs]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def ineq_jac(self, z):
        A, _ = self._lin()
        parts = [A] if A.shape[0] else []
        parts += [jac(z) for _, _, jac in self.ineqs]
        if not parts:
            return np.zeros((0, self.dim))
        return np.vstack(parts)

    def max_violation(self, z):
        v = 0.0
        if self.eqs:
            v = max(v, float(np.max(np.abs(self.eq(z)))))
        c = self.ineq(z)
        if c.size:
            v = max(v, float(np.max(c)))
        return v

    def build(self, guess, kkt_tol=1e-8, con_tol=1e-10, max_iter=120):
        has_eq = bool(self.eqs)
        has_in = bool(self.ineqs) or bool(self.lin_A)
        return NlpProblem(
            self.dim,
            objective=self.objective,
            gradient=self.gradient,
            x0=guess,
            eq=self.eq if has_eq else None,
            eq_jac=self.eq_jac if has_eq else None,
            ineq=self.ineq if has_in else None,
            ineq_jac=self.ineq_jac if has_in else None,
            hessian=self.hessian if self.hess_terms else None,
            kkt_tol=kkt_tol, con_tol=con_tol, max_iter=max_iter,
        )


def _fd_grad_into(fun, z, idx, g):
    """Central-difference gradient of fun over coordinates idx, added to g."""
    for i in idx:
        h = _FD * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] += (fun(zp) - fun(zm)) / (2.0 * h)


def _fd_jac_row(fun, z, idx, dim):
    row = np.zeros(dim)
    _fd_grad_into(fun, z, idx, row)
    return row


# ----------------------------------------------------------------------
# shared transcription pieces
# ----------------------------------------------------------------------

class _Layout:
    def __init__(self):
        self.slices = {}
        self.dim = 0

    def add(self, name, size):
        sl = slice(self.dim, self.dim + int(size))
        self.slices[name] = sl
        self.dim += int(size)
        return sl

    def __getitem__(self, name):
        return self.slices[name]


def _u_slice(layout, k, m):
    base = layout["u"].start
    return slice(base + k * m, base + (k + 1) * m)


def _x_slice(layout, k, n):
    # k in 1..N maps to x-block entry k-1 (x_0 is data)
    base = layout["x"].start
    return slice(base + (k - 1) * n, base + k * n)


def _r_slice(layout, j, n, m):
    base = layout["r"].start
    return slice(base + j * (n + m), base + (j + 1) * (n + m))


def _add_dynamics(builder, layout, sys, x0, N):
    n, m = sys.n, sys.m

    def fun(z):
        c = np.empty(N * n)
        xk = x0
        for k in range(N):
            u = z[_u_slice(layout, k, m)]
            xk1 = z[_x_slice(layout, k + 1, n)]
            c[k * n:(k + 1) * n] = xk1 - sys.f(xk, u)
            xk = xk1
        return c

    def jac(z):
        J = np.zeros((N * n, builder.dim))
        xk = x0
        for k in range(N):
            u = z[_u_slice(layout, k, m)]
            A, B = sys.jacobians(xk, u)
            rows = slice(k * n, (k + 1) * n)
            J[rows, _x_slice(layout, k + 1, n)] = np.eye(n)
            J[rows, _u_slice(layout, k, m)] = -B
            if k >= 1:
                J[rows, _x_slice(layout, k, n)] = -A
            xk = z[_x_slice(layout, k + 1, n)]
        return J

    builder.add_eq(N * n, fun, jac)


def _add_stage_constraints(builder, layout, spec, x0, t, N):
    """Pointwise membership of (x_k, u_k) in Z for k = 0..N-1."""
    sys = spec.sys
    n, m = sys.n, sys.m
    for k in range(N):
        zs = spec.zset_at(t + k)
        if zs is None:
            continue
        W, b, z0 = zs.rows()
        if not W.shape[0]:
            continue
        A = np.zeros((W.shape[0], builder.dim))
        rhs = b + W @ z0
        A[:, _u_slice(layout, k, m)] = W[:, n:]
        if k == 0:
            rhs = rhs - W[:, :n] @ x0
        else:
            A[:, _x_slice(layout, k, n)] = W[:, :n]
        builder.add_lin_ineq(A, rhs)


def _add_periodicity(builder, layout, sys, T):
    """r_{j+1 mod T} = f(r_j) for all phases (steady state when T = 1)."""
    n, m = sys.n, sys.m

    def fun(z):
        c = np.empty(T * n)
        for j in range(T):
            rj = z[_r_slice(layout, j, n, m)]
            rjn = z[_r_slice(layout, (j + 1) % T, n, m)]
            c[j * n:(j + 1) * n] = rjn[:n] - sys.f(rj[:n], rj[n:])
        return c

    def jac(z):
        J = np.zeros((T * n, builder.dim))
        for j in range(T):
            rsl = _r_slice(layout, j, n, m)
            rj = z[rsl]
            A, B = sys.jacobians(rj[:n], rj[n:])
            rows = slice(j * n, (j + 1) * n)
            nsl = _r_slice(layout, (j + 1) % T, n, m)
            J[rows, nsl.start:nsl.start + n] += np.eye(n)
            J[rows, rsl.start:rsl.start + n] += -A
            J[rows, rsl.start + n:rsl.stop] += -B
        return J

    builder.add_eq(T * n, fun, jac)


def _quad_stage_objective(builder, layout, spec, x0, N, ref_lookup):
    """Tracking stage-cost sum with a fixed reference lookup(k) -> (xr, ur)."""
    n, m = spec.sys.n, spec.sys.m
    Q = spec.stage.Q
    R = spec.stage.R

    def value(z):
        tot = 0.0
        for k in range(N):
            xr, ur = ref_lookup(k)
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            dx = xk - xr
            du = z[_u_slice(layout, k, m)] - ur
            tot += dx @ Q @ dx + du @ R @ du
        return tot

    def add_grad(z, g):
        for k in range(N):
            xr, ur = ref_lookup(k)
            g[_u_slice(layout, k, m)] += \
                2.0 * R @ (z[_u_slice(layout, k, m)] - ur)
            if k >= 1:
                g[_x_slice(layout, k, n)] += \
                    2.0 * Q @ (z[_x_slice(layout, k, n)] - xr)

    def add_hess(z, H):
        for k in range(N):
            us = _u_slice(layout, k, m)
            H[us, us] += 2.0 * R
            if k >= 1:
                xs = _x_slice(layout, k, n)
                H[xs, xs] += 2.0 * Q

    builder.add_obj(value, add_grad, add_hess)


def _econ_stage_objective(builder, layout, spec, x0, N, param_lookup):
    n, m = spec.sys.n, spec.sys.m
    ell = spec.stage

    def value(z):
        tot = 0.0
        for k in range(N):
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            tot += ell.value(xk, z[_u_slice(layout, k, m)],
                             param=param_lookup(k))
        return tot

    def add_grad(z, g):
        for k in range(N):
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            gx, gu = ell.gradient(xk, z[_u_slice(layout, k, m)],
                                  param=param_lookup(k))
            g[_u_slice(layout, k, m)] += gu
            if k >= 1:
                g[_x_slice(layout, k, n)] += gx

    def add_hess(z, H):
        for k in range(N):
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            Hxx, Hxu, Huu = ell.hessian(xk, z[_u_slice(layout, k, m)],
                                        param=param_lookup(k))
            us = _u_slice(layout, k, m)
            H[us, us] += Huu
            if k >= 1:
                xs = _x_slice(layout, k, n)
                H[xs, xs] += Hxx
                H[xs, us] += Hxu
                H[us, xs] += Hxu.T

    builder.add_obj(value, add_grad, add_hess)


def _solve_and_check(spec, builder, guess, max_iter=120):
    prob = builder.build(guess, max_iter=max_iter)
    rep = solve_nlp(prob)
    if rep.x is None:
        raise InfeasibleProblem(f"{spec.scheme}: solver returned no iterate")
    viol = builder.max_violation(rep.x)
    if rep.status in ("infeasible", "diverged") or viol > 1e-6:
        raise InfeasibleProblem(
            f"{spec.scheme}: no feasible solution found "
            f"(violation {viol:.2e}, status {rep.status})")
    return rep


def _reroll(sys, x0, u_flat, N):
    u_seq = np.asarray(u_flat, float).reshape(N, sys.m)
    return u_seq, rollout(sys, x0, u_seq)


# ----------------------------------------------------------------------
# fixed-reference schemes: stabilizing / tracking / economic
# ----------------------------------------------------------------------

def _solve_fixed_reference(spec, x, t=0, warm=None, ref=None, terminal=None):
    sys = spec.sys
    n, m = sys.n, sys.m
    N = spec.N
    x0 = np.asarray(x, float)
    ing = terminal if terminal is not None else spec.terminal
    if ref is None:
        ref = spec.ref if spec.ref is not None else ing.ref
    economic = spec.stage.variant == "economic"

    layout = _Layout()
    layout.add("u", N * m)
    layout.add("x", N * n)
    builder = _OcpBuilder(layout.dim)

    _add_dynamics(builder, layout, sys, x0, N)
    _add_stage_constraints(builder, layout, spec, x0, t, N)

    if economic:
        param_lookup = (lambda k: None) if spec.signal is None else \
            (lambda k: spec.signal.at(t + k))
        _econ_stage_objective(builder, layout, spec, x0, N, param_lookup)
    else:
        _quad_stage_objective(builder, layout, spec, x0, N,
                              lambda k: ref.at(t + k))

    # terminal pieces at absolute time t+N
    tN = t + N
    xN_sl = _x_slice(layout, N, n)
    shifted_offset = 0.0
    if ing.variant == "equality":
        xrN, _ = ing.ref_pair(tN)

        def eq_fun(z):
            return z[xN_sl] - xrN

        def eq_jac(z):
            J = np.zeros((n, builder.dim))
            J[:, xN_sl] = np.eye(n)
            return J

        builder.add_eq(n, eq_fun, eq_jac)
    else:
        P = ing.P_at(tN)
        pvec = ing.p_at(tN)
        xrN, _ = ing.ref_pair(tN)
        alpha = ing.alpha

        def vf(z):
            e = z[xN_sl] - xrN
            return float(e @ P @ e + pvec @ e)

        def vf_grad(z, g):
            e = z[xN_sl] - xrN
            g[xN_sl] += 2.0 * P @ e + pvec

        def vf_hess(z, H):
            H[xN_sl, xN_sl] += 2.0 * P

        builder.add_obj(vf, vf_grad, vf_hess)
        if spec.shifted_terminal and economic and ref.period > 1 \
                and spec.signal is not None:
            shifter = shift_terminal_cost(ing, ref, spec.stage, spec.signal)
            shifted_offset = shifter.offset(tN)
            builder.add_obj(lambda z: shifted_offset, lambda z, g: None)

        def term_con(z):
            return np.array([vf(z) - alpha])

        def term_jac(z):
            row = np.zeros((1, builder.dim))
            e = z[xN_sl] - xrN
            row[0, xN_sl] = 2.0 * P @ e + pvec
            return row

        builder.add_ineq(1, term_con, term_jac)

    guess = _fixed_ref_guess(spec, layout, x0, t, warm, ing)
    rep = _solve_and_check(spec, builder, guess)

    u_seq, xs = _reroll(sys, x0, rep.x[layout["u"]], N)
    z_fix = rep.x.copy()
    z_fix[layout["u"]] = u_seq.ravel()
    z_fix[layout["x"]] = xs[1:].ravel()
    value = builder.objective(z_fix)
    cand = _shift_fixed_candidate(spec, u_seq, xs, t, spec.nu, ing)
    ok = _check_candidate_fixed(spec, xs[spec.nu], t + spec.nu, cand, ing)
    return MpcSolution(u_seq, xs, value, rep, candidate=cand,
                       candidate_ok=ok, shifted_offset=shifted_offset)


def _fixed_ref_guess(spec, layout, x0, t, warm, ing):
    sys = spec.sys
    N = spec.N
    z = np.zeros(layout.dim)
    if warm is not None:
        u_seq = np.asarray(warm["u"], float)
    else:
        # steer along the terminal law toward the reference
        u_list = []
        xk = x0
        for k in range(N):
            u = ing.law(xk, t + k)
            zs = spec.zset_at(t + k)
            if zs is not None and zs.kind == "box":
                u = np.clip(u, zs.u_lo, zs.u_hi)
            u_list.append(u)
            xk = sys.f(xk, u)
        u_seq = np.array(u_list)
    xs = rollout(sys, x0, u_seq)
    z[layout["u"]] = np.asarray(u_seq, float).ravel()
    z[layout["x"]] = xs[1:].ravel()
    return z


def _shift_fixed_candidate(spec, u_seq, xs, t, steps, ing):
    """Drop the first `steps` inputs, append the terminal law that often."""
    u_new = [np.asarray(u, float) for u in u_seq[steps:]]
    xk = xs[-1]
    for i in range(steps):
        ua = ing.law(xk, t + spec.N + i)
        u_new.append(ua)
        xk = spec.sys.f(xk, ua)
    return {"u": np.array(u_new)}


def _check_candidate_fixed(spec, x_next, t_next, cand, ing, tol=1e-7):
    try:
        xs = rollout(spec.sys, x_next, cand["u"])
    except Exception:
        return False
    for k in range(spec.N):
        zs = spec.zset_at(t_next + k)
        if zs is not None and zs.violation(xs[k], cand["u"][k]) > tol:
            return False
    if ing.variant == "equality":
        xr, _ = ing.ref_pair(t_next + spec.N)
        return bool(np.max(np.abs(xs[-1] - xr)) <= 1e-6)
    return ing.value(xs[-1], t_next + spec.N) <= ing.alpha + tol


def solve_stabilizing_mpc(spec, x, t=0, warm=None):
    """Terminal-ingredient MPC around a fixed setpoint."""
    return _solve_fixed_reference(spec, x, t, warm)


def solve_tracking_mpc(spec, x, t, warm=None, ref=None, terminal=None):
    """Trajectory/orbit tracking MPC with time-varying ingredients."""
    return _solve_fixed_reference(spec, x, t, warm, ref=ref,
                                  terminal=terminal)


def solve_economic_mpc(spec, x, t=0, warm=None):
    """Economic MPC with an off-center quadratic (or equality) terminal."""
    return _solve_fixed_reference(spec, x, t, warm)


def solve_periodic_economic_mpc(spec, x, t, warm=None):
    """Economic MPC along a fixed periodic reference."""
    return _solve_fixed_reference(spec, x, t, warm)


# ----------------------------------------------------------------------
# artificial-reference tracking schemes (setpoint / periodic)
# ----------------------------------------------------------------------

def _terminal_constant_data(ing):
    """(P, K) treated as constant when the family is reference-independent."""
    if ing.variant == "stationary":
        return ing.P, ing.K
    if ing.variant == "time-varying":
        P0, K0 = ing.P_seq[0], ing.K_seq[0]
        if all(np.allclose(P, P0, atol=1e-12) for P in ing.P_seq) and \
                all(np.allclose(K, K0, atol=1e-12) for K in ing.K_seq):
            return P0, K0
    if ing.variant == "parametrized":
        Ps = ing.node_values["P"]
        Ks = ing.node_values["K"]
        first_P = Ps[(0,) * (Ps.ndim - 2)]
        first_K = Ks[(0,) * (Ks.ndim - 2)]
        if np.allclose(Ps, first_P, atol=1e-12) and \
                np.allclose(Ks, first_K, atol=1e-12):
            return first_P, first_K
    return None


def _terminal_PK_of(ing, const_PK, r):
    if const_PK is not None:
        return const_PK
    return ing.P_of(r), ing.K_of(r)


def _add_tightening(builder, layout, spec, j, alpha_index, const_PK, t=0):
    """(T.1) rows: the terminal ellipsoid around r_j must fit inside Z."""
    n, m = spec.sys.n, spec.sys.m
    ing = spec.terminal
    zs = spec.zset_at(t + j)
    if zs is None:
        return
    W, b, z0 = zs.rows()
    if not W.shape[0]:
        return
    rsl = _r_slice(layout, j, n, m)
    dim = builder.dim

    if const_PK is not None:
        P, K = const_PK
        Pinv = np.linalg.inv(P)
        coeffs = np.array([
            np.sqrt(max(float((W[i, :n] + K.T @ W[i, n:]) @ Pinv
                              @ (W[i, :n] + K.T @ W[i, n:])), 0.0))
            for i in range(W.shape[0])])
        bb = b + W @ z0

        def fun(z):
            a = max(z[alpha_index], 1e-14)
            return W @ z[rsl] - bb + coeffs * np.sqrt(a)

        def jac(z):
            J = np.zeros((W.shape[0], dim))
            J[:, rsl] = W
            a = max(z[alpha_index], 1e-14)
            J[:, alpha_index] = coeffs / (2.0 * np.sqrt(a))
            return J

        builder.add_ineq(W.shape[0], fun, jac)
        return

    # reference-dependent (P, K): closed-form value, FD jacobian
    def row_value(z, i):
        rj = z[rsl]
        P, K = _terminal_PK_of(ing, None, (rj[:n], rj[n:]))
        a = max(z[alpha_index], 1e-14)
        v = W[i, :n] + K.T @ W[i, n:]
        sig = max(float(v @ np.linalg.solve(P, v)), 0.0)
        return float(W[i] @ (rj - z0) - b[i] + np.sqrt(a * sig))

    def fun(z):
        return np.array([row_value(z, i) for i in range(W.shape[0])])

    def jac(z):
        J = np.zeros((W.shape[0], dim))
        idx = list(range(rsl.start, rsl.stop)) + [alpha_index]
        for i in range(W.shape[0]):
            J[i] = _fd_jac_row(lambda zz, ii=i: row_value(zz, ii), z, idx,
                               dim)
        return J

    builder.add_ineq(W.shape[0], fun, jac)


def _add_offset_cost(builder, layout, sys, S, T, y_d_seq):
    n, m = sys.n, sys.m

    def value(z):
        tot = 0.0
        for j in range(T):
            rj = z[_r_slice(layout, j, n, m)]
            dy = sys.h(rj[:n], rj[n:]) - y_d_seq[j]
            tot += dy @ S @ dy
        return tot

    def add_grad(z, g):
        for j in range(T):
            rsl = _r_slice(layout, j, n, m)
            rj = z[rsl]
            dy = sys.h(rj[:n], rj[n:]) - y_d_seq[j]
            Cx, Cu = sys.output_jacobians(rj[:n], rj[n:])
            g[rsl.start:rsl.start + n] += 2.0 * Cx.T @ S @ dy
            g[rsl.start + n:rsl.stop] += 2.0 * Cu.T @ S @ dy

    def add_hess(z, H):
        for j in range(T):
            rsl = _r_slice(layout, j, n, m)
            rj = z[rsl]
            Cx, Cu = sys.output_jacobians(rj[:n], rj[n:])
            Jh = np.hstack([Cx, Cu])
            H[rsl, rsl] += 2.0 * Jh.T @ S @ Jh

    builder.add_obj(value, add_grad, add_hess)
    return value


def _solve_artificial_tracking(spec, x, t, y_d_seq, warm=None):
    """Joint (u, r, alpha) optimization; T = 1 is the setpoint scheme."""
    sys = spec.sys
    n, m = sys.n, sys.m
    N, T = spec.N, spec.T
    x0 = np.asarray(x, float)
    ing = spec.terminal
    Q, R = spec.stage.Q, spec.stage.R
    y_d_seq = [np.atleast_1d(np.asarray(y, float)) for y in y_d_seq]
    if len(y_d_seq) != T:
        raise ValueError("target sequence must have one entry per phase")

    layout = _Layout()
    layout.add("u", N * m)
    layout.add("x", N * n)
    layout.add("r", T * (n + m))
    a_idx = layout.add("a", 1).start
    builder = _OcpBuilder(layout.dim)

    _add_dynamics(builder, layout, sys, x0, N)
    _add_stage_constraints(builder, layout, spec, x0, t, N)
    _add_periodicity(builder, layout, sys, T)

    # stage tracking cost against the artificial reference
    def value_stage(z):
        tot = 0.0
        for k in range(N):
            rj = z[_r_slice(layout, k % T, n, m)]
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            dx = xk - rj[:n]
            du = z[_u_slice(layout, k, m)] - rj[n:]
            tot += dx @ Q @ dx + du @ R @ du
        return tot

    def grad_stage(z, g):
        for k in range(N):
            rsl = _r_slice(layout, k % T, n, m)
            rj = z[rsl]
            xk = x0 if k == 0 else z[_x_slice(layout, k, n)]
            gx = 2.0 * Q @ (xk - rj[:n])
            gu = 2.0 * R @ (z[_u_slice(layout, k, m)] - rj[n:])
            g[_u_slice(layout, k, m)] += gu
            if k >= 1:
                g[_x_slice(layout, k, n)] += gx
            g[rsl.start:rsl.start + n] -= gx
            g[rsl.start + n:rsl.stop] -= gu

    def hess_stage(z, H):
        for k in range(N):
            rsl = _r_slice(layout, k % T, n, m)
            rx = slice(rsl.start, rsl.start + n)
            ru = slice(rsl.start + n, rsl.stop)
            us = _u_slice(layout, k, m)
            H[us, us] += 2.0 * R
            H[ru, ru] += 2.0 * R
            H[us, ru] += -2.0 * R
            H[ru, us] += -2.0 * R
            H[rx, rx] += 2.0 * Q
            if k >= 1:
                xs = _x_slice(layout, k, n)
                H[xs, xs] += 2.0 * Q
                H[xs, rx] += -2.0 * Q
                H[rx, xs] += -2.0 * Q

    builder.add_obj(value_stage, grad_stage, hess_stage)
    value_offset = _add_offset_cost(builder, layout, sys, spec.S, T, y_d_seq)

    # terminal cost and set around the artificial reference, phase N mod T
    phi = N % T
    const_PK = _terminal_constant_data(ing)
    xN_sl = _x_slice(layout, N, n)
    rphi = _r_slice(layout, phi, n, m)

    def vf(z):
        rj = z[rphi]
        P, _ = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
        e = z[xN_sl] - rj[:n]
        return float(e @ P @ e)

    def vf_grad_into(z, g):
        rj = z[rphi]
        P, _ = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
        e = z[xN_sl] - rj[:n]
        g[xN_sl] += 2.0 * P @ e
        if const_PK is None:
            # reference gradient (includes the metric's own variation)
            _fd_grad_into(vf, z, range(rphi.start, rphi.stop), g)
        else:
            g[rphi.start:rphi.start + n] += -2.0 * P @ e

    def vf_hess(z, H):
        rj = z[rphi]
        P, _ = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
        rx = slice(rphi.start, rphi.start + n)
        H[xN_sl, xN_sl] += 2.0 * P
        H[rx, rx] += 2.0 * P
        H[xN_sl, rx] += -2.0 * P
        H[rx, xN_sl] += -2.0 * P

    builder.add_obj(vf, vf_grad_into, vf_hess)

    def term_con(z):
        return np.array([vf(z) - z[a_idx]])

    def term_jac(z):
        g = np.zeros(builder.dim)
        vf_grad_into(z, g)
        g[a_idx] = -1.0
        return g[None, :]

    builder.add_ineq(1, term_con, term_jac)

    # alpha bounds and (T.1)-tightening rows per phase
    Arow = np.zeros((2, builder.dim))
    Arow[0, a_idx] = -1.0
    Arow[1, a_idx] = 1.0
    builder.add_lin_ineq(Arow, np.array([-spec.alpha_min, ing.alpha]))
    for j in range(T):
        _add_tightening(builder, layout, spec, j, a_idx, const_PK, t)

    guess = _artificial_guess(spec, layout, x0, t, warm)
    rep = _solve_and_check(spec, builder, guess, max_iter=150)

    u_seq, xs = _reroll(sys, x0, rep.x[layout["u"]], N)
    r_seq = rep.x[layout["r"]].reshape(T, n + m)
    alpha = float(rep.x[a_idx])
    z_fix = rep.x.copy()
    z_fix[layout["u"]] = u_seq.ravel()
    z_fix[layout["x"]] = xs[1:].ravel()
    value = builder.objective(z_fix)
    offset_value = value_offset(z_fix)

    rj = r_seq[phi]
    _, K = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
    u_app = rj[n:] + K @ (xs[-1] - rj[:n])
    cand = {
        "u": np.vstack([u_seq[1:], u_app[None, :]]),
        "r": np.vstack([r_seq[1:], r_seq[:1]]) if T > 1 else r_seq.copy(),
        "alpha": alpha,
    }
    ok = _check_candidate_artificial(spec, xs[1], t + 1, cand, const_PK)
    return MpcSolution(u_seq, xs, value, rep, r_seq=r_seq, alpha=alpha,
                       offset_value=offset_value, candidate=cand,
                       candidate_ok=ok)


def _artificial_guess(spec, layout, x0, t, warm):
    sys = spec.sys
    n, m = sys.n, sys.m
    N, T = spec.N, spec.T
    ing = spec.terminal
    const_PK = _terminal_constant_data(ing)
    z = np.zeros(layout.dim)
    if warm is not None:
        u_seq = np.asarray(warm["u"], float)
        r_seq = np.asarray(warm["r"], float)
        alpha = float(warm["alpha"])
    else:
        ref = spec.ref if spec.ref is not None else ing.ref
        r_seq = np.array([np.concatenate(ref.at(t + j)) for j in range(T)])
        u_list = []
        xk = x0
        for k in range(N):
            rj = r_seq[k % T]
            _, K = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
            u = rj[n:] + K @ (xk - rj[:n])
            zs = spec.zset_at(t + k)
            if zs is not None and zs.kind == "box":
                u = np.clip(u, zs.u_lo, zs.u_hi)
            u_list.append(u)
            xk = sys.f(xk, u)
        u_seq = np.array(u_list)
        alpha = min(max(10 * spec.alpha_min, 0.5 * ing.alpha), ing.alpha)
    xs = rollout(sys, x0, u_seq)
    z[layout["u"]] = u_seq.ravel()
    z[layout["x"]] = xs[1:].ravel()
    z[layout["r"]] = np.asarray(r_seq, float).ravel()
    z[layout["a"].start] = alpha
    return z


def _check_candidate_artificial(spec, x_next, t_next, cand, const_PK,
                                tol=1e-7):
    sys = spec.sys
    n = sys.n
    try:
        xs = rollout(sys, x_next, cand["u"])
    except Exception:
        return False
    for k in range(spec.N):
        zs = spec.zset_at(t_next + k)
        if zs is not None and zs.violation(xs[k], cand["u"][k]) > tol:
            return False
    rj = cand["r"][spec.N % spec.T]
    P, _ = _terminal_PK_of(spec.terminal, const_PK, (rj[:n], rj[n:]))
    e = xs[-1] - rj[:n]
    return float(e @ P @ e) <= cand["alpha"] + tol


def solve_setpoint_tracking_mpc(spec, x, y_d, t=0, warm=None):
    """Setpoint tracking with an artificial steady-state reference.

    Same solver path as the periodic scheme with T = 1; the offset cost
    makes the scheme follow unreachable targets to the closest feasible
    steady state without losing feasibility.
    """
    if spec.T != 1:
        raise ValueError("the setpoint scheme runs with period T = 1")
    return _solve_artificial_tracking(spec, x, t, [y_d], warm)


def solve_periodic_tracking_mpc(spec, x, t, y_d_seq, warm=None):
    """Tracking with an artificial T-periodic reference orbit."""
    return _solve_artificial_tracking(spec, x, t, y_d_seq, warm)


# ----------------------------------------------------------------------
# planner / tracker
# ----------------------------------------------------------------------

def plan_reference_step(spec, sol_prev, y_d_seq, t_next, ref_old, alpha_old,
                        steps=1):
    """Reference update of the planner (runs every M steps).

    Minimizes the offset cost over T-periodic references subject to the
    terminal-set inclusion that keeps the shifted tracker candidate
    feasible: sol_prev is the tracker solution from `steps` time steps
    before t_next, and appending the terminal law that many times reaches
    level a1 = rho^steps * V_f around the old reference.  Falls back to
    the (re-indexed) previous reference whenever the solve fails or does
    not improve on it.  References in and out are indexed by absolute
    time.
    """
    sys = spec.sys
    n, m = sys.n, sys.m
    T, N = spec.T, spec.N
    ing = spec.terminal
    const_PK = _terminal_constant_data(ing)
    if const_PK is None:
        raise ValueError("the planner requires a constant terminal metric")
    P, _ = const_PK
    rho = ing.rho

    # level the tracker candidate reaches after `steps` terminal-law steps
    xN = sol_prev.x_pred[-1]
    xr_old, _ = ref_old.at(t_next - steps + N)
    e = xN - xr_old
    a1 = (rho ** steps) * float(e @ P @ e)
    c1 = ref_old.at(t_next + N)[0]

    y_d_seq = [np.atleast_1d(np.asarray(y, float)) for y in y_d_seq]

    layout = _Layout()
    layout.add("r", T * (n + m))
    a_idx = layout.add("a", 1).start
    builder = _OcpBuilder(layout.dim)

    value_offset = _add_offset_cost(builder, layout, sys, spec.S, T, y_d_seq)
    _add_periodicity(builder, layout, sys, T)
    for j in range(T):
        _add_tightening(builder, layout, spec, j, a_idx, const_PK, t_next)
    Arow = np.zeros((2, builder.dim))
    Arow[0, a_idx] = -1.0
    Arow[1, a_idx] = 1.0
    builder.add_lin_ineq(
        Arow, np.array([-max(spec.alpha_min, a1), ing.alpha]))

    # inclusion in smooth form: ||c1 - c2||^2_P <= (sqrt(a) - sqrt(a1))^2,
    # valid together with a >= a1 (enforced by the alpha lower bound)
    phi_new = N % T  # local phase j corresponds to absolute time t_next + j
    rphi = _r_slice(layout, phi_new, n, m)
    sqrt_a1 = np.sqrt(max(a1, 0.0))

    def incl_fun(z):
        d = c1 - z[rphi.start:rphi.start + n]
        a = max(z[a_idx], spec.alpha_min)
        return np.array([float(d @ P @ d) - (np.sqrt(a) - sqrt_a1) ** 2])

    def incl_jac(z):
        d = c1 - z[rphi.start:rphi.start + n]
        a = max(z[a_idx], spec.alpha_min)
        row = np.zeros((1, builder.dim))
        row[0, rphi.start:rphi.start + n] = -2.0 * P @ d
        row[0, a_idx] = -(np.sqrt(a) - sqrt_a1) / np.sqrt(a)
        return row

    builder.add_ineq(1, incl_fun, incl_jac)

    # candidate: the previous reference shifted by M, alpha unchanged
    r_cand = np.array([np.concatenate(ref_old.at(t_next + j))
                       for j in range(T)])
    z_cand = np.zeros(layout.dim)
    z_cand[layout["r"]] = r_cand.ravel()
    z_cand[a_idx] = max(alpha_old, a1)
    cand_feasible = builder.max_violation(z_cand) <= 1e-7
    cand_value = value_offset(z_cand)

    prob = builder.build(z_cand, max_iter=100)
    rep = solve_nlp(prob)
    used_candidate = True
    r_new, alpha_new, value_new = r_cand, float(z_cand[a_idx]), cand_value
    if rep.x is not None and rep.status in ("optimal", "max-iter") and \
            builder.max_violation(rep.x) <= 1e-7 and \
            value_offset(rep.x) <= cand_value + 1e-12:
        r_new = rep.x[layout["r"]].reshape(T, n + m)
        alpha_new = float(rep.x[a_idx])
        value_new = value_offset(rep.x)
        used_candidate = False

    # re-align phase 0 with absolute time 0 so Reference.at(t) works
    aligned = np.array([r_new[(i - t_next) % T] for i in range(T)])
    reference = Reference.periodic(aligned[:, :n], aligned[:, n:])
    info = {
        "used_candidate": used_candidate,
        "candidate_feasible": bool(cand_feasible),
        "objective": float(value_new),
        "candidate_objective": float(cand_value),
        "inclusion_level": float(a1),
    }
    return reference, float(alpha_new), info


# ----------------------------------------------------------------------
# economic schemes with artificial references
# ----------------------------------------------------------------------

def _solve_econ_artificial(spec, x, t, y_e_seq, kappa, beta, warm=None):
    """Shared transcription for the self-tuning (T = 1) and periodic
    artificial-reference economic schemes.

    Objective: economic stage sum + terminal cost (zero in equality mode)
    + the telescoping reference offset (flag) + (beta/T) * reference cost.
    Constraint: the full-period reference cost stays below kappa.
    """
    sys = spec.sys
    n, m = sys.n, sys.m
    N, T = spec.N, spec.T
    x0 = np.asarray(x, float)
    ell = spec.stage
    ing = spec.terminal
    y_e_seq = [np.atleast_1d(np.asarray(y, float)) for y in y_e_seq]

    def y_at(k):
        return y_e_seq[k % T]

    layout = _Layout()
    layout.add("u", N * m)
    layout.add("x", N * n)
    layout.add("r", T * (n + m))
    builder = _OcpBuilder(layout.dim)

    if N > 0:
        _add_dynamics(builder, layout, sys, x0, N)
        _add_stage_constraints(builder, layout, spec, x0, t, N)
        _econ_stage_objective(builder, layout, spec, x0, N, y_at)

    # the reference stays strictly feasible per phase
    for j in range(T):
        zs = spec.zset_at(t + j)
        if zs is None:
            continue
        W, b, z0 = zs.rows()
        if W.shape[0]:
            A = np.zeros((W.shape[0], builder.dim))
            A[:, _r_slice(layout, j, n, m)] = W
            builder.add_lin_ineq(A, b + W @ z0 - zs.interior_margin)

    _add_periodicity(builder, layout, sys, T)

    phi = N % T
    rphi = _r_slice(layout, phi, n, m)
    if N > 0:
        xN_sl = _x_slice(layout, N, n)
        if spec.economic_terminal_mode == "equality":
            def term_fun(z):
                return z[xN_sl] - z[rphi.start:rphi.start + n]

            def term_jac(z):
                J = np.zeros((n, builder.dim))
                J[:, xN_sl] = np.eye(n)
                J[:, rphi.start:rphi.start + n] = -np.eye(n)
                return J

            builder.add_eq(n, term_fun, term_jac)
        else:
            const_PK = _terminal_constant_data(ing)
            idx_vfe = None

            def vfe(z):
                rj = z[rphi]
                P, _ = _terminal_PK_of(ing, const_PK, (rj[:n], rj[n:]))
                e = z[xN_sl] - rj[:n]
                return float(e @ P @ e)

            idx_vfe = list(range(xN_sl.start, xN_sl.stop)) + \
                list(range(rphi.start, rphi.stop))

            def term_con(z):
                return np.array([vfe(z) - ing.alpha])

            def term_jac(z):
                return _fd_jac_row(vfe, z, idx_vfe, builder.dim)[None, :]

            builder.add_ineq(1, term_con, term_jac)
            builder.add_obj(vfe, lambda z, g: _fd_grad_into(vfe, z, idx_vfe,
                                                            g))
    else:
        # N = 0: the current state must lie on the artificial orbit
        r0 = _r_slice(layout, 0, n, m)

        def term_fun(z):
            return x0 - z[r0.start:r0.start + n]

        def term_jac(z):
            J = np.zeros((n, builder.dim))
            J[:, r0.start:r0.start + n] = -np.eye(n)
            return J

        builder.add_eq(n, term_fun, term_jac)

    # reference-cost machinery (weighted sums of l_e along the orbit)
    def ref_cost(z, weights):
        tot = 0.0
        for j, w in weights:
            rj = z[_r_slice(layout, j, n, m)]
            tot += w * ell.value(rj[:n], rj[n:], param=y_at(j))
        return tot

    def ref_cost_grad(z, g, weights):
        for j, w in weights:
            rsl = _r_slice(layout, j, n, m)
            rj = z[rsl]
            gx, gu = ell.gradient(rj[:n], rj[n:], param=y_at(j))
            g[rsl.start:rsl.start + n] += w * gx
            g[rsl.start + n:rsl.stop] += w * gu

    def ref_cost_hess(z, H, weights):
        for j, w in weights:
            rsl = _r_slice(layout, j, n, m)
            rj = z[rsl]
            Hxx, Hxu, Huu = ell.hessian(rj[:n], rj[n:], param=y_at(j))
            rx = slice(rsl.start, rsl.start + n)
            ru = slice(rsl.start + n, rsl.stop)
            H[rx, rx] += w * Hxx
            H[ru, ru] += w * Huu
            H[rx, ru] += w * Hxu
            H[ru, rx] += w * Hxu.T

    obj_weights = []
    if spec.shifted_terminal and T > 1:
        # telescoping offset at the prediction end: phases N..N+T-2
        obj_weights += [((phi + k) % T, (T - 1 - k) / T)
                        for k in range(T - 1)]
    if beta > 0:
        obj_weights += [(j, beta / T) for j in range(T)]
    if obj_weights:
        builder.add_obj(lambda z: ref_cost(z, obj_weights),
                        lambda z, g: ref_cost_grad(z, g, obj_weights),
                        lambda z, H: ref_cost_hess(z, H, obj_weights))

    kappa_weights = [(j, 1.0) for j in range(T)]
    if np.isfinite(kappa):
        def kap_fun(z):
            return np.array([ref_cost(z, kappa_weights) - kappa])

        def kap_jac(z):
            g = np.zeros(builder.dim)
            ref_cost_grad(z, g, kappa_weights)
            return g[None, :]

        builder.add_ineq(1, kap_fun, kap_jac)

    guess = _econ_artificial_guess(spec, layout, x0, t, warm)
    rep = _solve_and_check(spec, builder, guess, max_iter=150)

    if N > 0:
        u_seq, xs = _reroll(sys, x0, rep.x[layout["u"]], N)
    else:
        u_seq = np.zeros((0, m))
        xs = x0[None, :]
    r_seq = rep.x[layout["r"]].reshape(T, n + m)
    z_fix = rep.x.copy()
    if N > 0:
        z_fix[layout["u"]] = u_seq.ravel()
        z_fix[layout["x"]] = xs[1:].ravel()
    value = builder.objective(z_fix)
    cand = {
        "u": np.vstack([u_seq[1:], r_seq[phi, n:][None, :]]) if N > 0
        else None,
        "r": np.vstack([r_seq[1:], r_seq[:1]]) if T > 1 else r_seq.copy(),
    }
    sol = MpcSolution(u_seq, xs, value, rep, r_seq=r_seq, candidate=cand)
    sol.ref_period_cost = float(ref_cost(z_fix, kappa_weights))
    return sol


def _econ_artificial_guess(spec, layout, x0, t, warm):
    sys = spec.sys
    n, m = sys.n, sys.m
    N, T = spec.N, spec.T
    z = np.zeros(layout.dim)
    if warm is not None and warm.get("r") is not None:
        r_seq = np.asarray(warm["r"], float)
    elif spec.ref is not None or spec.terminal is not None:
        ref = spec.ref if spec.ref is not None else spec.terminal.ref
        r_seq = np.array([np.concatenate(ref.at(t + j)) for j in range(T)])
    else:
        r_seq = np.tile(np.concatenate([x0, np.zeros(m)]), (T, 1))
    z[layout["r"]] = r_seq.ravel()
    if N > 0:
        if warm is not None and warm.get("u") is not None:
            u_seq = np.asarray(warm["u"], float)
        else:
            u_list = []
            xk = x0
            for k in range(N):
                rj = r_seq[k % T]
                u = spec.terminal.law(xk, t + k) if \
                    spec.terminal is not None else rj[n:]
                zs = spec.zset_at(t + k)
                if zs is not None and zs.kind == "box":
                    u = np.clip(u, zs.u_lo, zs.u_hi)
                u_list.append(u)
                xk = sys.f(xk, u)
            u_seq = np.array(u_list)
        xs = rollout(sys, x0, u_seq)
        z[layout["u"]] = u_seq.ravel()
        z[layout["x"]] = xs[1:].ravel()
    return z


def solve_self_tuning_economic_mpc(state, x, y_e, warm=None):
    """Economic MPC with an artificial steady state and the kappa cap.

    The cap is re-evaluated at the next parameter via advance_kappa, so
    feasibility survives arbitrary parameter changes.  Returns the
    solution; the state's warm data and beta are advanced in place.
    """
    spec = state.spec
    if spec.T != 1:
        raise ValueError("the self-tuning scheme runs with period T = 1")
    if warm is None and state.prev is not None:
        warm = state.prev.candidate
    sol = _solve_econ_artificial(spec, x, state.t, [y_e], state.kappa,
                                 state.beta, warm)
    _update_beta(state, sol.r_seq[0], sol.report)
    state.prev = sol
    state.last_r = sol.r_seq[0].copy()
    return sol


def advance_kappa(state, y_e_next):
    """kappa(t+1): the shifted optimized orbit re-costed at the new signal.

    y_e_next is a list with one parameter per phase (window starting at
    t+1) or a single parameter (T = 1).
    """
    spec = state.spec
    if state.prev is None or state.prev.r_seq is None:
        return state.kappa
    if not isinstance(y_e_next, (list, tuple)):
        y_e_next = [y_e_next]
    n = spec.sys.n
    T = spec.T
    r_seq = state.prev.r_seq
    total = 0.0
    for j in range(T):
        rj = r_seq[(j + 1) % T]
        y = np.atleast_1d(np.asarray(y_e_next[j % len(y_e_next)], float))
        total += spec.stage.value(rj[:n], rj[n:], param=y)
    state.kappa = float(total)
    return state.kappa


def _update_beta(state, r_star, report):
    """Optional doubling of beta when the reference stalls unconverged."""
    spec = state.spec
    if not spec.beta_adaptive:
        return
    if state.last_r is not None and \
            np.max(np.abs(r_star - state.last_r)) <= 1e-9 and \
            report.status != "optimal":
        state.stationary_steps += 1
    else:
        state.stationary_steps = 0
    if state.stationary_steps >= 10:
        state.beta = 2.0 * state.beta if state.beta > 0 else 1.0
        state.stationary_steps = 0


def solve_periodic_economic_artificial_mpc(state, x, y_e_seq, warm=None):
    """Economic MPC with an artificial T-periodic reference and kappa cap."""
    spec = state.spec
    if warm is None and state.prev is not None:
        warm = state.prev.candidate
    sol = _solve_econ_artificial(spec, x, state.t, y_e_seq, state.kappa,
                                 state.beta, warm)
    state.prev = sol
    return sol


def solve_periodicity_constrained_empc(spec, x, y_e_seq, t=0, warm=None):
    """Optimal feasible T-periodic orbit through the current state.

    Exactly the artificial-reference economic transcription with N = 0:
    the objective reduces to the full-period reference cost and the
    terminal equality pins the orbit to the current state.  The first
    input of the optimized orbit is applied.
    """
    inner = MpcProblemSpec(
        "periodic-economic-artificial", spec.sys, 0, zset=spec.zset,
        stage=spec.stage, terminal=spec.terminal, ref=spec.ref, T=spec.T,
        alpha_min=spec.alpha_min, shifted_terminal=False,
        economic_terminal_mode="equality", signal=spec.signal)
    sol = _solve_econ_artificial(inner, x, t, y_e_seq, np.inf,
                                 float(spec.T), warm)
    n = spec.sys.n
    sol.u_seq = sol.r_seq[0, n:][None, :]
    return sol


# ----------------------------------------------------------------------
# optimal references
# ----------------------------------------------------------------------

def _bounding_box(zset, n, m, span=10.0):
    if zset is None:
        return -span * np.ones(n + m), span * np.ones(n + m)
    if zset.kind == "box":
        lo = np.concatenate([zset.x_lo, zset.u_lo])
        hi = np.concatenate([zset.x_hi, zset.u_hi])
    else:
        W, b, z0 = zset.rows()
        lo = np.full(n + m, -np.inf)
        hi = np.full(n + m, np.inf)
        for i in range(n + m):
            col = W[:, i]
            pos = col > 1e-12
            if np.any(pos):
                hi[i] = np.min(b[pos] / col[pos]) + z0[i]
            neg = col < -1e-12
            if np.any(neg):
                lo[i] = np.max(b[neg] / col[neg]) + z0[i]
    lo = np.where(np.isfinite(lo), lo, -span)
    hi = np.where(np.isfinite(hi), hi, span)
    return lo, hi


def _multi_start_points(lo, hi, n_starts, seed):
    rng = np.random.default_rng(seed)
    pts = [0.5 * (lo + hi)]
    for _ in range(n_starts - 1):
        pts.append(lo + rng.random(lo.size) * (hi - lo))
    return pts


def optimal_steady_state(sys, zset, ell, param=None, n_starts=8, seed=2024):
    """Best feasible steady state for an economic cost: ((x, u), value).

    Deterministic multi-start NLP (fixed seed); the best verified KKT
    point wins, ties break to the earliest start.
    """
    n, m = sys.n, sys.m

    def objective(z):
        return float(ell.value(z[:n], z[n:], param=param))

    def gradient(z):
        gx, gu = ell.gradient(z[:n], z[n:], param=param)
        return np.concatenate([gx, gu])

    def hessian(z, lamE, lamI):
        Hxx, Hxu, Huu = ell.hessian(z[:n], z[n:], param=param)
        H = np.zeros((n + m, n + m))
        H[:n, :n] = Hxx
        H[:n, n:] = Hxu
        H[n:, :n] = Hxu.T
        H[n:, n:] = Huu
        return H

    def eq(z):
        return sys.f(z[:n], z[n:]) - z[:n]

    def eq_jac(z):
        A, B = sys.jacobians(z[:n], z[n:])
        return np.hstack([A - np.eye(n), B])

    ineq = ineq_jac = None
    if zset is not None:
        W, b, z0 = zset.rows()
        if W.shape[0]:
            rhs = b + W @ z0 - zset.interior_margin

            def ineq(z):
                return W @ z - rhs

            def ineq_jac(z):
                return W

    lo, hi = _bounding_box(zset, n, m)
    best = None
    for z0_start in _multi_start_points(lo, hi, n_starts, seed):
        prob = NlpProblem(n + m, objective=objective, gradient=gradient,
                          x0=z0_start, eq=eq, eq_jac=eq_jac, ineq=ineq,
                          ineq_jac=ineq_jac, hessian=hessian,
                          kkt_tol=1e-9, con_tol=1e-10, max_iter=200)
        rep = solve_nlp(prob)
        if rep.x is None or rep.status not in ("optimal", "max-iter"):
            continue
        viol = float(np.max(np.abs(eq(rep.x))))
        if ineq is not None:
            viol = max(viol, float(np.max(ineq(rep.x))))
        if viol > 1e-8:
            continue
        val = objective(rep.x)
        if best is None or val < best[1] - 1e-12:
            best = (rep.x.copy(), val)
    if best is None:
        raise InfeasibleProblem("no feasible steady state found")
    z_best = best[0]
    return (z_best[:n], z_best[n:]), float(best[1])


def optimal_periodic_reference(sys, zset, ell, T, y_e_seq=None, n_starts=8,
                               seed=2024):
    """Best feasible T-periodic orbit: (Reference, average cost per step).

    The steady-state optimum seeds one start, so the optimal orbit is
    never worse than the optimal steady state (T = 1 recovers it exactly).
    """
    n, m = sys.n, sys.m
    if y_e_seq is None:
        y_list = [None] * T
    elif hasattr(y_e_seq, "window"):
        y_list = [np.atleast_1d(np.asarray(y, float))
                  for y in y_e_seq.window(0, T)]
    else:
        y_list = [None if y is None else np.atleast_1d(np.asarray(y, float))
                  for y in y_e_seq]

    def zs_at(j):
        if isinstance(zset, (list, tuple)):
            return zset[j % len(zset)]
        return zset

    dim = T * (n + m)

    def rsl(j):
        return slice(j * (n + m), (j + 1) * (n + m))

    def objective(z):
        return float(sum(ell.value(z[rsl(j)][:n], z[rsl(j)][n:],
                                   param=y_list[j]) for j in range(T))) / T

    def gradient(z):
        g = np.zeros(dim)
        for j in range(T):
            rj = z[rsl(j)]
            gx, gu = ell.gradient(rj[:n], rj[n:], param=y_list[j])
            g[rsl(j)] = np.concatenate([gx, gu]) / T
        return g

    def hessian(z, lamE, lamI):
        H = np.zeros((dim, dim))
        for j in range(T):
            rj = z[rsl(j)]
            Hxx, Hxu, Huu = ell.hessian(rj[:n], rj[n:], param=y_list[j])
            blk = np.zeros((n + m, n + m))
            blk[:n, :n] = Hxx
            blk[:n, n:] = Hxu
            blk[n:, :n] = Hxu.T
            blk[n:, n:] = Huu
            H[rsl(j), rsl(j)] = blk / T
        return H

    def eq(z):
        c = np.empty(T * n)
        for j in range(T):
            rj = z[rsl(j)]
            rjn = z[rsl((j + 1) % T)]
            c[j * n:(j + 1) * n] = rjn[:n] - sys.f(rj[:n], rj[n:])
        return c

    def eq_jac(z):
        J = np.zeros((T * n, dim))
        for j in range(T):
            rj = z[rsl(j)]
            A, B = sys.jacobians(rj[:n], rj[n:])
            rows = slice(j * n, (j + 1) * n)
            nxt = rsl((j + 1) % T)
            J[rows, nxt.start:nxt.start + n] += np.eye(n)
            J[rows, rsl(j).start:rsl(j).start + n] += -A
            J[rows, rsl(j).start + n:rsl(j).stop] += -B
        return J

    rows_A, rows_b = [], []
    for j in range(T):
        zs = zs_at(j)
        if zs is None:
            continue
        W, b, z0 = zs.rows()
        if W.shape[0]:
            A = np.zeros((W.shape[0], dim))
            A[:, rsl(j)] = W
            rows_A.append(A)
            rows_b.append(b + W @ z0 - zs.interior_margin)
    if rows_A:
        A_all = np.vstack(rows_A)
        b_all = np.concatenate(rows_b)

        def ineq(z):
            return A_all @ z - b_all

        def ineq_jac(z):
            return A_all
    else:
        ineq = ineq_jac = None

    # starts: constant orbits at sampled points, plus the steady-state
    # optimum when one exists
    zs0 = zs_at(0)
    lo, hi = _bounding_box(zs0, n, m)
    starts = [np.tile(p, T)
              for p in _multi_start_points(lo, hi, n_starts, seed)]
    try:
        (xs_s, us_s), _ = optimal_steady_state(sys, zs0, ell,
                                               param=y_list[0],
                                               n_starts=n_starts, seed=seed)
        starts.insert(0, np.tile(np.concatenate([xs_s, us_s]), T))
    except InfeasibleProblem:
        pass

    best = None
    for z0_start in starts:
        prob = NlpProblem(dim, objective=objective, gradient=gradient,
                          x0=z0_start, eq=eq, eq_jac=eq_jac, ineq=ineq,
                          ineq_jac=ineq_jac, hessian=hessian,
                          kkt_tol=1e-9, con_tol=1e-10, max_iter=300)
        rep = solve_nlp(prob)
        if rep.x is None or rep.status not in ("optimal", "max-iter"):
            continue
        viol = float(np.max(np.abs(eq(rep.x))))
        if ineq is not None:
            viol = max(viol, float(np.max(ineq(rep.x))))
        if viol > 1e-8:
            continue
        val = objective(rep.x)
        if best is None or val < best[1] - 1e-12:
            best = (rep.x.copy(), val)
    if best is None:
        raise InfeasibleProblem("no feasible periodic orbit found")
    r_mat = best[0].reshape(T, n + m)
    ref = Reference.periodic(r_mat[:, :n], r_mat[:, n:])
    return ref, float(best[1])


# ----------------------------------------------------------------------
# MPC without terminal ingredients
# ----------------------------------------------------------------------

def _lq_fast_path(spec, x, t):
    """Exact finite-horizon Riccati solution for LTI-quadratic instances."""
    sys = spec.sys
    n, m = sys.n, sys.m
    ref = spec.ref if spec.ref is not None else \
        Reference.setpoint(np.zeros(n), np.zeros(m))
    xr, ur = ref.at(t)
    if np.max(np.abs(sys.f(xr, ur) - xr)) > 1e-9:
        return None
    if spec._lq_cache is None:
        A, B = sys.jacobians(xr, ur)
        Q, R = spec.stage.Q, spec.stage.R
        if spec.rollout_horizon > 0:
            _, K = solve_dare(A, B, Q, R)
            Acl = A + B @ K
            Qcl = Q + K.T @ R @ K
            PN = np.zeros((n, n))
            Phi = np.eye(n)
            for _ in range(spec.rollout_horizon):
                PN += Phi.T @ Qcl @ Phi
                Phi = Acl @ Phi
        elif spec.terminal_weight:
            PN = float(spec.terminal_weight) * Q
        else:
            PN = np.zeros((n, n))
        P_seq, K_seq = solve_tv_riccati([A] * spec.N, [B] * spec.N, Q, R,
                                        PN)
        spec._lq_cache = (P_seq, K_seq)
    P_seq, K_seq = spec._lq_cache
    e0 = np.asarray(x, float) - xr
    us, xs = [], [np.asarray(x, float)]
    ek = e0
    for k in range(spec.N):
        u = ur + K_seq[k] @ ek
        us.append(u)
        ek = sys.f(xr + ek, u) - xr
        xs.append(xr + ek)
    value = float(e0 @ P_seq[0] @ e0)
    rep = SolveReport("optimal", np.concatenate([u.ravel() for u in us]),
                      value, 0.0, [], iterations=0)
    return MpcSolution(np.array(us), np.array(xs), value, rep)


def solve_unconstrained_mpc(spec, x, t=0, warm=None):
    """MPC without terminal constraint, optionally with a terminal weight.

    terminal_weight = omega scales the best-case stage cost at the
    prediction end; rollout_horizon = M appends the M-step cost of a
    linear-quadratic policy instead.  LTI dynamics + quadratic cost +
    no constraints solve exactly through a Riccati recursion.
    """
    sys = spec.sys
    n, m = sys.n, sys.m
    N = spec.N
    x0 = np.asarray(x, float)
    if sys.is_linear and spec.stage.variant == "quadratic" and \
            spec.zset is None:
        sol = _lq_fast_path(spec, x0, t)
        if sol is not None:
            return sol

    ref = spec.ref if spec.ref is not None else \
        Reference.setpoint(np.zeros(n), np.zeros(m))
    layout = _Layout()
    layout.add("u", N * m)
    layout.add("x", N * n)
    builder = _OcpBuilder(layout.dim)
    _add_dynamics(builder, layout, sys, x0, N)
    _add_stage_constraints(builder, layout, spec, x0, t, N)
    if spec.stage.variant == "economic":
        _econ_stage_objective(builder, layout, spec, x0, N, lambda k: None)
    else:
        _quad_stage_objective(builder, layout, spec, x0, N,
                              lambda k: ref.at(t + k))

    xN_sl = _x_slice(layout, N, n)
    if spec.rollout_horizon > 0:
        xr, ur = ref.at(t + N)
        A, B = sys.jacobians(xr, ur)
        _, K = solve_dare(A, B, spec.stage.Q, spec.stage.R)
        M_roll = spec.rollout_horizon

        def vterm(z):
            xk = z[xN_sl]
            tot = 0.0
            for _ in range(M_roll):
                u = ur + K @ (xk - xr)
                tot += spec.stage.value(xk, u, ref=(xr, ur))
                xk = sys.f(xk, u)
            return float(tot)

        builder.add_obj(vterm, lambda z, g: _fd_grad_into(
            vterm, z, range(xN_sl.start, xN_sl.stop), g))
    elif spec.terminal_weight:
        omega = float(spec.terminal_weight)
        Q = spec.stage.Q
        xrN, _ = ref.at(t + N)

        def vterm(z):
            e = z[xN_sl] - xrN
            return omega * float(e @ Q @ e)

        def vterm_grad(z, g):
            g[xN_sl] += 2.0 * omega * Q @ (z[xN_sl] - xrN)

        def vterm_hess(z, H):
            H[xN_sl, xN_sl] += 2.0 * omega * Q

        builder.add_obj(vterm, vterm_grad, vterm_hess)

    guess = np.zeros(layout.dim)
    if warm is not None:
        u_seq = np.asarray(warm["u"], float)
    else:
        u_seq = np.tile(ref.at(t)[1], (N, 1))
    xs0 = rollout(sys, x0, u_seq)
    guess[layout["u"]] = u_seq.ravel()
    guess[layout["x"]] = xs0[1:].ravel()
    rep = _solve_and_check(spec, builder, guess)
    u_seq, xs = _reroll(sys, x0, rep.x[layout["u"]], N)
    z_fix = rep.x.copy()
    z_fix[layout["u"]] = u_seq.ravel()
    z_fix[layout["x"]] = xs[1:].ravel()
    value = builder.objective(z_fix)
    cand = {"u": np.vstack([u_seq[1:], u_seq[-1:]])} if N > 0 else None
    return MpcSolution(u_seq, xs, value, rep, candidate=cand)


# ----------------------------------------------------------------------
# closed-loop dispatch
# ----------------------------------------------------------------------

def apply_controller(state, x, exo=None):
    """One controller step: solve, pick the applied inputs, advance state.

    exo carries the targets the scheme needs at the current time: y_d /
    y_d_seq for tracking schemes, y_e / y_e_seq (plus y_e_next /
    y_e_seq_next for the kappa update) for parameter-dependent economic
    schemes.  Returns (u_applied with shape (nu, m), solution,
    diagnostics dict).
    """
    spec = state.spec
    t = state.t
    exo = exo or {}
    warm = None
    if state.prev is not None and state.prev.candidate is not None:
        if state.prev.candidate_ok is None or state.prev.candidate_ok:
            warm = state.prev.candidate

    if spec.scheme in _FIXED_REF_SCHEMES:
        sol = _solve_fixed_reference(spec, x, t, warm)
        state.prev = sol
    elif spec.scheme == "setpoint-tracking-artificial":
        sol = solve_setpoint_tracking_mpc(spec, x, exo["y_d"], t, warm)
        state.prev = sol
    elif spec.scheme == "periodic-tracking-artificial":
        sol = solve_periodic_tracking_mpc(spec, x, t, exo["y_d_seq"], warm)
        state.prev = sol
    elif spec.scheme == "planner-tracker":
        sol = _planner_tracker_step(state, x, exo, warm)
        state.prev = sol
    elif spec.scheme == "economic-self-tuning":
        sol = solve_self_tuning_economic_mpc(state, x, exo["y_e"], warm)
        if "y_e_next" in exo:
            advance_kappa(state, exo["y_e_next"])
    elif spec.scheme == "periodic-economic-artificial":
        sol = solve_periodic_economic_artificial_mpc(state, x,
                                                     exo["y_e_seq"], warm)
        if "y_e_seq_next" in exo:
            advance_kappa(state, exo["y_e_seq_next"])
    elif spec.scheme == "periodicity-constrained":
        sol = solve_periodicity_constrained_empc(spec, x, exo["y_e_seq"], t,
                                                 warm)
        state.prev = sol
    elif spec.scheme == "unconstrained":
        sol = solve_unconstrained_mpc(spec, x, t, warm)
        state.prev = sol
    else:  # pragma: no cover - guarded in MpcProblemSpec
        raise ValueError(spec.scheme)

    nu = 1 if spec.scheme == "periodicity-constrained" else spec.nu
    u_applied = sol.u_seq[:nu]
    diag = {
        "t": t,
        "value": sol.value,
        "alpha": sol.alpha,
        "kappa": state.kappa,
        "beta": state.beta,
        "feasible": True,
        "iterations": sol.report.iterations,
        "status": sol.report.status,
        "offset_value": sol.offset_value,
        "candidate_ok": sol.candidate_ok,
    }
    state.t = t + nu
    return u_applied, sol, diag


def _planner_tracker_step(state, x, exo, warm):
    """Tracker solve against a periodic reference the planner refreshes.

    The planner runs once every M tracker steps, always seeded with the
    latest tracker solution (shifted once), so its candidate reference is
    guaranteed feasible regardless of how the tracker re-optimized in
    between.
    """
    spec = state.spec
    t = state.t
    T = spec.T
    replanned = False
    if state.planner_countdown <= 0 and state.prev is not None:
        y_d_seq = exo.get("y_d_seq")
        if y_d_seq is None and "y_d_signal" in exo:
            y_d_seq = [exo["y_d_signal"].at(t + j) for j in range(T)]
        if y_d_seq is not None:
            ref_new, alpha_new, info = plan_reference_step(
                spec, state.prev, y_d_seq, t, state.reference,
                state.ref_alpha, steps=1)
            state.reference = ref_new
            state.ref_alpha = alpha_new
            state.planner_info = info
            state.planner_countdown = spec.M
            replanned = True

    const_PK = _terminal_constant_data(spec.terminal)
    if const_PK is None:
        raise ValueError("the planner-tracker needs a constant metric")
    P, K = const_PK
    tracker_terminal = TerminalIngredients(
        "time-varying", P_seq=[P] * T, K_seq=[K] * T, ref=state.reference,
        alpha=state.ref_alpha, rho=spec.terminal.rho,
        epsilon=spec.terminal.epsilon)
    if replanned:
        warm = None  # the previous input plan tracked the old reference
    sol = _solve_fixed_reference(spec, x, t, warm, ref=state.reference,
                                 terminal=tracker_terminal)
    state.planner_countdown -= 1
    return sol
