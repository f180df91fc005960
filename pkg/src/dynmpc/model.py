"""Dynamics, constraints, stage costs, references and rollouts.

Everything in here is immutable after construction and purely functional,
so objects can be shared freely between controllers and analysis code.
"""

import numpy as np

FD_STEP = 1e-6


class DivergedRollout(RuntimeError):
    """Raised when a rollout produces a non-finite state.

    Attributes
    ----------
    index : int
        First step index at which the state was non-finite.
    """

    def __init__(self, index):
        super().__init__(f"rollout diverged at step {index}")
        self.index = index


def _as_vec(v, dim, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {v.shape}")
    return v


def _fd_step(value):
    # central-difference step scaled with the magnitude of the point
    return FD_STEP * (1.0 + np.abs(value))


def finite_difference_jacobian(fun, x, fdim):
    """Central finite-difference Jacobian of ``fun`` at ``x`` (shape fdim×len(x))."""
    x = np.asarray(x, dtype=float)
    J = np.empty((fdim, x.size))
    for i in range(x.size):
        h = _fd_step(x[i])
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * h)
    return J


class DynamicalSystem:
    """Discrete-time system x+ = f(x, u) with output y = h(x, u).

    Attributes
    ----------
    n, m, p : int
        State, input and output dimensions.
    f : callable
        (x, u) -> next state, deterministic.
    h : callable
        (x, u) -> output; defaults to the full state.
    """

    def __init__(self, n, m, f, h=None, p=None, jacobians=None,
                 output_jacobians=None, name=""):
        self.n = int(n)
        self.m = int(m)
        self._f = f
        if h is None:
            h = lambda x, u: np.asarray(x, dtype=float)
            p = self.n
        self._h = h
        if p is None:
            p = np.atleast_1d(h(np.zeros(self.n), np.zeros(self.m))).size
        self.p = int(p)
        self._jac = jacobians
        self._out_jac = output_jacobians
        self.name = name
        # filled in by the ``linear`` constructor
        self.linear_terms = None

    def f(self, x, u):
        x = _as_vec(x, self.n, "x")
        u = _as_vec(u, self.m, "u")
        return np.atleast_1d(np.asarray(self._f(x, u), dtype=float))

    def h(self, x, u):
        x = _as_vec(x, self.n, "x")
        u = _as_vec(u, self.m, "u")
        return np.atleast_1d(np.asarray(self._h(x, u), dtype=float))

    def jacobians(self, x, u):
        """Return (A, B) = (df/dx, df/du) at (x, u); analytic or central FD."""
        if self._jac is not None:
            A, B = self._jac(np.asarray(x, float), np.asarray(u, float))
            return np.asarray(A, float).reshape(self.n, self.n), \
                np.asarray(B, float).reshape(self.n, self.m)
        return self.fd_jacobians(x, u)

    def fd_jacobians(self, x, u):
        x = _as_vec(x, self.n, "x")
        u = _as_vec(u, self.m, "u")
        A = finite_difference_jacobian(lambda xx: self.f(xx, u), x, self.n)
        B = finite_difference_jacobian(lambda uu: self.f(x, uu), u, self.n)
        return A, B

    def output_jacobians(self, x, u):
        """Return (Cx, Cu) = (dh/dx, dh/du) at (x, u)."""
        if self._out_jac is not None:
            Cx, Cu = self._out_jac(np.asarray(x, float), np.asarray(u, float))
            return np.asarray(Cx, float).reshape(self.p, self.n), \
                np.asarray(Cu, float).reshape(self.p, self.m)
        x = _as_vec(x, self.n, "x")
        u = _as_vec(u, self.m, "u")
        Cx = finite_difference_jacobian(lambda xx: self.h(xx, u), x, self.p)
        Cu = finite_difference_jacobian(lambda uu: self.h(x, uu), u, self.p)
        return Cx, Cu

    @property
    def is_linear(self):
        return self.linear_terms is not None

    @classmethod
    def linear(cls, A, B, c=None, C=None, D=None, name=""):
        """Affine system x+ = A x + B u + c, y = C x + D u (C defaults to I)."""
        A = np.atleast_2d(np.asarray(A, float))
        n = A.shape[0]
        B = np.asarray(B, float).reshape(n, -1)
        m = B.shape[1]
        c = np.zeros(n) if c is None else _as_vec(c, n, "c")
        if C is None:
            C = np.eye(n)
            D = np.zeros((n, m))
        else:
            C = np.atleast_2d(np.asarray(C, float))
            D = np.zeros((C.shape[0], m)) if D is None else \
                np.asarray(D, float).reshape(C.shape[0], m)
        p = C.shape[0]
        sys = cls(
            n, m,
            f=lambda x, u: A @ x + B @ u + c,
            h=lambda x, u: C @ x + D @ u,
            p=p,
            jacobians=lambda x, u: (A, B),
            output_jacobians=lambda x, u: (C, D),
            name=name,
        )
        sys.linear_terms = (A, B, c, C, D)
        return sys


class ConstraintSet:
    """Pointwise-in-time constraint set Z for the pair z = (x, u).

    Three kinds are supported:

    * ``box``       -- element-wise bounds on x and u (entries may be ±inf),
    * ``polytope``  -- H (z - z0) <= 1 with normalized rows,
    * ``lipschitz`` -- list of (g_i(x, u) <= 0, Lipschitz bound) pairs,
                       certified on a sample set plus the Lipschitz margin.

    ``interior_margin`` defines the strictly feasible reference set Z_r:
    membership in Z_r means violation(z) <= -interior_margin.
    """

    def __init__(self, n, m, kind="box", x_lo=None, x_hi=None, u_lo=None,
                 u_hi=None, H=None, z0=None, funcs=None, interior_margin=1e-6):
        self.n = int(n)
        self.m = int(m)
        self.kind = kind
        self.interior_margin = float(interior_margin)
        if kind == "box":
            def fill(v, default, dim):
                if v is None:
                    return np.full(dim, default)
                return np.asarray(v, float) * np.ones(dim)
            self.x_lo = fill(x_lo, -np.inf, n)
            self.x_hi = fill(x_hi, np.inf, n)
            self.u_lo = fill(u_lo, -np.inf, m)
            self.u_hi = fill(u_hi, np.inf, m)
            if np.any(self.x_lo > self.x_hi) or np.any(self.u_lo > self.u_hi):
                raise ValueError("empty box (lower bound above upper bound)")
        elif kind == "polytope":
            self.H = np.atleast_2d(np.asarray(H, float))
            if self.H.shape[1] != n + m:
                raise ValueError("polytope rows must act on z=(x,u)")
            self.z0 = np.zeros(n + m) if z0 is None else _as_vec(z0, n + m, "z0")
        elif kind == "lipschitz":
            # funcs: list of (g, L) with g(x, u) scalar and L its Lipschitz bound
            self.funcs = list(funcs)
        else:
            raise ValueError(f"unknown constraint kind {kind!r}")

    # ------------------------------------------------------------------
    def rows(self):
        """Half-space rows (W, b, z0) with the set written as W(z-z0) <= b.

        Boxes are converted on the fly (infinite bounds skipped); rows of a
        declared polytope are returned as stored (b = 1). Not available for
        the lipschitz kind.
        """
        if self.kind == "polytope":
            return self.H, np.ones(self.H.shape[0]), self.z0
        if self.kind == "box":
            rows = []
            bs = []
            dim = self.n + self.m
            lo = np.concatenate([self.x_lo, self.u_lo])
            hi = np.concatenate([self.x_hi, self.u_hi])
            for i in range(dim):
                if np.isfinite(hi[i]):
                    e = np.zeros(dim)
                    e[i] = 1.0
                    rows.append(e)
                    bs.append(hi[i])
                if np.isfinite(lo[i]):
                    e = np.zeros(dim)
                    e[i] = -1.0
                    rows.append(e)
                    bs.append(-lo[i])
            return (np.array(rows).reshape(-1, dim), np.array(bs),
                    np.zeros(dim))
        raise ValueError("lipschitz constraint sets have no half-space rows")

    def violation(self, x, u):
        """Scalar violation; <= 0 iff (x, u) in Z. Exact for box/polytope."""
        x = _as_vec(x, self.n, "x")
        u = _as_vec(u, self.m, "u")
        if self.kind == "box":
            v = [np.max(self.x_lo - x), np.max(x - self.x_hi),
                 np.max(self.u_lo - u), np.max(u - self.u_hi)]
            vals = [w for w in v if np.isfinite(w) or w > 0]
            return max(vals) if vals else -np.inf
        if self.kind == "polytope":
            z = np.concatenate([x, u])
            return float(np.max(self.H @ (z - self.z0) - 1.0))
        return float(max(g(x, u) for g, _L in self.funcs))

    def contains(self, x, u, margin=0.0):
        return self.violation(x, u) <= -margin

    def in_reference_set(self, x, u):
        """Strict membership used for references: Z_r subset of int(Z)."""
        return self.violation(x, u) <= -self.interior_margin


class ViolationReport:
    """Per-step constraint violation summary produced by check_constraints."""

    def __init__(self, per_step, worst_index):
        self.per_step = np.asarray(per_step, float)
        self.worst_index = int(worst_index)

    @property
    def max_violation(self):
        return float(np.max(self.per_step)) if self.per_step.size else -np.inf

    @property
    def feasible(self):
        return self.max_violation <= 0.0

    def __repr__(self):
        return (f"ViolationReport(max={self.max_violation:.3e}, "
                f"worst_index={self.worst_index})")


def check_constraints(zset, traj, useq):
    """Evaluate Z membership along a trajectory.

    Pairs (traj[k], useq[k]) are checked for k = 0..len(useq)-1; the report is
    exact for box/polytope sets and sample-evaluated for lipschitz sets.
    """
    traj = np.atleast_2d(np.asarray(traj, float))
    useq = np.asarray(useq, float).reshape(-1, zset.m)
    if traj.shape[0] < useq.shape[0]:
        raise ValueError("trajectory shorter than input sequence")
    if useq.shape[0] == 0:
        return ViolationReport(np.empty(0), 0)
    per_step = np.array([zset.violation(traj[k], useq[k])
                         for k in range(useq.shape[0])])
    return ViolationReport(per_step, int(np.argmax(per_step)))


def rollout(sys, x0, useq):
    """Roll the system forward: returns states of shape (N+1, n).

    Raises DivergedRollout (carrying the first bad index) if a non-finite
    state shows up.
    """
    x0 = _as_vec(x0, sys.n, "x0")
    useq = np.asarray(useq, float).reshape(-1, sys.m)
    N = useq.shape[0]
    xs = np.empty((N + 1, sys.n))
    xs[0] = x0
    for k in range(N):
        xs[k + 1] = sys.f(xs[k], useq[k])
        if not np.all(np.isfinite(xs[k + 1])):
            raise DivergedRollout(k + 1)
    return xs


class StageCost:
    """Stage cost in one of three flavours.

    * ``quadratic`` : ||x - x_r||^2_Q + ||u - u_r||^2_R (reference-centered)
    * ``output``    : ||h(x,u) - y_r||^2_Q + ||u - u_r||^2_R
    * ``economic``  : arbitrary smooth scalar fn(x, u, y_e), optionally
                      depending on an exogenous parameter y_e

    Gradients/Hessians fall back to central finite differences with the same
    step rule as the system Jacobians.
    """

    def __init__(self, variant, Q=None, R=None, sys=None, fn=None,
                 grad=None, hess=None):
        self.variant = variant
        if variant in ("quadratic", "output"):
            self.Q = np.atleast_2d(np.asarray(Q, float))
            self.R = np.atleast_2d(np.asarray(R, float))
            if np.any(np.linalg.eigvalsh(self.Q) <= 0):
                raise ValueError("Q must be positive definite")
            if np.any(np.linalg.eigvalsh(self.R) <= 0):
                raise ValueError("R must be positive definite")
            if variant == "output" and sys is None:
                raise ValueError("output-tracking cost needs the system")
            self.sys = sys
        elif variant == "economic":
            if fn is None:
                raise ValueError("economic cost needs fn(x, u, y_e)")
            self.fn = fn
            self._grad = grad
            self._hess = hess
        else:
            raise ValueError(f"unknown stage-cost variant {variant!r}")

    # ------------------------------------------------------------------
    @classmethod
    def quadratic(cls, Q, R):
        return cls("quadratic", Q=Q, R=R)

    @classmethod
    def output_tracking(cls, sys, Q, R):
        return cls("output", Q=Q, R=R, sys=sys)

    @classmethod
    def economic(cls, fn, grad=None, hess=None):
        return cls("economic", fn=fn, grad=grad, hess=hess)

    # ------------------------------------------------------------------
    def value(self, x, u, ref=None, param=None):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if self.variant == "quadratic":
            xr, ur = _ref_pair(ref, x.size, u.size)
            dx = x - xr
            du = u - ur
            return float(dx @ self.Q @ dx + du @ self.R @ du)
        if self.variant == "output":
            xr, ur = _ref_pair(ref, x.size, u.size)
            yr = self.sys.h(xr, ur)
            dy = self.sys.h(x, u) - yr
            du = u - ur
            return float(dy @ self.Q @ dy + du @ self.R @ du)
        return float(self.fn(x, u, param))

    def gradient(self, x, u, ref=None, param=None):
        """Return (d/dx, d/du) of the stage cost."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if self.variant == "quadratic":
            xr, ur = _ref_pair(ref, x.size, u.size)
            return 2.0 * self.Q @ (x - xr), 2.0 * self.R @ (u - ur)
        if self.variant == "economic" and self._grad is not None:
            gx, gu = self._grad(x, u, param)
            return np.asarray(gx, float), np.asarray(gu, float)
        fx = lambda xx: self.value(xx, u, ref, param)
        fu = lambda uu: self.value(x, uu, ref, param)
        gx = finite_difference_jacobian(fx, x, 1)[0]
        gu = finite_difference_jacobian(fu, u, 1)[0]
        return gx, gu

    def hessian(self, x, u, ref=None, param=None):
        """Return blocks (Hxx, Hxu, Huu) of the stage-cost Hessian."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if self.variant == "quadratic":
            return 2.0 * self.Q, np.zeros((x.size, u.size)), 2.0 * self.R
        if self.variant == "economic" and self._hess is not None:
            Hxx, Hxu, Huu = self._hess(x, u, param)
            return (np.atleast_2d(np.asarray(Hxx, float)),
                    np.asarray(Hxu, float).reshape(x.size, u.size),
                    np.atleast_2d(np.asarray(Huu, float)))
        gx = lambda xx: self.gradient(xx, u, ref, param)[0]
        gu = lambda uu: self.gradient(x, uu, ref, param)[1]
        gxu = lambda uu: self.gradient(x, uu, ref, param)[0]
        Hxx = finite_difference_jacobian(gx, x, x.size)
        Huu = finite_difference_jacobian(gu, u, u.size)
        Hxu = finite_difference_jacobian(gxu, u, x.size)
        Hxx = 0.5 * (Hxx + Hxx.T)
        Huu = 0.5 * (Huu + Huu.T)
        return Hxx, Hxu, Huu

    def min_over_u(self, x, ref=None, param=None, u_box=None):
        """ell_min(x) = min_u ell(x, u) for the quadratic variant.

        With a box input set containing u_r this is exactly ||x - x_r||^2_Q.
        """
        if self.variant != "quadratic":
            raise ValueError("min_over_u is defined for the quadratic variant")
        x = np.asarray(x, float)
        xr, ur = _ref_pair(ref, x.size, self.R.shape[0])
        if u_box is not None:
            lo, hi = u_box
            ur_cl = np.clip(ur, lo, hi)
        else:
            ur_cl = ur
        du = ur_cl - ur
        dx = x - xr
        return float(dx @ self.Q @ dx + du @ self.R @ du)


def _ref_pair(ref, n, m):
    if ref is None:
        return np.zeros(n), np.zeros(m)
    if isinstance(ref, Reference):
        return ref.xs[0], ref.us[0]
    xr, ur = ref
    return np.asarray(xr, float), np.asarray(ur, float)


class Reference:
    """Reference to be tracked: a setpoint, a finite trajectory, or a
    T-periodic sequence with modulo indexing.

    The underlying data are arrays xs (T, n) and us (T, m); a setpoint has
    T = 1. Trajectory references clamp beyond the final index (the reference
    becomes constant after some finite time), periodic ones wrap around.
    """

    def __init__(self, variant, xs, us):
        if variant not in ("setpoint", "trajectory", "periodic"):
            raise ValueError(f"unknown reference variant {variant!r}")
        self.variant = variant
        self.xs = np.atleast_2d(np.asarray(xs, float))
        self.us = np.atleast_2d(np.asarray(us, float))
        if self.xs.shape[0] != self.us.shape[0]:
            raise ValueError("xs and us must have the same length")

    @classmethod
    def setpoint(cls, xr, ur):
        return cls("setpoint", [np.atleast_1d(xr)], [np.atleast_1d(ur)])

    @classmethod
    def trajectory(cls, xs, us):
        return cls("trajectory", xs, us)

    @classmethod
    def periodic(cls, xs, us):
        return cls("periodic", xs, us)

    @property
    def period(self):
        return self.xs.shape[0]

    def at(self, k):
        """(x_r, u_r) at step k: modulo for periodic, clamped for trajectory."""
        if k < 0:
            raise ValueError("reference index must be nonnegative")
        T = self.xs.shape[0]
        if self.variant == "periodic":
            i = k % T
        else:
            i = min(k, T - 1)
        return self.xs[i], self.us[i]

    def shifted(self, steps=1):
        """Reference advanced by ``steps`` (used for warm starts)."""
        T = self.xs.shape[0]
        if self.variant == "periodic":
            idx = [(k + steps) % T for k in range(T)]
        else:
            idx = [min(k + steps, T - 1) for k in range(T)]
        return Reference(self.variant, self.xs[idx], self.us[idx])

    def check_dynamic_consistency(self, sys, tol=1e-9):
        """x_r(t+1) = f(x_r(t), u_r(t)) along the reference (wraps for periodic).

        Returns the worst defect; raises ValueError above tolerance.
        """
        T = self.xs.shape[0]
        if self.variant == "setpoint":
            pairs = [(0, 0)]
        elif self.variant == "periodic":
            pairs = [(k, (k + 1) % T) for k in range(T)]
        else:
            pairs = [(k, k + 1) for k in range(T - 1)]
        worst = 0.0
        for k, kn in pairs:
            defect = np.max(np.abs(sys.f(self.xs[k], self.us[k]) - self.xs[kn]))
            worst = max(worst, float(defect))
        if worst > tol:
            raise ValueError(
                f"reference is not dynamically consistent (defect {worst:.2e})")
        return worst

    def check_feasibility(self, zset):
        """All reference points must lie in Z_r (strict interior of Z)."""
        for k in range(self.xs.shape[0]):
            if not zset.in_reference_set(self.xs[k], self.us[k]):
                raise ValueError(
                    f"reference point {k} is not strictly feasible "
                    f"(violation {zset.violation(self.xs[k], self.us[k]):.2e})")


def reference_at(ref, k):
    """Convenience wrapper: r_k with setpoint/periodic/clamping semantics."""
    return ref.at(k)


class ExogenousSignal:
    """Piecewise-constant schedule of exogenous values (targets y_d or
    economic parameters y_e).

    ``at(t)`` returns the most recent scheduled value at or before t.  With a
    period T the signal may be flagged consistent, meaning the schedule
    satisfies value(t + T) = value(t) once wrapped.
    """

    def __init__(self, times, values, period=None, periodic_consistent=False):
        self.times = np.asarray(times, float).ravel()
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be strictly increasing")
        if self.times.size == 0 or self.times[0] > 0:
            raise ValueError("schedule must start at time 0")
        self.values = [np.atleast_1d(np.asarray(v, float)) for v in values]
        if len(self.values) != self.times.size:
            raise ValueError("times and values must have the same length")
        self.period = period
        self.periodic_consistent = bool(periodic_consistent)

    @classmethod
    def constant(cls, value):
        return cls([0.0], [value])

    @classmethod
    def periodic_sequence(cls, values):
        """One value per step of a period, repeating forever."""
        T = len(values)
        sig = cls(np.arange(T, dtype=float), values, period=T,
                  periodic_consistent=True)
        return sig

    def at(self, t):
        if t < 0:
            raise ValueError("lookup time must be nonnegative")
        if self.period is not None and self.periodic_consistent:
            t = t % self.period
        idx = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.values[idx]

    def window(self, t, length):
        """Values at t, t+1, ..., t+length-1 (stacked as an array)."""
        return np.array([self.at(t + k) for k in range(length)])
