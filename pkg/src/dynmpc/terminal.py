"""Terminal cost / set / control-law synthesis.

Quadratic terminal ingredients around setpoints, trajectories, periodic
orbits, gridded reference manifolds, and economic variants with a linear
correction term.  The terminal set is the sublevel set {V_f <= alpha}; all
scalings are certified by exact polytopic half-space maximization plus a
deterministic sampling pass for the nonlinear decrease.
"""

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .model import Reference
from .solvers import (
    SynthesisError,
    solve_dare,
    solve_dlyap,
    solve_periodic_riccati,
    solve_tv_riccati,
)

_ALPHA_CAP = 1e12
_SAMPLE_SEED = 12345


class LqrResidual:
    """Value of (A+BK)' P+ (A+BK) - P + Q + K'RK (symmetrized)."""

    def __init__(self, matrix):
        M = np.atleast_2d(np.asarray(matrix, float))
        if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, np.max(np.abs(M))):
            raise ValueError("residual matrix must be symmetric")
        self.matrix = 0.5 * (M + M.T)

    @property
    def max_eig(self):
        return float(np.max(np.linalg.eigvalsh(self.matrix)))

    def is_decrease_certificate(self, tol=1e-8):
        """True when the residual is negative semidefinite to tolerance."""
        return self.max_eig <= tol

    def __repr__(self):
        return f"LqrResidual(max_eig={self.max_eig:.3e})"


def lqr_residual(A, B, K, P, Pplus, Q, R):
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    K = np.asarray(K, float).reshape(B.shape[1], A.shape[0])
    P = np.atleast_2d(np.asarray(P, float))
    Pplus = np.atleast_2d(np.asarray(Pplus, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    Acl = A + B @ K
    M = Acl.T @ Pplus @ Acl - P + Q + K.T @ R @ K
    return LqrResidual(0.5 * (M + M.T))


class TerminalIngredients:
    """Terminal cost V_f, set {V_f <= alpha}, and law k_f.

    variant is one of 'stationary' | 'time-varying' | 'parametrized' |
    'equality'.  Time-varying ingredients carry per-time (P, K) indexed like
    their reference (modulo for periodic, clamped for trajectories);
    parametrized ones interpolate DARE solutions over a reference manifold.
    """

    def __init__(self, variant, ref=None, P=None, p=None, K=None,
                 alpha=0.0, rho=0.999, epsilon=0.0,
                 P_seq=None, K_seq=None, p_seq=None,
                 manifold=None, node_values=None, min_horizon_hint=None):
        self.variant = variant
        self.ref = ref
        self.P = None if P is None else np.atleast_2d(np.asarray(P, float))
        self.K = None if K is None else np.atleast_2d(np.asarray(K, float))
        if p is None:
            if self.P is not None:
                p = np.zeros(self.P.shape[0])
            elif P_seq is not None:
                p = np.zeros(np.atleast_2d(np.asarray(P_seq[0])).shape[0])
        self.p = None if p is None else np.asarray(p, float).ravel()
        self.alpha = float(alpha)
        self.rho = float(rho)
        self.epsilon = float(epsilon)
        self.P_seq = P_seq
        self.K_seq = K_seq
        self.p_seq = p_seq
        self.manifold = manifold
        self.node_values = node_values
        self.min_horizon_hint = min_horizon_hint
        self._interp = None
        if variant == "parametrized" and node_values is not None:
            self._build_interpolators()

    # ---- time-indexed accessors --------------------------------------
    def _index(self, t):
        T = len(self.P_seq)
        if self.ref is not None and self.ref.variant == "periodic":
            return t % T
        return min(t, T - 1)

    def ref_pair(self, t=0):
        return self.ref.at(t)

    def P_at(self, t=0):
        if self.variant == "time-varying":
            return self.P_seq[self._index(t)]
        return self.P

    def K_at(self, t=0):
        if self.variant == "time-varying":
            return self.K_seq[self._index(t)]
        return self.K

    def p_at(self, t=0):
        if self.variant == "time-varying" and self.p_seq is not None:
            return self.p_seq[self._index(t)]
        return self.p

    def value(self, x, t=0):
        """V_f(x, t) = ||x - x_r||^2_P + p'(x - x_r)."""
        if self.variant == "equality":
            return 0.0
        x = np.asarray(x, float)
        xr, _ = self.ref_pair(t)
        e = x - xr
        return float(e @ self.P_at(t) @ e + self.p_at(t) @ e)

    def law(self, x, t=0):
        """k_f(x, t) = u_r + K (x - x_r)."""
        x = np.asarray(x, float)
        xr, ur = self.ref_pair(t)
        if self.variant == "equality":
            return ur
        return ur + self.K_at(t) @ (x - xr)

    def contains(self, x, t=0, tol=1e-8):
        if self.variant == "equality":
            xr, _ = self.ref_pair(t)
            return bool(np.max(np.abs(np.asarray(x, float) - xr)) <= tol)
        return self.value(x, t) <= self.alpha + tol

    # ---- reference-parametrized accessors ----------------------------
    def _build_interpolators(self):
        axes = self.manifold.axes
        vals = self.node_values  # dict of arrays indexed by grid
        self._interp = {}
        for key in ("P", "K", "alpha"):
            arr = vals[key]
            if len(axes) == 1 and arr.shape[0] == 1:
                # single node: constant extension
                self._interp[key] = (lambda a: (lambda th: a[0]))(arr)
            else:
                it = RegularGridInterpolator(axes, arr, method="linear",
                                             bounds_error=False,
                                             fill_value=None)
                self._interp[key] = (lambda f: (
                    lambda th: f(np.atleast_2d(th))[0]))(it)

    def P_of(self, r):
        if self.variant != "parametrized":
            return self.P
        th = np.atleast_1d(self.manifold.theta_of(r))
        return np.atleast_2d(self._interp["P"](th))

    def K_of(self, r):
        if self.variant != "parametrized":
            return self.K
        th = np.atleast_1d(self.manifold.theta_of(r))
        return np.atleast_2d(self._interp["K"](th))

    def alpha_of(self, r):
        if self.variant != "parametrized":
            return self.alpha
        th = np.atleast_1d(self.manifold.theta_of(r))
        return float(self._interp["alpha"](th))

    def common_metric(self):
        """Eigenvalue bounds (lambda_min, lambda_max) over all carried P."""
        if self.variant == "parametrized":
            Ps = self.node_values["P"].reshape(-1, self.P.shape[0],
                                               self.P.shape[0])
            lo = min(np.min(np.linalg.eigvalsh(Pi)) for Pi in Ps)
            hi = max(np.max(np.linalg.eigvalsh(Pi)) for Pi in Ps)
            return lo, hi
        if self.variant == "time-varying":
            lo = min(np.min(np.linalg.eigvalsh(Pi)) for Pi in self.P_seq)
            hi = max(np.max(np.linalg.eigvalsh(Pi)) for Pi in self.P_seq)
            return lo, hi
        w = np.linalg.eigvalsh(self.P)
        return float(w[0]), float(w[-1])

    # ---- serialization ------------------------------------------------
    def to_dict(self):
        d = {"variant": self.variant, "alpha": self.alpha, "rho": self.rho,
             "epsilon": self.epsilon}
        if self.ref is not None:
            d["ref"] = {"variant": self.ref.variant,
                        "xs": self.ref.xs.tolist(),
                        "us": self.ref.us.tolist()}
        for name in ("P", "p", "K"):
            v = getattr(self, name)
            if v is not None:
                d[name] = np.asarray(v).tolist()
        if self.variant == "time-varying":
            d["P_seq"] = [np.asarray(P).tolist() for P in self.P_seq]
            d["K_seq"] = [np.asarray(K).tolist() for K in self.K_seq]
            if self.p_seq is not None:
                d["p_seq"] = [np.asarray(p).tolist() for p in self.p_seq]
        if self.min_horizon_hint is not None:
            d["min_horizon_hint"] = int(self.min_horizon_hint)
        return d

    @classmethod
    def from_dict(cls, d):
        ref = None
        if "ref" in d:
            ref = Reference(d["ref"]["variant"], d["ref"]["xs"],
                            d["ref"]["us"])
        kw = dict(ref=ref, alpha=d["alpha"], rho=d["rho"],
                  epsilon=d["epsilon"])
        for name in ("P", "p", "K"):
            if name in d:
                kw[name] = np.asarray(d[name], float)
        if d["variant"] == "time-varying":
            kw["P_seq"] = [np.atleast_2d(np.asarray(P, float))
                           for P in d["P_seq"]]
            kw["K_seq"] = [np.atleast_2d(np.asarray(K, float))
                           for K in d["K_seq"]]
            if "p_seq" in d:
                kw["p_seq"] = [np.asarray(p, float) for p in d["p_seq"]]
        if "min_horizon_hint" in d:
            kw["min_horizon_hint"] = d["min_horizon_hint"]
        return cls(d["variant"], **kw)


class ReferenceManifold:
    """Chart for a d-dimensional family of references (d <= 3).

    chart(theta) -> (x_r, u_r); theta_of(r) inverts the chart; successor
    maps theta to the parameter of the next reference point (identity for
    steady-state manifolds).
    """

    def __init__(self, axes, chart, theta_of, successor=None):
        self.axes = [np.asarray(a, float).ravel() for a in axes]
        if len(self.axes) > 3:
            raise ValueError("reference manifolds support at most 3 axes")
        self.chart = chart
        self.theta_of = theta_of
        self.successor = successor if successor is not None else \
            (lambda th: th)

    def nodes(self):
        grids = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        return pts

    def refine(self):
        """Halve the grid spacing on every axis."""
        new_axes = []
        for a in self.axes:
            if a.size == 1:
                new_axes.append(a)
                continue
            mids = 0.5 * (a[:-1] + a[1:])
            merged = np.sort(np.concatenate([a, mids]))
            new_axes.append(merged)
        return ReferenceManifold(new_axes, self.chart, self.theta_of,
                                 self.successor)


# ----------------------------------------------------------------------
# alpha computation
# ----------------------------------------------------------------------

def _level_set_samples(P, p, alpha, n_samples, rng, fractions=(1.0, 0.75,
                                                               0.5)):
    """Deterministic points of the set {e: e'Pe + p'e <= alpha}.

    Points are placed on the boundary and on two inner shells; directions
    are normalized Gaussian draws from the supplied generator.
    """
    n = P.shape[0]
    w, V = np.linalg.eigh(P)
    P_inv_half = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    e_c = -0.5 * np.linalg.solve(P, p)
    c0 = 0.25 * float(p @ np.linalg.solve(P, p))
    radius2 = alpha + c0
    if radius2 <= 0:
        return np.zeros((0, n))
    out = []
    counts = [int(n_samples * 0.6), int(n_samples * 0.25)]
    counts.append(n_samples - sum(counts))
    for frac, cnt in zip(fractions, counts):
        D = rng.standard_normal(size=(cnt, n))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        out.append(e_c + frac * np.sqrt(radius2) * D @ P_inv_half.T)
    return np.vstack(out)


def _alpha2_polytopic(P, K, p, zset, r):
    """Largest alpha with {V_f <= alpha} x k_f(.) inside the polytope."""
    xr, ur = r
    n = xr.size
    W, b, z0 = zset.rows()
    zr = np.concatenate([xr, ur])
    e_c = -0.5 * np.linalg.solve(P, p)
    c0 = 0.25 * float(p @ np.linalg.solve(P, p))
    alpha2 = _ALPHA_CAP
    for i in range(W.shape[0]):
        w_x = W[i, :n]
        w_u = W[i, n:]
        s_r = float(W[i] @ (zr - z0))
        v = w_x + K.T @ w_u
        vPv = float(v @ np.linalg.solve(P, v))
        margin = b[i] - s_r - float(v @ e_c)
        if vPv <= 1e-14:
            if b[i] - s_r <= 0:
                raise SynthesisError(
                    "(T.1) violated: reference sits outside a constraint row")
            continue
        if margin <= 0:
            raise SynthesisError(
                "(T.1) violated: terminal ellipsoid center infeasible for a "
                "constraint row")
        alpha_row = margin * margin / vPv - c0
        alpha2 = min(alpha2, alpha_row)
    if alpha2 <= 0:
        raise SynthesisError("(T.1) violated: no positive scaling fits the "
                             "constraint set")
    return alpha2


def _decrease_holds(sys, P, K, p, r, alpha, stage, rho, n_samples,
                    rng, Pplus=None, pplus=None, r_next=None):
    """Sampled check of the terminal decrease and contraction at scaling
    alpha.  Returns the worst slack (>= 0 means every sample passed)."""
    xr, ur = r
    Pplus = P if Pplus is None else Pplus
    pplus = p if pplus is None else pplus
    xr_next, _ = r if r_next is None else r_next
    Q, R = stage
    E = _level_set_samples(P, p, alpha, n_samples, rng)
    worst = np.inf
    for e in E:
        x = xr + e
        u = ur + K @ e
        xp = sys.f(x, u)
        ep = xp - xr_next
        vf = float(e @ P @ e + p @ e)
        vf_next = float(ep @ Pplus @ ep + pplus @ ep)
        stage_val = float(e @ Q @ e + (u - ur) @ R @ (u - ur))
        # (T.3): V_f(x+) - V_f(x) <= -l(x, k_f(x))
        worst = min(worst, vf - vf_next - stage_val)
        # (T.2): exponential contraction with the certified rho
        if np.max(np.abs(p)) == 0:
            worst = min(worst, rho * vf - vf_next)
    return worst


def compute_alpha(sys, P, K, p, zset, r, stage=None, epsilon=0.0,
                  Pplus=None, r_next=None, n_samples=1000, rho=None):
    """Terminal-set scaling alpha = min(alpha_1, alpha_2).

    alpha_2 is the exact polytopic bound (per half-space closed form);
    alpha_1 certifies the sampled nonlinear decrease (T.3) by bisection
    (bracket [1e-12, alpha_2], at most 40 halvings).  When the decrease
    already holds at alpha_2 — linear dynamics in particular — alpha_2 is
    returned unchanged.
    """
    P = np.atleast_2d(np.asarray(P, float))
    K = np.atleast_2d(np.asarray(K, float))
    p = np.zeros(P.shape[0]) if p is None else np.asarray(p, float).ravel()
    xr = np.asarray(r[0], float)
    ur = np.asarray(r[1], float)
    r = (xr, ur)
    alpha2 = _alpha2_polytopic(P, K, p, zset, r)
    if stage is None:
        return alpha2
    if rho is None:
        rho = float(np.clip(1.0 - epsilon / np.max(np.linalg.eigvalsh(P)),
                            1e-12, 1.0 - 1e-12))

    def trial(alpha):
        rng = np.random.default_rng(_SAMPLE_SEED)
        return _decrease_holds(sys, P, K, p, r, alpha, stage, rho,
                               n_samples, rng, Pplus=Pplus, r_next=r_next)

    if trial(alpha2) >= 0.0:
        return alpha2
    lo, hi = 1e-12, alpha2
    if trial(lo) < 0.0:
        raise SynthesisError(
            "(T.3) violated: terminal decrease fails even at scaling 1e-12")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if trial(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo


# ----------------------------------------------------------------------
# syntheses
# ----------------------------------------------------------------------

def _ref_tuple(r):
    if isinstance(r, Reference):
        return r.at(0)
    xr, ur = r
    return np.atleast_1d(np.asarray(xr, float)), \
        np.atleast_1d(np.asarray(ur, float))


def synth_terminal_setpoint(sys, r, zset, Q, R, epsilon=1e-3):
    """Quadratic terminal ingredients around a strictly feasible setpoint.

    (P, K) solve the DARE with inflated cost Q + eps I; alpha combines the
    exact polytopic bound with the sampled nonlinear decrease; rho is the
    contraction rate certified by the epsilon margin.
    """
    xr, ur = _ref_tuple(r)
    if not zset.in_reference_set(xr, ur):
        raise SynthesisError(
            "(T.1) violated: setpoint is not strictly inside the "
            "constraint set")
    defect = np.max(np.abs(sys.f(xr, ur) - xr))
    if defect > 1e-9:
        raise SynthesisError(f"reference is not an equilibrium "
                             f"(defect {defect:.2e})")
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    A, B = sys.jacobians(xr, ur)
    n = A.shape[0]
    P, K = solve_dare(A, B, Q + epsilon * np.eye(n), R)
    res = lqr_residual(A, B, K, P, P, Q + epsilon * np.eye(n), R)
    if not res.is_decrease_certificate(1e-8):
        raise SynthesisError(
            f"LQR residual not negative semidefinite ({res.max_eig:.2e})")
    rho = float(np.clip(1.0 - epsilon / np.max(np.linalg.eigvalsh(P)),
                        1e-12, 1.0 - 1e-12))
    alpha = compute_alpha(sys, P, K, None, zset, (xr, ur), stage=(Q, R),
                          epsilon=epsilon, rho=rho)
    ref = r if isinstance(r, Reference) else Reference.setpoint(xr, ur)
    return TerminalIngredients("stationary", ref=ref, P=P, K=K, alpha=alpha,
                               rho=rho, epsilon=epsilon)


def synth_terminal_trajectory(sys, ref, zset, Q, R, epsilon=1e-3):
    """Time-varying terminal ingredients along a trajectory or orbit.

    Periodic references use the periodic Riccati solution; clamped
    trajectories use a backward sweep from the DARE at the stationary tail.
    The scaling is the minimum of the per-time admissible scalings, which
    keeps the terminal-set family invariant.
    """
    if not isinstance(ref, Reference) or ref.variant == "setpoint":
        return synth_terminal_setpoint(sys, ref, zset, Q, R, epsilon)
    ref.check_dynamic_consistency(sys)
    ref.check_feasibility(zset)
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    T = ref.period
    n = ref.xs.shape[1]
    Qe = Q + epsilon * np.eye(n)
    A_seq = []
    B_seq = []
    for t in range(T):
        xr, ur = ref.at(t)
        A, B = sys.jacobians(xr, ur)
        A_seq.append(A)
        B_seq.append(B)
    if ref.variant == "periodic":
        P_seq, K_seq = solve_periodic_riccati(A_seq, B_seq, Qe, R)
    else:
        xr_T, ur_T = ref.at(T - 1)
        A_T, B_T = sys.jacobians(xr_T, ur_T)
        P_tail, K_tail = solve_dare(A_T, B_T, Qe, R)
        P_seq, K_seq = solve_tv_riccati(A_seq[:-1], B_seq[:-1], Qe, R,
                                        P_tail)
        P_seq = P_seq[:-1] + [P_tail]
        K_seq = K_seq + [K_tail]
    # per-time residual check (decrease direction)
    for t in range(T):
        t_next = (t + 1) % T if ref.variant == "periodic" else min(t + 1,
                                                                   T - 1)
        res = lqr_residual(A_seq[t], B_seq[t], K_seq[t], P_seq[t],
                           P_seq[t_next], Qe, R)
        if not res.is_decrease_certificate(1e-8):
            raise SynthesisError(
                f"time {t}: LQR residual not a decrease certificate "
                f"({res.max_eig:.2e})")
    lam_max = max(np.max(np.linalg.eigvalsh(P)) for P in P_seq)
    rho = float(np.clip(1.0 - epsilon / lam_max, 1e-12, 1.0 - 1e-12))
    alphas = []
    for t in range(T):
        t_next = (t + 1) % T if ref.variant == "periodic" else min(t + 1,
                                                                   T - 1)
        alphas.append(compute_alpha(
            sys, P_seq[t], K_seq[t], None, zset, ref.at(t), stage=(Q, R),
            epsilon=epsilon, Pplus=P_seq[t_next], r_next=ref.at(t_next),
            rho=rho))
    alpha = min(alphas)
    return TerminalIngredients("time-varying", ref=ref, P=P_seq[0],
                               K=K_seq[0], alpha=alpha, rho=rho,
                               epsilon=epsilon, P_seq=P_seq, K_seq=K_seq)


def synth_terminal_parametrized(sys, manifold, zset, Q, R, epsilon=1e-3,
                                n_verify=2000, max_refinements=3):
    """Gridded terminal ingredients over a reference manifold.

    Pointwise DARE at every grid node, multilinear interpolation in
    between, then a sampled verification of the residual condition along
    reference successions with the relaxed margin eps/2.  The grid spacing
    is halved (up to three times) when verification fails.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    last_worst = None
    for refinement in range(max_refinements + 1):
        nodes = manifold.nodes()
        shape = tuple(len(a) for a in manifold.axes)
        first_theta = nodes[0]
        xr0, ur0 = manifold.chart(first_theta)
        n = np.atleast_1d(xr0).size
        m = np.atleast_1d(ur0).size
        Qe = Q + epsilon * np.eye(n)
        P_nodes = np.zeros(shape + (n, n))
        K_nodes = np.zeros(shape + (m, n))
        a_nodes = np.zeros(shape)
        rho_worst = 1.0 - 1e-12
        for flat, theta in enumerate(nodes):
            idx = np.unravel_index(flat, shape)
            xr, ur = manifold.chart(theta)
            xr = np.atleast_1d(np.asarray(xr, float))
            ur = np.atleast_1d(np.asarray(ur, float))
            A, B = sys.jacobians(xr, ur)
            P, K = solve_dare(A, B, Qe, R)
            P_nodes[idx] = P
            K_nodes[idx] = K
            rho_node = float(np.clip(
                1.0 - 0.5 * epsilon / np.max(np.linalg.eigvalsh(P)),
                1e-12, 1.0 - 1e-12))
            rho_worst = min(rho_worst, rho_node)
            a_nodes[idx] = compute_alpha(sys, P, K, None, zset, (xr, ur),
                                         stage=(Q, R), epsilon=epsilon,
                                         rho=rho_node, n_samples=200)
        ingredients = TerminalIngredients(
            "parametrized", P=P_nodes[(0,) * len(shape)],
            K=K_nodes[(0,) * len(shape)],
            alpha=float(np.min(a_nodes)), rho=rho_worst, epsilon=epsilon,
            manifold=manifold,
            node_values={"P": P_nodes, "K": K_nodes, "alpha": a_nodes})

        worst = _verify_parametrized(sys, manifold, ingredients, Q, R,
                                     epsilon, n_verify)
        if worst[0] <= 1e-10:
            return ingredients
        last_worst = worst
        manifold = manifold.refine()
    raise SynthesisError(
        "parametrized verification failed after maximum refinement; worst "
        f"pair r={last_worst[1]}, r_next={last_worst[2]} with max "
        f"eigenvalue {last_worst[0]:.3e}")


def _verify_parametrized(sys, manifold, ingredients, Q, R, epsilon,
                         n_verify):
    """Sampled residual check along (r, r+) pairs; returns worst record."""
    rng = np.random.default_rng(_SAMPLE_SEED + 1)
    n = ingredients.P.shape[0]
    Qrelax = Q + 0.5 * epsilon * np.eye(n)
    lows = [a[0] for a in manifold.axes]
    highs = [a[-1] for a in manifold.axes]
    worst = (-np.inf, None, None)
    for _ in range(n_verify):
        theta = np.array([rng.uniform(lo, hi)
                          for lo, hi in zip(lows, highs)])
        theta_next = np.atleast_1d(manifold.successor(theta))
        xr, ur = manifold.chart(theta)
        xr = np.atleast_1d(np.asarray(xr, float))
        ur = np.atleast_1d(np.asarray(ur, float))
        r = (xr, ur)
        xr2, ur2 = manifold.chart(theta_next)
        r_next = (np.atleast_1d(np.asarray(xr2, float)),
                  np.atleast_1d(np.asarray(ur2, float)))
        A, B = sys.jacobians(xr, ur)
        res = lqr_residual(A, B, ingredients.K_of(r), ingredients.P_of(r),
                           ingredients.P_of(r_next), Qrelax, R)
        if res.max_eig > worst[0]:
            worst = (res.max_eig, (xr.copy(), ur.copy()), r_next)
    return worst


def synth_terminal_economic(sys, r, ell_e, tracking, zset, param=None,
                            epsilon_margin=0.1, n_samples=1000):
    """Economic terminal cost V_fe(x) = ||x-x_r||^2_P + p'(x-x_r).

    p compensates the economic gradient along the closed loop; P solves a
    Lyapunov equation whose right-hand side upper-bounds the sampled
    Hessian of the closed-loop economic stage cost (inflated by 10%);
    alpha is found by bisection on the sampled average-decrease condition
    V_fe(x+) - V_fe(x) <= -l_e(x, k_f(x)) + l_e(r).
    """
    xr, ur = _ref_tuple(r)
    K = np.atleast_2d(np.asarray(tracking.K, float))
    A, B = sys.jacobians(xr, ur)
    Acl = A + B @ K
    n = A.shape[0]
    gx, gu = ell_e.gradient(xr, ur, param=param)
    g_phi = gx + K.T @ gu
    # linear correction: (Acl' - I) p = -g_phi
    p = np.linalg.solve(Acl.T - np.eye(n), -g_phi)

    # sampled Hessian bound of phi(x) = l_e(x, u_r + K(x - x_r))
    rng = np.random.default_rng(_SAMPLE_SEED + 2)
    alpha_probe = max(tracking.alpha, 1e-6)
    E = _level_set_samples(tracking.P, np.zeros(n), alpha_probe, 200, rng)
    lam = 0.0
    for e in np.vstack([np.zeros((1, n)), E]):
        x = xr + e
        u = ur + K @ e
        Hxx, Hxu, Huu = ell_e.hessian(x, u, param=param)
        H_phi = Hxx + Hxu @ K + K.T @ Hxu.T + K.T @ Huu @ K
        lam = max(lam, np.max(np.linalg.eigvalsh(0.5 * (H_phi + H_phi.T))))
    qhat = max((1.0 + epsilon_margin) * lam, 1e-6)
    ell_bar = ell_e.value(xr, ur, param=param)

    def econ_trial(P, alpha):
        rng_t = np.random.default_rng(_SAMPLE_SEED + 3)
        E_t = _level_set_samples(P, p, alpha, n_samples, rng_t)
        worst = np.inf
        for e in E_t:
            x = xr + e
            u = ur + K @ e
            xp = sys.f(x, u)
            ep = xp - xr
            lhs = float(ep @ P @ ep + p @ ep) - float(e @ P @ e + p @ e)
            rhs = -ell_e.value(x, u, param=param) + ell_bar
            worst = min(worst, rhs - lhs)
        return worst

    # Any scaled-up qhat is still a valid Hessian upper bound; escalating
    # it shrinks the off-center shift -P^{-1}p/2 until the sublevel set
    # fits the constraints and the sampled decrease holds.
    alpha = None
    for _ in range(60):
        P = solve_dlyap(Acl, qhat * np.eye(n))
        try:
            alpha2 = _alpha2_polytopic(P, K, p, zset, (xr, ur))
        except SynthesisError:
            qhat *= 4.0
            continue
        if econ_trial(P, alpha2) >= 0.0:
            alpha = alpha2
            break
        lo, hi = 1e-12, alpha2
        if econ_trial(P, lo) < 0.0:
            qhat *= 4.0
            continue
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if econ_trial(P, mid) >= 0.0:
                lo = mid
            else:
                hi = mid
        alpha = lo
        break
    if alpha is None:
        raise SynthesisError(
            "economic terminal synthesis failed: no Hessian bound makes the "
            "off-center sublevel set feasible and decreasing")
    rho = float(np.clip(1.0 - 0.5 * qhat / np.max(np.linalg.eigvalsh(P)),
                        1e-12, 1.0 - 1e-12))
    ref = r if isinstance(r, Reference) else Reference.setpoint(xr, ur)
    return TerminalIngredients("stationary", ref=ref, P=P, p=p, K=K,
                               alpha=alpha, rho=rho,
                               epsilon=tracking.epsilon)


def synth_terminal_economic_periodic(sys, ref, ell_e, tracking, zset,
                                     signal=None, epsilon_margin=0.1,
                                     max_sweeps=10_000):
    """Periodic economic terminal cost along a T-periodic reference.

    The linear corrections p(t) solve the backward periodic recursion
    p(t) = Acl(t)' p(t+1) + g_phi(t); the quadratic parts solve a periodic
    Lyapunov recursion with the sampled Hessian bound per phase.
    """
    T = ref.period
    A_seq, B_seq, g_seq, qhat_seq = [], [], [], []
    n = ref.xs.shape[1]
    for t in range(T):
        xr, ur = ref.at(t)
        param = None if signal is None else signal.at(t)
        A, B = sys.jacobians(xr, ur)
        K = tracking.K_at(t)
        A_seq.append(A + B @ K)
        B_seq.append(B)
        gx, gu = ell_e.gradient(xr, ur, param=param)
        g_seq.append(gx + K.T @ gu)
        Hxx, Hxu, Huu = ell_e.hessian(xr, ur, param=param)
        H_phi = Hxx + Hxu @ K + K.T @ Hxu.T + K.T @ Huu @ K
        lam = np.max(np.linalg.eigvalsh(0.5 * (H_phi + H_phi.T)))
        qhat_seq.append(max((1.0 + epsilon_margin) * lam, 1e-6))

    # backward fixed-point iterations (both contract: monodromy is Schur);
    # qhat escalation as in the stationary case when the off-center sets
    # do not fit the constraints
    p = np.zeros(n)
    p_seq = [np.zeros(n)] * T
    for _ in range(max_sweeps):
        p_old = p.copy()
        for t in reversed(range(T)):
            p = A_seq[t].T @ p + g_seq[t]
            p_seq[t] = p.copy()
        if np.max(np.abs(p - p_old)) <= 1e-12:
            break
    else:
        raise SynthesisError("periodic economic recursion did not settle")

    alphas = None
    for _ in range(60):
        P = np.eye(n)
        P_seq = [np.eye(n)] * T
        for _ in range(max_sweeps):
            P_old = P.copy()
            for t in reversed(range(T)):
                P = A_seq[t].T @ P @ A_seq[t] + qhat_seq[t] * np.eye(n)
                P = 0.5 * (P + P.T)
                P_seq[t] = P.copy()
            if np.max(np.abs(P - P_old)) <= 1e-12:
                break
        else:
            raise SynthesisError("periodic economic recursion did not settle")
        try:
            # uniform scaling: minimum over phases of the constraint limit
            alphas = []
            for t in range(T):
                xr, ur = ref.at(t)
                alphas.append(_alpha2_polytopic(P_seq[t], tracking.K_at(t),
                                                p_seq[t], zset, (xr, ur)))
            break
        except SynthesisError:
            qhat_seq = [4.0 * q for q in qhat_seq]
            alphas = None
    if alphas is None:
        raise SynthesisError(
            "periodic economic synthesis failed: off-center sets never fit "
            "the constraint set")
    lam_max = max(np.max(np.linalg.eigvalsh(P)) for P in P_seq)
    rho = float(np.clip(1.0 - 0.5 * min(qhat_seq) / lam_max, 1e-12,
                        1.0 - 1e-12))
    K_seq = [tracking.K_at(t) for t in range(T)]
    return TerminalIngredients("time-varying", ref=ref, P=P_seq[0],
                               p=p_seq[0], K=K_seq[0], alpha=min(alphas),
                               rho=rho, epsilon=tracking.epsilon,
                               P_seq=P_seq, K_seq=K_seq, p_seq=p_seq)


class ShiftedTerminalCost:
    """Economic terminal cost plus the phase-dependent telescoping offset.

    offset(t) = sum_{k=0}^{T-2} ((T-1-k)/T) * l_e(r(t+k), y_e(t+k)); the
    shifted cost satisfies the averaged decrease with the uniform slack
    mean(l_e along the reference).
    """

    def __init__(self, base_value, ref, ell_e, signal=None):
        self.base_value = base_value
        self.ref = ref
        self.ell_e = ell_e
        self.signal = signal
        T = ref.period
        self.period = T
        vals = []
        for t in range(T):
            xr, ur = ref.at(t)
            param = None if signal is None else signal.at(t)
            vals.append(ell_e.value(xr, ur, param=param))
        self.ref_stage_values = np.array(vals)
        self.ell_bar = float(np.mean(vals))
        self.offsets = np.array([
            sum(((T - 1 - k) / T) * vals[(t + k) % T] for k in range(T - 1))
            for t in range(T)
        ])

    def offset(self, t):
        return float(self.offsets[t % self.period])

    def __call__(self, x, t):
        return self.base_value(x, t) + self.offset(t)


def shift_terminal_cost(terminal, ref, ell_e, signal=None):
    """Wrap a terminal cost with the periodic telescoping offset.

    terminal may be TerminalIngredients (its value method is used) or a
    plain callable (x, t) -> float.  T = 1 leaves the cost unchanged
    (empty sum).
    """
    if isinstance(terminal, TerminalIngredients):
        base = terminal.value
    else:
        base = terminal
    return ShiftedTerminalCost(base, ref, ell_e, signal)


def terminal_equality(r, sys=None):
    """Equality terminal set X_f = {x_r(t)}: V_f = 0, k_f = u_r, alpha = 0.

    The hint records the horizon length advice (controllability index when
    computable, state dimension otherwise).
    """
    ref = r if isinstance(r, Reference) else \
        Reference.setpoint(*_ref_tuple(r))
    n = ref.xs.shape[1]
    m = ref.us.shape[1]
    hint = n
    if sys is not None and sys.is_linear:
        A, B, *_ = sys.linear_terms
        # controllability index: smallest k with rank [B AB ... A^{k-1}B] = n
        blocks = []
        Ak = np.eye(n)
        for k in range(1, n + 1):
            blocks.append(Ak @ B)
            Ak = A @ Ak
            if np.linalg.matrix_rank(np.hstack(blocks), tol=1e-9) == n:
                hint = k
                break
    return TerminalIngredients("equality", ref=ref, P=np.eye(n),
                               p=np.zeros(n), K=np.zeros((m, n)), alpha=0.0,
                               rho=0.5, epsilon=0.0, min_horizon_hint=hint)


def ellipsoid_inclusion(c1, a1, c2, a2, P):
    """True iff {||x-c1||^2_P <= a1} is contained in {||x-c2||^2_P <= a2}.

    Exact for a shared metric: sqrt(a2) >= sqrt(a1) + ||c1 - c2||_P.
    """
    c1 = np.asarray(c1, float).ravel()
    c2 = np.asarray(c2, float).ravel()
    P = np.atleast_2d(np.asarray(P, float))
    if a1 < 0 or a2 < 0:
        return False
    d = c1 - c2
    dist = np.sqrt(float(d @ P @ d))
    return bool(np.sqrt(a2) >= np.sqrt(a1) + dist)
