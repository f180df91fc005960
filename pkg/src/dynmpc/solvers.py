"""Dense numerical kernels shared by every controller.

Riccati family (algebraic, finite-horizon, periodic), a discrete Lyapunov
solver, an LP front end with an independent optimality certificate, a primal
active-set QP, and an SQP solver for the nonlinear programs produced by the
MPC transcriptions.  Everything is deterministic: fixed iteration order,
lowest-index pivoting, no randomization.
"""

import numpy as np
import scipy.optimize


class SynthesisError(RuntimeError):
    """A design step failed structurally (unstabilizable pair, empty set, ...)."""


class NumericalError(RuntimeError):
    """A numerical routine diverged or lost too much precision."""


# ----------------------------------------------------------------------
# reports and problem containers
# ----------------------------------------------------------------------

class SolveReport:
    """Outcome of one LP/QP/NLP solve.

    status is one of 'optimal' | 'max-iter' | 'infeasible' | 'diverged';
    'optimal' is only set when the KKT residual and constraint violation are
    both within tolerance (checked independently of the solver path).
    """

    def __init__(self, status, x, value, kkt_residual, active_set,
                 lam_ub=None, lam_eq=None, iterations=0):
        self.status = status
        self.x = None if x is None else np.asarray(x, float)
        self.value = value
        self.kkt_residual = kkt_residual
        self.active_set = list(active_set)
        self.lam_ub = lam_ub
        self.lam_eq = lam_eq
        self.iterations = iterations

    @property
    def optimal(self):
        return self.status == "optimal"

    def __repr__(self):
        val = "None" if self.value is None else f"{self.value:.6g}"
        return (f"SolveReport(status={self.status!r}, value={val}, "
                f"kkt={self.kkt_residual:.2e}, iters={self.iterations})")


class NlpProblem:
    """Smooth NLP: min f(z) s.t. c_eq(z)=0, c_ineq(z)<=0.

    objective(z) -> float, gradient(z) -> (n,); eq/ineq return residual
    vectors with Jacobians. hessian(z, lam_eq, lam_ineq) may return a PSD
    Gauss-Newton approximation; when absent a damped BFGS estimate is used.
    """

    def __init__(self, n, objective, gradient, x0,
                 eq=None, eq_jac=None, ineq=None, ineq_jac=None,
                 hessian=None, kkt_tol=1e-8, con_tol=1e-8, max_iter=200):
        self.n = int(n)
        self.objective = objective
        self.gradient = gradient
        self.x0 = np.asarray(x0, float).ravel()
        if self.x0.size != self.n:
            raise ValueError("initial guess has wrong dimension")
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("initial guess must be finite")
        self.eq = eq
        self.eq_jac = eq_jac
        self.ineq = ineq
        self.ineq_jac = ineq_jac
        self.hessian = hessian
        self.kkt_tol = float(kkt_tol)
        self.con_tol = float(con_tol)
        self.max_iter = int(max_iter)


# ----------------------------------------------------------------------
# Riccati family
# ----------------------------------------------------------------------

def solve_dlyap(A, Q):
    """Solve P = A' P A + Q (requires spectral radius of A below one)."""
    A = np.atleast_2d(np.asarray(A, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    n = A.shape[0]
    if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0 - 1e-12:
        raise SynthesisError("Lyapunov equation needs a Schur stable matrix")
    M = np.eye(n * n) - np.kron(A.T, A.T)
    P = np.linalg.solve(M, Q.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def dare_residual(A, B, Q, R, P):
    S = R + B.T @ P @ B
    return A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) \
        + Q - P


def solve_dare(A, B, Q, R, tol=1e-12, max_doublings=100):
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Structure-preserving doubling on (A_k, G_k, H_k); H_k converges
    quadratically to P.  Returns (P, K) with K = -(R+B'PB)^{-1} B'PA and
    raises SynthesisError when the closed loop is not Schur or the fixed
    point residual stays above tolerance.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    n, m = B.shape
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise ValueError("R must be positive definite")

    if not np.any(B):
        # no input: Riccati collapses to a Lyapunov sum, A must be stable
        P = solve_dlyap(A, Q)
        K = np.zeros((m, n))
        return P, K

    Ak = A.copy()
    G = B @ np.linalg.solve(R, B.T)
    H = Q.copy()
    for _ in range(max_doublings):
        W = np.eye(n) + G @ H
        try:
            Winv_A = np.linalg.solve(W, Ak)
            Winv_G = np.linalg.solve(W, G)
        except np.linalg.LinAlgError:
            raise NumericalError("doubling iteration hit a singular pencil")
        H_new = H + Ak.T @ H @ Winv_A
        G_new = G + Ak @ Winv_G @ Ak.T
        A_new = Ak @ Winv_A
        if not (np.all(np.isfinite(H_new)) and np.all(np.isfinite(G_new))):
            raise NumericalError("doubling iteration diverged")
        delta = np.max(np.abs(H_new - H))
        Ak, G, H = A_new, G_new, H_new
        if delta <= tol * max(1.0, np.max(np.abs(H))):
            break
    P = 0.5 * (H + H.T)
    S = R + B.T @ P @ B
    K = -np.linalg.solve(S, B.T @ P @ A)
    res = np.max(np.abs(dare_residual(A, B, Q, R, P)))
    if res > 1e-9 * max(1.0, np.max(np.abs(P))):
        raise NumericalError(f"DARE residual {res:.2e} above tolerance")
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        raise SynthesisError("closed loop not Schur: pair (A,B) looks "
                             "unstabilizable")
    return P, K


def riccati_step(A, B, Q, R, P_next):
    """One backward Riccati step; returns (P, K)."""
    S = R + B.T @ P_next @ B
    if np.any(np.linalg.eigvalsh(0.5 * (S + S.T)) <= 0):
        raise NumericalError("R + B'PB lost definiteness")
    K = -np.linalg.solve(S, B.T @ P_next @ A)
    Acl = A + B @ K
    P = Q + K.T @ R @ K + Acl.T @ P_next @ Acl
    return 0.5 * (P + P.T), K


def solve_tv_riccati(A_seq, B_seq, Q, R, P_terminal):
    """Finite-horizon backward Riccati sweep.

    Returns (P_seq, K_seq) with len(P_seq) = N+1 (P_seq[N] = P_terminal) and
    len(K_seq) = N.
    """
    N = len(A_seq)
    if len(B_seq) != N:
        raise ValueError("A_seq and B_seq must have equal length")
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    P = np.atleast_2d(np.asarray(P_terminal, float))
    if np.any(np.linalg.eigvalsh(P) < -1e-12):
        raise ValueError("terminal weight must be positive semidefinite")
    P_seq = [None] * (N + 1)
    K_seq = [None] * N
    P_seq[N] = P
    for t in reversed(range(N)):
        A = np.atleast_2d(np.asarray(A_seq[t], float))
        B = np.asarray(B_seq[t], float).reshape(A.shape[0], -1)
        P, K = riccati_step(A, B, Q, R, P_seq[t + 1])
        P_seq[t] = P
        K_seq[t] = K
    return P_seq, K_seq


def solve_periodic_riccati(A_seq, B_seq, Q, R, tol=1e-8, max_steps=10_000):
    """Stabilizing T-periodic Riccati solution by backward iteration.

    Returns (P_seq, K_seq), each of length T, with P_t = P_{t+T} to the
    requested tolerance and a Schur closed-loop monodromy matrix.
    """
    T = len(A_seq)
    if len(B_seq) != T:
        raise ValueError("A_seq and B_seq must have equal length")
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    n = np.atleast_2d(np.asarray(A_seq[0], float)).shape[0]
    P = Q.copy()
    steps = 0
    converged = False
    while steps < max_steps:
        P_prev_sweep = P.copy()
        P_seq = [None] * T
        K_seq = [None] * T
        P_next = P
        for t in reversed(range(T)):
            A = np.atleast_2d(np.asarray(A_seq[t], float))
            B = np.asarray(B_seq[t], float).reshape(n, -1)
            P_t, K_t = riccati_step(A, B, Q, R, P_next)
            P_seq[t] = P_t
            K_seq[t] = K_t
            P_next = P_t
            steps += 1
        P = P_seq[0]
        if np.max(np.abs(P - P_prev_sweep)) <= tol:
            converged = True
            break
    if not converged:
        raise SynthesisError(
            f"periodic Riccati did not settle within {max_steps} backward steps")
    # one clean sweep with the converged boundary value
    P_next = P
    for t in reversed(range(T)):
        A = np.atleast_2d(np.asarray(A_seq[t], float))
        B = np.asarray(B_seq[t], float).reshape(n, -1)
        P_seq[t], K_seq[t] = riccati_step(A, B, Q, R, P_next)
        P_next = P_seq[t]
    mono = np.eye(n)
    for t in range(T):
        A = np.atleast_2d(np.asarray(A_seq[t], float))
        B = np.asarray(B_seq[t], float).reshape(n, -1)
        mono = (A + B @ K_seq[t]) @ mono
    if np.max(np.abs(np.linalg.eigvals(mono))) >= 1.0:
        raise SynthesisError("periodic closed-loop monodromy is not Schur")
    return P_seq, K_seq


# ----------------------------------------------------------------------
# LP
# ----------------------------------------------------------------------

def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None,
             feas_tol=1e-9, options=None):
    """Linear program min c'x s.t. A_ub x <= b_ub, A_eq x = b_eq, bounds.

    The heavy lifting is delegated to HiGHS; the claimed optimum is then
    re-certified here from scratch (primal feasibility, dual feasibility,
    stationarity, complementary slackness).  bounds defaults to free
    variables, given as a list of (lo, hi) pairs otherwise.  options is
    passed through to HiGHS (e.g. tighter feasibility tolerances for
    nearly degenerate instances).
    """
    c = np.asarray(c, float).ravel()
    n = c.size
    if bounds is None:
        bounds = [(None, None)] * n
    res = scipy.optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq,
                                 b_eq=b_eq, bounds=bounds, method="highs",
                                 options=options)
    if res.status == 2:
        return SolveReport("infeasible", None, None, np.inf, [])
    if res.status == 3:
        return SolveReport("diverged", None, -np.inf, np.inf, [])
    if res.status != 0:
        return SolveReport("max-iter", res.x, res.fun, np.inf, [])

    x = np.asarray(res.x, float)
    # --- independent certificate -------------------------------------
    # all residual checks are backward-error style: relative to the
    # magnitude of the quantities that produced them, so instances whose
    # data or optimizer spans many orders of magnitude are not rejected
    # over rounding noise far below their representable precision
    ok = True
    active = []
    if A_ub is not None:
        A_ub = np.asarray(A_ub, float).reshape(-1, n)
        b_ub = np.asarray(b_ub, float).ravel()
        slack = b_ub - A_ub @ x
        row_scale = np.maximum(1.0, np.maximum(np.abs(b_ub),
                                               np.abs(A_ub) @ np.abs(x)))
        ok &= bool(np.min(slack / row_scale) >= -feas_tol)
        active = [int(i) for i in np.nonzero(slack <= feas_tol * row_scale)[0]]
    if A_eq is not None:
        A_eq = np.asarray(A_eq, float).reshape(-1, n)
        b_eq = np.asarray(b_eq, float).ravel()
        eq_scale = np.maximum(1.0, np.maximum(np.abs(b_eq),
                                              np.abs(A_eq) @ np.abs(x)))
        ok &= bool(np.max(np.abs(A_eq @ x - b_eq) / eq_scale) <= feas_tol)
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    ok &= bool(np.all(x >= lo - feas_tol) and np.all(x <= hi + feas_tol))

    # dual certificate: c = A_ub' m_ub + A_eq' m_eq + m_lo + m_hi with
    # m_ub <= 0, m_lo >= 0 (active lower bounds), m_hi <= 0 (active upper)
    # and complementary slackness on every inequality.
    scale = max(1.0, np.max(np.abs(c)))
    # complementary slackness is a product of primal and dual magnitudes,
    # so its rounding noise scales with the objective, not with |c|
    gap_scale = max(scale, abs(float(res.fun)))
    stat = c.copy()
    if A_ub is not None and res.ineqlin.marginals is not None:
        m_ub = np.asarray(res.ineqlin.marginals, float)
        ok &= bool(np.max(m_ub) <= 1e-7)
        ok &= bool(np.max(np.abs(m_ub * (b_ub - A_ub @ x))) <= 1e-6 * gap_scale)
        stat = stat - A_ub.T @ m_ub
    if A_eq is not None and res.eqlin.marginals is not None:
        stat = stat - np.asarray(res.eqlin.marginals, float) @ A_eq
    m_lo = np.asarray(res.lower.marginals, float)
    m_hi = np.asarray(res.upper.marginals, float)
    stat = stat - m_lo - m_hi
    ok &= bool(np.max(np.abs(stat)) <= 1e-6 * scale)

    kkt = float(np.max(np.abs(stat)))
    status = "optimal" if ok else "max-iter"
    return SolveReport(status, x, float(res.fun), kkt, active)


# ----------------------------------------------------------------------
# QP (primal active set)
# ----------------------------------------------------------------------

def _qp_kkt_solve(H, g, A_act, b_act):
    """Equality-constrained QP step: minimize 0.5 x'Hx + g'x s.t. A x = b."""
    n = g.size
    r = A_act.shape[0]
    K = np.block([[H, A_act.T],
                  [A_act, np.zeros((r, r))]])
    rhs = np.concatenate([-g, b_act])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def solve_qp(H, g, A_ub=None, b_ub=None, A_eq=None, b_eq=None, x0=None,
             max_iter=None, tol=1e-9, working_set=None):
    """Convex QP min 0.5 x'Hx + g'x via a primal active-set method.

    H is symmetrized and, if needed, Tikhonov-regularized by +1e-8 I.
    Blocking constraints enter by lowest index; constraints leave at the
    most negative multiplier (lowest index on ties) — deterministic and
    warm-startable via (x0, working_set).
    """
    g = np.asarray(g, float).ravel()
    n = g.size
    H = 0.5 * (np.atleast_2d(np.asarray(H, float))
               + np.atleast_2d(np.asarray(H, float)).T)
    if np.min(np.linalg.eigvalsh(H)) < 1e-8:
        H = H + 1e-8 * np.eye(n)
    A_ub = np.zeros((0, n)) if A_ub is None else \
        np.asarray(A_ub, float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else \
        np.asarray(A_eq, float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    n_ub = A_ub.shape[0]
    if max_iter is None:
        max_iter = 50 * (n + n_ub + A_eq.shape[0] + 1)

    # ---- starting point ------------------------------------------------
    x = None
    if x0 is not None:
        x0 = np.asarray(x0, float).ravel()
        eq_ok = A_eq.shape[0] == 0 or \
            np.max(np.abs(A_eq @ x0 - b_eq)) <= 1e-8
        ub_ok = n_ub == 0 or np.max(A_ub @ x0 - b_ub) <= 1e-8
        if eq_ok and ub_ok:
            x = x0
    if x is None:
        x = _qp_phase1(A_ub, b_ub, A_eq, b_eq)
        if x is None:
            return SolveReport("infeasible", None, None, np.inf, [])

    W = []
    if working_set is not None:
        W = [i for i in working_set
             if 0 <= i < n_ub and abs(A_ub[i] @ x - b_ub[i]) <= 1e-7]
    # never exceed n active rows
    W = W[: max(0, n - A_eq.shape[0])]

    lam_ub = np.zeros(n_ub)
    lam_eq = np.zeros(A_eq.shape[0])
    for it in range(1, max_iter + 1):
        A_act = np.vstack([A_eq, A_ub[W]]) if (A_eq.shape[0] or W) else \
            np.zeros((0, n))
        b_act = np.concatenate([b_eq, b_ub[W]])
        try:
            x_star, lam = _qp_kkt_solve(H, g, A_act, b_act)
        except np.linalg.LinAlgError:
            # degenerate working set: drop the most recently added row
            if W:
                W.pop()
                continue
            return SolveReport("diverged", x, None, np.inf, list(W))
        d = x_star - x
        if np.max(np.abs(d)) <= tol:
            lam_eq = lam[:A_eq.shape[0]]
            lam_w = lam[A_eq.shape[0]:]
            if lam_w.size == 0 or np.min(lam_w) >= -tol:
                lam_ub = np.zeros(n_ub)
                for j, idx in enumerate(W):
                    lam_ub[idx] = max(lam_w[j], 0.0)
                x = x_star
                value = float(0.5 * x @ H @ x + g @ x)
                kkt = _qp_kkt_residual(H, g, A_ub, b_ub, A_eq, b_eq, x,
                                       lam_ub, lam_eq)
                status = "optimal" if kkt <= 1e-8 * max(
                    1.0, np.max(np.abs(g)) if g.size else 1.0) else "max-iter"
                return SolveReport(status, x, value, kkt, sorted(W),
                                   lam_ub=lam_ub, lam_eq=lam_eq,
                                   iterations=it)
            # drop the most negative multiplier (lowest index breaks ties)
            j = int(np.argmin(lam_w))
            W.pop(j)
            continue
        # line search toward x_star against the inactive rows
        t = 1.0
        blocker = -1
        for i in range(n_ub):
            if i in W:
                continue
            Ad = A_ub[i] @ d
            if Ad > tol:
                ti = (b_ub[i] - A_ub[i] @ x) / Ad
                if ti < t - 1e-14:
                    t = max(ti, 0.0)
                    blocker = i
        x = x + t * d
        if blocker >= 0:
            W.append(blocker)
    value = float(0.5 * x @ H @ x + g @ x)
    return SolveReport("max-iter", x, value, np.inf, sorted(W),
                       lam_ub=lam_ub, lam_eq=lam_eq, iterations=max_iter)


def _qp_phase1(A_ub, b_ub, A_eq, b_eq):
    """Feasible point for the QP constraints via an LP, or None."""
    n = A_ub.shape[1] if A_ub.size else A_eq.shape[1]
    if A_eq.shape[0] and not A_ub.shape[0]:
        x, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
        if np.max(np.abs(A_eq @ x - b_eq)) <= 1e-8:
            return x
        return None
    if not A_ub.shape[0] and not A_eq.shape[0]:
        return np.zeros(n)
    # min sum(s) s.t. A_ub x - s <= b_ub, s >= 0, A_eq x = b_eq
    m = A_ub.shape[0]
    c = np.concatenate([np.zeros(n), np.ones(m)])
    A1 = np.hstack([A_ub, -np.eye(m)])
    bounds = [(None, None)] * n + [(0, None)] * m
    A_eq_l = np.hstack([A_eq, np.zeros((A_eq.shape[0], m))]) \
        if A_eq.shape[0] else None
    rep = solve_lp(c, A_ub=A1, b_ub=b_ub, A_eq=A_eq_l,
                   b_eq=b_eq if A_eq.shape[0] else None, bounds=bounds)
    if rep.x is None or rep.value is None or rep.value > 1e-7:
        return None
    x = rep.x[:n]
    viol = np.max(A_ub @ x - b_ub) if m else 0.0
    if viol > 1e-7:
        return None
    return x


def _qp_kkt_residual(H, g, A_ub, b_ub, A_eq, b_eq, x, lam_ub, lam_eq):
    stat = H @ x + g
    if A_ub.shape[0]:
        stat = stat + A_ub.T @ lam_ub
    if A_eq.shape[0]:
        stat = stat + A_eq.T @ lam_eq
    parts = [np.max(np.abs(stat))]
    if A_ub.shape[0]:
        viol = A_ub @ x - b_ub
        parts.append(max(0.0, np.max(viol)))
        parts.append(np.max(np.abs(lam_ub * viol)))
    if A_eq.shape[0]:
        parts.append(np.max(np.abs(A_eq @ x - b_eq)))
    return float(max(parts))


# ----------------------------------------------------------------------
# NLP (SQP)
# ----------------------------------------------------------------------

def _eval_cons(fun, jac, z, n):
    if fun is None:
        return np.zeros(0), np.zeros((0, n))
    c = np.atleast_1d(np.asarray(fun(z), float))
    J = np.asarray(jac(z), float).reshape(c.size, n)
    return c, J


def _merit(f, cE, cI, sigma):
    return f + sigma * (np.sum(np.abs(cE)) + np.sum(np.maximum(cI, 0.0)))


def solve_nlp(problem):
    """SQP with an l1 merit line search.

    Hessian: the problem's Gauss-Newton callback when supplied, otherwise a
    damped BFGS estimate.  Infeasible QP subproblems fall back to an elastic
    relaxation so a descent direction for the merit function always exists.
    """
    n = problem.n
    z = problem.x0.copy()
    sigma = 1.0
    Bk = np.eye(n)
    g_old = None
    z_old = None
    lamE = lamI = None
    best = None
    stall = 0
    last_infeas = None

    for it in range(1, problem.max_iter + 1):
        f = float(problem.objective(z))
        g = np.asarray(problem.gradient(z), float).ravel()
        cE, JE = _eval_cons(problem.eq, problem.eq_jac, z, n)
        cI, JI = _eval_cons(problem.ineq, problem.ineq_jac, z, n)
        if not (np.isfinite(f) and np.all(np.isfinite(g))
                and np.all(np.isfinite(cE)) and np.all(np.isfinite(cI))):
            return SolveReport("diverged", z, f, np.inf, [], iterations=it)

        viol = (np.max(np.abs(cE)) if cE.size else 0.0,
                max(0.0, np.max(cI)) if cI.size else 0.0)
        kkt_stat = g.copy()
        if lamE is not None and lamE.size:
            kkt_stat = kkt_stat + JE.T @ lamE
        if lamI is not None and lamI.size:
            kkt_stat = kkt_stat + JI.T @ lamI
        comp = np.max(np.abs(lamI * cI)) if (lamI is not None and cI.size) \
            else 0.0
        kkt = max(float(np.max(np.abs(kkt_stat))), viol[0], viol[1], comp)
        scale = max(1.0, np.max(np.abs(g)))
        if best is None or (kkt < best[2] and f <= best[1] + 1e-9):
            best = (z.copy(), f, kkt)
        if lamE is not None and kkt <= problem.kkt_tol * scale \
                and viol[0] <= problem.con_tol and viol[1] <= problem.con_tol:
            return SolveReport("optimal", z, f, kkt, _active_of(cI),
                               lam_ub=lamI, lam_eq=lamE, iterations=it)

        # Hessian model
        if problem.hessian is not None:
            Hk = np.atleast_2d(np.asarray(problem.hessian(z, lamE, lamI),
                                          float))
            w = np.linalg.eigvalsh(0.5 * (Hk + Hk.T))
            if w[0] < 1e-8:
                Hk = 0.5 * (Hk + Hk.T) + (1e-8 - w[0]) * np.eye(n)
        else:
            if z_old is not None:
                s = z - z_old
                y = g - g_old
                if lamE is not None and lamE.size:
                    y = y + (JE.T @ lamE) - (JE_old.T @ lamE)
                if lamI is not None and lamI.size:
                    y = y + (JI.T @ lamI) - (JI_old.T @ lamI)
                sBs = s @ Bk @ s
                sy = s @ y
                if sBs > 0:
                    # damped BFGS keeps the estimate positive definite
                    theta = 1.0 if sy >= 0.2 * sBs else \
                        (0.8 * sBs) / (sBs - sy)
                    r = theta * y + (1 - theta) * (Bk @ s)
                    Bk = Bk - np.outer(Bk @ s, Bk @ s) / sBs \
                        + np.outer(r, r) / (s @ r)
                    Bk = 0.5 * (Bk + Bk.T)
            Hk = Bk
        z_old = z.copy()
        g_old = g.copy()
        JE_old, JI_old = JE, JI

        # QP subproblem in the step d
        rep = solve_qp(Hk, g, A_ub=JI if cI.size else None,
                       b_ub=-cI if cI.size else None,
                       A_eq=JE if cE.size else None,
                       b_eq=-cE if cE.size else None,
                       x0=np.zeros(n) if (not cI.size or np.max(cI) <= 0)
                       and not cE.size else None)
        if rep.status == "infeasible" or rep.x is None:
            # linearized constraints inconsistent: take an elastic step,
            # but give up once the infeasibility measure stops shrinking
            # (stationary point of the constraint violation)
            infeas_here = np.sum(np.abs(cE)) + np.sum(np.maximum(cI, 0.0))
            if last_infeas is not None and infeas_here >= last_infeas \
                    - max(1e-12, 1e-6 * last_infeas):
                stall += 1
            else:
                stall = 0
            last_infeas = infeas_here
            if stall >= 8 and infeas_here > problem.con_tol:
                return SolveReport("infeasible", best[0], best[1], best[2],
                                   [], iterations=it)
            d, lamE_new, lamI_new = _elastic_step(Hk, g, JE, cE, JI, cI,
                                                  10.0 * sigma)
            if d is None:
                return SolveReport("max-iter", best[0], best[1], best[2],
                                   [], iterations=it)
        else:
            stall = 0
            last_infeas = None
            d = rep.x
            lamE_new = rep.lam_eq if rep.lam_eq is not None and \
                rep.lam_eq.size else np.zeros(cE.size)
            lamI_new = rep.lam_ub if rep.lam_ub is not None and \
                rep.lam_ub.size else np.zeros(cI.size)

        lam_mag = 0.0
        if lamE_new.size:
            lam_mag = max(lam_mag, np.max(np.abs(lamE_new)))
        if lamI_new.size:
            lam_mag = max(lam_mag, np.max(np.abs(lamI_new)))
        sigma = max(sigma, 2.0 * lam_mag)

        phi0 = _merit(f, cE, cI, sigma)
        infeas0 = np.sum(np.abs(cE)) + np.sum(np.maximum(cI, 0.0))
        D = g @ d - sigma * infeas0
        t = 1.0
        accepted = False
        while t >= 1e-12:
            z_try = z + t * d
            f_try = float(problem.objective(z_try))
            cE_t = np.atleast_1d(np.asarray(problem.eq(z_try), float)) \
                if problem.eq is not None else np.zeros(0)
            cI_t = np.atleast_1d(np.asarray(problem.ineq(z_try), float)) \
                if problem.ineq is not None else np.zeros(0)
            if np.isfinite(f_try) and np.all(np.isfinite(cE_t)) \
                    and np.all(np.isfinite(cI_t)):
                phi_t = _merit(f_try, cE_t, cI_t, sigma)
                if phi_t <= phi0 + 1e-4 * t * min(D, 0.0) + 1e-14 * abs(phi0):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # no merit progress possible along d: return the best iterate
            status = "optimal" if (
                best[2] <= problem.kkt_tol * scale
                and viol[0] <= problem.con_tol
                and viol[1] <= problem.con_tol) else "max-iter"
            return SolveReport(status, best[0], best[1], best[2], [],
                               lam_ub=lamI, lam_eq=lamE, iterations=it)
        z = z + t * d
        lamE, lamI = lamE_new, lamI_new

    f = float(problem.objective(z))
    return SolveReport("max-iter", z, f, best[2] if best else np.inf, [],
                       lam_ub=lamI, lam_eq=lamE,
                       iterations=problem.max_iter)


def _active_of(cI, tol=1e-8):
    return [int(i) for i in np.nonzero(cI >= -tol)[0]]


def _elastic_step(H, g, JE, cE, JI, cI, sigma):
    """Relaxed QP step with l1 slacks on all constraints.

    min 0.5 d'Hd + g'd + sigma*1's + 0.5e-8 s's
    s.t. JE d + cE = sp - sm, JI d + cI <= t, all slacks >= 0.
    """
    n = g.size
    nE, nI = cE.size, cI.size
    dim = n + 2 * nE + nI
    Hbig = np.zeros((dim, dim))
    Hbig[:n, :n] = H
    Hbig[n:, n:] = 1e-8 * np.eye(2 * nE + nI)
    gbig = np.concatenate([g, sigma * np.ones(2 * nE + nI)])
    A_eq = None
    b_eq = None
    if nE:
        A_eq = np.hstack([JE, -np.eye(nE), np.eye(nE),
                          np.zeros((nE, nI))])
        b_eq = -cE
    rows = []
    rhs = []
    if nI:
        rows.append(np.hstack([JI, np.zeros((nI, 2 * nE)), -np.eye(nI)]))
        rhs.append(-cI)
    rows.append(np.hstack([np.zeros((2 * nE + nI, n)),
                           -np.eye(2 * nE + nI)]))
    rhs.append(np.zeros(2 * nE + nI))
    A_ub = np.vstack(rows)
    b_ub = np.concatenate(rhs)
    x0 = np.zeros(dim)
    if nE:
        x0[n:n + nE] = np.maximum(cE, 0.0) + 1e-12
        x0[n + nE:n + 2 * nE] = np.maximum(-cE, 0.0) + 1e-12
    if nI:
        x0[n + 2 * nE:] = np.maximum(cI, 0.0) + 1e-12
    rep = solve_qp(Hbig, gbig, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                   x0=x0)
    if rep.x is None:
        return None, None, None
    d = rep.x[:n]
    lamE = rep.lam_eq if rep.lam_eq is not None and nE else np.zeros(nE)
    lamI = (rep.lam_ub[:nI] if rep.lam_ub is not None and nI
            else np.zeros(nI))
    return d, np.asarray(lamE, float), np.asarray(lamI, float)
