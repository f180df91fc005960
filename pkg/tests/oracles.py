"""Independent brute-force oracles used to validate the numerical kernels.

Deliberately slow and simple: every routine here recomputes the quantity of
interest from first principles (enumeration, gridding, projection) rather
than reusing any package code path.
"""

import itertools

import numpy as np


def scalar_dare(a, b, q, r):
    """Positive root of the scalar DARE via the quadratic formula.

    p = q + a^2 p - (a b p)^2 / (r + b^2 p)
    <=>  b^2 p^2 + (r - a^2 r - b^2 q) p - q r = 0.
    """
    if b == 0:
        if abs(a) >= 1:
            raise ValueError("unstabilizable scalar pair")
        return q / (1 - a * a)
    A2 = b * b
    A1 = r - a * a * r - b * b * q
    A0 = -q * r
    disc = A1 * A1 - 4 * A2 * A0
    return (-A1 + np.sqrt(disc)) / (2 * A2)


def lp_by_vertex_enumeration(c, A_ub, b_ub, A_eq=None, b_eq=None):
    """Exact LP optimum by enumerating basic feasible points.

    Stacks inequality rows (as potential active constraints) with any
    equality rows (always active), solves every square subsystem, keeps the
    feasible solutions, and returns (best value, best point).  Assumes the
    optimum is attained at a vertex (bounded LP, full-dimensional rows).
    """
    c = np.asarray(c, float)
    A_ub = np.asarray(A_ub, float).reshape(-1, c.size)
    b_ub = np.asarray(b_ub, float).ravel()
    rows = [(A_ub[i], b_ub[i]) for i in range(A_ub.shape[0])]
    fixed = []
    if A_eq is not None:
        A_eq = np.asarray(A_eq, float).reshape(-1, c.size)
        b_eq = np.asarray(b_eq, float).ravel()
        fixed = [(A_eq[i], b_eq[i]) for i in range(A_eq.shape[0])]
    n = c.size
    k = n - len(fixed)
    best_val = np.inf
    best_x = None
    for combo in itertools.combinations(range(len(rows)), k):
        A = np.array([rows[i][0] for i in combo] + [f[0] for f in fixed])
        b = np.array([rows[i][1] for i in combo] + [f[1] for f in fixed])
        if A.shape[0] != n:
            continue
        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            continue
        if np.all(A_ub @ x - b_ub <= 1e-9) and (
                A_eq is None or np.max(np.abs(A_eq @ x - b_eq)) <= 1e-9):
            val = c @ x
            if val < best_val - 1e-15:
                best_val = val
                best_x = x
    return best_val, best_x


def alpha_by_vertex_enumeration(gamma, N):
    """Relaxed-DP decrease margin by enumerating polytope vertices.

    Adversary variables are the stage costs lambda_1..lambda_{N-1} along an
    optimal prediction (lambda_0 normalized to 1) and the successor value
    nu.  The tail of the sequence is capped by the value-function bound,
        sum_{n=k}^{N-1} lambda_n <= gamma * lambda_k,          k = 0..N-2,
    and nu is capped by every truncation candidate,
        nu <= sum_{n=1}^{j} lambda_n + gamma * lambda_{j+1},   j = 0..N-2.
    The margin is the minimum of lambda_0 + sum lambda - nu.  Meant as an
    independent check for small N only (vertex count is combinatorial).
    """
    g = float(gamma)
    N = int(N)
    if not 2 <= N <= 4:
        raise ValueError("vertex oracle intended for 2 <= N <= 4")
    nlam = N - 1
    dim = nlam + 1            # lambda_1..lambda_{N-1}, nu
    A, b = [], []
    row = np.zeros(dim)
    row[:nlam] = 1.0          # tail bound at k = 0, lambda_0 = 1 moved right
    A.append(row)
    b.append(g - 1.0)
    for k in range(1, N - 1):
        row = np.zeros(dim)
        row[k - 1:nlam] = 1.0
        row[k - 1] -= g
        A.append(row)
        b.append(0.0)
    for j in range(N - 1):
        row = np.zeros(dim)
        row[-1] = 1.0
        row[:j] -= 1.0        # lambda_1..lambda_j
        row[j] -= g           # lambda_{j+1}
        A.append(row)
        b.append(0.0)
    for i in range(dim):      # nonnegativity
        row = np.zeros(dim)
        row[i] = -1.0
        A.append(row)
        b.append(0.0)
    c = np.ones(dim)
    c[-1] = -1.0
    val, _ = lp_by_vertex_enumeration(c, np.array(A), np.array(b))
    return 1.0 + val


def alpha_terminal_by_vertex_enumeration(gamma, N, eps_f):
    """Vertex-enumeration margin with a terminal-cost variable tau.

    Same polytope as alpha_by_vertex_enumeration except that tau joins every
    tail bound (the value function now includes the terminal cost) and the
    successor value gains the terminal-law candidate
        nu <= sum_{n=1}^{N-1} lambda_n + (1 + eps_f) * tau.
    The margin becomes lambda_0 + sum lambda + tau - nu.
    """
    g = float(gamma)
    e = float(eps_f)
    N = int(N)
    if not 1 <= N <= 4:
        raise ValueError("vertex oracle intended for 1 <= N <= 4")
    nlam = N - 1
    dim = nlam + 2            # lambda_1..lambda_{N-1}, tau, nu
    itau = nlam
    A, b = [], []
    row = np.zeros(dim)
    row[:nlam] = 1.0
    row[itau] = 1.0
    A.append(row)
    b.append(g - 1.0)
    for k in range(1, N):
        row = np.zeros(dim)
        row[k - 1:nlam] = 1.0
        row[k - 1] -= g
        row[itau] = 1.0
        A.append(row)
        b.append(0.0)
    for j in range(N - 1):
        row = np.zeros(dim)
        row[-1] = 1.0
        row[:j] -= 1.0
        row[j] -= g
        A.append(row)
        b.append(0.0)
    row = np.zeros(dim)       # terminal-law candidate for the successor
    row[-1] = 1.0
    row[:nlam] -= 1.0
    row[itau] -= 1.0 + e
    A.append(row)
    b.append(0.0)
    for i in range(dim):
        row = np.zeros(dim)
        row[i] = -1.0
        A.append(row)
        b.append(0.0)
    c = np.ones(dim)
    c[-1] = -1.0
    val, _ = lp_by_vertex_enumeration(c, np.array(A), np.array(b))
    return 1.0 + val


def qp_by_projected_gradient(H, g, lo, hi, tol=1e-10, max_iter=2_000_000):
    """Box-constrained strictly convex QP by projected gradient descent."""
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    L = np.max(np.linalg.eigvalsh(H))
    step = 1.0 / L
    x = np.clip(np.zeros_like(g), lo, hi)
    for _ in range(max_iter):
        grad = H @ x + g
        x_new = np.clip(x - step * grad, lo, hi)
        if np.max(np.abs(x_new - x)) <= tol:
            return x_new
        x = x_new
    return x


def qp_by_active_set_enumeration(H, g, A, b):
    """Exact QP optimum over {A x <= b} by enumerating active subsets.

    For each subset S of constraints, solve the equality-constrained KKT
    system with S active; keep solutions that are primal feasible with
    nonnegative multipliers. Exponential — keep the row count small.
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    A = np.asarray(A, float).reshape(-1, g.size)
    b = np.asarray(b, float).ravel()
    n = g.size
    mrows = A.shape[0]
    best_val = np.inf
    best_x = None
    for r in range(0, min(n, mrows) + 1):
        for S in itertools.combinations(range(mrows), r):
            As = A[list(S)]
            K = np.block([[H, As.T],
                          [As, np.zeros((r, r))]])
            rhs = np.concatenate([-g, b[list(S)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            lam = sol[n:]
            if np.any(lam < -1e-9):
                continue
            if np.all(A @ x - b <= 1e-9):
                val = 0.5 * x @ H @ x + g @ x
                if val < best_val - 1e-12:
                    best_val = val
                    best_x = x
    return best_val, best_x


def tv_value_by_grid_dp(a_seq, b_seq, q, r, p_term, x_grid, u_grid):
    """Scalar time-varying LQR value function by dynamic programming on grids.

    Returns the value table at t=0 over x_grid (interpolating the
    cost-to-come linearly between grid nodes).
    """
    V = p_term * x_grid ** 2
    for t in reversed(range(len(a_seq))):
        V_next = V
        V = np.empty_like(x_grid)
        for i, x in enumerate(x_grid):
            xn = a_seq[t] * x + b_seq[t] * u_grid
            cost = q * x * x + r * u_grid ** 2 + np.interp(
                xn, x_grid, V_next,
                left=V_next[0] + 1e6, right=V_next[-1] + 1e6)
            V[i] = np.min(cost)
    return V


def riccati_value_scalar(a_seq, b_seq, q, r, p_term):
    """Reference backward Riccati recursion for scalars (independent of the
    package implementation; plain float arithmetic)."""
    p = p_term
    ps = [p]
    ks = []
    for t in reversed(range(len(a_seq))):
        a, b = a_seq[t], b_seq[t]
        k = -(b * p * a) / (r + b * p * b)
        p = q + a * p * a - (a * p * b) ** 2 / (r + b * p * b)
        ps.append(p)
        ks.append(k)
    return list(reversed(ps)), list(reversed(ks))
