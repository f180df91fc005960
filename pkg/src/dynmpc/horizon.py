"""Stabilizing-horizon certification for MPC without terminal ingredients.

Pipeline
--------
1. Obtain a cost controllability constant gamma >= 1 with
   J_N*(x) <= gamma * ell_min(x) for every horizon N and state x of
   interest -- exactly, for unconstrained LTI-quadratic problems
   (``gamma_exact_lq``), or from samples (``estimate_gamma``).
2. Turn gamma into a per-horizon decrease margin alpha_N by solving a
   small adversarial linear program (``alpha_from_lp``).  alpha_N > 0
   certifies that the optimal value J_N* drops by at least
   alpha_N * ell(x, u*) per closed-loop step, hence that the closed-loop
   cost is at most (1 / alpha_N) * J_inf*(x0).
3. Report the smallest certified horizon N_bar = min {N : alpha_N > 0}
   (``min_stabilizing_horizon``, ``certify_horizon``).

Closed-form curves -- 1 - gamma^2/N with ceiling gamma^2, the geometric
decay margin with ceiling 2 gamma log gamma, and the terminal-weighted
variant -- are provided for comparison tables; the linear program is the
certificate.

Stage costs that weight only an output are handled through a quadratic
storage function W(x) = x' Sigma x satisfying
    W(Ax + Bu) - W(x) <= -eps_o |x|^2 + ell(x, u).
The modified cost ell~ = ell + W - W o f is then bounded below by
eps_o |x|^2 and telescopes to J~_N* <= J_N* + W(x), so a state-norm bound
J_N* <= gamma_state |x|^2 feeds the same linear program with the effective
constant gamma_eff = (gamma_state + gamma_o) / eps_o, and the decrease
certificate applies to the composite function J_N* + W
(``verify_ioss_storage``, ``certify_horizon_detectable``).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import qmc

from .model import Reference, _ref_pair
from .schemes import (ControllerState, InfeasibleProblem, MpcProblemSpec,
                      apply_controller, solve_unconstrained_mpc)
from .solvers import (NumericalError, riccati_step, solve_dare, solve_dlyap,
                      solve_lp)

__all__ = [
    "CertificationError",
    "CostControllabilityEstimate",
    "DetectabilityStorage",
    "HorizonCertificate",
    "RoaFailure",
    "RoaReport",
    "alpha_decay",
    "alpha_from_lp",
    "alpha_simple",
    "alpha_tight",
    "alpha_with_terminal_weight",
    "certify_horizon",
    "certify_horizon_detectable",
    "certify_region_of_attraction",
    "detectable_gamma",
    "estimate_gamma",
    "gamma_exact_lq",
    "measure_relaxed_clf",
    "min_stabilizing_horizon",
    "relaxed_clf_eps_lq",
    "rollout_cost_matrix",
    "sample_box",
    "verify_ioss_storage",
]


class CertificationError(RuntimeError):
    """A requested certificate cannot be produced from the given data."""


def _check_gamma(g):
    if not np.isfinite(g) or g < 1.0:
        raise ValueError("the controllability constant must satisfy "
                         f"gamma >= 1 (got {g!r})")


def _sym(M):
    M = np.atleast_2d(np.asarray(M, float))
    return 0.5 * (M + M.T)


def _lam_max(M):
    return float(np.linalg.eigvalsh(_sym(M))[-1])


# ----------------------------------------------------------------------
# decrease-margin linear programs
# ----------------------------------------------------------------------

def _margin_lp_rows(gamma, N, terminal_eps=None):
    """Assemble the adversarial margin LP in reduced variables.

    The first stage cost along an optimal prediction is normalized to
    lambda_0 = 1; the decision vector is z = (lambda_1..lambda_{N-1}
    [, tau], nu) >= 0 where tau is the terminal cost (terminal variant
    only) and nu the optimal value at the successor state.  Rows:

    * tail bounds: the value of the remaining problem from step k on is
      itself bounded by gamma times its first stage cost,
          sum_{n=k}^{N-1} lambda_n [+ tau] <= gamma * lambda_k,
      for k = 0..N-2 (k = N-1 as well when tau is present);
    * successor caps: appending a gamma-bounded tail to a truncated
      prediction gives a candidate for the successor value,
          nu <= sum_{n=1}^{j} lambda_n + gamma * lambda_{j+1},
      for j = 0..N-2;
    * terminal-law cap (terminal variant): rotating the prediction by one
      step and closing with the relaxed terminal law,
          nu <= sum_{n=1}^{N-1} lambda_n + (1 + eps_f) * tau.

    Minimizing  sum lambda [+ tau] - nu  over this polytope and adding
    lambda_0 = 1 yields the worst-case margin alpha_N.
    """
    g = float(gamma)
    nlam = N - 1
    with_tau = terminal_eps is not None
    dim = nlam + (2 if with_tau else 1)
    itau = nlam
    A, b = [], []
    last_tail = N - 1 if with_tau else N - 2
    for k in range(0, last_tail + 1):
        row = np.zeros(dim)
        row[max(k - 1, 0):nlam] = 1.0
        if with_tau:
            row[itau] = 1.0
        if k == 0:
            b.append(g - 1.0)        # lambda_0 = 1 moved to the right side
        else:
            row[k - 1] -= g
            b.append(0.0)
        A.append(row)
    for j in range(N - 1):
        row = np.zeros(dim)
        row[-1] = 1.0
        row[:j] -= 1.0
        row[j] -= g
        A.append(row)
        b.append(0.0)
    if with_tau:
        row = np.zeros(dim)
        row[-1] = 1.0
        row[:nlam] -= 1.0
        row[itau] -= 1.0 + float(terminal_eps)
        A.append(row)
        b.append(0.0)
    c = np.ones(dim)
    c[-1] = -1.0
    return c, np.array(A), np.array(b)


def _solve_margin_lp(gamma, N, terminal_eps=None, feas_tol=1e-8):
    c, A_ub, b_ub = _margin_lp_rows(gamma, N, terminal_eps)
    # The instances turn nearly degenerate when alpha_N approaches 1.  Run
    # HiGHS tight, but accept slack noise slightly above its tolerances
    # (they act in scaled space); the optimum itself is then re-checked
    # against the closed-form lower bound by the caller.  Very large gamma
    # (1e5 and beyond) makes the forced 1e-10 tolerances unattainable and
    # the simplex stalls, so retry once at the solver's own defaults.
    rep = solve_lp(c, A_ub, b_ub, bounds=[(0.0, None)] * c.size,
                   feas_tol=feas_tol,
                   options={"primal_feasibility_tolerance": 1e-10,
                            "dual_feasibility_tolerance": 1e-10})
    if rep.status != "optimal":
        rep = solve_lp(c, A_ub, b_ub, bounds=[(0.0, None)] * c.size,
                       feas_tol=feas_tol)
    if rep.status != "optimal":
        raise NumericalError(
            f"margin LP (gamma={gamma}, N={N}) finished {rep.status!r}")
    alpha = 1.0 + float(rep.value)
    if alpha > 1.0 + 1e-9:
        raise NumericalError("margin above 1 contradicts the feasibility "
                             "of the zero vertex")
    return min(alpha, 1.0)


def alpha_from_lp(gamma, N, feas_tol=1e-8):
    """Tight decrease margin alpha_N for horizon N under controllability
    constant gamma: the optimum of the adversarial linear program built by
    ``_margin_lp_rows``.  alpha_N <= 1 always; alpha_N > 0 certifies the
    per-step decrease J_N*(x+) - J_N*(x) <= -alpha_N * ell(x, u*) and the
    closed-loop bound  sum ell <= (1/alpha_N) * J_inf*(x0).

    gamma == 1 gives alpha_N = 1 for every N.  N == 1 with gamma > 1 is
    uncertifiable (the successor value is uncapped) and returns -inf.
    """
    g = float(gamma)
    N = int(N)
    _check_gamma(g)
    if N < 1:
        raise ValueError("the horizon must satisfy N >= 1")
    if g == 1.0:
        return 1.0
    if N == 1:
        return float("-inf")
    alpha = _solve_margin_lp(g, N, feas_tol=feas_tol)
    # The geometric-decay margin is provably never above the LP optimum for
    # N >= 2, which makes it a free independent cross-check of the rows.
    if alpha < alpha_decay(g, N) - 1e-9:
        raise NumericalError("margin LP fell below its closed-form lower "
                             f"bound at gamma={g}, N={N}")
    return alpha


def alpha_with_terminal_weight(gamma, N, eps_f, feas_tol=1e-8):
    """Decrease margin when the prediction ends in a relaxed terminal cost.

    The terminal cost v_f is assumed to admit a control law with
        min_u [v_f(f(x,u)) + ell(x,u)] <= (1 + eps_f) * v_f(x),
    which adds the terminal-law successor cap to the margin LP.  eps_f = 0
    (a true control Lyapunov function) gives alpha_N = 1 for every N;
    eps_f = inf recovers ``alpha_from_lp``; in between, smaller eps_f
    certifies shorter horizons.  N = 1 is meaningful here and evaluates to
    1 - eps_f * (gamma - 1).
    """
    g = float(gamma)
    N = int(N)
    e = float(eps_f)
    _check_gamma(g)
    if N < 1:
        raise ValueError("the horizon must satisfy N >= 1")
    if e < 0.0:
        raise ValueError("eps_f must be nonnegative")
    if math.isinf(e):
        return alpha_from_lp(g, N, feas_tol=feas_tol)
    if g == 1.0:
        return 1.0
    return _solve_margin_lp(g, N, terminal_eps=e, feas_tol=feas_tol)


def alpha_tight(gamma, N):
    """Closed form of the margin-LP optimum,

        alpha_N = 1 - (gamma - 1) / expm1((N - 1) log(gamma/(gamma - 1))),

    obtained by solving the LP's binding vertex analytically (every tail
    bound active along a geometric profile).  Agrees with
    ``alpha_from_lp`` to solver precision for every (gamma, N) -- the LP
    is kept as an independent implementation and the equality is enforced
    by tests -- but evaluates in constant time, which makes horizon
    location tractable when gamma is large.  The expm1 form is exact for
    gamma near 1 and immune to overflow for gamma and N both large.
    """
    g = float(gamma)
    N = int(N)
    _check_gamma(g)
    if N < 1:
        raise ValueError("the horizon must satisfy N >= 1")
    if g == 1.0:
        return 1.0
    if N == 1:
        return float("-inf")
    t = (N - 1) * math.log(g / (g - 1.0))
    if t > 700.0:  # expm1 would overflow; its reciprocal is exp(-t) there
        return 1.0 - (g - 1.0) * math.exp(-t)
    return 1.0 - (g - 1.0) / math.expm1(t)


def alpha_decay(gamma, N):
    """Closed-form margin from the geometric value-decay argument:
    alpha = 1 - gamma (gamma - 1) rho^(N-1) with rho = (gamma - 1)/gamma.
    A lower bound on ``alpha_from_lp`` for every N >= 2 (equality at
    N = 2); its positivity threshold gives the 2 gamma log gamma horizon
    ceiling.  Reference curve, not a certificate.
    """
    g = float(gamma)
    _check_gamma(g)
    if g == 1.0:
        return 1.0
    rho = (g - 1.0) / g
    return 1.0 - g * (g - 1.0) * rho ** (int(N) - 1)


def alpha_simple(gamma, N):
    """Closed-form margin 1 - gamma^2 / N from bounding every tail crudely
    by its gamma cap; its positivity threshold gives the gamma^2 horizon
    ceiling.  Reference curve, not a certificate."""
    g = float(gamma)
    _check_gamma(g)
    return 1.0 - g * g / int(N)


# Largest horizon at which the "lp" method re-verifies its closed-form
# location with explicit margin LPs; above it the LP fill (O(N^2) rows)
# stops being worth the redundancy and the closed form stands alone.
_LP_CONFIRM_CAP = 400


def min_stabilizing_horizon(gamma, method="lp", eps_f=None, N_cap=10_000):
    """Smallest certified horizon ("lp", "relaxed-clf") or the closed-form
    ceiling quoted in comparison tables ("decay", "simple").

    * "lp"          : min {N : alpha_tight(gamma, N) > 0}, located by
                      bisection on the monotone closed form and
                      re-verified against ``alpha_from_lp`` at the
                      boundary whenever the answer is small enough for
                      the LP to be assembled cheaply
    * "relaxed-clf" : min {N : alpha_with_terminal_weight(gamma, N, eps_f) > 0}
    * "decay"       : max(1, ceil(2 gamma log gamma))
    * "simple"      : max(1, ceil(gamma^2))
    """
    g = float(gamma)
    _check_gamma(g)
    N_cap = int(N_cap)
    if method == "decay":
        return max(1, math.ceil(2.0 * g * math.log(g))) if g > 1.0 else 1
    if method == "simple":
        return max(1, math.ceil(g * g))
    if method == "lp":
        if g == 1.0:
            return 1
        hi = 2
        while hi <= N_cap and alpha_tight(g, hi) <= 1e-9:
            hi *= 2
        if hi > N_cap:
            if alpha_tight(g, N_cap) <= 1e-9:
                raise CertificationError(
                    f"no horizon up to {N_cap} has a positive margin "
                    f"for gamma={g}")
            hi = N_cap
        lo = hi // 2  # alpha_tight(lo) <= 1e-9 (or lo <= 1)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if alpha_tight(g, mid) > 1e-9:
                hi = mid
            else:
                lo = mid
        if hi <= _LP_CONFIRM_CAP:
            if alpha_from_lp(g, hi) <= 1e-9 or (
                    hi > 2 and alpha_from_lp(g, hi - 1) > 1e-9):
                raise NumericalError(
                    f"margin LP disagrees with the closed-form horizon "
                    f"location N={hi} at gamma={g}")
        return hi
    elif method == "relaxed-clf":
        if eps_f is None:
            raise ValueError("method 'relaxed-clf' needs eps_f")

        def fn(N):
            return alpha_with_terminal_weight(g, N, eps_f)
    else:
        raise ValueError(f"unknown horizon method {method!r}")
    for N in range(1, N_cap + 1):
        if fn(N) > 1e-9:
            return N
    raise CertificationError(
        f"no horizon up to {N_cap} has a positive margin for gamma={g}")


# ----------------------------------------------------------------------
# certificates
# ----------------------------------------------------------------------

_METHOD_TAGS = {
    "lp": "lp-tight",
    "decay": "exponential-decay",
    "simple": "simple",
    "relaxed-clf": "relaxed-clf",
}


@dataclass
class HorizonCertificate:
    """Margin table alpha_N, N = 1..N_max, plus the resulting horizon.

    method is the table generator ("lp-tight" and "relaxed-clf" are
    certificates, "exponential-decay" and "simple" are reference curves);
    N_bar is the smallest horizon the method vouches for.  When the table
    was produced through a storage function, gamma is the state-norm
    constant of the value function alone and gamma_effective the composite
    constant actually fed to the LP.
    """

    method: str
    gamma: float
    alphas: tuple
    N_bar: int
    eps_f: float = None
    gamma_effective: float = None

    @property
    def N_max(self):
        return len(self.alphas)

    def alpha_at(self, N):
        if not 1 <= int(N) <= len(self.alphas):
            raise IndexError(f"N={N} outside the tabulated range "
                             f"1..{len(self.alphas)}")
        return self.alphas[int(N) - 1]

    def to_csv(self):
        lines = ["N,alpha_N"]
        for i, a in enumerate(self.alphas, start=1):
            lines.append(f"{i},{a:.17g}")
        return "\n".join(lines) + "\n"


def certify_horizon(gamma, N_max=50, method="lp", eps_f=None, N_cap=10_000):
    """Tabulate alpha_N for N = 1..N_max and locate the smallest horizon
    the chosen method vouches for (searching past N_max if needed for the
    certified methods, giving up beyond N_cap; the closed-form ceilings
    for the reference curves).  The lp-tight table is checked to be
    nondecreasing in N.
    """
    g = float(gamma)
    _check_gamma(g)
    N_max = int(N_max)
    if N_max < 1:
        raise ValueError("N_max must be >= 1")
    if method == "lp":
        fn = lambda N: alpha_from_lp(g, N)
    elif method == "decay":
        fn = lambda N: alpha_decay(g, N)
    elif method == "simple":
        fn = lambda N: alpha_simple(g, N)
    elif method == "relaxed-clf":
        if eps_f is None:
            raise ValueError("method 'relaxed-clf' needs eps_f")
        fn = lambda N: alpha_with_terminal_weight(g, N, eps_f)
    else:
        raise ValueError(f"unknown horizon method {method!r}")
    alphas = tuple(fn(N) for N in range(1, N_max + 1))
    if method == "lp":
        for i in range(1, len(alphas)):
            if alphas[i] < alphas[i - 1] - 1e-9:
                raise NumericalError(
                    f"lp-tight margins must be nondecreasing in N; "
                    f"violated between N={i} and N={i + 1}")
    if method in ("decay", "simple"):
        N_bar = min_stabilizing_horizon(g, method=method)
    else:
        N_bar = next((i + 1 for i, a in enumerate(alphas) if a > 1e-9), None)
        if N_bar is None:
            N_bar = min_stabilizing_horizon(g, method=method, eps_f=eps_f,
                                            N_cap=N_cap)
    return HorizonCertificate(_METHOD_TAGS[method], g, alphas, N_bar,
                              eps_f=None if eps_f is None else float(eps_f))


# ----------------------------------------------------------------------
# cost controllability constants
# ----------------------------------------------------------------------

def sample_box(lo, hi, count, exclude=None, radius=1e-6):
    """Deterministic low-discrepancy sample of a box.

    Points come from an unscrambled Halton sequence (repeated calls with
    the same arguments return the same array) mapped to [lo, hi]; points
    within `radius` of `exclude` are skipped, which keeps controllability
    ratios well defined when the box contains the reference.
    """
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    if lo.shape != hi.shape:
        raise ValueError("lo and hi must have the same shape")
    if np.any(lo >= hi):
        raise ValueError("the box must have positive volume")
    count = int(count)
    if count < 1:
        raise ValueError("count must be >= 1")
    eng = qmc.Halton(d=lo.size, scramble=False)
    chunks = []
    need = count
    for _ in range(64):
        pts = lo + eng.random(max(2 * need, 16)) * (hi - lo)
        if exclude is not None:
            ex = np.asarray(exclude, float)
            pts = pts[np.linalg.norm(pts - ex, axis=1) >= float(radius)]
        take = pts[:need]
        chunks.append(take)
        need -= take.shape[0]
        if need == 0:
            return np.vstack(chunks)
    raise CertificationError("the excluded ball (almost) covers the box")


@dataclass
class CostControllabilityEstimate:
    """Sampled evidence for J_N*(x) <= gamma * d(x).

    ratios[s, k] is J_{k+1}*(x_s) / d(x_s) with d the chosen denominator;
    gamma is their maximum clipped from below at 1, attained at
    worst = (sample index, N).  local, when requested, is
    (level, gamma_local) with the maximum restricted to samples whose
    pointwise-minimal stage cost is at most `level`.
    """

    gamma: float
    ratios: np.ndarray
    samples: np.ndarray
    N_max: int
    denominator: str
    reference: tuple
    worst: tuple
    local: tuple = None


def estimate_gamma(sys, stage, samples, N_max=50, ref=None,
                   denominator="stage-min", local_level=None, ratio_cap=1e8):
    """Sampled cost controllability constant
        gamma = max(1, max_{s, N <= N_max} J_N*(x_s) / d(x_s)),
    with d(x) = min_u ell(x, u) ("stage-min") or |x - x_r|^2
    ("state-norm").

    Unconstrained LTI dynamics with a quadratic stage cost and an
    equilibrium reference evaluate J_N* exactly through a Riccati table;
    anything else solves the unconstrained MPC problem per sample and
    horizon (keep N_max modest there).  The optimal values are
    nondecreasing in N for sign-definite stage costs, so the maximum over
    N <= N_max is attained at the tail and a ratio above `ratio_cap` (or a
    failed solve) raises CertificationError naming the offending sample --
    on a stabilizable problem the ratios stay bounded.

    local_level restricts an additional maximum to the samples with
    min_u ell(x_s, u) <= local_level, reporting the constant of a
    level-set-restricted bound as estimate.local = (level, gamma_local).
    """
    if denominator not in ("stage-min", "state-norm"):
        raise ValueError("denominator must be 'stage-min' or 'state-norm'")
    if stage.variant not in ("quadratic", "output"):
        raise CertificationError(
            "controllability ratios need a sign-definite stage cost; "
            "rotate or reformulate an economic cost first")
    if stage.variant != "quadratic" and (denominator == "stage-min"
                                         or local_level is not None):
        raise CertificationError(
            "the exact pointwise minimum of the stage cost is only "
            "available for the quadratic variant; use "
            "denominator='state-norm' without local_level")
    samples = np.atleast_2d(np.asarray(samples, float))
    S = samples.shape[0]
    N_max = int(N_max)
    xr, ur = _ref_pair(ref, sys.n, sys.m)
    E = samples - xr

    equilibrium = bool(np.max(np.abs(sys.f(xr, ur) - xr)) <= 1e-9)
    values = np.empty((S, N_max))
    if sys.is_linear and stage.variant == "quadratic" and equilibrium:
        A, B = sys.jacobians(xr, ur)
        P = np.zeros((sys.n, sys.n))
        for k in range(N_max):
            P, _ = riccati_step(A, B, stage.Q, stage.R, P)
            values[:, k] = np.einsum("si,ij,sj->s", E, P, E)
    else:
        ref_obj = None if ref is None else (
            ref if isinstance(ref, Reference) else Reference.setpoint(xr, ur))
        for N in range(1, N_max + 1):
            spec = MpcProblemSpec("unconstrained", sys, N, stage=stage,
                                  ref=ref_obj)
            for s in range(S):
                try:
                    sol = solve_unconstrained_mpc(spec, samples[s])
                except (InfeasibleProblem, NumericalError) as exc:
                    raise CertificationError(
                        f"value evaluation failed at sample {s}, horizon "
                        f"{N}: {exc}") from exc
                if not np.isfinite(sol.value):
                    raise CertificationError(
                        f"nonfinite optimal value at sample {s}, horizon {N}")
                values[s, N - 1] = sol.value

    if denominator == "stage-min":
        den = np.array([stage.min_over_u(x, ref=(xr, ur)) for x in samples])
    else:
        den = np.einsum("si,si->s", E, E)
    thin = den <= 1e-14 * max(1.0, float(np.abs(samples).max()) ** 2)
    if np.any(thin):
        s = int(np.argmax(thin))
        raise CertificationError(
            f"sample {s} (effectively) coincides with the reference; "
            "exclude a neighborhood, e.g. sample_box(..., exclude=x_r)")
    ratios = values / den[:, None]
    if not np.all(np.isfinite(ratios)):
        raise CertificationError("nonfinite controllability ratio")
    s_w, k_w = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    if ratios[s_w, k_w] > float(ratio_cap):
        raise CertificationError(
            f"ratio {ratios[s_w, k_w]:.3e} at sample {s_w}, horizon "
            f"{k_w + 1} exceeds the cap {ratio_cap:.1e}; cost "
            "controllability likely fails there")
    gamma = max(1.0, float(ratios[s_w, k_w]))

    local = None
    if local_level is not None:
        lmin = (den if denominator == "stage-min" else
                np.array([stage.min_over_u(x, ref=(xr, ur))
                          for x in samples]))
        mask = lmin <= float(local_level)
        if not np.any(mask):
            raise CertificationError(
                f"no sample has a pointwise-minimal stage cost below "
                f"{local_level}")
        local = (float(local_level), max(1.0, float(ratios[mask].max())))

    return CostControllabilityEstimate(
        gamma=gamma, ratios=ratios, samples=samples, N_max=N_max,
        denominator=denominator, reference=(xr, ur),
        worst=(int(s_w), int(k_w) + 1), local=local)


def gamma_exact_lq(A, B, Q, R, denominator="stage-min"):
    """Exact controllability constant of an unconstrained LTI-quadratic
    problem: the largest generalized eigenvalue of the stabilizing Riccati
    solution P_inf against Q ("stage-min", Q must be positive definite) or
    against the identity ("state-norm").  Finite-horizon value matrices
    increase toward P_inf, so the constant covers every horizon at every
    state."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    Q = _sym(Q)
    R = _sym(R)
    P, _ = solve_dare(A, B, Q, R)
    if denominator == "stage-min":
        try:
            w = scipy.linalg.eigh(_sym(P), Q, eigvals_only=True)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise CertificationError(
                "the stage-min constant needs a positive definite state "
                "weight; use denominator='state-norm' plus a storage "
                "function instead") from exc
    elif denominator == "state-norm":
        w = np.linalg.eigvalsh(_sym(P))
    else:
        raise ValueError("denominator must be 'stage-min' or 'state-norm'")
    return max(1.0, float(w[-1]))


# ----------------------------------------------------------------------
# detectability storage for output-weighted costs
# ----------------------------------------------------------------------

@dataclass
class DetectabilityStorage:
    """Quadratic storage W(x) = x' Sigma x with
    W(Ax+Bu) - W(x) <= -eps_o |x|^2 + ell(x, u) and W(x) <= gamma_o |x|^2;
    tau records the scaling of the generator ray that was certified."""

    Sigma: np.ndarray
    gamma_o: float
    eps_o: float
    tau: float = 0.0

    def value(self, x):
        x = np.asarray(x, float)
        return float(x @ self.Sigma @ x)


def _cost_rows(Qx):
    """Rows F with F'F = Qx (eigenvalue factorization, small modes cut)."""
    w, V = np.linalg.eigh(_sym(Qx))
    cut = 1e-12 * max(1.0, float(w[-1]) if w.size else 1.0)
    keep = w > cut
    return (np.sqrt(w[keep]) * V[:, keep]).T


def verify_ioss_storage(A, B, C, Q, R, eps_o, Q_s=None):
    """Search a quadratic storage function certifying that the
    output-weighted stage cost ell(x,u) = (Cx)'Q(Cx) + u'Ru [+ x'Q_s x]
    detects the state of the LTI plant x+ = Ax + Bu:

        W(Ax+Bu) - W(x) <= -eps_o |x|^2 + ell(x, u)   for all (x, u).

    When eps_o I is already below the state weight, W = 0 works and is
    returned.  Otherwise the search runs over rays Sigma = tau * Sigma0,
    each Sigma0 the Lyapunov matrix of a generator picked from a small
    family: A itself when Schur, plus output-injection-damped copies of A
    whose observer gains come from the dual Riccati equation at several
    measurement weights.  Injection through the measured output shrinks
    the storage exactly along directions the stage cost pays for, which
    is where the plain ray is weakest on lightly damped plants.  Per ray
    the matrix inequality is linear in tau, so the feasible scalings form
    an interval, located by a log-spaced scan and shrunk by bisection
    toward its smallest point; across rays the storage with the smallest
    overshoot constant gamma_o wins.  Raises CertificationError when a
    mode with |eigenvalue| >= 1 is invisible to the cost (no storage
    exists) or when no scaling on any ray is feasible (the family is
    sufficient, not exhaustive).
    """
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    B = np.asarray(B, float).reshape(n, -1)
    m = B.shape[1]
    C = np.atleast_2d(np.asarray(C, float))
    Q = _sym(Q)
    R = _sym(R)
    eps_o = float(eps_o)
    if eps_o <= 0.0:
        raise ValueError("eps_o must be positive")
    Qx = C.T @ Q @ C
    if Q_s is not None:
        Qx = Qx + _sym(Q_s)
    Qx = _sym(Qx)

    M0 = np.zeros((n + m, n + m))
    M0[:n, :n] = eps_o * np.eye(n) - Qx
    M0[n:, n:] = -R
    scale0 = max(1.0, float(np.abs(M0).max()))
    if _lam_max(M0) <= 1e-11 * scale0:
        return DetectabilityStorage(np.zeros((n, n)), 0.0, eps_o, 0.0)

    F_rows = _cost_rows(Qx)
    a_scale = max(1.0, float(np.abs(A).max()))
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-9:
            pencil = np.vstack([A - lam * np.eye(n), F_rows])
            if np.linalg.svd(pencil, compute_uv=False)[-1] < 1e-8 * a_scale:
                raise CertificationError(
                    "a mode with |eigenvalue| >= 1 is invisible to the "
                    "stage cost; no storage function exists")

    generators = []
    if np.max(np.abs(np.linalg.eigvals(A))) < 1.0 - 1e-9:
        generators.append(A)
    injections = [(F_rows, 1.0)]
    if C.size and _lam_max(C.T @ C) > 1e-12:
        injections += [(C, w) for w in (0.1, 1.0, 10.0, 100.0)]
    for rows, w in injections:
        try:
            _, Kd = solve_dare(A.T, rows.T, np.eye(n),
                               w * np.eye(rows.shape[0]))
        except (NumericalError, ValueError, np.linalg.LinAlgError):
            continue
        generators.append(A + Kd.T @ rows)

    best = None
    for F in generators:
        Sigma0 = solve_dlyap(F, np.eye(n))
        M1 = np.zeros((n + m, n + m))
        M1[:n, :n] = A.T @ Sigma0 @ A - Sigma0
        M1[:n, n:] = A.T @ Sigma0 @ B
        M1[n:, :n] = M1[:n, n:].T
        M1[n:, n:] = B.T @ Sigma0 @ B
        m1_scale = max(1.0, float(np.abs(M1).max()))

        def feasible(tau):
            return _lam_max(M0 + tau * M1) <= 1e-10 * max(scale0,
                                                          tau * m1_scale)

        taus = np.logspace(-9.0, 9.0, 181)
        idx = next((i for i, t in enumerate(taus) if feasible(t)), None)
        if idx is None:
            continue
        hi = float(taus[idx])
        lo = 0.0 if idx == 0 else float(taus[idx - 1])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        gamma_o = max(0.0, float(np.linalg.eigvalsh(_sym(hi * Sigma0))[-1]))
        if best is None or gamma_o < best.gamma_o:
            best = DetectabilityStorage(hi * Sigma0, gamma_o, eps_o, hi)
    if best is None:
        raise CertificationError(
            "no feasible storage scaling on any search ray; the "
            "detectability margin is too small for this eps_o")
    return best


def detectable_gamma(gamma_state, storage):
    """Effective controllability constant of the composite value J_N* + W:
    with J_N*(x) <= gamma_state |x|^2 and the storage guarantees of
    `storage`, the modified stage cost ell~ = ell + W - W o f satisfies
    ell~ >= eps_o |x|^2 and J~_N* <= J_N* + W(x), so
    gamma_eff = (gamma_state + gamma_o) / eps_o."""
    g = float(gamma_state)
    if g < 0.0 or not np.isfinite(g):
        raise ValueError("gamma_state must be finite and nonnegative")
    return max(1.0, (g + storage.gamma_o) / storage.eps_o)


def certify_horizon_detectable(gamma_state, storage, N_max=50,
                               N_cap=10_000):
    """Margin table for an output-weighted cost through its storage
    function: feed gamma_eff = (gamma_state + gamma_o)/eps_o to the margin
    LP.  The certified decrease holds for the composite function
    J_N* + W, and alpha_N > 0 keeps the closed-loop cost below
    (1/alpha_N) J_inf*(x0) + (1/alpha_N - 1) W(x0)."""
    g_eff = detectable_gamma(gamma_state, storage)
    base = certify_horizon(g_eff, N_max=N_max, method="lp", N_cap=N_cap)
    return HorizonCertificate(base.method, float(gamma_state), base.alphas,
                              base.N_bar, gamma_effective=g_eff)


# ----------------------------------------------------------------------
# terminal-cost relaxation measurements
# ----------------------------------------------------------------------

def rollout_cost_matrix(A, B, K, Q, R, M):
    """Cost matrix of running u = K x for M steps on x+ = Ax + Bu:
    P = sum_{k<M} ((A+BK)^k)' (Q + K'RK) (A+BK)^k, so x'Px is the M-step
    rollout cost from x.  Usable as a terminal cost whose relaxation
    constant shrinks as M grows (when K is stabilizing)."""
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    B = np.asarray(B, float).reshape(n, -1)
    K = np.asarray(K, float).reshape(B.shape[1], n)
    M = int(M)
    if M < 1:
        raise ValueError("the rollout length must be >= 1")
    Acl = A + B @ K
    Qcl = _sym(Q) + K.T @ _sym(R) @ K
    P = np.zeros((n, n))
    Phi = np.eye(n)
    for _ in range(M):
        P += Phi.T @ Qcl @ Phi
        Phi = Acl @ Phi
    return _sym(P)


def relaxed_clf_eps_lq(A, B, Q, R, P_f):
    """Exact relaxation constant of the quadratic terminal cost x'P_f x on
    an unconstrained LTI-quadratic problem: one Riccati step S of P_f
    evaluates min_u [v_f(Ax+Bu) + ell(x,u)] = x'Sx exactly, so
    eps_f = max(0, lam_max(S, P_f) - 1).  P_f must be positive definite."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    S, _ = riccati_step(A, B, _sym(Q), _sym(R), _sym(P_f))
    try:
        w = scipy.linalg.eigh(_sym(S), _sym(P_f), eigvals_only=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise CertificationError(
            "the terminal cost matrix must be positive definite") from exc
    return max(0.0, float(w[-1]) - 1.0)


def measure_relaxed_clf(sys, stage, v_f, samples, ref=None,
                        u_lo=-10.0, u_hi=10.0, grid=241):
    """Sampled relaxation constant of a terminal cost candidate:
        eps_f = max(0, max_s min_u [v_f(f(x_s,u)) + ell(x_s,u)] / v_f(x_s) - 1).

    eps_f = 0 means v_f decreases like a control Lyapunov function on the
    samples; larger values quantify how far it is from one.  Scalar inputs
    minimize over [u_lo, u_hi] by a grid plus bounded local refinement;
    higher input dimensions polish the best point of a coarse axis grid
    with a derivative-free search.  Samples where v_f is below 1e-12 are
    skipped (the reference itself carries no information)."""
    xr, ur = _ref_pair(ref, sys.n, sys.m)
    worst = 0.0
    grid = max(int(grid), 5)
    for x in np.atleast_2d(np.asarray(samples, float)):
        vx = float(v_f(x))
        if vx <= 1e-12:
            continue

        def q(u):
            u = np.atleast_1d(np.asarray(u, float))
            return float(v_f(sys.f(x, u)) + stage.value(x, u, ref=(xr, ur)))

        if sys.m == 1:
            us = np.linspace(float(u_lo), float(u_hi), grid)
            vals = np.array([q([u]) for u in us])
            i = int(np.argmin(vals))
            res = minimize_scalar(
                lambda u: q([u]), bounds=(us[max(i - 1, 0)],
                                          us[min(i + 1, grid - 1)]),
                method="bounded", options={"xatol": 1e-12})
            best = min(float(res.fun), float(vals[i]))
        else:
            res = minimize(q, ur, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-12,
                                    "maxiter": 4000})
            best = float(res.fun)
        worst = max(worst, best / vx - 1.0)
    return max(0.0, worst)


# ----------------------------------------------------------------------
# region-of-attraction falsification
# ----------------------------------------------------------------------

@dataclass
class RoaFailure:
    """One falsified sample: what went wrong, where, and by how much."""

    sample: int
    step: int
    kind: str  # "left-level-set" | "infeasible" | "constraint" | "diverged"
    detail: float = 0.0


@dataclass
class RoaReport:
    """Outcome of a level-set falsification run.

    checked / skipped hold sample indices (skipped = initial value already
    above v_bar); a report with failures == [] passes, and passes
    vacuously when nothing was checked."""

    v_bar: float
    steps: int
    checked: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def vacuous(self):
        return not self.checked

    @property
    def passed(self):
        return not self.failures


def certify_region_of_attraction(spec, v_bar, samples, steps=150,
                                 diverge_threshold=1e6):
    """Falsification run for the sublevel set {x : J_N*(x) <= v_bar} under
    the closed loop of an 'unconstrained' MPC spec: every sampled start
    inside the set is simulated for `steps` controller invocations and must
    keep its optimal value below v_bar (small slack), stay solvable,
    respect the declared stage constraint set (when any), and stay bounded.
    Starts outside the set are skipped; no checked samples means the claim
    is vacuous (reported as such, still a pass)."""
    if spec.scheme != "unconstrained":
        raise ValueError("region certification expects an 'unconstrained' "
                         "MPC spec")
    v_bar = float(v_bar)
    tol = 1e-9 * max(1.0, abs(v_bar))
    report = RoaReport(v_bar, int(steps))
    for i, x0 in enumerate(np.atleast_2d(np.asarray(samples, float))):
        state = ControllerState(spec)
        x = np.array(x0, float)
        outcome = "ok"
        for t in range(int(steps)):
            try:
                u_app, sol, _diag = apply_controller(state, x)
            except (InfeasibleProblem, NumericalError):
                outcome = RoaFailure(i, t, "infeasible")
                break
            if sol.value > v_bar + tol:
                if t == 0:
                    outcome = "skip"
                else:
                    outcome = RoaFailure(i, t, "left-level-set",
                                         float(sol.value))
                break
            for u in u_app:
                if spec.zset is not None:
                    v = float(spec.zset.violation(x, u))
                    if v > 1e-8:
                        outcome = RoaFailure(i, t, "constraint", v)
                        break
                x = spec.sys.f(x, u)
                if (not np.all(np.isfinite(x))
                        or np.linalg.norm(x) > float(diverge_threshold)):
                    outcome = RoaFailure(i, t, "diverged",
                                         float(np.linalg.norm(x)))
                    break
            if outcome != "ok":
                break
        if outcome == "skip":
            report.skipped.append(i)
        else:
            report.checked.append(i)
            if isinstance(outcome, RoaFailure):
                report.failures.append(outcome)
    return report
