"""Benchmark plants shared by the tests, the demos, and the command line.

Every entry bundles

* a :class:`~dynmpc.model.DynamicalSystem` with analytic Jacobians,
* a documented constraint set (or a list of per-phase sets when the
  constraints are periodically time-varying),
* a default stage cost and initial state, and
* an ``extras`` dict carrying the raw matrices and exogenous data a
  certification pipeline or a demo needs (weights, price signals,
  discrete actuator levels, ...).

Entries are constructed on demand through :func:`get_benchmark`; the
factories are deterministic, so two calls with equal parameters produce
numerically identical systems.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .model import ConstraintSet, DynamicalSystem, ExogenousSignal, StageCost

__all__ = [
    "BenchmarkSystem",
    "msd_chain",
    "thermal",
    "unicycle",
    "double_integrator",
    "scalar_cubic",
    "get_benchmark",
    "BENCHMARK_IDS",
]


# ----------------------------------------------------------------------
@dataclass
class BenchmarkSystem:
    """A plant plus everything needed to run a controller on it.

    ``zset`` is a single :class:`ConstraintSet`, a list of per-phase sets
    (periodically time-varying constraints), or ``None`` for a plant meant
    to be run unconstrained.  ``extras`` holds entry-specific data such as
    the (A, B, C) matrices of a linear plant, default weights, exogenous
    price signals, or discrete actuator levels.
    """

    id: str
    sys: DynamicalSystem
    zset: object
    stage: StageCost
    x0: np.ndarray
    extras: dict = field(default_factory=dict)
    notes: str = ""


# ----------------------------------------------------------------------
def msd_chain(n_mass=6, k=1.0, c=0.1, dt=0.1, r_weight=1.0, q_s=1e-3):
    """Mass-spring-damper chain, exactly discretized.

    ``n_mass`` unit masses in a row; mass 0 is anchored to the wall by a
    spring (stiffness ``k``) and consecutive masses are coupled by springs
    of the same stiffness; every mass carries a ground damper ``c``.  The
    single force input acts on mass 0 and the output is the position of
    the last mass, so the input-output channel runs through the whole
    chain (strongly non-minimum-phase).  The continuous dynamics are
    discretized exactly with a zero-order hold of length ``dt``.

    State layout: ``x = (positions, velocities)`` with ``n = 2 n_mass``.
    The default stage cost is ``y' Q_y y + q_s ||x||^2 + u' R u`` written
    as a quadratic in the state, i.e. ``Q = C'Q_y C + q_s I``.

    Constraint set: a wide box (|position|, |velocity| <= 100, |u| <= 200)
    that is inactive in the contractive operating envelope; the chain is
    primarily an unconstrained stabilization benchmark and the horizon
    certification pipeline uses the matrices in ``extras``.
    """
    n_mass = int(n_mass)
    if n_mass < 2:
        raise ValueError("the chain needs at least two masses")
    nq = n_mass
    n = 2 * nq

    # stiffness: anchor spring on mass 0 plus nearest-neighbour couplings
    K = np.zeros((nq, nq))
    K[0, 0] = k  # anchor
    for i in range(nq - 1):
        K[i, i] += k
        K[i + 1, i + 1] += k
        K[i, i + 1] -= k
        K[i + 1, i] -= k
    Cd = c * np.eye(nq)  # ground dampers

    Ac = np.zeros((n, n))
    Ac[:nq, nq:] = np.eye(nq)
    Ac[nq:, :nq] = -K
    Ac[nq:, nq:] = -Cd
    Bc = np.zeros((n, 1))
    Bc[nq + 0, 0] = 1.0  # force on mass 0

    # exact zero-order-hold discretization via one augmented matrix exponential
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = Ac * dt
    aug[:n, n:] = Bc * dt
    E = expm(aug)
    A = E[:n, :n]
    B = E[:n, n:]

    C = np.zeros((1, n))
    C[0, nq - 1] = 1.0  # position of the last mass

    Q_y = np.eye(1)
    R = float(r_weight) * np.eye(1)
    Qx = C.T @ Q_y @ C + float(q_s) * np.eye(n)

    sys = DynamicalSystem.linear(A, B, C=C, name="msd-chain")
    zset = ConstraintSet(n, 1,
                         x_lo=-100.0, x_hi=100.0, u_lo=-200.0, u_hi=200.0)
    stage = StageCost.quadratic(Qx, R)
    x0 = np.ones(n) / math.sqrt(n)

    extras = {
        "A": A, "B": B, "C": C,
        "Q_y": Q_y, "R": R, "Q_s": float(q_s) * np.eye(n), "Qx": Qx,
        "n_mass": n_mass, "k": float(k), "c": float(c), "dt": float(dt),
        "actuated_mass": 0, "sensed_mass": n_mass - 1,
    }
    notes = ("Unit masses and springs, ground dampers c per mass, exact "
             "zero-order-hold discretization. Force on mass 0, output the "
             "position of the last mass (non-minimum-phase channel). The "
             "wide box constraint set is inactive in normal operation.")
    return BenchmarkSystem("msd-chain", sys, zset, stage, x0, extras, notes)


# ----------------------------------------------------------------------
def thermal(a=0.9, b=-0.5, t_ambient=30.0, u_max=3.0):
    """Scalar thermal balance of a cooled room under a day/night price.

    Dynamics ``x+ = a x + b u + (1 - a) t_ambient`` with temperature ``x``
    and cooling power ``u >= 0`` (``b < 0``).  Without cooling the room
    settles at the ambient temperature, which lies above the comfort band,
    so every feasible orbit must spend energy.  The electricity price is a
    24-step periodic exogenous signal (cheap at night, expensive at noon),
    which rewards pre-cooling through the thermal mass.

    Constraints are periodically time-varying: a tight comfort band during
    business hours (phases 8..18: 20 <= x <= 24) and a relaxed band
    otherwise (18 <= x <= 26).  The physical chiller has three discrete
    power levels (0, u_max/2, u_max); the benchmark relaxes the input set
    to their convex hull [0, u_max] so the orbit problems stay smooth, and
    ships the levels in ``extras["levels"]`` for a post-hoc rounding demo.

    Stage cost: ``price * u + 0.01 u^2`` — metered energy plus a small
    strictly convex wear term that makes the optimal orbit unique.
    """
    a = float(a)
    b = float(b)
    t_ambient = float(t_ambient)
    u_max = float(u_max)
    T = 24

    sys = DynamicalSystem.linear([[a]], [[b]], c=[(1.0 - a) * t_ambient],
                                 C=[[1.0]], name="thermal")

    zsets = []
    for phase in range(T):
        if 8 <= phase <= 18:
            lo, hi = 20.0, 24.0
        else:
            lo, hi = 18.0, 26.0
        zsets.append(ConstraintSet(1, 1, x_lo=lo, x_hi=hi,
                                   u_lo=0.0, u_hi=u_max))

    price_values = np.empty(T)
    for phase in range(T):
        if phase <= 6 or phase >= 22:
            price_values[phase] = 0.2
        elif 12 <= phase <= 17:
            price_values[phase] = 1.0
        else:
            price_values[phase] = 0.5
    price = ExogenousSignal.periodic_sequence(price_values.reshape(T, 1))

    def _price_of(param):
        return float(np.asarray(param, float).ravel()[0])

    def fn(x, u, param):
        p = _price_of(param)
        return p * float(u[0]) + 0.01 * float(u[0]) ** 2

    def grad(x, u, param):
        p = _price_of(param)
        return np.zeros(1), np.array([p + 0.02 * float(u[0])])

    def hess(x, u, param):
        return np.zeros((1, 1)), np.zeros((1, 1)), np.array([[0.02]])

    stage = StageCost.economic(fn, grad=grad, hess=hess)
    tracking = StageCost.quadratic(np.eye(1), 0.1 * np.eye(1))
    x0 = np.array([25.0])

    extras = {
        "a": a, "b": b, "t_ambient": t_ambient,
        "levels": (0.0, u_max / 2.0, u_max),
        "price": price, "price_values": price_values.reshape(T, 1),
        "period": T, "tracking": tracking,
    }
    notes = ("Scalar linear thermal balance; comfort band tightens during "
             "business hours (phases 8..18). The discrete chiller levels "
             "are relaxed to their convex hull; see extras['levels'] for "
             "the physical levels used by the rounding demo.")
    return BenchmarkSystem("thermal", sys, zsets, stage, x0, extras, notes)


# ----------------------------------------------------------------------
def unicycle(dt=0.1):
    """Kinematic unicycle, Euler-discretized.

    State ``(px, py, heading)``, inputs ``(speed, turn rate)``:

        px+ = px + dt v cos(theta),  py+ = py + dt v sin(theta),
        theta+ = theta + dt w.

    With a quadratic stage cost centered at the origin this plant is the
    standard demonstration that cost controllability can fail: parking a
    sideways displacement ``py = d`` needs maneuvering cost of order
    ``|d|`` while the best stage cost is of order ``d^2``, so the
    value/stage ratio blows up as ``d -> 0``.

    Constraint set: positions in [-2, 2], heading in [-pi, pi], speed and
    turn rate in [-1, 1].
    """
    dt = float(dt)

    def f(x, u):
        px, py, th = x
        v, w = u
        return np.array([px + dt * v * math.cos(th),
                         py + dt * v * math.sin(th),
                         th + dt * w])

    def jac(x, u):
        _, _, th = x
        v, _ = u
        A = np.array([[1.0, 0.0, -dt * v * math.sin(th)],
                      [0.0, 1.0, dt * v * math.cos(th)],
                      [0.0, 0.0, 1.0]])
        B = np.array([[dt * math.cos(th), 0.0],
                      [dt * math.sin(th), 0.0],
                      [0.0, dt]])
        return A, B

    sys = DynamicalSystem(3, 2, f, jacobians=jac, name="unicycle")
    zset = ConstraintSet(3, 2,
                         x_lo=[-2.0, -2.0, -math.pi],
                         x_hi=[2.0, 2.0, math.pi],
                         u_lo=-1.0, u_hi=1.0)
    stage = StageCost.quadratic(np.eye(3), 0.1 * np.eye(2))
    x0 = np.array([0.0, 0.4, 0.0])

    extras = {"dt": dt}
    notes = ("Euler-discretized kinematic unicycle. Demonstrates failure "
             "of cost controllability with quadratic stage costs: the "
             "value/stage ratio diverges for shrinking sideways offsets.")
    return BenchmarkSystem("unicycle", sys, zset, stage, x0, extras, notes)


# ----------------------------------------------------------------------
def double_integrator():
    """Constrained double integrator (sampled, unit step).

    ``x = (position, velocity)``, ``x+ = [[1,1],[0,1]] x + [0.5, 1] u``,
    output the position.  Constraint set: both states in [-5, 5] and
    |u| <= 1.  Default stage cost: identity weights.
    """
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    C = np.array([[1.0, 0.0]])
    sys = DynamicalSystem.linear(A, B, C=C, name="double-integrator")
    zset = ConstraintSet(2, 1, x_lo=-5.0, x_hi=5.0, u_lo=-1.0, u_hi=1.0)
    stage = StageCost.quadratic(np.eye(2), np.eye(1))
    x0 = np.array([2.0, 0.0])
    extras = {"A": A, "B": B, "C": C,
              "Q": np.eye(2), "R": np.eye(1)}
    notes = "Sampled double integrator with box constraints on x and u."
    return BenchmarkSystem("double-integrator", sys, zset, stage, x0,
                           extras, notes)


# ----------------------------------------------------------------------
def scalar_cubic():
    """Scalar plant with a destabilizing cubic: ``x+ = x + u + x^3``.

    On the unit box (|x| <= 1, |u| <= 1) the cubic is tame enough for
    terminal-set synthesis around the origin yet makes the linearization
    genuinely state-dependent.  Default stage cost: Q = R = 1.
    """
    def f(x, u):
        return np.array([x[0] + u[0] + x[0] ** 3])

    def jac(x, u):
        return np.array([[1.0 + 3.0 * x[0] ** 2]]), np.array([[1.0]])

    sys = DynamicalSystem(1, 1, f, jacobians=jac, name="scalar-cubic")
    zset = ConstraintSet(1, 1, x_lo=-1.0, x_hi=1.0, u_lo=-1.0, u_hi=1.0)
    stage = StageCost.quadratic(np.eye(1), np.eye(1))
    x0 = np.array([0.5])
    extras = {}
    notes = "Scalar cubic plant on the unit box; origin is an equilibrium."
    return BenchmarkSystem("scalar-cubic", sys, zset, stage, x0, extras,
                           notes)


# ----------------------------------------------------------------------
_FACTORIES = {
    "msd-chain": msd_chain,
    "thermal": thermal,
    "unicycle": unicycle,
    "double-integrator": double_integrator,
    "scalar-cubic": scalar_cubic,
}

BENCHMARK_IDS = tuple(sorted(_FACTORIES))


def get_benchmark(bench_id, **params):
    """Construct a benchmark by id, forwarding ``params`` to its factory.

    Raises ValueError for an unknown id and TypeError for parameters the
    chosen factory does not accept.
    """
    try:
        factory = _FACTORIES[bench_id]
    except KeyError:
        raise ValueError(
            f"unknown benchmark {bench_id!r}; available: "
            + ", ".join(BENCHMARK_IDS)) from None
    return factory(**params)
