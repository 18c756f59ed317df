"""Plant models and the synthetic wind-disturbance family.

The plant follows the mechanical-system convention

    H(q) qdd + C(q, dq) dq + g(q) + f(q, dq; c) = tau

so the disturbance f enters on the left-hand side and tau is the commanded
generalized force.  The quadrotor specialization treats the thrust vector
as a directly commanded 3-vector (perfect attitude tracking) with
H = mass * I, C = 0 and g = (0, 0, mass * g0).

The true aerodynamic disturbance is a synthetic family (quadratic drag +
linear drag + an altitude-decaying vertical term) parameterized by a wind
condition c.  It is smooth, condition-dependent, and deliberately outside
the span of any finite kernel dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadParams, OutOfRange
from .numerics import rk4_step

# free-stream speed envelope for valid wind conditions (m/s)
WIND_SPEED_MAX = 10.0


@dataclass(frozen=True)
class State:
    """Position/velocity pair of the controlled system (SI units)."""

    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "dq", np.asarray(self.dq, dtype=float))
        if self.q.shape != self.dq.shape:
            raise BadParams("position and velocity must have the same dimension")


class PlantModel:
    """Interface for H(q) qdd + C(q, dq) dq + g(q) + f = tau."""

    n: int

    def inertia(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def coriolis(self, q: np.ndarray, dq: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gravity(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class QuadrotorPlant(PlantModel):
    """Point-mass quadrotor, position dynamics only."""

    def __init__(self, mass: float = 1.47, g0: float = 9.81):
        if mass <= 0.0:
            raise BadParams("mass must be > 0")
        self.mass = float(mass)
        self.g0 = float(g0)
        self.n = 3

    def inertia(self, q):
        return self.mass * np.eye(3)

    def coriolis(self, q, dq):
        return np.zeros((3, 3))

    def gravity(self, q):
        # LHS convention: free fall (tau = 0, f = 0) gives qdd = (0, 0, -g0)
        return np.array([0.0, 0.0, self.mass * self.g0])


@dataclass(frozen=True)
class WindCondition:
    """Hidden environment state c: free-stream wind plus disturbance coefficients."""

    v_w: np.ndarray                       # free-stream velocity (m/s)
    drag_quad: np.ndarray                 # diagonal of quadratic-drag gain D(c)
    drag_lin: np.ndarray                  # diagonal of linear-drag gain B(c)
    ground: float = 0.0                   # altitude-term magnitude h(c) (N)
    z0: float = 1.0                       # altitude decay length (m)
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "v_w", np.asarray(self.v_w, dtype=float))
        object.__setattr__(self, "drag_quad", np.asarray(self.drag_quad, dtype=float))
        object.__setattr__(self, "drag_lin", np.asarray(self.drag_lin, dtype=float))
        vals = np.concatenate([self.v_w, self.drag_quad, self.drag_lin,
                               [self.ground, self.z0]])
        if not np.all(np.isfinite(vals)):
            raise BadParams("wind condition has non-finite entries")
        if np.linalg.norm(self.v_w) > WIND_SPEED_MAX:
            raise BadParams(
                f"free-stream speed {np.linalg.norm(self.v_w):.2f} m/s "
                f"outside envelope [0, {WIND_SPEED_MAX}]"
            )


def wind_condition(speed: float,
                   direction=(1.0, 0.0, 0.0),
                   drag_quad=(0.20, 0.20, 0.25),
                   drag_lin=(0.35, 0.35, 0.45),
                   ground_coeff: float = 0.12,
                   z0: float = 1.0,
                   label: str = "") -> WindCondition:
    """Default synthetic family: coefficients fixed, altitude term scales with speed."""
    d = np.asarray(direction, dtype=float)
    nd = np.linalg.norm(d)
    if nd == 0.0:
        d = np.zeros(3)
    else:
        d = d / nd
    return WindCondition(
        v_w=speed * d,
        drag_quad=np.asarray(drag_quad, dtype=float),
        drag_lin=np.asarray(drag_lin, dtype=float),
        ground=ground_coeff * speed,
        z0=z0,
        label=label or f"wind_{speed:g}",
    )


def calm_condition() -> WindCondition:
    """No wind, no drag, no altitude term: f is identically zero."""
    return WindCondition(v_w=np.zeros(3), drag_quad=np.zeros(3),
                         drag_lin=np.zeros(3), ground=0.0, label="calm")


def disturbance(state: State, c: WindCondition) -> np.ndarray:
    """Ground-truth disturbance force f(q, dq; c) in Newtons."""
    rel = state.dq - c.v_w
    f = -c.drag_quad * rel * np.linalg.norm(rel) - c.drag_lin * rel
    f = f.copy()
    f[2] += c.ground * np.exp(-state.q[2] / c.z0)
    return f


def step_plant(plant: PlantModel, state: State, tau: np.ndarray,
               c: WindCondition, dt: float) -> State:
    """One RK4 step of the full plant under constant tau and wind condition."""
    return step_plant_forced(plant, state, tau,
                             lambda s: disturbance(s, c), dt)


def step_plant_forced(plant: PlantModel, state: State, tau: np.ndarray,
                      force_fn, dt: float) -> State:
    """RK4 step with an arbitrary ground-truth disturbance force_fn(state)."""
    n = state.q.shape[0]

    def field(x, u):
        q, dq = x[:n], x[n:]
        s = State(q, dq)
        H = plant.inertia(q)
        rhs = u - plant.coriolis(q, dq) @ dq - plant.gravity(q) - force_fn(s)
        qdd = np.linalg.solve(H, rhs)
        return np.concatenate([dq, qdd])

    x = np.concatenate([state.q, state.dq])
    x_next = rk4_step(field, x, np.asarray(tau, dtype=float), dt)
    return State(x_next[:n], x_next[n:])


@dataclass
class WindSchedule:
    """Piecewise-constant map t -> WindCondition on [0, t_final].

    Right-continuous at breakpoints: "set to X for N seconds" means the
    new condition is active at the breakpoint itself.
    """

    times: np.ndarray                     # strictly increasing, times[0] == 0
    conditions: list = field(default_factory=list)
    t_final: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.size != len(self.conditions):
            raise BadParams("one breakpoint per condition required")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0.0):
            raise BadParams("breakpoints must start at 0 and strictly increase")
        if self.t_final <= self.times[-1]:
            raise BadParams("t_final must exceed the last breakpoint")

    def sample(self, t: float) -> WindCondition:
        if t < 0.0 or t > self.t_final:
            raise OutOfRange(f"t = {t} outside schedule domain [0, {self.t_final}]")
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.conditions[idx]

    def segment_bounds(self):
        """(start, end) of each constant-wind interval."""
        edges = np.append(self.times, self.t_final)
        return [(edges[i], edges[i + 1]) for i in range(len(self.conditions))]


def stepped_schedule(speeds, durations, t_pad: float = 0.0, **family) -> WindSchedule:
    """Schedule holding each speed for its duration, in order."""
    speeds = list(speeds)
    durations = list(durations)
    if len(speeds) != len(durations):
        raise BadParams("speeds and durations must pair up")
    times = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    t_final = float(np.sum(durations)) + t_pad
    conds = [wind_condition(v, **family) for v in speeds]
    return WindSchedule(times=times, conditions=conds, t_final=t_final)


def constant_schedule(speed: float, t_final: float, **family) -> WindSchedule:
    return WindSchedule(times=np.array([0.0]),
                        conditions=[wind_condition(speed, **family)],
                        t_final=t_final)


def hover_schedule(**family) -> WindSchedule:
    """Stepped hover wind profile: 2.5 m/s for 15 s, 4.3 for 10 s, 6.2 for 10 s."""
    return stepped_schedule([2.5, 4.3, 6.2], [15.0, 10.0, 10.0], **family)


def randomwalk_schedule(**family) -> WindSchedule:
    """Stepped setpoint-test profile: 2.5 / 4.3 / 6.2 m/s for 20 s each."""
    return stepped_schedule([2.5, 4.3, 6.2], [20.0, 20.0, 20.0], **family)
