"""Closed-loop benchmark on circular references with a plant whose mass follows a schedule.

Four controllers are compared: nominal MPC, MPC on an offline-trained KNODE
model, MPC on the online-updated KNODE model, and a geometric tracking
controller.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .data import DataBatch
from .dynamics import NU, NX, POS, QUAT, RATE, VEL, NumericalError, QuadParams, rotation_from_quaternion
from .ensemble import EnsembleModel
from .mlp import DEFAULT_LAYER_DIMS
from .mpc import OcpConfig, control_step, shift_warm_start
from .orchestrator import SCHEDULERS, OnlineLearner, steps_per
from .trainer import TrainConfig, knode_loss, train_member

log = logging.getLogger(__name__)

METHODS = ("mpc-nominal", "knode-offline", "knode-online", "geometric")
_TIME_EPS = 1e-9
# a run is declared diverged once the position error exceeds this many meters
DIVERGENCE_RADIUS = 50.0


@dataclass(frozen=True)
class MassSchedule:
    """Piecewise-constant multiplier on the plant mass.

    ``multipliers[k]`` applies on ``[breakpoints[k-1], breakpoints[k])``; the
    change takes effect exactly at each breakpoint.
    """

    breakpoints: tuple = (2.0, 5.0)
    multipliers: tuple = (1.0, 0.5, 1.33)

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        mu = tuple(float(m) for m in self.multipliers)
        if len(mu) != len(bp) + 1:
            raise ValueError("need exactly one more multiplier than breakpoints")
        if any(m <= 0 for m in mu):
            raise ValueError("mass multipliers must be positive")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "multipliers", mu)

    @classmethod
    def constant(cls) -> "MassSchedule":
        return cls((), (1.0,))

    def multiplier(self, t: float) -> float:
        k = int(np.searchsorted(self.breakpoints, t + _TIME_EPS, side="right"))
        return self.multipliers[k]


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Counter-clockwise circle at constant speed and altitude, starting at ``(R, 0)``."""

    radius: float = 3.0
    speed: float = 1.0
    altitude: float = 0.0
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def omega(self) -> float:
        return self.speed / self.radius

    def sample(self, t: float) -> np.ndarray:
        """Full 13-dim reference: position, velocity, level attitude, zero rates."""
        if t < 0:
            raise ValueError("reference time must be non-negative")
        th = self.omega * t
        c, s = math.cos(th), math.sin(th)
        ref = np.zeros(NX)
        ref[0] = self.center[0] + self.radius * c
        ref[1] = self.center[1] + self.radius * s
        ref[2] = self.altitude
        ref[3] = -self.speed * s
        ref[4] = self.speed * c
        ref[6] = 1.0
        return ref

    __call__ = sample

    def acceleration(self, t: float) -> np.ndarray:
        th = self.omega * t
        a = -self.speed * self.omega
        return np.array([a * math.cos(th), a * math.sin(th), 0.0])


def reference_sample(traj: ReferenceTrajectory, t: float) -> np.ndarray:
    return traj.sample(t)


_PLANT_ARGS: dict = {}


def _plant_args(params: QuadParams, mass: float) -> tuple:
    key = (float(mass), params.inertia.tobytes(), np.asarray(params.gravity, dtype=float).tobytes())
    args = _PLANT_ARGS.get(key)
    if args is None:
        p = params.with_mass(mass)
        Ws, bs = _kernels.empty_stack(DEFAULT_LAYER_DIMS)
        args = (float(p.mass), p.inertia, p.inertia_inv, np.asarray(p.gravity, dtype=float), Ws, bs)
        _PLANT_ARGS[key] = args
    return args


def plant_step(x, u, t: float, dt: float, schedule: MassSchedule, params: QuadParams) -> np.ndarray:
    """True plant: one RK4 step at the scheduled mass, quaternion renormalized."""
    mass = schedule.multiplier(t) * params.mass
    xn = _kernels.rk4_step(
        np.asarray(x, dtype=float), np.asarray(u, dtype=float), dt, *_plant_args(params, mass), True
    )
    if not np.all(np.isfinite(xn)):
        raise NumericalError(f"plant state became non-finite at t={t:.4f}")
    return xn


@dataclass(frozen=True)
class GeoGains:
    """Force gains in N/m and N/(m/s); torque gains in N*m/rad and N*m/(rad/s).

    Tuned once on the nominal 32 g vehicle at hover: the translational loop
    has natural frequency 2.5 rad/s with damping 0.9, the attitude loop
    20 rad/s with damping 0.9.
    """

    position: tuple = (0.2, 0.2, 0.2)
    velocity: tuple = (0.144, 0.144, 0.144)
    attitude: tuple = (5.6e-3, 5.6e-3, 8.8e-3)
    rate: tuple = (5.0e-4, 5.0e-4, 7.9e-4)

    def __post_init__(self):
        for name in ("position", "velocity", "attitude", "rate"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,))
            if np.any(v <= 0):
                raise ValueError(f"geometric gain '{name}' must be positive")
            object.__setattr__(self, name, tuple(float(a) for a in v))


def _vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def geometric_control(x, ref, gains: GeoGains, params: QuadParams, ref_acc=None) -> np.ndarray:
    """Thrust/moment command of an SE(3) tracking law with zero yaw.

    The desired force is PD on position plus gravity and acceleration
    feedforward; thrust is its projection on the body z axis and moments
    come from attitude/rate PD toward the orientation aligning body z with
    that force.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    a_ref = np.zeros(3) if ref_acc is None else np.asarray(ref_acc, dtype=float)
    m = params.mass
    e_pos = ref[POS] - x[POS]
    e_vel = ref[VEL] - x[VEL]
    force = (
        np.asarray(gains.position) * e_pos
        + np.asarray(gains.velocity) * e_vel
        + m * a_ref
        - m * np.asarray(params.gravity)
    )
    Rb = rotation_from_quaternion(x[QUAT])
    eta = float(force @ Rb[:, 2])

    norm = np.linalg.norm(force)
    b3 = force / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
    b2 = np.cross(b3, np.array([1.0, 0.0, 0.0]))
    b2 /= np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    Rd = np.column_stack([b1, b2, b3])
    e_R = 0.5 * _vee(Rd.T @ Rb - Rb.T @ Rd)
    w = x[RATE]
    tau = -np.asarray(gains.attitude) * e_R - np.asarray(gains.rate) * w + np.cross(w, params.inertia @ w)

    u = np.concatenate([[eta], tau])
    return np.clip(u, params.u_min, params.u_max)


@dataclass(frozen=True)
class Scenario:
    radius: float = 3.0
    speed: float = 1.0
    altitude: float = 0.0
    center: tuple = (0.0, 0.0)
    schedule: MassSchedule = field(default_factory=MassSchedule)

    @property
    def reference(self) -> ReferenceTrajectory:
        return ReferenceTrajectory(self.radius, self.speed, self.altitude, self.center)

    @property
    def label(self) -> str:
        return f"R{self.radius:g}_v{self.speed:g}"


@dataclass(frozen=True, eq=False)
class EpisodeSettings:
    """Episode settings shared by every scenario and method of a run."""

    params: QuadParams = field(default_factory=QuadParams)
    ocp: OcpConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    gains: GeoGains = field(default_factory=GeoGains)
    t_N: float = 8.0
    dt: float = 0.002
    t_col: float = 0.15
    capacity: int = 3
    layer_dims: tuple = DEFAULT_LAYER_DIMS
    training_latency: float = 0.05
    scheduler: str = "sync"
    offline_window: float = 5.0
    offline_stride: int = 5
    offline_epochs: int = 600

    def __post_init__(self):
        if self.ocp is None:
            object.__setattr__(self, "ocp", OcpConfig.quadrotor(self.params))
        steps_per(self.ocp.dt, self.dt, "dt_mpc")
        steps_per(self.t_col, self.dt, "t_col")
        steps_per(self.t_N, self.dt, "t_N")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.offline_window > self.t_N + _TIME_EPS:
            raise ValueError("offline_window must not exceed t_N")
        if self.offline_stride < 1 or steps_per(self.ocp.dt, self.dt) % self.offline_stride:
            raise ValueError("offline_stride must divide the number of plant steps per control step")

    @property
    def dt_mpc(self) -> float:
        return self.ocp.dt


@dataclass(eq=False)
class EpisodeLog:
    """Per-plant-step histories plus the event list of one closed-loop run.

    ``iterations``/``converged`` describe the solve whose first input is
    being applied (zero iterations for the geometric controller).
    """

    method: str
    scenario: Scenario
    seed: int
    t: np.ndarray
    states: np.ndarray
    refs: np.ndarray
    controls: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    versions: np.ndarray
    events: list = field(default_factory=list)
    fingerprint: str = ""
    failed: bool = False
    final_model: EnsembleModel | None = field(default=None, repr=False)
    published_models: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.t.size

    def to_batch(self, t_a: float = 0.0, t_b: float = float("inf")) -> DataBatch:
        keep = (self.t >= t_a - _TIME_EPS) & (self.t < t_b - _TIME_EPS)
        dt = float(self.t[1] - self.t[0]) if len(self) > 1 else 1.0
        dt = round(dt, 12)
        return DataBatch(self.t[keep], self.states[keep], self.controls[keep], dt)

    def with_seed(self, seed: int) -> "EpisodeLog":
        return replace(self, seed=seed, events=list(self.events))


def _truncate(rec: dict, n: int) -> dict:
    return {k: v[:n] for k, v in rec.items()}


def run_episode(
    method: str,
    scenario: Scenario,
    settings: EpisodeSettings | None = None,
    seed: int = 0,
    offline_model: EnsembleModel | None = None,
    fingerprint: str = "",
) -> EpisodeLog:
    """Fly one closed-loop episode of ``settings.t_N`` seconds.

    ``knode-offline`` needs ``offline_model`` (see ``offline_pipeline``).
    A numeric blow-up ends the log early with a ``failure`` event.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    s = settings or EpisodeSettings()
    params = s.params
    n = steps_per(s.t_N, s.dt, "t_N")
    k_ctrl = steps_per(s.dt_mpc, s.dt, "dt_mpc")
    ref_traj = scenario.reference
    train_cfg = replace(s.train, seed=seed)

    empty = EnsembleModel(params, s.capacity, (), 0, s.layer_dims)
    if method == "knode-offline":
        if offline_model is None:
            raise ValueError("knode-offline needs an offline_model")
        model = offline_model
    else:
        model = empty
    learner = None
    if method == "knode-online":
        learner = OnlineLearner(model, s.dt, s.t_col, train_cfg, s.training_latency, s.scheduler, s.t_N)

    rec = {
        "t": np.arange(n) * s.dt,
        "states": np.empty((n, NX)),
        "refs": np.empty((n, NX)),
        "controls": np.empty((n, NU)),
        "iterations": np.zeros(n, dtype=int),
        "converged": np.ones(n, dtype=bool),
        "versions": np.zeros(n, dtype=int),
    }
    events = []
    for bp, mult in zip(scenario.schedule.breakpoints, scenario.schedule.multipliers[1:]):
        if bp < s.t_N:
            events.append((bp, "mass-change", {"multiplier": mult}))

    x = ref_traj.sample(0.0)
    warm = None
    u = params.hover_input()
    iters, conv = 0, True
    failed = False
    n_done = n
    try:
        for i in range(n):
            t = i * s.dt
            ref = ref_traj.sample(t)
            if i % k_ctrl == 0:
                if learner is not None:
                    model = learner.model_for_step(t)
                if method == "geometric":
                    u = geometric_control(x, ref, s.gains, params, ref_traj.acceleration(t))
                    iters, conv = 0, True
                else:
                    u, sol = control_step(model, x, t, ref_traj, s.ocp, warm=warm, u_ref=params.hover_input())
                    warm = shift_warm_start(sol)
                    iters, conv = sol.iterations, sol.converged
            rec["states"][i] = x
            rec["refs"][i] = ref
            rec["controls"][i] = u
            rec["iterations"][i] = iters
            rec["converged"][i] = conv
            rec["versions"][i] = model.version
            if learner is not None:
                learner.record(t, x, u)
            x = plant_step(x, u, t, s.dt, scenario.schedule, params)
            if np.linalg.norm(x[POS] - ref_traj.sample(t + s.dt)[POS]) > DIVERGENCE_RADIUS:
                raise NumericalError(f"position error exceeded {DIVERGENCE_RADIUS} m")
    except (NumericalError, FloatingPointError) as exc:
        failed = True
        n_done = i + 1
        events.append((i * s.dt, "failure", {"reason": str(exc)}))
        log.warning("%s %s seed %d failed at t=%.3f: %s", method, scenario.label, seed, i * s.dt, exc)
    finally:
        if learner is not None:
            learner.close()

    published = []
    if learner is not None:
        events.extend(learner.events)
        published = list(learner.published)
    events.sort(key=lambda e: e[0])
    rec = _truncate(rec, n_done)
    return EpisodeLog(
        method=method, scenario=scenario, seed=seed, events=events, fingerprint=fingerprint,
        failed=failed, final_model=model, published_models=published, **rec,
    )


def offline_pipeline(
    scenario: Scenario,
    settings: EpisodeSettings | None = None,
    seed: int = 0,
    nominal_log: EpisodeLog | None = None,
) -> EnsembleModel:
    """Fit a single frozen member on nominal-MPC flight data from ``[0, offline_window)``.

    The data is thinned to every ``offline_stride``-th plant sample; the
    stride divides the control period, so each training pair still sees a
    held input. A pre-computed nominal log can be passed to skip the flight.
    """
    s = settings or EpisodeSettings()
    if nominal_log is None:
        short = replace(s, t_N=s.offline_window)
        nominal_log = run_episode("mpc-nominal", scenario, short, seed)
    if nominal_log.failed:
        raise NumericalError("nominal flight for offline data collection failed")
    batch = nominal_log.to_batch(0.0, s.offline_window)
    thinned = DataBatch(
        batch.times[:: s.offline_stride], batch.states[:: s.offline_stride],
        batch.controls[:: s.offline_stride], round(batch.dt * s.offline_stride, 12),
    )
    empty = EnsembleModel(s.params, s.capacity, (), 0, s.layer_dims)
    cfg = replace(s.train, seed=seed, epochs=s.offline_epochs)
    model, report = train_member(empty, thinned, cfg)
    log.info("offline member: loss %.3e -> %.3e", report.initial_loss, report.final_loss)
    return model


def mse(log_: EpisodeLog, window=(0.0, float("inf"))) -> dict:
    """Per-axis mean squared position error over ``window`` and their mean."""
    t_a, t_b = window
    keep = (log_.t >= t_a - _TIME_EPS) & (log_.t < t_b - _TIME_EPS)
    if not np.any(keep):
        raise ValueError(f"no samples in window [{t_a}, {t_b})")
    err = log_.states[keep, :3] - log_.refs[keep, :3]
    per_axis = np.mean(err**2, axis=0)
    return {"overall": float(per_axis.mean()), "x": float(per_axis[0]), "y": float(per_axis[1]), "z": float(per_axis[2])}


def one_step_loss(model: EnsembleModel, log_: EpisodeLog, window) -> float:
    """One-step prediction loss of ``model`` on the flight data inside ``window``."""
    return knode_loss(model, log_.to_batch(*window))
