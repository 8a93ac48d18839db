"""Experiment configuration: YAML file <-> nested frozen dataclasses.

Every tunable constant lives here. Keys carry their units (``_s``, ``_m``,
``_kg`` ...). Loading rejects bad keys and inconsistent step sizes, naming the
offending field as ``section.key``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .dynamics import QuadParams
from .mlp import DEFAULT_LAYER_DIMS
from .mpc import ConfigError, OcpConfig
from .orchestrator import SCHEDULERS
from .sim import METHODS, EpisodeSettings, GeoGains, MassSchedule, Scenario
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class FieldError(ConfigError):
    """Config error tied to one field; ``field`` holds its dotted path."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class QuadSection:
    mass_kg: float = 0.032
    inertia_diag_kg_m2: tuple = (1.4e-5, 1.4e-5, 2.2e-5)
    gravity_m_s2: float = 9.81
    # null means twice the hover thrust
    thrust_max_N: float | None = None
    torque_max_N_m: float = 2e-3


@dataclass(frozen=True)
class EnsembleSection:
    capacity: int = 3
    layer_dims: tuple = DEFAULT_LAYER_DIMS


@dataclass(frozen=True)
class TrainerSection:
    epochs: int = 200
    learning_rate: float = 1e-3
    l2_coeff: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    output_init_scale: float = 0.0
    offline_epochs: int = 600
    offline_window_s: float = 5.0
    # keep every n-th plant sample of the offline flight; must divide dt_mpc / dt
    offline_stride: int = 5


@dataclass(frozen=True)
class OcpSection:
    horizon_steps: int = 20
    dt_mpc_s: float = 0.02
    q_pos: float = 40.0
    q_vel: float = 4.0
    q_att: float = 1.0
    q_rate: float = 0.1
    r_thrust: float = 0.5
    r_torque: float = 20.0
    terminal_scale: float = 5.0
    penalty_mu: float = 1e3
    max_iter: int = 50
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    cost_rtol: float = 0.0


@dataclass(frozen=True)
class OrchestratorSection:
    t_col_s: float = 0.15
    training_latency_s: float = 0.05
    scheduler: str = "sync"


@dataclass(frozen=True)
class GeometricSection:
    # translational loop: 2.5 rad/s natural frequency, damping 0.9, on the 32 g vehicle
    k_pos_N_per_m: tuple = (0.2, 0.2, 0.2)
    k_vel_N_s_per_m: tuple = (0.144, 0.144, 0.144)
    # attitude loop: 20 rad/s natural frequency, damping 0.9
    k_att_N_m_per_rad: tuple = (5.6e-3, 5.6e-3, 8.8e-3)
    k_rate_N_m_s_per_rad: tuple = (5.0e-4, 5.0e-4, 7.9e-4)


@dataclass(frozen=True)
class SimSection:
    dt_s: float = 0.002
    t_N_s: float = 8.0
    altitude_m: float = 0.0
    center_m: tuple = (0.0, 0.0)
    mass_breakpoints_s: tuple = (2.0, 5.0)
    mass_multipliers: tuple = (1.0, 0.5, 1.33)
    # window used for the post-change statistics
    post_change_start_s: float = 2.0


@dataclass(frozen=True)
class GridSection:
    radii_m: tuple = (2.0, 3.0, 4.0)
    speeds_m_s: tuple = (0.8, 1.0, 1.2)
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    quad: QuadSection = field(default_factory=QuadSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    ocp: OcpSection = field(default_factory=OcpSection)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)
    geometric: GeometricSection = field(default_factory=GeometricSection)
    sim: SimSection = field(default_factory=SimSection)
    grid: GridSection = field(default_factory=GridSection)
    output_dir: str = "results"

    # -- derived objects ---------------------------------------------------

    def quad_params(self) -> QuadParams:
        q = self.quad
        return QuadParams(
            mass=q.mass_kg, inertia=np.diag(q.inertia_diag_kg_m2), gravity=(0.0, 0.0, -q.gravity_m_s2),
            thrust_max=q.thrust_max_N, torque_max=q.torque_max_N_m,
        )

    def ocp_config(self, params: QuadParams | None = None) -> OcpConfig:
        o = self.ocp
        return OcpConfig.quadrotor(
            params or self.quad_params(), N=o.horizon_steps, dt=o.dt_mpc_s,
            q_pos=o.q_pos, q_vel=o.q_vel, q_att=o.q_att, q_rate=o.q_rate,
            r_thrust=o.r_thrust, r_torque=o.r_torque, terminal_scale=o.terminal_scale,
            penalty_mu=o.penalty_mu, max_iter=o.max_iter, grad_tol=o.grad_tol,
            step_tol=o.step_tol, cost_rtol=o.cost_rtol,
        )

    def train_config(self, seed: int = 0) -> TrainConfig:
        t = self.trainer
        return TrainConfig(
            epochs=t.epochs, learning_rate=t.learning_rate, l2_coeff=t.l2_coeff,
            beta1=t.beta1, beta2=t.beta2, eps=t.eps, seed=seed, output_init_scale=t.output_init_scale,
        )

    def episode_settings(self) -> EpisodeSettings:
        params = self.quad_params()
        g = self.geometric
        return EpisodeSettings(
            params=params,
            ocp=self.ocp_config(params),
            train=self.train_config(),
            gains=GeoGains(g.k_pos_N_per_m, g.k_vel_N_s_per_m, g.k_att_N_m_per_rad, g.k_rate_N_m_s_per_rad),
            t_N=self.sim.t_N_s,
            dt=self.sim.dt_s,
            t_col=self.orchestrator.t_col_s,
            capacity=self.ensemble.capacity,
            layer_dims=tuple(self.ensemble.layer_dims),
            training_latency=self.orchestrator.training_latency_s,
            scheduler=self.orchestrator.scheduler,
            offline_window=min(self.trainer.offline_window_s, self.sim.t_N_s),
            offline_stride=self.trainer.offline_stride,
            offline_epochs=self.trainer.offline_epochs,
        )

    def mass_schedule(self) -> MassSchedule:
        return MassSchedule(self.sim.mass_breakpoints_s, self.sim.mass_multipliers)

    def scenarios(self) -> list[Scenario]:
        sched = self.mass_schedule()
        return [
            Scenario(r, v, self.sim.altitude_m, tuple(self.sim.center_m), sched)
            for r in self.grid.radii_m
            for v in self.grid.speeds_m_s
        ]

    def post_change_window(self) -> tuple:
        return (self.sim.post_change_start_s, self.sim.t_N_s)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(a) for a in v]
            return v

        out = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out[f.name] = {g.name: plain(getattr(v, g.name)) for g in fields(v)}
            else:
                out[f.name] = plain(v)
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def fingerprint(self) -> str:
        """Hash of everything that can change results.

        The output directory and the scheduler are left out: both schedulers
        produce identical episodes.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d["orchestrator"].pop("scheduler")
        text = json.dumps(d, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, section: str | None = None, **changes) -> "ExperimentConfig":
        """Copy with fields changed, either top-level or inside ``section``."""
        if section is None:
            return validate(dataclasses.replace(self, **changes))
        sub = dataclasses.replace(getattr(self, section), **changes)
        return validate(dataclasses.replace(self, **{section: sub}))


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(path: str, default, value):
    """Convert a YAML value to the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise FieldError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise FieldError(path, f"expected a list, got {value!r}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(f"{path}[{i}]", proto, v) for i, v in enumerate(value))
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise FieldError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FieldError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise FieldError(path, f"expected a string, got {value!r}")
        return value
    raise FieldError(path, "unsupported field type")


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise FieldError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    kwargs = {}
    for key, value in data.items():
        if key not in _SECTIONS:
            raise FieldError(key, "unknown key")
        f = _SECTIONS[key]
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise FieldError(key, "expected a mapping")
            known = {g.name: g for g in fields(default)}
            sub = {}
            for k, v in value.items():
                if k not in known:
                    raise FieldError(f"{key}.{k}", "unknown key")
                sub[k] = _coerce(f"{key}.{k}", getattr(default, k), v)
            kwargs[key] = dataclasses.replace(default, **sub)
        else:
            kwargs[key] = _coerce(key, default, value)
    return validate(ExperimentConfig(**kwargs))


def _multiple(path: str, value: float, dt: float):
    k = round(value / dt)
    if k < 1 or abs(k * dt - value) > 1e-9:
        raise FieldError(path, f"{value!r} must be a positive integer multiple of sim.dt_s={dt!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field constraints; raises ``FieldError`` naming the field."""
    def positive(path, v):
        if not v > 0:
            raise FieldError(path, f"must be positive, got {v!r}")

    q = cfg.quad
    positive("quad.mass_kg", q.mass_kg)
    if len(q.inertia_diag_kg_m2) != 3 or any(not a > 0 for a in q.inertia_diag_kg_m2):
        raise FieldError("quad.inertia_diag_kg_m2", "needs three positive entries")
    positive("quad.gravity_m_s2", q.gravity_m_s2)
    positive("quad.torque_max_N_m", q.torque_max_N_m)
    if q.thrust_max_N is not None:
        positive("quad.thrust_max_N", q.thrust_max_N)

    e = cfg.ensemble
    if e.capacity < 1:
        raise FieldError("ensemble.capacity", "must be at least 1")
    dims = tuple(e.layer_dims)
    if len(dims) < 2 or dims[0] != 17 or dims[-1] != 13 or any(d < 1 for d in dims):
        raise FieldError("ensemble.layer_dims", f"must start at 17, end at 13, all positive; got {list(dims)}")

    t = cfg.trainer
    if t.epochs < 1:
        raise FieldError("trainer.epochs", "must be >= 1")
    if t.offline_epochs < 1:
        raise FieldError("trainer.offline_epochs", "must be >= 1")
    positive("trainer.learning_rate", t.learning_rate)
    if t.l2_coeff < 0:
        raise FieldError("trainer.l2_coeff", "must be non-negative")
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(t, name) < 1:
            raise FieldError(f"trainer.{name}", "must lie in [0, 1)")
    positive("trainer.eps", t.eps)
    positive("trainer.offline_window_s", t.offline_window_s)

    s = cfg.sim
    positive("sim.dt_s", s.dt_s)
    _multiple("sim.t_N_s", s.t_N_s, s.dt_s)
    _multiple("ocp.dt_mpc_s", cfg.ocp.dt_mpc_s, s.dt_s)
    _multiple("orchestrator.t_col_s", cfg.orchestrator.t_col_s, s.dt_s)
    per_ctrl = round(cfg.ocp.dt_mpc_s / s.dt_s)
    if t.offline_stride < 1 or per_ctrl % t.offline_stride:
        raise FieldError("trainer.offline_stride", f"must divide dt_mpc_s/dt_s = {per_ctrl}")
    if len(s.mass_multipliers) != len(s.mass_breakpoints_s) + 1:
        raise FieldError("sim.mass_multipliers", "needs one more entry than sim.mass_breakpoints_s")
    if any(not m > 0 for m in s.mass_multipliers):
        raise FieldError("sim.mass_multipliers", "must all be positive")
    bp = s.mass_breakpoints_s
    if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
        raise FieldError("sim.mass_breakpoints_s", "must be strictly increasing")
    if len(s.center_m) != 2:
        raise FieldError("sim.center_m", "needs two entries (x, y)")
    if not 0 <= s.post_change_start_s < s.t_N_s:
        raise FieldError("sim.post_change_start_s", "must lie in [0, t_N_s)")

    o = cfg.ocp
    if o.horizon_steps < 1:
        raise FieldError("ocp.horizon_steps", "must be >= 1")
    if o.max_iter < 1:
        raise FieldError("ocp.max_iter", "must be >= 1")
    for name in ("q_pos", "q_vel", "q_att", "q_rate", "terminal_scale", "penalty_mu", "cost_rtol"):
        if getattr(o, name) < 0:
            raise FieldError(f"ocp.{name}", "must be non-negative")
    positive("ocp.r_thrust", o.r_thrust)
    positive("ocp.r_torque", o.r_torque)

    orc = cfg.orchestrator
    if orc.training_latency_s < 0:
        raise FieldError("orchestrator.training_latency_s", "must be non-negative")
    if orc.scheduler not in SCHEDULERS:
        raise FieldError("orchestrator.scheduler", f"must be one of {list(SCHEDULERS)}")

    gm = cfg.geometric
    for f in fields(gm):
        v = getattr(gm, f.name)
        if len(v) != 3 or any(not a > 0 for a in v):
            raise FieldError(f"geometric.{f.name}", "needs three positive gains")

    g = cfg.grid
    if not g.radii_m or any(not r > 0 for r in g.radii_m):
        raise FieldError("grid.radii_m", "needs at least one positive radius")
    if not g.speeds_m_s or any(v < 0 for v in g.speeds_m_s):
        raise FieldError("grid.speeds_m_s", "needs at least one non-negative speed")
    if not g.methods:
        raise FieldError("grid.methods", "needs at least one method")
    for m in g.methods:
        if m not in METHODS:
            raise FieldError("grid.methods", f"unknown method {m!r}; expected one of {list(METHODS)}")
    if len(set(g.methods)) != len(g.methods):
        raise FieldError("grid.methods", "duplicate method")
    if not g.seeds or len(set(g.seeds)) != len(g.seeds):
        raise FieldError("grid.seeds", "needs at least one seed, no duplicates")
    if "knode-offline" in g.methods:
        require_offline_window(cfg)
    return cfg


def require_offline_window(cfg: ExperimentConfig):
    """The offline model needs the whole data window inside the flight."""
    if cfg.sim.t_N_s + 1e-9 < cfg.trainer.offline_window_s:
        raise FieldError(
            "sim.t_N_s",
            f"offline training needs t_N_s >= trainer.offline_window_s ({cfg.trainer.offline_window_s})",
        )


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(data if data is not None else {})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(cfg.dumps())
