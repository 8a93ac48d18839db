"""Online data collection feeding a trainer mailbox, with model hot-swapping.

The control loop appends one sample per plant step to a collector. Every
``t_col`` seconds a clean buffer is handed to the trainer through a
capacity-one mailbox. The trainer fits a new ensemble member on the snapshot
the data came from and publishes the result ``training_latency`` seconds of
simulated time later. The controller picks up published models only at
control-step boundaries, and a publish restarts the collection window.

Two schedulers drive the trainer. ``"sync"`` runs training inline on the
simulated clock. ``"concurrent"`` runs it on a worker thread and joins at
the simulated publish time, so both produce the same event timeline.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataBatch
from .ensemble import EnsembleModel
from .trainer import TrainConfig, TrainingError, train_member

log = logging.getLogger(__name__)

SCHEDULERS = ("sync", "concurrent")
_TIME_EPS = 1e-9


def steps_per(interval: float, dt: float, name: str = "interval") -> int:
    """Integer number of ``dt`` steps in ``interval``; raises if not a multiple."""
    k = int(round(interval / dt))
    if k < 1 or abs(k * dt - interval) > _TIME_EPS:
        raise ValueError(f"{name}={interval!r} must be a positive integer multiple of dt={dt!r}")
    return k


@dataclass
class CollectorState:
    """Rolling buffer of ``(t, x, u, version)`` samples.

    Updated in place by ``collector_step`` and ``on_model_published``; both
    also return it so callers can treat the update functionally.
    """

    t_col: float
    dt: float
    t_N: float = float("inf")
    t_s: float = 0.0
    samples: list = field(default_factory=list)
    last_t: float | None = None
    emitted: int = 0
    discarded: int = 0

    def __post_init__(self):
        self.n_col = steps_per(self.t_col, self.dt, "t_col")

    @property
    def duration(self) -> float:
        return len(self.samples) * self.dt

    def _versions(self) -> set:
        return {s[3] for s in self.samples}


def collector_step(c: CollectorState, t_i: float, sample, model_version: int):
    """Record ``sample = (x, u)`` taken at ``t_i``; return ``(c, batch or None)``.

    The window check runs before the append, so an emitted batch holds the
    ``t_col / dt`` samples of ``[t_s, t_s + t_col)``. A buffer that mixes
    model versions (or was cut short) is dropped instead of emitted.
    """
    if c.last_t is not None and t_i < c.last_t - _TIME_EPS:
        raise ValueError(f"sample time {t_i} precedes previous sample at {c.last_t}")
    c.last_t = t_i
    batch = None
    if t_i - c.t_s >= c.t_col - 0.5 * c.dt:
        if c.samples:
            versions = c._versions()
            if len(versions) == 1 and len(c.samples) == c.n_col:
                batch = DataBatch.from_samples(
                    [s[:3] for s in c.samples], c.dt, model_version=versions.pop(), clean=True
                )
                c.emitted += 1
            else:
                c.discarded += 1
        c.samples = []
        c.t_s = t_i
    x, u = sample
    c.samples.append((t_i, np.array(x, dtype=float), np.array(u, dtype=float), model_version))
    return c, batch


def on_model_published(c: CollectorState, t_i: float) -> CollectorState:
    """The controller switched models at ``t_i``: drop the buffer and restart the window."""
    if c.samples:
        c.discarded += 1
    c.samples = []
    c.t_s = t_i
    return c


@dataclass
class TrainerMailbox:
    """Capacity-one handoff between the control loop and the trainer.

    ``published_model`` is replaced atomically under ``lock``. ``in_flight``
    holds ``(batch, publish_time, result)`` for the training currently under
    way, where ``result`` is a model or a ``Future`` resolving to one.
    """

    published_model: EnsembleModel
    training_latency: float = 0.05
    pending_batch: DataBatch | None = None
    in_flight: tuple | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.training_latency < 0:
            raise ValueError("training_latency must be non-negative")

    def submit(self, batch: DataBatch) -> bool:
        """Place ``batch`` in the slot; returns True if it replaced an older one."""
        with self.lock:
            replaced = self.pending_batch is not None
            self.pending_batch = batch
        return replaced

    def publish(self, model: EnsembleModel):
        with self.lock:
            self.published_model = model

    def snapshot(self) -> EnsembleModel:
        with self.lock:
            return self.published_model


def trainer_loop_step(mb: TrainerMailbox, cfg: TrainConfig, now: float = 0.0, executor=None, events=None):
    """Advance the trainer to simulated time ``now``.

    Finishes an in-flight training whose publish time has come, then starts
    on the pending batch if the trainer is idle. With ``executor`` the fit
    runs in the background; otherwise it runs inline. Returns ``mb``.
    """
    events = events if events is not None else []
    if mb.in_flight is not None:
        batch, t_pub, result = mb.in_flight
        if now + _TIME_EPS >= t_pub:
            mb.in_flight = None
            try:
                model = result.result() if isinstance(result, Future) else result
                if isinstance(model, Exception):
                    raise model
            except TrainingError as exc:
                events.append((t_pub, "train-abort", {"version": batch.model_version, "reason": str(exc)}))
                log.warning("training aborted at t=%.3f: %s", t_pub, exc)
            else:
                mb.publish(model)
                events.append((t_pub, "publish", {"version": model.version, "members": len(model.members)}))
    if mb.in_flight is None:
        with mb.lock:
            batch, mb.pending_batch = mb.pending_batch, None
        if batch is not None:
            base = mb.snapshot()
            if batch.model_version != base.version:
                events.append((now, "stale-drop", {"version": batch.model_version, "published": base.version}))
            else:
                t_pub = now + mb.training_latency
                if executor is not None:
                    result = executor.submit(_train_or_error, base, batch, cfg)
                else:
                    result = _train_or_error(base, batch, cfg)
                mb.in_flight = (batch, t_pub, result)
                events.append((now, "train-start", {"version": base.version, "samples": len(batch)}))
    return mb


def _train_or_error(model, batch, cfg):
    try:
        return train_member(model, batch, cfg)[0]
    except TrainingError as exc:
        return exc


class OnlineLearner:
    """The collector and the trainer mailbox wired together for one episode.

    Per plant step the simulator calls ``model_for_step`` at control-step
    boundaries (to pick up published models) and ``record`` after choosing
    the control.
    """

    def __init__(
        self,
        model: EnsembleModel,
        dt: float,
        t_col: float = 0.15,
        train_cfg: TrainConfig | None = None,
        training_latency: float = 0.05,
        scheduler: str = "sync",
        t_N: float = float("inf"),
    ):
        if scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
        self.collector = CollectorState(t_col=t_col, dt=dt, t_N=t_N)
        self.mailbox = TrainerMailbox(model, training_latency)
        self.train_cfg = train_cfg or TrainConfig()
        self.scheduler = scheduler
        self.current = model
        self.events: list = []
        self.batches: list = []
        self.published: list = []
        self._executor = ThreadPoolExecutor(max_workers=1) if scheduler == "concurrent" else None

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def model_for_step(self, t_i: float) -> EnsembleModel:
        """Snapshot the controller should use from ``t_i`` on."""
        trainer_loop_step(self.mailbox, self.train_cfg, t_i, self._executor, self.events)
        latest = self.mailbox.snapshot()
        if latest.version != self.current.version:
            self.current = latest
            self.published.append(latest)
            discarded = self.collector.discarded
            on_model_published(self.collector, t_i)
            if self.collector.discarded > discarded:
                self.events.append((t_i, "batch-discard", {"reason": "model swap"}))
            self.events.append((t_i, "model-swap", {"version": latest.version}))
        return self.current

    def record(self, t_i: float, x, u):
        discarded = self.collector.discarded
        _, batch = collector_step(self.collector, t_i, (x, u), self.current.version)
        if self.collector.discarded > discarded:
            self.events.append((t_i, "batch-discard", {"reason": "mixed or incomplete"}))
        if batch is not None:
            self.batches.append(batch)
            replaced = self.mailbox.submit(batch)
            self.events.append((t_i, "batch-save", {"version": batch.model_version, "replaced": replaced}))
            trainer_loop_step(self.mailbox, self.train_cfg, t_i, self._executor, self.events)
