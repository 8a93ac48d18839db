"""Timestamped flight data batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NU, NX


@dataclass(frozen=True, eq=False)
class DataBatch:
    """Uniformly sampled ``(t, x, u)`` records collected under one model version.

    ``controls[i]`` is the input held over ``[times[i], times[i] + dt)``.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dt: float
    model_version: int = 0
    clean: bool = True

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        u = np.asarray(self.controls, dtype=float)
        if x.ndim != 2 or x.shape[1] != NX or u.shape != (x.shape[0], NU) or t.shape != (x.shape[0],):
            raise ValueError(f"inconsistent batch shapes t{t.shape} x{x.shape} u{u.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if t.size > 1 and np.any(np.abs(np.diff(t) - self.dt) > 1e-9):
            raise ValueError("batch timestamps must be uniformly spaced by dt")
        for name, a in (("times", t), ("states", x), ("controls", u)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.times.size

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Inputs ``z_i = [x_i, u_i]`` and targets ``x_{i+1}`` for every consecutive pair."""
        z = np.concatenate([self.states[:-1], self.controls[:-1]], axis=1)
        return z, self.states[1:]

    def slice(self, start: int, stop: int) -> "DataBatch":
        return DataBatch(
            self.times[start:stop], self.states[start:stop], self.controls[start:stop],
            self.dt, self.model_version, self.clean,
        )

    @classmethod
    def from_samples(cls, samples, dt, model_version=0, clean=True) -> "DataBatch":
        """Build from an iterable of ``(t, state, control)`` tuples."""
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, NX)), np.zeros((0, NU)), dt, model_version, clean)
        t, x, u = zip(*samples)
        return cls(np.array(t), np.array(x), np.array(u), dt, model_version, clean)
