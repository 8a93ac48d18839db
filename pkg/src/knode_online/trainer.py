"""One-step KNODE loss with its exact gradient, used to train new members.

Gradients are taken through the discrete RK4 step (discretize-then-optimize)
with a hand-written reverse pass. Only the newest member is trainable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import DataBatch
from .dynamics import NX, nominal_state_vjp, state_derivative
from .ensemble import EnsembleModel, MemberStack
from .mlp import Mlp

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    l2_coeff: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # last-layer init multiplier; 0 starts each new member as an exact zero residual
    output_init_scale: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class LossReport:
    initial_loss: float
    final_loss: float
    per_epoch: list = field(default_factory=list)


def one_step_predict(model: EnsembleModel, z, dt: float) -> np.ndarray:
    """RK4 over ``dt`` from ``z = [x, u]`` with ``u`` held; returns the state block."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    x, u = zb[:, :NX], zb[:, NX:]
    f = model.derivative
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return xn[0] if single else xn


def _newest_params(model: EnsembleModel) -> np.ndarray:
    return model.members[-1].params if model.members else np.zeros(0)


def knode_loss(model: EnsembleModel, batch: DataBatch, l2_coeff: float = 0.0) -> float:
    if len(batch) < 2:
        raise ValueError("a batch needs at least two samples")
    z, target = batch.pairs()
    pred = one_step_predict(model, z, batch.dt)
    theta = _newest_params(model)
    data = float(np.sum((pred - target) ** 2)) / (len(batch) - 1)
    return data + l2_coeff * float(theta @ theta)


class _Objective:
    """Loss and gradient as a function of the newest member's parameters.

    The frozen members are stacked once, and their contribution at the data
    points (the first RK4 stage) is cached across calls.
    """

    def __init__(self, model: EnsembleModel, z, target, dt: float, l2_coeff: float):
        if not model.members:
            raise ValueError("ensemble has no members; nothing to train")
        z = np.asarray(z, dtype=float)
        self.x, self.u = z[:, :NX], z[:, NX:]
        self.target = np.asarray(target, dtype=float)
        self.dt = dt
        self.l2 = l2_coeff
        self.params = model.params
        self.dims = model.layer_dims
        frozen = model.members[:-1]
        self.frozen = MemberStack(frozen, model.weights[:-1]) if frozen else None
        self.zx = z
        self.f1_fixed = state_derivative(self.x, self.u, self.params)
        if self.frozen is not None:
            self.f1_fixed = self.f1_fixed + self.frozen.forward(z)
            fWs = tuple(np.ascontiguousarray(W) for W in self.frozen.W)
            fbs = tuple(np.ascontiguousarray(b) for b in self.frozen.b)
        else:
            fWs, fbs = _kernels.empty_stack(self.dims)
        p = self.params
        self._kernel_args = (
            np.asarray(self.dims, dtype=np.int64), np.ascontiguousarray(self.x), np.ascontiguousarray(self.u),
            np.ascontiguousarray(target), float(self.dt), float(l2_coeff), float(p.mass),
            np.ascontiguousarray(p.inertia), np.ascontiguousarray(p.inertia_inv),
            np.asarray(p.gravity, dtype=float), fWs, fbs, np.ascontiguousarray(self.f1_fixed),
        )

    def _stage(self, s, newest):
        zs = np.concatenate([s, self.u], axis=1)
        f = state_derivative(s, self.u, self.params)
        out, hs = newest.forward_cached(zs)
        cache = [hs, None]
        f = f + out
        if self.frozen is not None:
            fo, fhs = self.frozen.forward_cached(zs)
            f = f + fo
            cache[1] = fhs
        return f, cache

    def _vjp(self, s, cache, newest, g):
        gz, gtheta = newest.backward(cache[0], g)
        gs = nominal_state_vjp(s, self.u, g, self.params) + gz[:, :NX]
        if cache[1] is not None:
            gs = gs + self.frozen.backward(cache[1], g, newest=False)[0][:, :NX]
        return gs, gtheta

    def __call__(self, theta):
        """``(loss, gradient)`` at the newest member's flat parameters ``theta``."""
        loss, grad = _kernels.knode_loss_grad(np.ascontiguousarray(theta, dtype=float), *self._kernel_args)
        return float(loss), grad

    def evaluate_numpy(self, theta):
        """Same as calling the objective, written with array operations (reference path)."""
        newest = MemberStack.single(theta, self.dims)
        h = self.dt
        x = self.x
        o1, hs1 = newest.forward_cached(self.zx)
        k1 = self.f1_fixed + o1
        s2 = x + 0.5 * h * k1
        k2, c2 = self._stage(s2, newest)
        s3 = x + 0.5 * h * k2
        k3, c3 = self._stage(s3, newest)
        s4 = x + h * k3
        k4, c4 = self._stage(s4, newest)
        pred = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        m = x.shape[0]
        resid = pred - self.target
        loss = float(np.sum(resid**2)) / m + self.l2 * float(theta @ theta)

        g = 2.0 * resid / m
        g1 = (h / 6.0) * g
        g23 = (h / 3.0) * g
        gs4, t4 = self._vjp(s4, c4, newest, g1)
        gs3, t3 = self._vjp(s3, c3, newest, g23 + h * gs4)
        gs2, t2 = self._vjp(s2, c2, newest, g23 + 0.5 * h * gs3)
        _, t1 = newest.backward(hs1, g1 + 0.5 * h * gs2)
        grad = t1 + t2 + t3 + t4 + 2.0 * self.l2 * theta
        return loss, grad


def loss_gradient(model: EnsembleModel, batch: DataBatch, l2_coeff: float = 0.0) -> np.ndarray:
    """Exact gradient of ``knode_loss`` w.r.t. the newest member's flat parameters."""
    if not model.members:
        raise ValueError("ensemble has no members; nothing to differentiate")
    if len(batch) < 2:
        raise ValueError("a batch needs at least two samples")
    z, target = batch.pairs()
    return _Objective(model, z, target, batch.dt, l2_coeff)(model.members[-1].params)[1]


def train_member(model: EnsembleModel, batch: DataBatch, cfg: TrainConfig) -> tuple[EnsembleModel, LossReport]:
    """Push a freshly initialized member and fit it with full-batch Adam.

    Older members and the physics model stay frozen. The best parameters seen
    over all epochs are kept, so ``final_loss <= initial_loss``.
    """
    if len(batch) < 2:
        raise ValueError("a batch needs at least two samples")
    z, target = batch.pairs()
    return fit_new_member(model, z, target, batch.dt, cfg)


def fit_new_member(model: EnsembleModel, z, target, dt: float, cfg: TrainConfig):
    """``train_member`` on explicit ``(z_i, x_{i+1})`` pairs sharing one step ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng([cfg.seed, model.version])
    net = Mlp.initialize(model.layer_dims, rng, output_scale=cfg.output_init_scale)
    trial = model.push(net)
    objective = _Objective(trial, z, target, dt, cfg.l2_coeff)

    theta = net.params.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    best_theta, best_loss = theta.copy(), np.inf
    per_epoch = []
    initial = None
    for epoch in range(1, cfg.epochs + 1):
        loss, grad = objective(theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingError(f"non-finite loss or gradient at epoch {epoch}")
        if initial is None:
            initial = loss
        per_epoch.append(loss)
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
        mhat = m1 / (1 - cfg.beta1**epoch)
        vhat = m2 / (1 - cfg.beta2**epoch)
        theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)

    last = objective(theta)[0]
    if np.isfinite(last) and last < best_loss:
        best_loss, best_theta = last, theta
    if not np.isfinite(best_loss):
        raise TrainingError("training never produced a finite loss")
    trained = trial.replace_newest(net.with_params(best_theta))
    log.debug("trained member v%d: loss %.3e -> %.3e", trained.version, initial, best_loss)
    return trained, LossReport(float(initial), float(best_loss), per_epoch)
