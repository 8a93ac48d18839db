"""Hybrid physics + residual-network dynamics model.

The model derivative is the physics derivative plus a forgetting-weighted sum
of residual MLP outputs. Members live in a fixed-capacity FIFO queue; the
newest member has age 0 and weight ``exp(0) = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .dynamics import (
    NU,
    NX,
    NZ,
    QUAT,
    QuadParams,
    nominal_jacobian,
    state_derivative,
    _require_finite,
)
from . import _kernels
from .mlp import DEFAULT_LAYER_DIMS, Mlp, unpack


def forgetting_weight(age: int) -> float:
    if age < 0:
        raise ValueError(f"age must be non-negative, got {age}")
    return math.exp(-age)


class MemberStack:
    """All queue members evaluated at once, with weights folded into the output layer."""

    def __init__(self, members, weights):
        self._build([m.params for m in members], members[0].layer_dims, weights)

    @classmethod
    def single(cls, params, layer_dims) -> "MemberStack":
        """Stack holding one net given by its flat parameters, weight 1."""
        stack = cls.__new__(cls)
        stack._build([params], tuple(layer_dims), [1.0])
        return stack

    def _build(self, flat_params, dims, weights):
        self.n = len(flat_params)
        self.dims = dims
        per_member = [unpack(p, dims) for p in flat_params]
        w = np.asarray(weights, dtype=float)
        self.weights = w
        self.W = []
        self.b = []
        n_layers = len(self.dims) - 1
        for li in range(n_layers):
            W = np.stack([layers[li][0] for layers in per_member])
            b = np.stack([layers[li][1] for layers in per_member])
            if li == n_layers - 1:
                W = W * w[:, None, None]
                b = b * w[:, None]
            self.W.append(W)
            self.b.append(b)
        self.WT = [W.transpose(0, 2, 1) for W in self.W]

    def forward(self, z):
        h = z
        for WT, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ WT + b[:, None, :])
        return (h @ self.WT[-1] + self.b[-1][:, None, :]).sum(axis=0)

    def forward_cached(self, z):
        hs = [z]
        h = z
        for WT, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ WT + b[:, None, :])
            hs.append(h)
        out = (h @ self.WT[-1] + self.b[-1][:, None, :]).sum(axis=0)
        return out, hs

    def backward(self, hs, g, newest: bool = True):
        """VJP of the weighted output sum.

        Returns the input cotangent ``(B, 17)`` and, if ``newest``, the
        parameter gradient of the newest member's *unweighted* net.
        """
        n_layers = len(self.W)
        gh = np.broadcast_to(g, (self.n,) + g.shape)
        grads = []
        for li in range(n_layers - 1, -1, -1):
            h_in = hs[li]
            if newest:
                h_last = h_in if h_in.ndim == 2 else h_in[-1]
                gw = gh[-1].T @ h_last
                gb = gh[-1].sum(axis=0)
                if li == n_layers - 1:
                    gw = gw * self.weights[-1]
                    gb = gb * self.weights[-1]
                grads.append((gw, gb))
            gin = gh @ self.W[li]
            if li > 0:
                gin = gin * (1.0 - hs[li] ** 2)
            gh = gin
        gz = gh.sum(axis=0)
        if not newest:
            return gz, None
        grads.reverse()
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return gz, flat

    def jacobian(self, z):
        """Input Jacobian of the weighted sum, shape ``(B, out, in)``."""
        h = z
        ds = []
        for WT, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ WT + b[:, None, :])
            ds.append(1.0 - h * h)
        J = self.W[0][:, None, :, :]
        for li in range(1, len(self.W)):
            J = ds[li - 1][..., None] * J
            J = self.W[li][:, None, :, :] @ J
        return J.sum(axis=0)


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """Immutable snapshot of the hybrid model.

    ``members`` is ordered oldest first. ``version`` increases by one on
    every push so consumers can detect stale snapshots.
    """

    params: QuadParams = field(default_factory=QuadParams)
    capacity: int = 3
    members: tuple = ()
    version: int = 0
    layer_dims: tuple = DEFAULT_LAYER_DIMS

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be at least 1")
        dims = tuple(self.layer_dims)
        if dims[0] != NZ or dims[-1] != NX:
            raise ValueError(f"residual nets must map {NZ} -> {NX}, got {dims}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.members) > self.capacity:
            raise ValueError("more members than queue capacity")
        for m in self.members:
            if m.layer_dims != dims:
                raise ValueError(f"member dims {m.layer_dims} do not match {dims}")

    @property
    def ages(self) -> list[int]:
        n = len(self.members)
        return [n - 1 - k for k in range(n)]

    @property
    def weights(self) -> np.ndarray:
        return np.array([forgetting_weight(a) for a in self.ages])

    @cached_property
    def stack(self) -> MemberStack | None:
        if not self.members:
            return None
        return MemberStack(self.members, self.weights)

    @cached_property
    def kernel_args(self) -> tuple:
        """Arguments for the compiled single-trajectory kernels."""
        p = self.params
        if self.stack is None:
            Ws, bs = _kernels.empty_stack(self.layer_dims)
        else:
            Ws = tuple(np.ascontiguousarray(W) for W in self.stack.W)
            bs = tuple(np.ascontiguousarray(b) for b in self.stack.b)
        return (
            float(p.mass), np.ascontiguousarray(p.inertia), np.ascontiguousarray(p.inertia_inv),
            np.ascontiguousarray(p.gravity), Ws, bs,
        )

    def push(self, net: Mlp) -> "EnsembleModel":
        if net.layer_dims != self.layer_dims:
            raise ValueError(f"net dims {net.layer_dims} do not match ensemble dims {self.layer_dims}")
        members = (self.members + (net,))[-self.capacity :]
        return EnsembleModel(self.params, self.capacity, members, self.version + 1, self.layer_dims)

    def replace_newest(self, net: Mlp) -> "EnsembleModel":
        """Same snapshot with the newest member's parameters swapped (used while training)."""
        if not self.members:
            raise ValueError("no member to replace")
        return EnsembleModel(
            self.params, self.capacity, self.members[:-1] + (net,), self.version, self.layer_dims
        )

    # -- evaluation ----------------------------------------------------------

    def derivative(self, x, u) -> np.ndarray:
        """Unchecked hybrid derivative for state/control arrays (batched)."""
        f = state_derivative(x, u, self.params)
        if self.stack is not None:
            f = f + self.stack.forward(np.concatenate([x, u], axis=-1))
        return f

    def jacobian(self, x, u) -> np.ndarray:
        """Jacobian of the hybrid derivative w.r.t. ``z``, shape ``(B, 13, 17)``."""
        J = nominal_jacobian(x, u, self.params)
        if self.stack is not None:
            J = J + self.stack.jacobian(np.concatenate([x, u], axis=-1))
        return J

    def discretize(self, dt: float) -> "DiscreteModel":
        return discretize(self, dt)

    def __repr__(self):
        return (
            f"EnsembleModel(version={self.version}, members={len(self.members)}/"
            f"{self.capacity}, layer_dims={self.layer_dims})"
        )


def hybrid_derivative(model: EnsembleModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != NZ:
        raise ValueError(f"augmented state must have trailing dim {NZ}, got {z.shape}")
    _require_finite("augmented state", z)
    batched = z.ndim > 1
    zb = np.atleast_2d(z)
    out = model.derivative(zb[:, :NX], zb[:, NX:])
    return out if batched else out[0]


def push_member(model: EnsembleModel, net: Mlp) -> EnsembleModel:
    return model.push(net)


class DiscreteModel:
    """``x+ = normalize(RK4(x, u, dt))`` for a continuous-time model.

    Anything exposing ``derivative(x, u)`` and ``jacobian(x, u)`` on batched
    arrays can be wrapped, so the MPC sees one interface.
    """

    nx = NX
    nu = NU

    def __init__(self, model, dt: float, normalize: bool = True):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.model = model
        self.dt = float(dt)
        self.normalize = normalize

    def __call__(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim == 1
        args = getattr(self.model, "kernel_args", None)
        if single and args is not None:
            return _kernels.rk4_step(x, u, self.dt, *args, self.normalize)
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(u)
        f = self.model.derivative
        h = self.dt
        k1 = f(xb, ub)
        k2 = f(xb + 0.5 * h * k1, ub)
        k3 = f(xb + 0.5 * h * k2, ub)
        k4 = f(xb + h * k3, ub)
        xn = xb + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if self.normalize:
            xn[:, QUAT] /= np.linalg.norm(xn[:, QUAT], axis=1, keepdims=True)
        return xn[0] if single else xn

    def rollout(self, x0, U) -> np.ndarray:
        """States ``x_0..x_N`` from ``x0`` under the control sequence ``U``."""
        args = getattr(self.model, "kernel_args", None)
        x0 = np.asarray(x0, dtype=float)
        U = np.asarray(U, dtype=float)
        if args is not None and self.normalize:
            return _kernels.rollout(x0, U, self.dt, *args)
        X = np.empty((U.shape[0] + 1, x0.size))
        X[0] = x0
        for i in range(U.shape[0]):
            X[i + 1] = self(X[i], U[i])
        return X

    def linearize(self, x, u):
        """Batched step plus ``A = dx+/dx`` and ``B = dx+/du``."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        ub = np.atleast_2d(np.asarray(u, dtype=float))
        args = getattr(self.model, "kernel_args", None)
        if args is not None and self.normalize:
            return _kernels.linearize(np.ascontiguousarray(xb), np.ascontiguousarray(ub), self.dt, *args)
        return self._linearize_numpy(xb, ub)

    def _linearize_numpy(self, xb, ub):
        n = xb.shape[0]
        h = self.dt
        f = self.model.derivative
        jac = self.model.jacobian
        eye = np.broadcast_to(np.eye(NX), (n, NX, NX))

        k1 = f(xb, ub)
        J1 = jac(xb, ub)
        dk1x, dk1u = J1[:, :, :NX], J1[:, :, NX:]

        s2 = xb + 0.5 * h * k1
        k2 = f(s2, ub)
        J2 = jac(s2, ub)
        ds2x = eye + 0.5 * h * dk1x
        ds2u = 0.5 * h * dk1u
        dk2x = J2[:, :, :NX] @ ds2x
        dk2u = J2[:, :, :NX] @ ds2u + J2[:, :, NX:]

        s3 = xb + 0.5 * h * k2
        k3 = f(s3, ub)
        J3 = jac(s3, ub)
        ds3x = eye + 0.5 * h * dk2x
        ds3u = 0.5 * h * dk2u
        dk3x = J3[:, :, :NX] @ ds3x
        dk3u = J3[:, :, :NX] @ ds3u + J3[:, :, NX:]

        s4 = xb + h * k3
        k4 = f(s4, ub)
        J4 = jac(s4, ub)
        ds4x = eye + h * dk3x
        ds4u = h * dk3u
        dk4x = J4[:, :, :NX] @ ds4x
        dk4u = J4[:, :, :NX] @ ds4u + J4[:, :, NX:]

        xn = xb + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A = eye + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
        B = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)

        if self.normalize:
            q = xn[:, QUAT]
            nq = np.linalg.norm(q, axis=1)
            qh = q / nq[:, None]
            N = (np.eye(4) - qh[:, :, None] * qh[:, None, :]) / nq[:, None, None]
            A = A.copy()
            A[:, QUAT, :] = N @ A[:, QUAT, :]
            B[:, QUAT, :] = N @ B[:, QUAT, :]
            xn[:, QUAT] = qh
        return xn, A, B


def discretize(model: EnsembleModel, dt: float) -> DiscreteModel:
    return DiscreteModel(model, dt)
