"""Rigid-body quadrotor model with quaternion helpers and a fixed-step RK4.

State layout (13): ``[r(3), v(3), q(4), w(3)]`` with ``q = (w, x, y, z)``
rotating body vectors into the world frame. Control layout (4):
``[eta, tau_x, tau_y, tau_z]`` with collective thrust along body +z.

Every function here works on flat arrays and also broadcasts over a
leading batch axis, which is what the trainer and the MPC linearization use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

NX = 13
NU = 4
NZ = NX + NU

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
RATE = slice(10, 13)

GRAVITY = 9.81


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters of the quadrotor.

    ``torque_max`` is the symmetric per-axis moment cap; thrust bounds default
    to ``[0, 2 m g]``.
    """

    mass: float = 0.032
    inertia: np.ndarray = field(
        default_factory=lambda: np.diag([1.4e-5, 1.4e-5, 2.2e-5])
    )
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))
    thrust_max: float | None = None
    torque_max: float = 2e-3

    def __post_init__(self):
        inertia = np.array(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        gravity = np.array(self.gravity, dtype=float)
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "gravity", gravity)
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ValueError("inertia must be positive definite")
        if gravity.shape != (3,):
            raise ValueError("gravity must be a 3-vector")
        if self.thrust_max is None:
            object.__setattr__(self, "thrust_max", 2.0 * self.mass * self.g)
        object.__setattr__(self, "inertia_inv", np.linalg.inv(inertia))

    @property
    def g(self) -> float:
        return float(np.linalg.norm(self.gravity))

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g

    @property
    def u_min(self) -> np.ndarray:
        t = self.torque_max
        return np.array([0.0, -t, -t, -t])

    @property
    def u_max(self) -> np.ndarray:
        t = self.torque_max
        return np.array([self.thrust_max, t, t, t])

    def hover_input(self) -> np.ndarray:
        return np.array([self.hover_thrust, 0.0, 0.0, 0.0])

    def with_mass(self, mass: float) -> "QuadParams":
        return QuadParams(
            mass=mass,
            inertia=self.inertia,
            gravity=self.gravity,
            thrust_max=self.thrust_max,
            torque_max=self.torque_max,
        )

    def __eq__(self, other):
        if not isinstance(other, QuadParams):
            return NotImplemented
        return (
            self.mass == other.mass
            and np.array_equal(self.inertia, other.inertia)
            and np.array_equal(self.gravity, other.gravity)
            and self.thrust_max == other.thrust_max
            and self.torque_max == other.torque_max
        )

    __hash__ = None


class QuadState(NamedTuple):
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.r, self.v, self.q, self.w]).astype(float)

    @classmethod
    def from_flat(cls, x) -> "QuadState":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"expected a flat state of length {NX}, got {x.shape}")
        return cls(x[POS].copy(), x[VEL].copy(), x[QUAT].copy(), x[RATE].copy())


class ControlInput(NamedTuple):
    eta: float
    tau: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([[self.eta], self.tau]).astype(float)

    @classmethod
    def from_flat(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        if u.shape != (NU,):
            raise ValueError(f"expected a flat control of length {NU}, got {u.shape}")
        return cls(float(u[0]), u[1:].copy())


def hover_state(position=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(NX)
    x[POS] = position
    x[VEL] = velocity
    x[6] = 1.0
    return x


def augment(x, u) -> np.ndarray:
    """Concatenate state and control into ``z = [x, u]`` (batched or not)."""
    return np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)], axis=-1)


def split(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != NZ:
        raise ValueError(f"augmented state must have trailing dim {NZ}, got {z.shape}")
    return z[..., :NX], z[..., NX:]


def _require_finite(name: str, a: np.ndarray):
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(a)))[0].tolist()
        raise NumericalError(f"{name} has a non-finite component at index {bad}")


# --- quaternions -------------------------------------------------------------


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product ``p ⊗ q`` for scalar-first quaternions."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def rotation_from_quaternion(q) -> np.ndarray:
    """Body-to-world rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1)
    if np.any(n < 1e-12):
        raise ValueError("cannot build a rotation from a zero quaternion")
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def normalize_quaternion(x) -> np.ndarray:
    """Return a copy of state ``x`` (or a batch of states) with unit quaternion."""
    x = np.array(x, dtype=float)
    n = np.linalg.norm(x[..., QUAT], axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("quaternion norm below 1e-12, cannot normalize")
    x[..., QUAT] = x[..., QUAT] / n
    return x


# --- equations of motion -----------------------------------------------------


def _cross(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def state_derivative(x, u, params: QuadParams, mass: float | None = None) -> np.ndarray:
    """Unchecked rigid-body derivative; ``mass`` overrides ``params.mass``."""
    m = params.mass if mass is None else mass
    out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (NX,))
    qw, qx, qy, qz = x[..., 6], x[..., 7], x[..., 8], x[..., 9]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]
    a = u[..., 0] / m
    out[..., 0:3] = x[..., VEL]
    g = params.gravity
    out[..., 3] = g[0] + 2.0 * (qx * qz + qw * qy) * a
    out[..., 4] = g[1] + 2.0 * (qy * qz - qw * qx) * a
    out[..., 5] = g[2] + (1.0 - 2.0 * (qx * qx + qy * qy)) * a
    out[..., 6] = -0.5 * (qx * wx + qy * wy + qz * wz)
    out[..., 7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[..., 8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[..., 9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    w = x[..., RATE]
    out[..., 10:13] = (u[..., 1:4] - _cross(w, w @ params.inertia.T)) @ params.inertia_inv.T
    return out


def nominal_derivative(x, u, params: QuadParams) -> np.ndarray:
    """Time derivative of the state under the physics model.

    Raises ``NumericalError`` on any non-finite input.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != NX or u.shape[-1] != NU:
        raise ValueError(f"expected state/control trailing dims {NX}/{NU}, got {x.shape}/{u.shape}")
    _require_finite("state", x)
    _require_finite("control", u)
    return state_derivative(x, u, params)


def nominal_jacobian(x, u, params: QuadParams) -> np.ndarray:
    """Jacobian of the nominal derivative w.r.t. ``z = [x, u]``, shape (..., 13, 17)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    J = np.zeros(x.shape[:-1] + (NX, NZ))
    qw, qx, qy, qz = x[..., 6], x[..., 7], x[..., 8], x[..., 9]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]
    m = params.mass
    a = u[..., 0] / m

    J[..., 0, 3] = J[..., 1, 4] = J[..., 2, 5] = 1.0

    # acceleration: d(body_z * eta / m)/dq and d/d(eta)
    a2 = 2.0 * a
    J[..., 3, 6] = a2 * qy
    J[..., 3, 7] = a2 * qz
    J[..., 3, 8] = a2 * qw
    J[..., 3, 9] = a2 * qx
    J[..., 4, 6] = -a2 * qx
    J[..., 4, 7] = -a2 * qw
    J[..., 4, 8] = a2 * qz
    J[..., 4, 9] = a2 * qy
    J[..., 5, 7] = -2.0 * a2 * qx
    J[..., 5, 8] = -2.0 * a2 * qy
    J[..., 3, 13] = 2.0 * (qx * qz + qw * qy) / m
    J[..., 4, 13] = 2.0 * (qy * qz - qw * qx) / m
    J[..., 5, 13] = (1.0 - 2.0 * (qx * qx + qy * qy)) / m

    # quaternion kinematics: qdot = 0.5 * Omega(w) q, and its w-derivative
    hx, hy, hz = 0.5 * wx, 0.5 * wy, 0.5 * wz
    J[..., 6, 7], J[..., 6, 8], J[..., 6, 9] = -hx, -hy, -hz
    J[..., 7, 6], J[..., 7, 8], J[..., 7, 9] = hx, hz, -hy
    J[..., 8, 6], J[..., 8, 7], J[..., 8, 9] = hy, -hz, hx
    J[..., 9, 6], J[..., 9, 7], J[..., 9, 8] = hz, hy, -hx
    pw, px, py, pz = 0.5 * qw, 0.5 * qx, 0.5 * qy, 0.5 * qz
    J[..., 6, 10], J[..., 6, 11], J[..., 6, 12] = -px, -py, -pz
    J[..., 7, 10], J[..., 7, 11], J[..., 7, 12] = pw, -pz, py
    J[..., 8, 10], J[..., 8, 11], J[..., 8, 12] = pz, pw, -px
    J[..., 9, 10], J[..., 9, 11], J[..., 9, 12] = -py, px, pw

    # w x Iw has derivative [w]x I - [Iw]x
    w = x[..., RATE]
    Iw = w @ params.inertia.T
    J[..., 10:13, 10:13] = -params.inertia_inv @ (_skew(w) @ params.inertia - _skew(Iw))
    J[..., 10:13, 14:17] = params.inertia_inv
    return J


def _skew(a):
    a = np.asarray(a, dtype=float)
    z = np.zeros_like(a[..., 0])
    return np.stack(
        [
            np.stack([z, -a[..., 2], a[..., 1]], axis=-1),
            np.stack([a[..., 2], z, -a[..., 0]], axis=-1),
            np.stack([-a[..., 1], a[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


# --- integration -------------------------------------------------------------


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], z0, t0: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``dz/dt = f(t, z)``.

    Quaternion blocks are not renormalized here; callers that carry one do it.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z0 = np.asarray(z0, dtype=float)
    k1 = f(t0, z0)
    _check_stage(k1, 1)
    k2 = f(t0 + 0.5 * dt, z0 + 0.5 * dt * k1)
    _check_stage(k2, 2)
    k3 = f(t0 + 0.5 * dt, z0 + 0.5 * dt * k2)
    _check_stage(k3, 3)
    k4 = f(t0 + dt, z0 + dt * k3)
    _check_stage(k4, 4)
    return z0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_stage(k, stage):
    if not np.all(np.isfinite(k)):
        raise NumericalError(f"RK4 stage {stage} produced a non-finite derivative")


def nominal_state_vjp(x, u, g, params: QuadParams) -> np.ndarray:
    """``g @ d f_nominal / d x`` for batched states, without forming the Jacobian."""
    qw, qx, qy, qz = x[..., 6], x[..., 7], x[..., 8], x[..., 9]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]
    out = np.zeros(x.shape)
    out[..., 3:6] = g[..., 0:3]

    ga = g[..., 3:6] * (2.0 * u[..., 0:1] / params.mass)
    g0, g1, g2 = ga[..., 0], ga[..., 1], ga[..., 2]
    h = 0.5 * g[..., 6:10]
    h0, h1, h2, h3 = h[..., 0], h[..., 1], h[..., 2], h[..., 3]
    out[..., 6] = g0 * qy - g1 * qx + h1 * wx + h2 * wy + h3 * wz
    out[..., 7] = g0 * qz - g1 * qw - 2.0 * g2 * qx - h0 * wx - h2 * wz + h3 * wy
    out[..., 8] = g0 * qw + g1 * qz - 2.0 * g2 * qy - h0 * wy + h1 * wz - h3 * wx
    out[..., 9] = g0 * qx + g1 * qy - h0 * wz - h1 * wy + h2 * wx
    out[..., 10] = -h0 * qx + h1 * qw + h2 * qz - h3 * qy
    out[..., 11] = -h0 * qy - h1 * qz + h2 * qw + h3 * qx
    out[..., 12] = -h0 * qz + h1 * qy - h2 * qx + h3 * qw

    # w x Iw has derivative [w]x I - [Iw]x; pull g back through -I^-1 (...)
    gi = -(g[..., 10:13] @ params.inertia_inv)
    w = x[..., RATE]
    Iw = w @ params.inertia.T
    # for a row vector, gi @ [a]x == gi x a
    out[..., 10:13] += _cross(gi, w) @ params.inertia - _cross(gi, Iw)
    return out
