"""Receding-horizon nonlinear MPC by direct single shooting.

The optimal control problem over ``N`` inputs is solved with a projected
Gauss-Newton / Levenberg-Marquardt iteration built on exact rollout
sensitivities. Input bounds are enforced by projection inside a backtracking
line search; state boxes, when given, enter as a quadratic penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import NU, NX, QUAT, NumericalError, QuadParams
from .ensemble import EnsembleModel


class ConfigError(ValueError):
    pass


def _sym_psd(name, M, n, strict=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (n, n):
        raise ConfigError(f"{name} must be {n}x{n}, got {M.shape}")
    if not np.allclose(M, M.T):
        raise ConfigError(f"{name} must be symmetric")
    lo = np.linalg.eigvalsh(M).min()
    if (strict and lo <= 0) or lo < -1e-12:
        raise ConfigError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return M


@dataclass
class OcpConfig:
    """Horizon and cost weights of the tracking OCP, plus its bounds.

    ``quat_index`` is the start of a 4-element quaternion block in the state,
    whose reference is sign-flipped to the shortest arc; ``None`` disables it.
    """

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray | None = None
    N: int = 20
    dt: float = 0.02
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    state_lb: np.ndarray | None = None
    state_ub: np.ndarray | None = None
    penalty_mu: float = 1e3
    quat_index: int | None = None
    max_iter: int = 50
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    # extra stop on relative cost decrease between accepted iterates; 0 disables
    cost_rtol: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        nx = Q.shape[0]
        self.Q = _sym_psd("Q", Q, nx)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.R = _sym_psd("R", R, R.shape[0], strict=True)
        self.P = self.Q.copy() if self.P is None else _sym_psd("P", self.P, nx)
        if self.N < 1:
            raise ConfigError("horizon N must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        nu = self.R.shape[0]
        for name in ("u_min", "u_max"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (nu,)).copy()
                setattr(self, name, v)
        if self.u_min is not None and self.u_max is not None and np.any(self.u_min > self.u_max):
            raise ConfigError("infeasible input bounds: u_min > u_max")
        for name in ("state_lb", "state_ub"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.broadcast_to(np.asarray(v, dtype=float), (nx,)).copy())
        if self.penalty_mu < 0:
            raise ConfigError("penalty_mu must be non-negative")

    @property
    def nx(self) -> int:
        return self.Q.shape[0]

    @property
    def nu(self) -> int:
        return self.R.shape[0]

    @classmethod
    def quadrotor(
        cls,
        params: QuadParams | None = None,
        N: int = 20,
        dt: float = 0.02,
        q_pos: float = 40.0,
        q_vel: float = 4.0,
        q_att: float = 1.0,
        q_rate: float = 0.1,
        r_thrust: float = 0.5,
        r_torque: float = 20.0,
        terminal_scale: float = 5.0,
        **kw,
    ) -> "OcpConfig":
        params = params or QuadParams()
        Q = np.diag([q_pos] * 3 + [q_vel] * 3 + [q_att] * 4 + [q_rate] * 3)
        R = np.diag([r_thrust] + [r_torque] * 3)
        return cls(
            Q=Q, R=R, P=terminal_scale * Q, N=N, dt=dt,
            u_min=params.u_min, u_max=params.u_max, quat_index=QUAT.start, **kw,
        )


@dataclass
class OcpSolution:
    states: np.ndarray
    controls: np.ndarray
    cost: float
    iterations: int
    converged: bool
    grad_norm: float = float("nan")
    warm_start: np.ndarray | None = field(default=None, repr=False)


class LinearModel:
    """Discrete linear map ``x+ = A x + B u`` with the solver's model interface."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.nx, self.nu = self.B.shape

    def __call__(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T

    def linearize(self, x, u):
        x = np.atleast_2d(x)
        n = x.shape[0]
        return (
            self(x, np.atleast_2d(u)),
            np.broadcast_to(self.A, (n,) + self.A.shape),
            np.broadcast_to(self.B, (n,) + self.B.shape),
        )


def _rollout(model, x0, U):
    if hasattr(model, "rollout"):
        X = model.rollout(x0, U)
        bad = ~np.all(np.isfinite(X), axis=1)
        if bad.any():
            raise NumericalError(f"model rollout became non-finite at step {int(np.argmax(bad))}")
        return X
    N = U.shape[0]
    X = np.empty((N + 1, x0.size))
    X[0] = x0
    for i in range(N):
        X[i + 1] = model(X[i], U[i])
        if not np.all(np.isfinite(X[i + 1])):
            raise NumericalError(f"model rollout became non-finite at step {i + 1}")
    return X


class _Problem:
    def __init__(self, model, x0, ref, cfg: OcpConfig, u_ref):
        self.model = model
        self.x0 = x0
        self.ref = ref
        self.cfg = cfg
        self.u_ref = u_ref
        self.N = cfg.N
        nx = cfg.nx
        self.W = np.empty((self.N + 1, nx, nx))
        self.W[0] = 0.0
        self.W[1 : self.N] = cfg.Q
        self.W[self.N] = cfg.P

    def errors(self, X):
        E = X - self.ref
        qi = self.cfg.quat_index
        if qi is not None:
            q = X[:, qi : qi + 4]
            qr = self.ref[:, qi : qi + 4]
            sign = np.where(np.sum(q * qr, axis=1) < 0, -1.0, 1.0)
            E[:, qi : qi + 4] = q - sign[:, None] * qr
        return E

    def violations(self, X):
        cfg = self.cfg
        V = np.zeros_like(X)
        if cfg.state_ub is not None:
            V += np.maximum(X - cfg.state_ub, 0.0)
        if cfg.state_lb is not None:
            V -= np.maximum(cfg.state_lb - X, 0.0)
        V[0] = 0.0
        return V

    def cost(self, X, U):
        E = self.errors(X)
        dU = U - self.u_ref
        c = np.einsum("ij,ijk,ik->", E, self.W, E) + np.einsum("ij,jk,ik->", dU, self.cfg.R, dU)
        if self.cfg.state_lb is not None or self.cfg.state_ub is not None:
            c += self.cfg.penalty_mu * np.sum(self.violations(X) ** 2)
        return float(c)

    def gauss_newton(self, X, U):
        """Cost gradient and Gauss-Newton Hessian in the flattened controls."""
        cfg = self.cfg
        N, nx, nu = self.N, cfg.nx, cfg.nu
        _, A, B = self.model.linearize(X[:-1], U)
        E = self.errors(X)
        WE = np.einsum("ijk,ik->ij", self.W, E)
        Wfull = self.W
        if cfg.state_lb is not None or cfg.state_ub is not None:
            V = self.violations(X)
            WE = WE + cfg.penalty_mu * V
            Wfull = self.W + cfg.penalty_mu * (V != 0)[:, :, None] * np.eye(nx)
        n = N * nu
        S = np.zeros((nx, n))
        g = np.zeros(n)
        H = np.zeros((n, n))
        for i in range(N):
            # S currently holds dx_i/dU; advance to dx_{i+1}/dU
            S[:, : i * nu] = A[i] @ S[:, : i * nu]
            S[:, i * nu : (i + 1) * nu] = B[i]
            k = (i + 1) * nu
            Sk = S[:, :k]
            g[:k] += Sk.T @ WE[i + 1]
            H[:k, :k] += Sk.T @ Wfull[i + 1] @ Sk
        dU = (U - self.u_ref).ravel()
        Rb = np.kron(np.eye(N), cfg.R)
        g += Rb @ dU
        H += Rb
        return 2.0 * g, 2.0 * H


def solve_ocp(
    model,
    x0,
    ref,
    cfg: OcpConfig,
    warm=None,
    u_ref=None,
) -> OcpSolution:
    """Minimize the tracking cost over ``cfg.N`` controls from state ``x0``.

    ``ref`` holds ``N + 1`` reference states; ``u_ref`` is the input the
    control penalty is measured against (zeros if omitted) and also the
    cold-start guess. ``warm`` is a previous solution's ``warm_start``.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise NumericalError("initial state is not finite")
    N, nu = cfg.N, cfg.nu
    ref = np.asarray(ref, dtype=float)
    if ref.shape != (N + 1, cfg.nx):
        raise ValueError(f"reference window must have shape {(N + 1, cfg.nx)}, got {ref.shape}")
    if not np.all(np.isfinite(ref)):
        raise ValueError("reference window must be finite")
    u_ref = np.zeros(nu) if u_ref is None else np.asarray(u_ref, dtype=float)
    lb = np.full(nu, -np.inf) if cfg.u_min is None else cfg.u_min
    ub = np.full(nu, np.inf) if cfg.u_max is None else cfg.u_max
    lbf = np.tile(lb, N)
    ubf = np.tile(ub, N)

    if warm is not None:
        U = np.array(warm, dtype=float).reshape(N, nu)
    else:
        U = np.tile(u_ref, (N, 1))
    U = np.clip(U, lb, ub)

    prob = _Problem(model, x0, ref, cfg, u_ref)
    X = _rollout(model, x0, U)
    cost = prob.cost(X, U)
    lam = 1e-6
    converged = False
    gnorm = np.inf
    it = 0
    while True:
        g, H = prob.gauss_newton(X, U)
        u = U.ravel()
        active = ((u <= lbf) & (g > 0)) | ((u >= ubf) & (g < 0))
        free = ~active
        gnorm = float(np.linalg.norm(g[free]))
        if gnorm < cfg.grad_tol:
            converged = True
            break
        if it >= cfg.max_iter:
            break
        it += 1
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        diag = np.diag(Hf).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        small_step = False
        for _ in range(8):
            try:
                d = np.linalg.solve(Hf + lam * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = np.zeros_like(u)
            step[free] = d
            alpha = 1.0
            for _ in range(12):
                u_new = np.clip(u + alpha * step, lbf, ubf)
                if np.linalg.norm(u_new - u) < cfg.step_tol:
                    small_step = True
                    break
                U_new = u_new.reshape(N, nu)
                try:
                    X_new = _rollout(model, x0, U_new)
                except NumericalError:
                    alpha *= 0.5
                    continue
                c_new = prob.cost(X_new, U_new)
                if c_new < cost - 1e-4 * alpha * max(-(g @ (u_new - u)), 0.0) and c_new < cost:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted or small_step:
                break
            lam *= 10.0
        if not accepted:
            converged = small_step
            break
        rel = (cost - c_new) / max(cost, 1e-300)
        U, X, cost = U_new, X_new, c_new
        lam = max(lam * 0.1, 1e-9)
        if cfg.cost_rtol > 0 and rel < cfg.cost_rtol:
            converged = True
            break

    sol = OcpSolution(
        states=X, controls=U.copy(), cost=cost, iterations=it, converged=converged, grad_norm=gnorm,
    )
    sol.warm_start = shift_warm_start(sol)
    return sol


def shift_warm_start(prev: OcpSolution) -> np.ndarray:
    """Drop the first control and repeat the last one."""
    U = np.asarray(prev.controls)
    return np.vstack([U[1:], U[-1:]])


def reference_window(ref_traj: Callable[[float], np.ndarray], t: float, cfg: OcpConfig) -> np.ndarray:
    return np.array([ref_traj(t + i * cfg.dt) for i in range(cfg.N + 1)])


def control_step(
    model: EnsembleModel,
    x,
    t: float,
    ref_traj: Callable[[float], np.ndarray],
    cfg: OcpConfig,
    warm=None,
    u_ref=None,
):
    """Solve at time ``t`` with a snapshot of ``model``; returns ``(u0, solution)``."""
    discrete = model.discretize(cfg.dt)
    if u_ref is None:
        u_ref = model.params.hover_input()
    ref = reference_window(ref_traj, t, cfg)
    sol = solve_ocp(discrete, x, ref, cfg, warm=warm, u_ref=u_ref)
    return sol.controls[0].copy(), sol
