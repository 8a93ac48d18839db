"""Compiled single-trajectory kernels for the hot loops (plant and MPC rollouts).

These mirror ``dynamics.state_derivative`` + ``ensemble.MemberStack.forward``
for one state at a time; tests check agreement with the numpy versions.
Member weights arrive stacked per layer, with forgetting weights already
folded into the last layer.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _nominal(x, u, mass, inertia, inertia_inv, gravity, out):
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    eta = u[0]
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    a = eta / mass
    out[3] = gravity[0] + 2.0 * (qx * qz + qw * qy) * a
    out[4] = gravity[1] + 2.0 * (qy * qz - qw * qx) * a
    out[5] = gravity[2] + (1.0 - 2.0 * (qx * qx + qy * qy)) * a
    out[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    Iw0 = inertia[0, 0] * wx + inertia[0, 1] * wy + inertia[0, 2] * wz
    Iw1 = inertia[1, 0] * wx + inertia[1, 1] * wy + inertia[1, 2] * wz
    Iw2 = inertia[2, 0] * wx + inertia[2, 1] * wy + inertia[2, 2] * wz
    m0 = u[1] - (wy * Iw2 - wz * Iw1)
    m1 = u[2] - (wz * Iw0 - wx * Iw2)
    m2 = u[3] - (wx * Iw1 - wy * Iw0)
    for i in range(3):
        out[10 + i] = inertia_inv[i, 0] * m0 + inertia_inv[i, 1] * m1 + inertia_inv[i, 2] * m2


@njit(cache=True)
def _members(z, Ws, bs, out):
    n_layers = len(Ws)
    P = Ws[0].shape[0]
    for p in range(P):
        h = z
        for li in range(n_layers):
            W = Ws[li]
            b = bs[li]
            n_out = W.shape[1]
            n_in = W.shape[2]
            nh = np.empty(n_out)
            for i in range(n_out):
                s = b[p, i]
                for j in range(n_in):
                    s += W[p, i, j] * h[j]
                nh[i] = s if li == n_layers - 1 else np.tanh(s)
            h = nh
        for i in range(out.shape[0]):
            out[i] += h[i]


@njit(cache=True)
def _deriv(x, u, mass, inertia, inertia_inv, gravity, Ws, bs, out):
    _nominal(x, u, mass, inertia, inertia_inv, gravity, out)
    if Ws[0].shape[0] > 0:
        z = np.empty(17)
        z[:13] = x
        z[13:] = u
        _members(z, Ws, bs, out)


@njit(cache=True)
def rk4_step(x, u, dt, mass, inertia, inertia_inv, gravity, Ws, bs, normalize):
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    _deriv(x, u, mass, inertia, inertia_inv, gravity, Ws, bs, k1)
    _deriv(x + 0.5 * dt * k1, u, mass, inertia, inertia_inv, gravity, Ws, bs, k2)
    _deriv(x + 0.5 * dt * k2, u, mass, inertia, inertia_inv, gravity, Ws, bs, k3)
    _deriv(x + dt * k3, u, mass, inertia, inertia_inv, gravity, Ws, bs, k4)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if normalize:
        nq = np.sqrt(xn[6] ** 2 + xn[7] ** 2 + xn[8] ** 2 + xn[9] ** 2)
        for i in range(6, 10):
            xn[i] /= nq
    return xn


@njit(cache=True)
def rollout(x0, U, dt, mass, inertia, inertia_inv, gravity, Ws, bs):
    N = U.shape[0]
    X = np.empty((N + 1, x0.shape[0]))
    X[0] = x0
    for i in range(N):
        X[i + 1] = rk4_step(X[i], U[i], dt, mass, inertia, inertia_inv, gravity, Ws, bs, True)
    return X


def empty_stack(layer_dims):
    Ws = tuple(np.zeros((0, b, a)) for a, b in zip(layer_dims[:-1], layer_dims[1:]))
    bs = tuple(np.zeros((0, b)) for b in layer_dims[1:])
    return Ws, bs


@njit(cache=True)
def _nominal_jac(x, u, mass, inertia, inertia_inv, J):
    """Fill ``J`` (13x17) with the nominal derivative's Jacobian in ``[x, u]``."""
    J[:, :] = 0.0
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    a = u[0] / mass
    for i in range(3):
        J[i, 3 + i] = 1.0
    # acceleration = gravity + R(q) e3 * eta / m
    J[3, 6] = 2.0 * qy * a
    J[3, 7] = 2.0 * qz * a
    J[3, 8] = 2.0 * qw * a
    J[3, 9] = 2.0 * qx * a
    J[4, 6] = -2.0 * qx * a
    J[4, 7] = -2.0 * qw * a
    J[4, 8] = 2.0 * qz * a
    J[4, 9] = 2.0 * qy * a
    J[5, 7] = -4.0 * qx * a
    J[5, 8] = -4.0 * qy * a
    J[3, 13] = 2.0 * (qx * qz + qw * qy) / mass
    J[4, 13] = 2.0 * (qy * qz - qw * qx) / mass
    J[5, 13] = (1.0 - 2.0 * (qx * qx + qy * qy)) / mass
    # quaternion kinematics, 0.5 * q (x) (0, w)
    J[6, 7] = -0.5 * wx
    J[6, 8] = -0.5 * wy
    J[6, 9] = -0.5 * wz
    J[6, 10] = -0.5 * qx
    J[6, 11] = -0.5 * qy
    J[6, 12] = -0.5 * qz
    J[7, 6] = 0.5 * wx
    J[7, 8] = 0.5 * wz
    J[7, 9] = -0.5 * wy
    J[7, 10] = 0.5 * qw
    J[7, 11] = -0.5 * qz
    J[7, 12] = 0.5 * qy
    J[8, 6] = 0.5 * wy
    J[8, 7] = -0.5 * wz
    J[8, 9] = 0.5 * wx
    J[8, 10] = 0.5 * qz
    J[8, 11] = 0.5 * qw
    J[8, 12] = -0.5 * qx
    J[9, 6] = 0.5 * wz
    J[9, 7] = 0.5 * wy
    J[9, 8] = -0.5 * wx
    J[9, 10] = -0.5 * qy
    J[9, 11] = 0.5 * qx
    J[9, 12] = 0.5 * qw
    # body rates: I^-1 (tau - w x I w); d(w x Iw)/dw = [w]x I - [Iw]x
    Iw = inertia @ x[10:13]
    C = np.zeros((3, 3))
    for j in range(3):
        c0, c1, c2 = inertia[0, j], inertia[1, j], inertia[2, j]
        C[0, j] = wy * c2 - wz * c1
        C[1, j] = wz * c0 - wx * c2
        C[2, j] = wx * c1 - wy * c0
    C[0, 1] -= -Iw[2]
    C[0, 2] -= Iw[1]
    C[1, 0] -= Iw[2]
    C[1, 2] -= -Iw[0]
    C[2, 0] -= -Iw[1]
    C[2, 1] -= Iw[0]
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s -= inertia_inv[i, k] * C[k, j]
            J[10 + i, 10 + j] = s
            J[10 + i, 14 + j] = inertia_inv[i, j]


@njit(cache=True)
def _members_jac(z, Ws, bs, J):
    """Add the stacked members' input Jacobian to ``J`` (out x in)."""
    n_layers = len(Ws)
    P = Ws[0].shape[0]
    for p in range(P):
        # forward pass keeping the tanh derivatives of every hidden layer
        h = z
        ds = []
        for li in range(n_layers - 1):
            W = Ws[li]
            n_out = W.shape[1]
            nh = np.empty(n_out)
            d = np.empty(n_out)
            for i in range(n_out):
                s = bs[li][p, i]
                for j in range(W.shape[2]):
                    s += W[p, i, j] * h[j]
                t = np.tanh(s)
                nh[i] = t
                d[i] = 1.0 - t * t
            ds.append(d)
            h = nh
        # M = W_last diag(d) W_{L-1} ... diag(d) W_0, accumulated from the output side
        M = Ws[n_layers - 1][p].copy()
        for li in range(n_layers - 2, -1, -1):
            M = (M * ds[li]) @ Ws[li][p]
        for i in range(J.shape[0]):
            for j in range(J.shape[1]):
                J[i, j] += M[i, j]


@njit(cache=True)
def _full_jac(x, u, mass, inertia, inertia_inv, Ws, bs, J):
    _nominal_jac(x, u, mass, inertia, inertia_inv, J)
    if Ws[0].shape[0] > 0:
        z = np.empty(17)
        z[:13] = x
        z[13:] = u
        _members_jac(z, Ws, bs, J)


@njit(cache=True)
def linearize(X, U, dt, mass, inertia, inertia_inv, gravity, Ws, bs):
    """Normalized RK4 steps from each ``X[i]`` with their Jacobians
    ``A_i = dx_{i+1}/dx_i`` and ``B_i = dx_{i+1}/du_i``."""
    N = U.shape[0]
    n = X.shape[1]
    m = U.shape[1]
    Xn = np.empty((N, n))
    A = np.empty((N, n, n))
    B = np.empty((N, n, m))
    J = np.empty((n, n + m))
    k = np.empty(n)
    for i in range(N):
        x = X[i]
        u = U[i]
        Dx = np.zeros((n, n))
        Du = np.zeros((n, m))
        Sx = np.eye(n)
        Su = np.zeros((n, m))
        s = x.copy()
        acc = np.zeros(n)
        for stage in range(4):
            k[:] = 0.0
            _deriv(s, u, mass, inertia, inertia_inv, gravity, Ws, bs, k)
            _full_jac(s, u, mass, inertia, inertia_inv, Ws, bs, J)
            Jx = np.ascontiguousarray(J[:, :n])
            Kx = Jx @ Sx
            Ku = Jx @ Su + np.ascontiguousarray(J[:, n:])
            c = 1.0 if stage == 0 or stage == 3 else 2.0
            acc += c * k
            Dx += c * Kx
            Du += c * Ku
            if stage < 3:
                f = 0.5 * dt if stage < 2 else dt
                s = x + f * k
                Sx = np.eye(n) + f * Kx
                Su = f * Ku
        xn = x + (dt / 6.0) * acc
        Ai = np.eye(n) + (dt / 6.0) * Dx
        Bi = (dt / 6.0) * Du
        nq = np.sqrt(xn[6] ** 2 + xn[7] ** 2 + xn[8] ** 2 + xn[9] ** 2)
        qh = xn[6:10] / nq
        Nq = (np.eye(4) - np.outer(qh, qh)) / nq
        Ai[6:10, :] = Nq @ np.ascontiguousarray(Ai[6:10, :])
        Bi[6:10, :] = Nq @ np.ascontiguousarray(Bi[6:10, :])
        Xn[i, :6] = xn[:6]
        Xn[i, 6:10] = qh
        Xn[i, 10:] = xn[10:]
        A[i] = Ai
        B[i] = Bi
    return Xn, A, B


@njit(cache=True)
def _unpack(theta, dims):
    Ws = []
    bs = []
    k = 0
    for li in range(dims.shape[0] - 1):
        n_in, n_out = dims[li], dims[li + 1]
        Ws.append(theta[k : k + n_out * n_in].reshape((n_out, n_in)))
        k += n_out * n_in
        bs.append(theta[k : k + n_out])
        k += n_out
    return Ws, bs


@njit(cache=True)
def _net_forward(Z, Ws, bs):
    hs = [Z]
    h = Z
    L = len(Ws)
    for li in range(L):
        a = h @ Ws[li].T + bs[li]
        if li < L - 1:
            a = np.tanh(a)
        hs.append(a)
        h = a
    return hs


@njit(cache=True)
def _net_backward(hs, G, Ws, grad, want_params):
    """Input cotangent of one net; adds parameter gradients into ``grad`` if asked."""
    L = len(Ws)
    offsets = np.empty(L, dtype=np.int64)
    k = 0
    for li in range(L):
        offsets[li] = k
        k += Ws[li].size + Ws[li].shape[0]
    for li in range(L - 1, -1, -1):
        W = Ws[li]
        if want_params:
            gW = G.T @ hs[li]
            o = offsets[li]
            n = W.size
            grad[o : o + n] += gW.ravel()
            grad[o + n : o + n + W.shape[0]] += G.sum(axis=0)
        G = G @ W
        if li > 0:
            G = G * (1.0 - hs[li] * hs[li])
    return G


@njit(cache=True)
def _stack_forward(Z, Ws, bs):
    """Frozen members (weights folded in): summed output and per-member activations."""
    P = Ws[0].shape[0]
    out = np.zeros((Z.shape[0], Ws[len(Ws) - 1].shape[1]))
    cache = []
    for p in range(P):
        Wp = [W[p] for W in Ws]
        bp = [b[p] for b in bs]
        hs = _net_forward(Z, Wp, bp)
        out += hs[len(hs) - 1]
        cache.append(hs)
    return out, cache


@njit(cache=True)
def _stack_input_vjp(cache, G, Ws, dummy):
    gz = np.zeros((G.shape[0], Ws[0].shape[2]))
    for p in range(len(cache)):
        Wp = [W[p] for W in Ws]
        gz += _net_backward(cache[p], G, Wp, dummy, False)
    return gz


@njit(cache=True)
def _nominal_batch(X, U, mass, inertia, inertia_inv, gravity):
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        _nominal(X[i], U[i], mass, inertia, inertia_inv, gravity, out[i])
    return out


@njit(cache=True)
def _nominal_vjp_batch(X, U, G, mass, inertia, inertia_inv):
    n = X.shape[1]
    out = np.zeros_like(X)
    J = np.empty((n, n + U.shape[1]))
    for i in range(X.shape[0]):
        _nominal_jac(X[i], U[i], mass, inertia, inertia_inv, J)
        for r in range(n):
            gr = G[i, r]
            if gr != 0.0:
                for c in range(n):
                    out[i, c] += gr * J[r, c]
    return out


@njit(cache=True)
def knode_loss_grad(theta, dims, X, U, target, dt, l2, mass, inertia, inertia_inv, gravity, fWs, fbs, f1_fixed):
    """One-step RK4 loss over all pairs and its gradient in the newest net's parameters.

    ``f1_fixed`` is nominal plus frozen members at the data points (first stage).
    """
    Ws, bs = _unpack(theta, dims)
    has_frozen = fWs[0].shape[0] > 0
    n = X.shape[1]
    m = X.shape[0]
    h = dt
    grad = np.zeros_like(theta)

    # each stage keeps its own input array: the activation caches hold on to it
    Z = np.empty((m, n + U.shape[1]))
    Z[:, n:] = U
    Z[:, :n] = X
    hs1 = _net_forward(Z, Ws, bs)
    k1 = f1_fixed + hs1[len(hs1) - 1]

    states = [X + 0.5 * h * k1]
    ks = [k1]
    caches = []
    fcaches = []
    for stage in range(3):
        s = states[stage]
        Z = np.empty((m, n + U.shape[1]))
        Z[:, n:] = U
        Z[:, :n] = s
        hs = _net_forward(Z, Ws, bs)
        k = _nominal_batch(s, U, mass, inertia, inertia_inv, gravity) + hs[len(hs) - 1]
        if has_frozen:
            fo, fc = _stack_forward(Z, fWs, fbs)
            k = k + fo
            fcaches.append(fc)
        caches.append(hs)
        ks.append(k)
        if stage == 0:
            states.append(X + 0.5 * h * k)
        elif stage == 1:
            states.append(X + h * k)

    pred = X + (h / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    resid = pred - target
    loss = np.sum(resid * resid) / m + l2 * np.dot(theta, theta)

    g = 2.0 * resid / m
    g1 = (h / 6.0) * g
    g23 = (h / 3.0) * g
    seeds = (g1, g23, g23)
    carry = np.zeros_like(X)
    for stage in range(2, -1, -1):
        # cotangent on k_{stage+2}: direct term plus what flows back through the next state
        G = seeds[2 - stage] + carry
        s = states[stage]
        gz = _net_backward(caches[stage], G, Ws, grad, True)
        gs = _nominal_vjp_batch(s, U, G, mass, inertia, inertia_inv) + gz[:, :n]
        if has_frozen:
            gs += _stack_input_vjp(fcaches[stage], G, fWs, grad)[:, :n]
        coef = h if stage == 2 else 0.5 * h
        carry = coef * gs
    _net_backward(hs1, g1 + carry, Ws, grad, True)
    grad += 2.0 * l2 * theta
    return loss, grad
