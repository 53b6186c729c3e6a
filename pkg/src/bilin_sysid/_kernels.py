"""Compiled inner loops for the Kalman filter and the RTS smoother.

Matrices here are tiny (state and output dimensions of a few units), so plain
loops beat BLAS calls.  Factorization failures are reported through a return
code (the offending time index, or -1 on success) instead of exceptions.
"""

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)


@njit(cache=True)
def _cholesky(S, out):
    n = S.shape[0]
    for i in range(n):
        for j in range(i + 1):
            acc = S[i, j]
            for k in range(j):
                acc -= out[i, k] * out[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                out[i, i] = np.sqrt(acc)
            else:
                out[i, j] = acc / out[j, j]
        for j in range(i + 1, n):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _forward(Lc, b):
    # solve Lc z = b column by column; b is (n, m)
    n, m = b.shape
    z = np.empty((n, m))
    for c in range(m):
        for i in range(n):
            acc = b[i, c]
            for k in range(i):
                acc -= Lc[i, k] * z[k, c]
            z[i, c] = acc / Lc[i, i]
    return z


@njit(cache=True)
def _backward(Lc, z):
    # solve Lc^T x = z
    n, m = z.shape
    x = np.empty((n, m))
    for c in range(m):
        for i in range(n - 1, -1, -1):
            acc = z[i, c]
            for k in range(i + 1, n):
                acc -= Lc[k, i] * x[k, c]
            x[i, c] = acc / Lc[i, i]
    return x


@njit(cache=True)
def _sym(P):
    n = P.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = v
            P[j, i] = v


@njit(cache=True)
def filter_pass(A, B, D, S_w, S_v, mu0, S0, Xi, u, y):
    """Kalman filter over ``n`` samples plus the prediction of the state after the last one.

    Returns ``(status, x_pred, P_pred, x_filt, P_filt, K, innov, S_innov, loglik)``.
    """
    n, ny, nx = Xi.shape
    x_pred = np.empty((n + 1, nx))
    P_pred = np.empty((n + 1, nx, nx))
    x_filt = np.empty((n, nx))
    P_filt = np.empty((n, nx, nx))
    gains = np.empty((n, nx, ny))
    innov = np.empty((n, ny))
    S_innov = np.empty((n, ny, ny))
    Lc = np.zeros((ny, ny))
    x_pred[0] = mu0
    P_pred[0] = S0
    loglik = 0.0
    for t in range(n):
        H = Xi[t]
        P = P_pred[t]
        PHt = P @ H.T.copy()
        S = H @ PHt + S_v
        _sym(S)
        S_innov[t] = S
        if not _cholesky(S, Lc):
            return t, x_pred, P_pred, x_filt, P_filt, gains, innov, S_innov, loglik
        K = _backward(Lc, _forward(Lc, PHt.T.copy())).T.copy()
        gains[t] = K
        e = y[t] - H @ x_pred[t] - D @ u[t]
        innov[t] = e
        x_filt[t] = x_pred[t] + K @ e
        Pf = P - K @ (H @ P)
        _sym(Pf)
        P_filt[t] = Pf
        z = _forward(Lc, e.reshape(ny, 1))
        logdet = 0.0
        for i in range(ny):
            logdet += 2.0 * np.log(Lc[i, i])
        loglik -= 0.5 * (np.sum(z * z) + logdet + ny * LOG_2PI)
        x_pred[t + 1] = A @ x_filt[t] + B @ u[t]
        Pp = A @ Pf @ A.T.copy() + S_w
        _sym(Pp)
        P_pred[t + 1] = Pp
    return -1, x_pred, P_pred, x_filt, P_filt, gains, innov, S_innov, loglik


@njit(cache=True)
def smoother_pass(A, x_pred, P_pred, x_filt, P_filt):
    """RTS recursion including the state after the last sample.

    Returns ``(status, xs, Ps, G, cross)`` with ``xs``/``Ps`` of length n+1,
    gains ``G[t]`` for t < n and ``cross[t] = Cov(x_{t+1}, x_t | y)``.
    """
    n, nx = x_filt.shape
    xs = np.empty((n + 1, nx))
    Ps = np.empty((n + 1, nx, nx))
    G = np.empty((n, nx, nx))
    cross = np.empty((n, nx, nx))
    Lc = np.zeros((nx, nx))
    xs[n] = x_pred[n]
    Ps[n] = P_pred[n]
    for t in range(n - 1, -1, -1):
        if not _cholesky(P_pred[t + 1], Lc):
            return t, xs, Ps, G, cross
        APf = A @ P_filt[t]
        Gt = _backward(Lc, _forward(Lc, APf)).T.copy()
        G[t] = Gt
        xs[t] = x_filt[t] + Gt @ (xs[t + 1] - x_pred[t + 1])
        Pt = P_filt[t] + Gt @ (Ps[t + 1] - P_pred[t + 1]) @ Gt.T.copy()
        _sym(Pt)
        Ps[t] = Pt
        cross[t] = Ps[t + 1] @ Gt.T.copy()
    return -1, xs, Ps, G, cross


# Block-structured pieces of the maximum-likelihood cost and gradient.  With
# S_x[t, s] = A^(t-s) P_s for t >= s, every (n nx)^2 object is handled as
# n^2 small blocks, which keeps the work at O(n^2) small matrix products.


@njit(cache=True)
def state_cov_blocks(Pow, P):
    n, nx = P.shape[0], P.shape[1]
    Sig = np.empty((n, n, nx, nx))
    for s in range(n):
        for t in range(s, n):
            Pk = Pow[t - s]
            for i in range(nx):
                for j in range(nx):
                    acc = 0.0
                    for k in range(nx):
                        acc += Pk[i, k] * P[s, k, j]
                    Sig[t, s, i, j] = acc
                    Sig[s, t, j, i] = acc
        Sig[s, s] = P[s]
    return Sig


@njit(cache=True)
def output_cov_blocks(Xi, Sig, S_v):
    # S[t ny + a, s ny + b] = Xi_t S_x[t, s] Xi_s^T (+ S_v on the diagonal); also returns Xi_t S_x[t, s]
    n, ny, nx = Xi.shape
    XiSig = np.empty((n, n, ny, nx))
    S = np.empty((n * ny, n * ny))
    for t in range(n):
        for s in range(n):
            for a in range(ny):
                for j in range(nx):
                    acc = 0.0
                    for i in range(nx):
                        acc += Xi[t, a, i] * Sig[t, s, i, j]
                    XiSig[t, s, a, j] = acc
    for t in range(n):
        for s in range(t + 1):
            for a in range(ny):
                for b in range(ny):
                    acc = 0.0
                    for j in range(nx):
                        acc += XiSig[t, s, a, j] * Xi[s, b, j]
                    S[t * ny + a, s * ny + b] = acc
                    S[s * ny + b, t * ny + a] = acc
        for a in range(ny):
            for b in range(ny):
                S[t * ny + a, t * ny + b] += 0.5 * (S_v[a, b] + S_v[b, a])
    return S, XiSig


@njit(cache=True)
def gradient_blocks(Xi, XiSig, W, Pow, P):
    """Block reductions of ``G = Xi^T W Xi`` needed by the adjoint recursions.

    Returns ``G_Xi[t] = 2 sum_s W[t, s] Xi_s S_x[s, t]``, the symmetric direct
    derivative with respect to ``P_s`` and ``X[k] = sum_s G[s + k, s] P_s``.
    """
    n, ny, nx = Xi.shape
    G_Xi = np.zeros((n, ny, nx))
    direct = np.zeros((n, nx, nx))
    X = np.zeros((n, nx, nx))
    WX = np.empty((ny, nx))
    Gb = np.empty((nx, nx))
    for t in range(n):
        for s in range(n):
            # W[t, s] Xi_s
            for a in range(ny):
                for j in range(nx):
                    acc = 0.0
                    for b in range(ny):
                        acc += W[t * ny + a, s * ny + b] * Xi[s, b, j]
                    WX[a, j] = acc
            for a in range(ny):
                for j in range(nx):
                    acc = 0.0
                    for b in range(ny):
                        acc += W[t * ny + a, s * ny + b] * XiSig[s, t, b, j]
                    G_Xi[t, a, j] += 2.0 * acc
            if t < s:
                continue
            for i in range(nx):
                for j in range(nx):
                    acc = 0.0
                    for a in range(ny):
                        acc += Xi[t, a, i] * WX[a, j]
                    Gb[i, j] = acc
            if t == s:
                for i in range(nx):
                    for j in range(nx):
                        direct[s, i, j] += Gb[i, j]
                continue
            Pk = Pow[t - s]
            k = t - s
            for i in range(nx):
                for j in range(nx):
                    e = 0.0
                    x = 0.0
                    for m in range(nx):
                        e += Pk[m, i] * Gb[m, j]
                        x += Gb[i, m] * P[s, m, j]
                    direct[s, i, j] += e
                    direct[s, j, i] += e
                    X[k, i, j] += x
    return G_Xi, direct, X


@njit(cache=True)
def matrix_powers(A, n):
    """``A^0 ... A^(n-1)`` stacked along the first axis."""
    nx = A.shape[0]
    out = np.zeros((n, nx, nx))
    for i in range(nx):
        out[0, i, i] = 1.0
    for k in range(1, n):
        for i in range(nx):
            for j in range(nx):
                acc = 0.0
                for m in range(nx):
                    acc += A[i, m] * out[k - 1, m, j]
                out[k, i, j] = acc
    return out


@njit(cache=True)
def state_moments(A, Bu, mu0, S0, S_w):
    # mu_{t+1} = A mu_t + B u_t, P_{t+1} = A P_t A^T + S_w
    n, nx = Bu.shape
    mu = np.empty((n, nx))
    P = np.empty((n, nx, nx))
    mu[0] = mu0
    P[0] = S0
    _sym(P[0])
    for t in range(n - 1):
        mu[t + 1] = A @ mu[t] + Bu[t]
        P[t + 1] = A @ P[t] @ A.T + S_w
        _sym(P[t + 1])
    return mu, P


@njit(cache=True)
def adjoint_recursions(A, mu, u, P, g_mu, direct, X):
    """Pull ``dJ/dmu_t``, ``dJ/dP_t`` and ``X`` back to ``A``, ``B``, ``mu_x0``, ``S_x0``, ``S_w``."""
    n, nx = mu.shape
    At = A.T.copy()
    lam = g_mu[n - 1].copy()
    dA = np.zeros((nx, nx))
    dB = np.zeros((nx, u.shape[1]))
    for t in range(n - 2, -1, -1):
        dA += np.outer(lam, mu[t])
        dB += np.outer(lam, u[t])
        lam = g_mu[t] + At @ lam
    # powers of A: sum_k sum_{r<k} (A^T)^r X_k (A^T)^(k-1-r)
    Z = np.zeros((nx, nx))
    U = np.zeros((nx, nx))
    for k in range(n - 1, 0, -1):
        Z = X[k] + At @ Z
        U = Z + U @ At
    dA += 2.0 * U
    Lam = direct[n - 1].copy()
    dSw = np.zeros((nx, nx))
    for s in range(n - 2, -1, -1):
        dSw += Lam
        dA += 2.0 * (Lam @ A @ P[s])
        Lam = direct[s] + At @ Lam @ A
    return dA, dB, lam, Lam, dSw
