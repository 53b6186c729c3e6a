"""Maximum-likelihood identification.

The likelihood of the stacked outputs is Gaussian,
``y ~ N(Xi mu_x + D u, Xi S_x Xi^T + S_y)``, and the cost minimized here is

    J = logdet(Xi^T S_y^-1 Xi + S_x^-1) + logdet S_x + logdet S_y
        + r^T (Xi S_x Xi^T + S_y)^-1 r,        r = D u - y + Xi mu_x

which equals ``-2 log p(y | theta, u) - n_d ny log(2 pi)``.

The state trajectory is written as ``x = L e`` where ``L`` is the block lower
triangular transfer matrix with blocks ``A^(t-k)`` and ``e = (x_0, B u_0 + w_0,
...)``; every state moment and its sensitivity to ``A`` follow from ``L``.
That dense route is kept as ``ml_cost_and_gradient_dense`` for cross-checks.
``ml_cost_and_gradient`` works on covariance blocks instead: the state
covariance blocks ``A^(t-s) P_s`` and backward (adjoint) recursions through the
mean and covariance propagation give the gradient without forming ``L``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.stats import multivariate_normal

from . import _kernels
from .errors import ConditioningError, OptimizationError
from .model import SystemParams, check_input_excitation, xi_sequence
from .report import EstimationReport

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# state and output moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateMoments:
    """Mean and covariance of the stacked state trajectory ``x_0 ... x_{n_d-1}``."""

    mu_x: np.ndarray
    S_x: np.ndarray
    nx: int

    @property
    def n_d(self):
        return self.mu_x.size // self.nx

    def mean(self, t):
        return self.mu_x[t * self.nx : (t + 1) * self.nx]

    def block(self, t, s):
        n = self.nx
        return self.S_x[t * n : (t + 1) * n, s * n : (s + 1) * n]


@dataclass(frozen=True, eq=False)
class OutputOperators:
    """Block-diagonal output operators, stored by their diagonal blocks."""

    Xi_blocks: np.ndarray  # (n_d, ny, nx)
    D: np.ndarray
    S_v: np.ndarray

    @property
    def n_d(self):
        return self.Xi_blocks.shape[0]

    def Xi_dense(self):
        return linalg.block_diag(*self.Xi_blocks)

    def D_dense(self):
        return np.kron(np.eye(self.n_d), self.D)

    def S_y_dense(self):
        return np.kron(np.eye(self.n_d), self.S_v)

    def apply_Xi(self, x):
        """``Xi @ x`` for a stacked vector or a matrix with stacked rows."""
        n, ny, nx = self.Xi_blocks.shape
        x = np.asarray(x)
        if x.ndim == 1:
            return np.einsum("tab,tb->ta", self.Xi_blocks, x.reshape(n, nx)).ravel()
        return np.einsum("tab,tbk->tak", self.Xi_blocks, x.reshape(n, nx, -1)).reshape(n * ny, -1)


def output_operators(params, inputs):
    return OutputOperators(xi_sequence(params, inputs), params.D, params.S_v)


def matrix_powers(A, n):
    """``A^0 ... A^(n-1)`` stacked along the first axis."""
    return _kernels.matrix_powers(np.ascontiguousarray(A, dtype=float), int(n))


def transfer_matrix(A, n_d, powers=None):
    """Block lower-triangular matrix with block ``(t, k) = A^(t-k)`` for ``k <= t``."""
    nx = A.shape[0]
    P = matrix_powers(A, n_d) if powers is None else powers
    L = np.zeros((n_d, nx, n_d, nx))
    for lag in range(n_d):
        t = np.arange(lag, n_d)
        L[t, :, t - lag, :] = P[lag]
    return L.reshape(n_d * nx, n_d * nx)


def _drive(params, inputs):
    """Stacked ``(mu_x0, B u_0, ..., B u_{n_d-2})`` and ``blkdiag(S_x0, S_w, ...)``."""
    n_d = inputs.shape[0]
    m = np.vstack([params.mu_x0[None], inputs[:-1] @ params.B.T]).ravel()
    Q = linalg.block_diag(params.S_x0, *([params.S_w] * (n_d - 1)))
    return m, Q


def build_state_moments(params, inputs):
    inputs = np.asarray(inputs, dtype=float).reshape(-1, params.dims.nu)
    L = transfer_matrix(params.A, inputs.shape[0])
    m, Q = _drive(params, inputs)
    S = L @ Q @ L.T
    return StateMoments(mu_x=L @ m, S_x=0.5 * (S + S.T), nx=params.dims.nx)


def _chol(M, term):
    try:
        return linalg.cho_factor(M, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise ConditioningError(f"{term} is not numerically positive definite", term=term) from exc


def _chol_inverse(cf, term):
    """``M^-1`` from the lower Cholesky factor of ``M``."""
    inv, info = lapack.dpotri(cf[0], lower=1)
    if info != 0:
        raise ConditioningError(f"{term} could not be inverted", term=term)
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def _logdet(cf):
    return 2.0 * np.sum(np.log(np.diag(cf[0])))


def _output_covariance(ops, S_x):
    """``Xi S_x Xi^T + I (x) S_v`` using the block structure of ``Xi``."""
    n, ny, nx = ops.Xi_blocks.shape
    XiSx = ops.apply_Xi(S_x)  # (n ny, n nx)
    S4 = np.einsum("satk,tbk->satb", XiSx.reshape(n, ny, n, nx), ops.Xi_blocks)
    idx = np.arange(n)
    S4[idx, :, idx, :] += ops.S_v
    S = S4.reshape(n * ny, n * ny)
    return 0.5 * (S + S.T), XiSx


def _residual(params, dataset, ops, mu_x):
    y = dataset.outputs.ravel()
    Du = (dataset.inputs @ params.D.T).ravel()
    return Du - y + ops.apply_Xi(mu_x)


def state_cholesky(params, n_d, transfer=None):
    """Lower Cholesky factor of ``S_x``, obtained as ``L blkdiag(chol S_x0, chol S_w, ...)``.

    ``L`` has identity diagonal blocks, so the product is lower triangular and
    ``logdet S_x = logdet S_x0 + (n_d - 1) logdet S_w`` with no factorization
    of ``S_x`` itself.
    """
    L = transfer_matrix(params.A, n_d) if transfer is None else transfer
    c0 = _chol(params.S_x0, "S_x0")[0]
    cw = _chol(params.S_w, "S_w")[0]
    R = linalg.block_diag(np.tril(c0), *([np.tril(cw)] * (n_d - 1)))
    return L @ R


def ml_cost(params, dataset):
    """Negative log-likelihood cost (see module docstring).

    With ``S_x = Lx Lx^T`` the first two terms combine into
    ``logdet(I + Lx^T Xi^T S_y^-1 Xi Lx)``; they are evaluated that way so the
    cost stays accurate when ``S_x`` is close to singular (e.g. tiny ``S_x0``).
    """
    dataset.check_dims(params.dims)
    n, nx, ny = dataset.n_d, params.dims.nx, params.dims.ny
    L = transfer_matrix(params.A, n)
    Lx = state_cholesky(params, n, transfer=L)
    logdet_Sx = 2.0 * float(np.sum(np.log(np.diag(Lx))))
    ops = output_operators(params, dataset.inputs)

    cf_v = _chol(params.S_v, "S_v")
    XiLx = ops.apply_Xi(Lx)  # (n ny, n nx)
    white = linalg.solve_triangular(cf_v[0], XiLx.reshape(n, ny, n * nx).transpose(1, 0, 2).reshape(ny, -1), lower=True)
    white = white.reshape(ny, n, n * nx).transpose(1, 0, 2).reshape(n * ny, n * nx)
    M = np.eye(n * nx) + white.T @ white
    logdet_info = _logdet(_chol(0.5 * (M + M.T), "information matrix")) - logdet_Sx

    m, _ = _drive(params, dataset.inputs)
    S_x = Lx @ Lx.T
    S, _ = _output_covariance(ops, S_x)
    cf_S = _chol(S, "output covariance")
    r = _residual(params, dataset, ops, L @ m)
    quad = float(r @ linalg.cho_solve(cf_S, r))
    return logdet_info + logdet_Sx + n * _logdet(cf_v) + quad


def ml_cost_oracle(params, dataset):
    """Dense Gaussian evaluation of the same cost, for cross-checking."""
    mom = build_state_moments(params, dataset.inputs)
    ops = output_operators(params, dataset.inputs)
    Xi = ops.Xi_dense()
    mean = Xi @ mom.mu_x + ops.D_dense() @ dataset.inputs.ravel()
    cov = Xi @ mom.S_x @ Xi.T + ops.S_y_dense()
    y = dataset.outputs.ravel()
    logp = multivariate_normal(mean=mean, cov=cov).logpdf(y)
    return -2.0 * float(logp) - y.size * LOG_2PI


def log_likelihood(params, dataset):
    """``log p(y | theta, u)`` derived from :func:`ml_cost`."""
    return -0.5 * (ml_cost(params, dataset) + dataset.outputs.size * LOG_2PI)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientTuple:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    mu_x0: np.ndarray
    S_x0: np.ndarray
    S_w: np.ndarray
    S_v: np.ndarray

    def to_vector(self):
        return np.concatenate([np.ravel(getattr(self, f.name)) for f in fields(self)])

    def norm(self):
        return float(np.linalg.norm(self.to_vector()))


def _sym(G):
    return 0.5 * (G + G.T)


def ml_cost_and_gradient_dense(params, dataset):
    """Cost and gradient through the dense transfer matrix ``L``.

    Reference route: ``dJ/dA`` is read off ``L^T (dJ/dL) L^T``, and the drive
    and noise gradients off ``L^T g_mu`` and ``L^T G_Sx L``.  Cubic in
    ``n_d nx``; :func:`ml_cost_and_gradient` gives the same numbers faster.
    """
    dataset.check_dims(params.dims)
    d = params.dims
    n, nx, ny = dataset.n_d, d.nx, d.ny
    u = dataset.inputs

    L = transfer_matrix(params.A, n)
    m, Q = _drive(params, u)
    mu = L @ m
    LQ = L @ Q
    S_x = LQ @ L.T
    S_x = 0.5 * (S_x + S_x.T)
    ops = output_operators(params, u)

    S, XiSx = _output_covariance(ops, S_x)
    cf_S = _chol(S, "output covariance")
    r = _residual(params, dataset, ops, mu)
    S_inv = linalg.cho_solve(cf_S, np.eye(n * ny))
    alpha = S_inv @ r
    cost = _logdet(cf_S) + float(r @ alpha)
    W = S_inv - np.outer(alpha, alpha)

    # derivatives of J with respect to the intermediate quantities
    Xi = ops.Xi_blocks
    alpha_t = alpha.reshape(n, ny)
    g_mu = 2.0 * np.einsum("tab,ta->tb", Xi, alpha_t).ravel()
    W4 = W.reshape(n, ny, n, ny)
    WXi = np.einsum("tasb,sbc->tasc", W4, Xi)  # W Xi, (n, ny, n, nx)
    G_Sx = np.einsum("tad,tasc->tdsc", Xi, WXi).reshape(n * nx, n * nx)
    G_Sx = 0.5 * (G_Sx + G_Sx.T)
    XiSx4 = XiSx.reshape(n, ny, n, nx)
    G_Xi = 2.0 * np.einsum("tasb,sbtc->tac", W4, XiSx4) + 2.0 * alpha_t[:, :, None] * mu.reshape(n, 1, nx)
    idx = np.arange(n)
    G_Sy = W4[idx, :, idx, :]

    # chain rule through the transfer matrix and the drive
    G_L = np.outer(g_mu, m) + 2.0 * G_Sx @ LQ
    H = (L.T @ G_L @ L.T).reshape(n, nx, n, nx)
    dA = H[idx[1:], :, idx[:-1], :].sum(axis=0)
    g_m = (L.T @ g_mu).reshape(n, nx)
    G_Q = (L.T @ G_Sx @ L).reshape(n, nx, n, nx)

    dB = g_m[1:].T @ u[:-1]
    dmu0 = g_m[0]
    dSx0 = G_Q[0, :, 0, :]
    dSw = G_Q[idx[1:], :, idx[1:], :].sum(axis=0)
    dC = np.empty_like(params.C)
    dC[0] = G_Xi.sum(axis=0)
    dC[1:] = np.einsum("tk,tab->kab", u, G_Xi)
    dD = 2.0 * alpha_t.T @ u
    dSv = G_Sy.sum(axis=0)

    grad = GradientTuple(
        A=dA, B=dB, C=dC, D=dD, mu_x0=dmu0, S_x0=_sym(dSx0), S_w=_sym(dSw), S_v=_sym(dSv)
    )
    return cost, grad


def _state_blocks(params, inputs):
    """Powers of ``A``, state means ``mu_t`` and variances ``P_t``, and all blocks of ``S_x``.

    ``S_x[t, s] = A^(t-s) P_s`` for ``t >= s``; ``Sig`` has shape
    ``(n, n, nx, nx)`` indexed by block row and column.
    """
    n = inputs.shape[0]
    Pow = matrix_powers(params.A, n)
    mu, P = _kernels.state_moments(params.A, inputs @ params.B.T, params.mu_x0, params.S_x0, params.S_w)
    return Pow, mu, P, _kernels.state_cov_blocks(Pow, P)


def ml_cost_and_gradient(params, dataset):
    """Cost and its gradient with respect to every parameter block.

    Gradients with respect to covariance parameters are symmetric: for any
    symmetric perturbation ``dS`` the first-order change is ``tr(G dS)``.

    The state covariance is handled block-wise, ``S_x[t, s] = A^(t-s) P_s``
    with ``P_{s+1} = A P_s A^T + S_w``, and the chain rule is carried out by
    backward (adjoint) recursions over the mean recursion, the ``P``
    recursion and the powers of ``A``.
    """
    dataset.check_dims(params.dims)
    n, ny = dataset.n_d, params.dims.ny
    u = dataset.inputs
    A = params.A

    Pow, mu, P, Sig = _state_blocks(params, u)
    Xi = xi_sequence(params, u)
    S, XiSig = _kernels.output_cov_blocks(Xi, Sig, params.S_v)
    cf_S = _chol(S, "output covariance")
    r = (u @ params.D.T - dataset.outputs + (Xi @ mu[:, :, None])[:, :, 0]).ravel()
    S_inv = _chol_inverse(cf_S, "output covariance")
    alpha = S_inv @ r
    cost = _logdet(cf_S) + float(r @ alpha)
    W = S_inv - np.outer(alpha, alpha)
    alpha_t = alpha.reshape(n, ny)

    # derivatives with respect to mu_x, S_x (through its blocks), Xi_t, D and S_v
    g_mu = 2.0 * np.einsum("tab,ta->tb", Xi, alpha_t)
    G_Xi, direct, X = _kernels.gradient_blocks(Xi, XiSig, W, Pow, P)
    G_Xi += 2.0 * alpha_t[:, :, None] * mu[:, None, :]
    idx = np.arange(n * ny).reshape(n, ny)
    G_Sy = W[idx[:, :, None], idx[:, None, :]]

    # backward through the mean recursion, the powers of A and the P recursion
    dA, dB, dmu0, dSx0, dSw = _kernels.adjoint_recursions(A, mu, u, P, g_mu, direct, X)

    dC = np.empty_like(params.C)
    dC[0] = G_Xi.sum(axis=0)
    dC[1:] = np.einsum("tk,tab->kab", u, G_Xi)
    dD = 2.0 * alpha_t.T @ u
    dSv = G_Sy.sum(axis=0)
    grad = GradientTuple(
        A=dA, B=dB, C=dC, D=dD, mu_x0=dmu0, S_x0=_sym(dSx0), S_w=_sym(dSw), S_v=_sym(dSv)
    )
    return cost, grad


def ml_gradient(params, dataset):
    return ml_cost_and_gradient(params, dataset)[1]


def unit_matrix(n, i, j):
    E = np.zeros((n, n))
    E[i, j] = 1.0
    return E


def power_sensitivity(powers, n, i, j):
    """``f^n_ij(A) = sum_{r<n} A^r E_ij A^(n-1-r)``, the derivative of ``A^n``."""
    nx = powers.shape[1]
    out = np.zeros((nx, nx))
    for r in range(n):
        out += np.outer(powers[r][:, i], powers[n - 1 - r][j, :])
    return out


def state_moment_jacobian_A(params, inputs):
    """Explicit derivatives of ``mu_x`` and ``S_x`` with respect to each ``A[i, j]``.

    Returns ``(dmu, dS)`` of shapes ``(nx, nx, n_d nx)`` and
    ``(nx, nx, n_d nx, n_d nx)``, built block by block from ``f^n_ij``.
    Cost is cubic in ``n_d`` per entry; intended for small problems and checks.
    """
    d = params.dims
    u = np.asarray(inputs, dtype=float).reshape(-1, d.nu)
    n, nx = u.shape[0], d.nx
    P = matrix_powers(params.A, n + 1)
    Bu = u @ params.B.T
    dmu = np.zeros((nx, nx, n, nx))
    dS = np.zeros((nx, nx, n, nx, n, nx))
    for i in range(nx):
        for j in range(nx):
            f = np.array([power_sensitivity(P, k, i, j) for k in range(n + 1)])
            for t in range(n):
                dmu[i, j, t] = f[t] @ params.mu_x0 + sum(f[t - 1 - k] @ Bu[k] for k in range(t - 1))
                for s in range(n):
                    blk = P[t] @ params.S_x0 @ f[s].T + f[t] @ params.S_x0 @ P[s].T
                    for k in range(min(s, t)):
                        blk += P[t - 1 - k] @ params.S_w @ f[s - 1 - k].T
                        blk += f[t - 1 - k] @ params.S_w @ P[s - 1 - k].T
                    dS[i, j, t, :, s, :] = blk
    return dmu.reshape(nx, nx, n * nx), dS.reshape(nx, nx, n * nx, n * nx)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 5000
    step_size: float = 1e-2
    max_step: float = 1e3
    max_step_norm: float = 1.0
    step_rule: str = "bb"
    line_search: bool = True
    armijo_c: float = 1e-4
    max_halvings: int = 40
    epsilon: float = 1e-6
    covariance_parameterization: str = "log-cholesky"
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.epsilon > 0 or not self.step_size > 0:
            raise ValueError("epsilon and step_size must be positive")
        if self.step_rule not in ("bb", "doubling"):
            raise ValueError("step_rule must be 'bb' or 'doubling'")
        if self.covariance_parameterization != "log-cholesky":
            raise ValueError("only the log-cholesky parameterization is supported")


_PLAIN = ("A", "B", "C", "D", "mu_x0")
_COVS = ("S_x0", "S_w", "S_v")


def _log_cholesky(S):
    Lc = np.linalg.cholesky(S)
    out = Lc.copy()
    np.fill_diagonal(out, np.log(np.diag(Lc)))
    return out[np.tril_indices_from(out)]


def _from_log_cholesky(v, n):
    Lc = np.zeros((n, n))
    Lc[np.tril_indices(n)] = v
    np.fill_diagonal(Lc, np.exp(np.diag(Lc)))
    return Lc


class LogCholeskyMap:
    """Unconstrained coordinates for a parameter tuple.

    Mean-type blocks are used as is; each covariance ``S`` is represented by
    the lower triangle of its Cholesky factor with a log-transformed diagonal.
    """

    def __init__(self, dims):
        self.dims = dims

    def pack(self, params):
        parts = [np.ravel(getattr(params, name)) for name in _PLAIN]
        parts += [_log_cholesky(getattr(params, name)) for name in _COVS]
        return np.concatenate(parts)

    def _split(self, phi):
        d = self.dims
        sizes = {
            "A": d.nx * d.nx,
            "B": d.nx * d.nu,
            "C": (d.nu + 1) * d.ny * d.nx,
            "D": d.ny * d.nu,
            "mu_x0": d.nx,
            "S_x0": d.nx * (d.nx + 1) // 2,
            "S_w": d.nx * (d.nx + 1) // 2,
            "S_v": d.ny * (d.ny + 1) // 2,
        }
        out, pos = {}, 0
        for name, size in sizes.items():
            out[name] = phi[pos : pos + size]
            pos += size
        return out

    def unpack(self, phi):
        d = self.dims
        p = self._split(phi)
        covs = {}
        for name in _COVS:
            n = d.ny if name == "S_v" else d.nx
            Lc = _from_log_cholesky(p[name], n)
            covs[name] = Lc @ Lc.T
        return SystemParams(
            d,
            p["A"].reshape(d.nx, d.nx),
            p["B"].reshape(d.nx, d.nu),
            p["C"].reshape(d.nu + 1, d.ny, d.nx),
            p["D"].reshape(d.ny, d.nu),
            p["mu_x0"],
            covs["S_x0"],
            covs["S_w"],
            covs["S_v"],
        )

    def pullback(self, params, grad):
        """Gradient in the unconstrained coordinates from a :class:`GradientTuple`."""
        parts = [np.ravel(getattr(grad, name)) for name in _PLAIN]
        for name in _COVS:
            Lc = np.linalg.cholesky(getattr(params, name))
            dL = 2.0 * getattr(grad, name) @ Lc
            dL[np.diag_indices_from(dL)] *= np.diag(Lc)
            parts.append(dL[np.tril_indices_from(dL)])
        return np.concatenate(parts)


def _cost_via_output_covariance(params, dataset):
    """``logdet S + r^T S^-1 r``; equal to :func:`ml_cost` and needs one factorization."""
    _, mu, _, Sig = _state_blocks(params, dataset.inputs)
    Xi = xi_sequence(params, dataset.inputs)
    S, _ = _kernels.output_cov_blocks(Xi, Sig, params.S_v)
    cf_S = _chol(S, "output covariance")
    r = (dataset.inputs @ params.D.T - dataset.outputs + (Xi @ mu[:, :, None])[:, :, 0]).ravel()
    return _logdet(cf_S) + float(r @ linalg.cho_solve(cf_S, r))


def _trial_point(cmap, phi):
    # a long trial step can overflow the exponentiated Cholesky diagonal; the cost is then inf
    with np.errstate(over="ignore", invalid="ignore"):
        return cmap.unpack(phi)


def _safe_cost(params, dataset):
    try:
        with np.errstate(all="ignore"):
            J = _cost_via_output_covariance(params, dataset)
    except (ConditioningError, FloatingPointError):
        return np.inf
    return J if np.isfinite(J) else np.inf


def _next_step(options, step, s, y):
    if options.step_rule == "bb":
        sy = float(s @ y)
        if sy > 0.0:
            return min(float(s @ s) / sy, options.max_step)
    return min(2.0 * step, options.max_step)


def fit_ml(dataset, init, options=None):
    """Gradient descent on the ML cost with Armijo backtracking.

    With ``options.line_search`` off, every iteration takes the fixed step
    ``options.step_size`` (plain gradient descent) and the cost may increase.

    Each iteration moves along the negative gradient in log-Cholesky
    coordinates.  The trial step is the Barzilai-Borwein step from the last
    two iterates (``step_rule="bb"``) or twice the previous accepted step
    (``"doubling"``), capped at ``options.max_step``, and is halved until the
    Armijo sufficient-decrease condition holds, so the cost never increases.
    Stops when the change of the parameter tuple falls below
    ``options.epsilon`` or after ``options.max_iters`` iterations.
    """
    options = options or FitOptions()
    dataset.check_dims(init.dims)
    if not check_input_excitation(dataset):
        logger.warning("inputs violate the excitation rank condition; identifiability may suffer")
    cmap = LogCholeskyMap(init.dims)
    t_start = time.perf_counter()

    params = cmap.unpack(cmap.pack(init))
    phi = cmap.pack(params)
    try:
        cost, grad = ml_cost_and_gradient(params, dataset)
    except ConditioningError as exc:
        exc.index = 0
        raise
    report = EstimationReport(params=params, method="ml", termination="max_iters", n_iter=0)
    if options.record_trace:
        report.cost_trace.append(cost)
    step = options.step_size
    theta = params.to_vector()

    g = cmap.pullback(params, grad)
    for k in range(options.max_iters):
        t_iter = time.perf_counter()
        gg = float(g @ g)
        if not np.isfinite(gg):
            raise OptimizationError(f"non-finite gradient at iteration {k}")
        accepted = False
        if not options.line_search:
            # plain gradient descent with a fixed step; only a non-finite cost stops it
            step = options.step_size
            trial = _trial_point(cmap, phi - step * g)
            accepted = np.isfinite(_safe_cost(trial, dataset))
        else:
            if options.max_step_norm > 0:
                step = min(step, options.max_step_norm / np.sqrt(gg))
            for _ in range(options.max_halvings + 1):
                trial = _trial_point(cmap, phi - step * g)
                J_new = _safe_cost(trial, dataset)
                if J_new <= cost - options.armijo_c * step * gg:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            if k == 0:
                raise OptimizationError("line search failed at the first iteration")
            report.termination = "line_search_exhausted" if options.line_search else "non_finite_cost"
            break

        phi_new = phi - step * g
        params = trial
        try:
            cost, grad = ml_cost_and_gradient(params, dataset)
        except ConditioningError as exc:
            exc.index = k + 1
            raise
        g_new = cmap.pullback(params, grad)
        new_theta = params.to_vector()
        dtheta = float(np.linalg.norm(new_theta - theta))
        theta = new_theta
        report.n_iter = k + 1
        if options.record_trace:
            report.cost_trace.append(cost)
            report.step_norms.append(dtheta)
            report.iter_times.append(time.perf_counter() - t_iter)
        if dtheta < options.epsilon:
            report.termination = "converged"
            break
        if options.line_search:
            step = _next_step(options, step, phi_new - phi, g_new - g)
        phi, g = phi_new, g_new

    report.params = params
    report.wall_time = time.perf_counter() - t_start
    if not options.record_trace:
        report.cost_trace.append(cost)
    return report
