"""Expectation-maximization identification.

E-step: Kalman filter and RTS smoother under the current parameters.  The
smoother also covers the latent state ``x_{n_d}`` that follows the last
sample, because the transition terms of the expected complete-data
log-likelihood run over ``t = 0 ... n_d - 1`` and involve ``x_{t+1}``.

M-step: closed-form minimizer of

    J_k(theta) = n_d/2 logdet S_v + 1/2 logdet S_x0 + n_d/2 logdet S_w
                 + 1/2 tr(S_x0^-1 F) + 1/2 tr(S_v^-1 G) + 1/2 tr(S_w^-1 H)

where ``F``, ``G``, ``H`` are the posterior expectations of the initial-state,
output and transition residual scatter matrices.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import ConditioningError, EstimationError, ExcitationError
from .ml import log_likelihood
from .model import (
    Dims,
    SystemParams,
    check_input_excitation,
    check_output_excitation,
    validate_params,
    xi_sequence,
)
from .report import EstimationReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FilterResult:
    """Filtered and one-step predicted moments.

    ``x_pred[t]`` is the prediction of ``x_t`` from ``y_0 .. y_{t-1}``
    (``x_pred[0] = mu_x0``); there are ``n_d + 1`` predictions.
    """

    x_filt: np.ndarray
    P_filt: np.ndarray
    x_pred: np.ndarray
    P_pred: np.ndarray
    gains: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    loglik: float
    inputs: np.ndarray
    outputs: np.ndarray

    @property
    def n_d(self):
        return self.x_filt.shape[0]


@dataclass(frozen=True, eq=False)
class SmootherResult:
    """Smoothed moments for ``x_0 .. x_{n_d-1}`` and, separately, ``x_{n_d}``.

    ``gains`` and ``cross_moments`` have ``n_d - 1`` entries (pairs inside the
    data window); the pair ``(x_{n_d}, x_{n_d-1})`` is kept in the
    ``terminal_*`` fields.
    """

    x_smooth: np.ndarray
    P_smooth: np.ndarray
    gains: np.ndarray
    xx_moments: np.ndarray
    cross_moments: np.ndarray
    x_terminal: np.ndarray
    P_terminal: np.ndarray
    terminal_gain: np.ndarray
    terminal_cross: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    @property
    def n_d(self):
        return self.x_smooth.shape[0]


@dataclass(frozen=True)
class EmOptions:
    max_iters: int = 5000
    epsilon: float = 1e-5
    monotonicity_audit: bool = False
    record_trace: bool = True
    record_params: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def kalman_filter(params, dataset):
    dataset.check_dims(params.dims)
    Xi = np.ascontiguousarray(xi_sequence(params, dataset.inputs))
    arr = lambda a: np.ascontiguousarray(a, dtype=float)  # noqa: E731
    status, x_pred, P_pred, x_filt, P_filt, K, innov, S_inn, loglik = _kernels.filter_pass(
        arr(params.A),
        arr(params.B),
        arr(params.D),
        arr(params.S_w),
        arr(params.S_v),
        arr(params.mu_x0),
        arr(params.S_x0),
        Xi,
        arr(dataset.inputs),
        arr(dataset.outputs),
    )
    if status >= 0:
        raise ConditioningError(
            f"innovation covariance not positive definite at t={status}", term="innovation covariance", index=int(status)
        )
    return FilterResult(x_filt, P_filt, x_pred, P_pred, K, innov, S_inn, float(loglik), dataset.inputs, dataset.outputs)


def rts_smooth(params, filt):
    status, xs, Ps, G, cross = _kernels.smoother_pass(
        np.ascontiguousarray(params.A), filt.x_pred, filt.P_pred, filt.x_filt, filt.P_filt
    )
    if status >= 0:
        raise ConditioningError(
            f"predicted covariance not positive definite at t={status + 1}", term="predicted covariance", index=int(status) + 1
        )
    n = filt.n_d
    x, P = xs[:n], Ps[:n]
    xx = P + x[:, :, None] * x[:, None, :]
    cross_m = cross[: n - 1] + xs[1:n, :, None] * xs[: n - 1, None, :]
    term_cross = cross[n - 1] + np.outer(xs[n], xs[n - 1])
    return SmootherResult(
        x_smooth=x,
        P_smooth=P,
        gains=G[: n - 1],
        xx_moments=xx,
        cross_moments=cross_m,
        x_terminal=xs[n],
        P_terminal=Ps[n],
        terminal_gain=G[n - 1],
        terminal_cross=term_cross,
        inputs=filt.inputs,
        outputs=filt.outputs,
    )


def e_step(params, dataset):
    filt = kalman_filter(params, dataset)
    return filt, rts_smooth(params, filt)


# ---------------------------------------------------------------------------
# sufficient statistics, M-step and J_k
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentStats:
    """Posterior sums that fully determine ``J_k`` and its minimizer.

    ``Phi``: sum of ``E[xi xi^T]``, ``xi_t = [x_t; u_t]``.
    ``Cross``: sum of ``E[x_{t+1} xi_t^T]``.
    ``Sxx_next``: sum of ``E[x_{t+1} x_{t+1}^T]``.
    ``Psi``: sum of ``E[z z^T]``, ``z_t = [x_t; u_t (x) x_t; u_t]``.
    ``Yz``: sum of ``y_t E[z_t]^T``;  ``Yy``: sum of ``y_t y_t^T``.
    """

    n_d: int
    Phi: np.ndarray
    Cross: np.ndarray
    Sxx_next: np.ndarray
    Psi: np.ndarray
    Yz: np.ndarray
    Yy: np.ndarray
    x0: np.ndarray
    P0: np.ndarray


def moment_stats(smoother):
    u = np.asarray(smoother.inputs)
    y = np.asarray(smoother.outputs)
    n, nx = smoother.x_smooth.shape
    nu = u.shape[1]
    x, P = smoother.x_smooth, smoother.P_smooth

    Exx = smoother.xx_moments.sum(axis=0)
    xu = x.T @ u
    Phi = np.block([[Exx, xu], [xu.T, u.T @ u]])

    x_next = np.vstack([x[1:], smoother.x_terminal[None]])
    cross_sum = smoother.cross_moments.sum(axis=0) + smoother.terminal_cross
    Cross = np.hstack([cross_sum, x_next.T @ u])
    Sxx_next = smoother.xx_moments[1:].sum(axis=0) + smoother.P_terminal + np.outer(
        smoother.x_terminal, smoother.x_terminal
    )

    # z_t = J_t x_t + [0; 0; u_t] with J_t = [I; u_t (x) I; 0]
    ux = (u[:, :, None] * x[:, None, :]).reshape(n, nu * nx)
    z = np.hstack([x, ux, u])
    Jt = np.zeros((n, nx * (nu + 1) + nu, nx))
    Jt[:, :nx, :] = np.eye(nx)
    Jt[:, nx : nx * (nu + 1), :] = (u[:, :, None, None] * np.eye(nx)).reshape(n, nu * nx, nx)
    Psi = z.T @ z + np.einsum("tai,tij,tbj->ab", Jt, P, Jt)
    return MomentStats(
        n_d=n,
        Phi=0.5 * (Phi + Phi.T),
        Cross=Cross,
        Sxx_next=0.5 * (Sxx_next + Sxx_next.T),
        Psi=0.5 * (Psi + Psi.T),
        Yz=y.T @ z,
        Yy=y.T @ y,
        x0=x[0].copy(),
        P0=P[0].copy(),
    )


def _gram_solve(G, rhs, name):
    """``rhs @ G^-1`` by Cholesky; raises ExcitationError when ``G`` is singular."""
    try:
        cf = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise ExcitationError(f"{name} Gram matrix is singular; inputs/outputs are not exciting enough") from exc
    d = np.diag(cf[0])
    if d.min() <= np.sqrt(np.finfo(float).eps) * d.max():
        raise ExcitationError(f"{name} Gram matrix is numerically singular")
    return linalg.cho_solve(cf, rhs.T).T


def _sym(S):
    return 0.5 * (S + S.T)


def m_step(smoother, dataset=None, stats=None):
    """Closed-form maximizer of the expected complete-data log-likelihood."""
    if dataset is not None:
        if not check_input_excitation(dataset):
            logger.warning("input sequence violates the input excitation rank condition")
        if not check_output_excitation(dataset):
            logger.warning("input/output data violate the output excitation rank condition")
    st = stats or moment_stats(smoother)
    n = st.n_d
    nx = st.x0.size
    nu = st.Phi.shape[0] - nx
    ny = st.Yy.shape[0]

    M = _gram_solve(st.Phi, st.Cross, "state regressor")
    S_w = _sym((st.Sxx_next - M @ st.Cross.T) / n)
    N = _gram_solve(st.Psi, st.Yz, "output regressor")
    S_v = _sym((st.Yy - N @ st.Yz.T) / n)

    C = N[:, : nx * (nu + 1)].reshape(ny, nu + 1, nx).transpose(1, 0, 2)
    return SystemParams(
        Dims(nx, nu, ny),
        M[:, :nx],
        M[:, nx:],
        C,
        N[:, nx * (nu + 1) :],
        st.x0,
        _sym(st.P0),
        S_w,
        S_v,
    )


def _scatter(params, st):
    """``(F, G, H)`` for the given parameters."""
    M, N = params.M, params.N
    d0 = st.x0 - params.mu_x0
    F = st.P0 + np.outer(d0, d0)
    H = st.Sxx_next - M @ st.Cross.T - st.Cross @ M.T + M @ st.Phi @ M.T
    G = st.Yy - N @ st.Yz.T - st.Yz @ N.T + N @ st.Psi @ N.T
    return _sym(F), _sym(G), _sym(H)


def _chol(S, term):
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"{term} is not positive definite", term=term) from exc


def _logdet(cf):
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def em_objective(params, smoother=None, dataset=None, stats=None):
    """``J_k(params)`` for the posterior summarized by ``smoother`` (or ``stats``)."""
    st = stats or moment_stats(smoother)
    n = st.n_d
    F, G, H = _scatter(params, st)
    cf0 = _chol(params.S_x0, "S_x0")
    cfv = _chol(params.S_v, "S_v")
    cfw = _chol(params.S_w, "S_w")
    return (
        0.5 * n * _logdet(cfv)
        + 0.5 * _logdet(cf0)
        + 0.5 * n * _logdet(cfw)
        + 0.5 * np.trace(linalg.cho_solve(cf0, F))
        + 0.5 * np.trace(linalg.cho_solve(cfv, G))
        + 0.5 * np.trace(linalg.cho_solve(cfw, H))
    )


def em_objective_gradient(params, smoother=None, stats=None):
    """Gradient of ``J_k``: dict with keys ``M``, ``N``, ``mu_x0``, ``S_x0``, ``S_w``, ``S_v``.

    Covariance gradients follow the symmetric convention ``dJ = tr(G dS)``.
    """
    st = stats or moment_stats(smoother)
    n = st.n_d
    F, G, H = _scatter(params, st)
    M, N = params.M, params.N
    iw = np.linalg.inv(params.S_w)
    iv = np.linalg.inv(params.S_v)
    i0 = np.linalg.inv(params.S_x0)
    return {
        "M": iw @ (M @ st.Phi - st.Cross),
        "N": iv @ (N @ st.Psi - st.Yz),
        "mu_x0": -i0 @ (st.x0 - params.mu_x0),
        "S_x0": _sym(0.5 * (i0 - i0 @ F @ i0)),
        "S_w": _sym(0.5 * (n * iw - iw @ H @ iw)),
        "S_v": _sym(0.5 * (n * iv - iv @ G @ iv)),
    }


# ---------------------------------------------------------------------------
# EM loop
# ---------------------------------------------------------------------------


def _fit_em_single(dataset, init, options):
    t_start = time.perf_counter()
    report = EstimationReport(params=init, method="em", termination="max_iters", n_iter=0)
    params = init
    theta = params.to_vector()
    if options.monotonicity_audit:
        report.loglik_trace.append(log_likelihood(params, dataset))
    if options.record_params:
        report.param_trace.append(params)
    for k in range(options.max_iters):
        t_iter = time.perf_counter()
        try:
            filt, smoother = e_step(params, dataset)
            new = m_step(smoother, dataset if k == 0 else None)
        except EstimationError as exc:
            if getattr(exc, "index", None) is None:
                exc.index = k
            exc.args = (f"EM iteration {k}: {exc.args[0]}",) + exc.args[1:]
            raise
        problems = validate_params(new)
        if problems:
            raise ConditioningError(f"EM iteration {k} left the feasible set: {'; '.join(problems)}", index=k)
        new_theta = new.to_vector()
        dtheta = float(np.linalg.norm(new_theta - theta))
        params, theta = new, new_theta
        report.n_iter = k + 1
        if options.record_trace:
            report.step_norms.append(dtheta)
            report.cost_trace.append(-filt.loglik)
            report.iter_times.append(time.perf_counter() - t_iter)
        if options.record_params:
            report.param_trace.append(params)
        if options.monotonicity_audit:
            report.loglik_trace.append(log_likelihood(params, dataset))
        if dtheta < options.epsilon:
            report.termination = "converged"
            break
    report.params = params
    report.wall_time = time.perf_counter() - t_start
    return report


def fit_em(dataset, init, options=None):
    """Run EM from one initial guess or from each guess in a list.

    With several initial guesses the run with the highest final
    log-likelihood is returned.  ``cost_trace`` holds the negative
    log-likelihood of the parameters used in each E-step.
    """
    options = options or EmOptions()
    inits = list(init) if isinstance(init, (list, tuple)) else [init]
    if not inits:
        raise ValueError("at least one initial guess is required")
    best, best_ll = None, -np.inf
    for guess in inits:
        dataset.check_dims(guess.dims)
        problems = validate_params(guess)
        if problems:
            raise ValueError(f"initial guess is infeasible: {'; '.join(problems)}")
        report = _fit_em_single(dataset, guess, options)
        if len(inits) == 1:
            return report
        ll = kalman_filter(report.params, dataset).loglik
        if best is None or ll > best_ll:
            best, best_ll = report, ll
    return best
