"""Trajectory simulation, excitation signals and SNR calibration.

Random draws come from ``numpy.random.Generator`` (PCG64 bit generator,
ziggurat normals via ``standard_normal``).  One generator stream is used per
trajectory and consumed in the order x_0, w_0, v_0, w_1, v_1, ...
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, CovarianceError
from .model import Dataset, xi_sequence

logger = logging.getLogger(__name__)

MAX_SNR_DB = 300.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray
    inputs: np.ndarray
    seed: object = None

    @property
    def dataset(self):
        return Dataset(self.inputs, self.outputs)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _cholesky(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance is not positive definite") from exc


def sample_mvn(mean, cov, rng):
    """``mean + L z`` with ``L`` the lower Cholesky factor of ``cov``."""
    mean = np.ravel(np.asarray(mean, dtype=float))
    L = _cholesky(cov)
    return mean + L @ _rng(rng).standard_normal(mean.size)


def simulate(params, inputs, seed=None, noise=True):
    """Roll the model forward over ``inputs``.

    With ``noise=False`` no random numbers are drawn: ``x_0 = mu_x0`` and all
    noise terms are zero (the mean response).
    """
    d = params.dims
    u = np.asarray(inputs, dtype=float).reshape(-1, d.nu)
    n = u.shape[0]
    if n < 1:
        raise ValueError("inputs must be nonempty")
    Xi = xi_sequence(params, u)
    A, B, D = params.A, params.B, params.D

    x = np.empty((n, d.nx))
    y = np.empty((n, d.ny))
    if noise:
        rng = _rng(seed)
        Lw = _cholesky(params.S_w)
        Lv = _cholesky(params.S_v)
        x_t = sample_mvn(params.mu_x0, params.S_x0, rng)
        z = rng.standard_normal((n, d.nx + d.ny))
        w = z[:, : d.nx] @ Lw.T
        v = z[:, d.nx :] @ Lv.T
    else:
        x_t = np.array(params.mu_x0, dtype=float)
        w = np.zeros((n, d.nx))
        v = np.zeros((n, d.ny))

    for t in range(n):
        x[t] = x_t
        y[t] = Xi[t] @ x_t + D @ u[t] + v[t]
        x_t = A @ x_t + B @ u[t] + w[t]
    return Trajectory(states=x, outputs=y, inputs=u, seed=seed)


def gen_random_binary(n_d, nu=1, low=-1.0, high=1.0, seed=None):
    """I.i.d. inputs taking ``low`` or ``high`` with probability 1/2 each."""
    if n_d < 2:
        raise ValueError("n_d must be at least 2")
    bits = _rng(seed).integers(0, 2, size=(n_d, nu))
    return np.where(bits == 1, float(high), float(low))


def gen_sinusoid(n_d, nu=1, amplitudes=(1.0,), angular_freqs=(1.0,), sample_time=1.0):
    """Multi-tone sine inputs.

    ``amplitudes`` and ``angular_freqs`` are per-channel sequences; an entry
    may itself be a sequence, in which case that channel is a sum of tones.
    """
    if n_d < 2:
        raise ValueError("n_d must be at least 2")
    t = np.arange(n_d) * sample_time
    out = np.zeros((n_d, nu))
    amplitudes = list(amplitudes) if np.ndim(amplitudes) else [amplitudes] * nu
    angular_freqs = list(angular_freqs) if np.ndim(angular_freqs) else [angular_freqs] * nu
    for i in range(nu):
        amps = np.atleast_1d(amplitudes[i])
        freqs = np.atleast_1d(angular_freqs[i])
        for a, w in zip(amps, freqs):
            out[:, i] += a * np.sin(w * t)
    return out


def output_variance(outputs):
    """Mean over output channels of the per-channel sample variance."""
    return float(np.mean(np.var(np.asarray(outputs), axis=0)))


def calibrate_snr(params, inputs, target_snr_db, seed=None):
    """Isotropic ``(S_w, S_v)`` giving the requested output SNR.

    SNR is ``10 log10(var(noise-free output) / var(additive output noise))``.
    The noise budget is split evenly: ``S_v`` gets half, and ``S_w`` is scaled
    so that the output variance it induces (measured on one seeded rollout)
    supplies the other half.  Requests above 300 dB are capped.
    """
    if not np.isfinite(target_snr_db):
        if target_snr_db > 0:
            target_snr_db = MAX_SNR_DB
        else:
            raise CalibrationError("target SNR must be finite or +inf")
    target_snr_db = min(float(target_snr_db), MAX_SNR_DB)
    d = params.dims
    clean = simulate(params, inputs, noise=False).outputs
    var_clean = output_variance(clean)
    if not var_clean > 0.0:
        raise CalibrationError("noise-free output has zero variance; SNR is undefined")

    noise_var = var_clean / 10.0 ** (target_snr_db / 10.0)
    sigma_v2 = 0.5 * noise_var

    # output variance induced by unit process noise (linear in the scale)
    rng = _rng(seed)
    u = np.asarray(inputs, dtype=float).reshape(-1, d.nu)
    Xi = xi_sequence(params, u)
    w = rng.standard_normal((u.shape[0], d.nx))
    dev = np.zeros(d.nx)
    induced = np.empty((u.shape[0], d.ny))
    for t in range(u.shape[0]):
        induced[t] = Xi[t] @ dev
        dev = params.A @ dev + w[t]
    unit_var = output_variance(induced)
    if unit_var > 0.0:
        sigma_w2 = sigma_v2 / unit_var
    else:
        logger.warning("process noise does not reach the output; using S_w = S_v scale")
        sigma_w2 = sigma_v2
    return sigma_w2 * np.eye(d.nx), sigma_v2 * np.eye(d.ny)


def empirical_snr_db(params, inputs, seed):
    """SNR of one fresh noisy trajectory against the noise-free response."""
    clean = simulate(params, inputs, noise=False).outputs
    noisy = simulate(params, inputs, seed=seed).outputs
    return 10.0 * np.log10(output_variance(clean) / output_variance(noisy - clean))
