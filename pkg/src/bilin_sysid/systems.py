"""Built-in benchmark systems and zero-order-hold discretization."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import ParameterError
from .model import SystemParams

# Component values for the RC example are not published; these defaults are
# chosen here so that the discretized A is Schur-stable at a 1 ns sample time
# and the stated covariances give an output SNR close to 10 dB.
RC_DEFAULTS = {
    "R0": 50.0,
    "Rs": 1.0,
    "Rp": 10.0,
    "L": 1e-8,
    "C": 1e-8,
    "alpha": 4e-3,
    "sample_time": 1e-9,
}
RC_OMEGA = 2.0 * np.pi * 1e8


def example1(S_w=None, S_v=None, S_x0=None):
    """Two-state, single-input, single-output benchmark.

    Noise covariances default to identity placeholders and are normally set
    by SNR calibration; ``S_x0`` defaults to ``0.01 I``.
    """
    return SystemParams.from_arrays(
        A=[[0.6, -0.28], [0.25, 0.45]],
        B=[[0.5], [-0.5]],
        C=[[[0.5, -0.15]], [[0.15, 0.1]]],
        D=[[0.0]],
        mu_x0=[1.0, 1.0],
        S_x0=0.01 * np.eye(2) if S_x0 is None else S_x0,
        S_w=np.eye(2) if S_w is None else S_w,
        S_v=np.eye(1) if S_v is None else S_v,
    )


def scalar_system(S_w=1.0, S_v=1.0, S_x0=1e-8):
    """``x+ = 0.6 x + 0.45 u``, ``y = (0.3 + 0.1 u) x``, ``mu_x0 = 1``, negligible ``S_x0``."""
    return SystemParams.from_arrays(
        A=[[0.6]],
        B=[[0.45]],
        C=[[[0.3]], [[0.1]]],
        D=[[0.0]],
        mu_x0=[1.0],
        S_x0=[[S_x0]],
        S_w=[[S_w]],
        S_v=[[S_v]],
    )


def zoh_discretize(A_c, B_c, h):
    """Zero-order-hold discretization ``(A, B)`` of ``dx/dt = A_c x + B_c u``.

    Uses the exponential of the augmented matrix ``[[A_c, B_c], [0, 0]] h``
    (``scipy.linalg.expm``: scaling and squaring with a degree-13 Pade
    approximant), which yields ``A = exp(A_c h)`` and
    ``B = int_0^h exp(A_c s) ds B_c`` without inverting ``A_c``; it is exact
    for singular ``A_c`` as well.
    """
    A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
    B_c = np.asarray(B_c, dtype=float).reshape(A_c.shape[0], -1)
    if not h > 0:
        raise ParameterError("sample time must be positive")
    nx, nu = B_c.shape
    aug = np.zeros((nx + nu, nx + nu))
    aug[:nx, :nx] = A_c
    aug[:nx, nx:] = B_c
    E = linalg.expm(aug * h)
    return E[:nx, :nx], E[:nx, nx:]


def rc_continuous(Rs, Rp, L, C):
    """Continuous-time ``(A_c, B_c)`` for the state ``(inductor current, capacitor voltage)``."""
    A_c = np.array([[-Rs / L, -1.0 / L], [1.0 / C, -1.0 / (C * Rp)]])
    B_c = np.array([[1.0 / L], [0.0]])
    return A_c, B_c


def discretize_rc(
    R0=RC_DEFAULTS["R0"],
    Rs=RC_DEFAULTS["Rs"],
    Rp=RC_DEFAULTS["Rp"],
    L=RC_DEFAULTS["L"],
    C=RC_DEFAULTS["C"],
    alpha=RC_DEFAULTS["alpha"],
    sample_time=RC_DEFAULTS["sample_time"],
    S_w=None,
    S_v=None,
    S_x0=None,
    mu_x0=None,
):
    """Discrete-time bilinear model of the RC load with a non-ideal capacitor.

    The measured quantity is ``alpha * I_L * V`` (heat proportional to current
    times applied voltage), i.e. ``C_0 = 0``, ``C_1 = [alpha, 0]``, ``D = 0``.
    ``R0`` sits in parallel with the ideal source, so it does not enter the
    load dynamics; it is accepted and validated for completeness.
    """
    values = {"R0": R0, "Rs": Rs, "Rp": Rp, "L": L, "C": C, "alpha": alpha, "sample_time": sample_time}
    for name, v in values.items():
        if not (np.isfinite(v) and v > 0):
            raise ParameterError(f"{name} must be positive, got {v!r}")
    A_c, B_c = rc_continuous(Rs, Rp, L, C)
    A, B = zoh_discretize(A_c, B_c, sample_time)
    return SystemParams.from_arrays(
        A=A,
        B=B,
        C=[np.zeros((1, 2)), [[alpha, 0.0]]],
        D=[[0.0]],
        mu_x0=np.zeros(2) if mu_x0 is None else mu_x0,
        S_x0=1e-3 * np.eye(2) if S_x0 is None else S_x0,
        S_w=1e-3 * np.eye(2) if S_w is None else S_w,
        S_v=[[1e-4]] if S_v is None else S_v,
    )


def example2(**overrides):
    """RC example with artifact-chosen component values (see ``RC_DEFAULTS``)."""
    return discretize_rc(**overrides)


def rc_training_input(n_d=1000, sample_time=RC_DEFAULTS["sample_time"]):
    """``12 sin(omega t)``."""
    t = np.arange(n_d) * sample_time
    return (12.0 * np.sin(RC_OMEGA * t)).reshape(-1, 1)


def rc_validation_input(n_d=1000, sample_time=RC_DEFAULTS["sample_time"]):
    """``6 sin(omega t) + 6 sin(0.3 omega t)``."""
    t = np.arange(n_d) * sample_time
    return (6.0 * np.sin(RC_OMEGA * t) + 6.0 * np.sin(0.3 * RC_OMEGA * t)).reshape(-1, 1)


BUILTIN_SYSTEMS = {
    "example1": example1,
    "example2": example2,
    "scalar": scalar_system,
}


def builtin(name):
    try:
        return BUILTIN_SYSTEMS[name]()
    except KeyError:
        raise ParameterError(f"unknown built-in system {name!r}; choose from {sorted(BUILTIN_SYSTEMS)}") from None
