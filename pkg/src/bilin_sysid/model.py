"""Parametric model: dimensions, parameter tuple, datasets and data checks.

The model is

    x_{t+1} = A x_t + B u_t + w_t,            w_t ~ N(0, S_w)
    y_t     = Xi_t x_t + D u_t + v_t,         v_t ~ N(0, S_v)
    Xi_t    = C_0 + sum_i C_i u_{t,i}
    x_0     ~ N(mu_x0, S_x0)

for t = 0 ... n_d - 1.  Outputs are indexed with the state of the same step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SYMMETRY_RTOL = 1e-12
RANK_RTOL = 1e-10

COVARIANCE_FIELDS = ("S_x0", "S_w", "S_v")


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim < ndim:
        arr = arr.reshape(arr.shape + (1,) * (ndim - arr.ndim)) if arr.ndim else arr.reshape((1,) * ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dims:
    nx: int
    nu: int
    ny: int

    def __post_init__(self):
        for name in ("nx", "nu", "ny"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))


@dataclass(frozen=True, eq=False)
class SystemParams:
    """Full parameter tuple ``(A, B, C_0..C_nu, D, mu_x0, S_x0, S_w, S_v)``.

    ``C`` is stored as an array of shape ``(nu + 1, ny, nx)``; ``C[0]`` is the
    input-independent part.  Arrays are made read-only on construction.  Shape
    and positivity are *not* enforced here; use :func:`validate_params`.
    """

    dims: Dims
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    mu_x0: np.ndarray
    S_x0: np.ndarray
    S_w: np.ndarray
    S_v: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "D", "S_x0", "S_w", "S_v"):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim=2))
        object.__setattr__(self, "C", _frozen(np.asarray([np.atleast_2d(c) for c in self.C])))
        object.__setattr__(self, "mu_x0", _frozen(np.ravel(self.mu_x0)))

    @classmethod
    def from_arrays(cls, A, B, C, D, mu_x0, S_x0, S_w, S_v):
        """Build parameters, inferring dimensions from ``A``, ``B`` and ``C[0]``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        B = B.reshape(A.shape[0], -1) if B.ndim < 2 else B
        C = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C]
        dims = Dims(nx=A.shape[0], nu=B.shape[1], ny=C[0].shape[0])
        D = np.asarray(D, dtype=float)
        if D.ndim < 2:
            D = np.broadcast_to(D, (dims.ny, dims.nu)) if D.ndim == 0 else D.reshape(dims.ny, dims.nu)
        return cls(dims, A, B, C, D, mu_x0, S_x0, S_w, S_v)

    # derived views -----------------------------------------------------

    @property
    def C_stack(self):
        """``[C_0, C_1, ..., C_nu]`` as one ``ny x nx(nu+1)`` matrix."""
        return np.concatenate(list(self.C), axis=1)

    @property
    def M(self):
        """``[A, B]``."""
        return np.hstack([self.A, self.B])

    @property
    def N(self):
        """``[C_0, ..., C_nu, D]``."""
        return np.hstack([self.C_stack, self.D])

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def scaled(self, factor):
        """Every parameter block multiplied by ``factor`` (e.g. 0.5 for half-truth)."""
        return SystemParams(
            self.dims,
            *(factor * getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "dims"),
        )

    def to_vector(self):
        """All parameter entries concatenated (used for step-size norms)."""
        return np.concatenate(
            [np.ravel(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "dims"]
        )

    def allclose(self, other, rtol=0.0, atol=0.0):
        return self.dims == other.dims and np.allclose(self.to_vector(), other.to_vector(), rtol=rtol, atol=atol)

    def as_dict(self):
        return {
            "dims": dataclasses.asdict(self.dims),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": [c.tolist() for c in self.C],
            "D": self.D.tolist(),
            "mu_x0": self.mu_x0.tolist(),
            "S_x0": self.S_x0.tolist(),
            "S_w": self.S_w.tolist(),
            "S_v": self.S_v.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        dims = Dims(**d["dims"])
        return cls(dims, d["A"], d["B"], d["C"], d["D"], d["mu_x0"], d["S_x0"], d["S_w"], d["S_v"])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Input/output pairs; ``inputs`` is ``(n_d, nu)`` and ``outputs`` ``(n_d, ny)``."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float)
        u = u.reshape(-1, 1) if u.ndim == 1 else u
        y = y.reshape(-1, 1) if y.ndim == 1 else y
        if u.ndim != 2 or y.ndim != 2:
            raise ShapeError("inputs and outputs must be 1-D or 2-D arrays")
        if u.shape[0] != y.shape[0]:
            raise ShapeError(f"inputs have {u.shape[0]} rows but outputs have {y.shape[0]}")
        if u.shape[0] < 2:
            raise ShapeError("a dataset needs at least two samples")
        object.__setattr__(self, "inputs", _frozen(u))
        object.__setattr__(self, "outputs", _frozen(y))

    @property
    def n_d(self):
        return self.inputs.shape[0]

    @property
    def nu(self):
        return self.inputs.shape[1]

    @property
    def ny(self):
        return self.outputs.shape[1]

    def check_dims(self, dims):
        if self.nu != dims.nu or self.ny != dims.ny:
            raise ShapeError(
                f"dataset has nu={self.nu}, ny={self.ny} but the model expects nu={dims.nu}, ny={dims.ny}"
            )


def xi_at(params, u):
    """Effective observation matrix ``C_0 + sum_i C_i u[i]``."""
    u = np.ravel(np.asarray(u, dtype=float))
    if u.shape != (params.dims.nu,):
        raise ShapeError(f"input has length {u.size}, expected {params.dims.nu}")
    return params.C[0] + np.tensordot(u, params.C[1:], axes=1)


def xi_sequence(params, inputs):
    """Stack of ``Xi_t`` for every row of ``inputs``: shape ``(n_d, ny, nx)``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, params.dims.nu)
    return params.C[0][None] + np.einsum("ti,ijk->tjk", inputs, params.C[1:])


def is_positive_definite(S):
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.isfinite(S)))


def validate_params(params):
    """Return a list of violated invariants; empty means ``params`` is feasible."""
    d = params.dims
    expected = {
        "A": (d.nx, d.nx),
        "B": (d.nx, d.nu),
        "C": (d.nu + 1, d.ny, d.nx),
        "D": (d.ny, d.nu),
        "mu_x0": (d.nx,),
        "S_x0": (d.nx, d.nx),
        "S_w": (d.nx, d.nx),
        "S_v": (d.ny, d.ny),
    }
    report = []
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            report.append(f"{name} has shape {actual}, expected {shape}")
        elif not np.all(np.isfinite(getattr(params, name))):
            report.append(f"{name} has non-finite entries")
    for name in COVARIANCE_FIELDS:
        S = getattr(params, name)
        if S.shape != expected[name] or not np.all(np.isfinite(S)):
            continue
        scale = max(np.max(np.abs(S)), np.finfo(float).tiny)
        if np.max(np.abs(S - S.T)) > SYMMETRY_RTOL * scale:
            report.append(f"{name} not symmetric")
        elif not is_positive_definite(S):
            report.append(f"{name} not positive definite")
    return report


def numeric_rank(M, rtol=RANK_RTOL):
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def check_input_excitation(dataset):
    """Rank of ``[1 ... 1; u_0 ... u_{n_d-1}]`` equals ``nu + 1``."""
    stacked = np.vstack([np.ones(dataset.n_d), dataset.inputs.T])
    return numeric_rank(stacked) == dataset.nu + 1


def check_output_excitation(dataset):
    """Rank of ``[u; y]`` equals ``nu + ny``."""
    stacked = np.vstack([dataset.inputs.T, dataset.outputs.T])
    return numeric_rank(stacked) == dataset.nu + dataset.ny
