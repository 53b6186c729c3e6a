"""Random feasible instances shared by the test modules."""

import numpy as np

from bilin_sysid.ml import build_state_moments, output_operators
from bilin_sysid.model import Dataset, SystemParams
from bilin_sysid.simulate import gen_random_binary, simulate


def random_spd(rng, n, floor=0.1):
    R = rng.standard_normal((n, n))
    return R @ R.T / n + floor * np.eye(n)


def random_params(rng, nx, ny, nu, radius=0.8, D_zero=False):
    A = rng.standard_normal((nx, nx))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-3)
    return SystemParams.from_arrays(
        A=A,
        B=rng.standard_normal((nx, nu)),
        C=list(rng.standard_normal((nu + 1, ny, nx))),
        D=np.zeros((ny, nu)) if D_zero else rng.standard_normal((ny, nu)),
        mu_x0=rng.standard_normal(nx),
        S_x0=random_spd(rng, nx),
        S_w=random_spd(rng, nx),
        S_v=random_spd(rng, ny),
    )


def random_instance(rng, max_dim=3, max_n=10, min_n=2, D_zero=False):
    nx, ny, nu = (int(rng.integers(1, max_dim + 1)) for _ in range(3))
    n = int(rng.integers(min_n, max_n + 1))
    p = random_params(rng, nx, ny, nu, D_zero=D_zero)
    u = rng.standard_normal((n, nu))
    ds = simulate(p, u, seed=int(rng.integers(2**31))).dataset
    return p, ds


def binary_dataset(params, n, seed):
    u = gen_random_binary(n, params.dims.nu, seed=seed)
    return simulate(params, u, seed=seed + 1).dataset


def dense_joint(params, dataset):
    """Mean and covariance of the stacked ``(x_0..x_{n-1}, y_0..y_{n-1})`` by direct unrolling."""
    mom = build_state_moments(params, dataset.inputs)
    ops = output_operators(params, dataset.inputs)
    Xi = ops.Xi_dense()
    mu_y = Xi @ mom.mu_x + ops.D_dense() @ dataset.inputs.ravel()
    S_xy = mom.S_x @ Xi.T
    S_yy = Xi @ mom.S_x @ Xi.T + ops.S_y_dense()
    return mom.mu_x, mom.S_x, mu_y, S_xy, S_yy


def condition(mu_x, S_x, mu_y, S_xy, S_yy, y):
    """Posterior of ``x`` given ``y`` for a joint Gaussian."""
    K = np.linalg.solve(S_yy, S_xy.T).T
    return mu_x + K @ (y - mu_y), S_x - K @ S_xy.T


def as_dataset(u, y):
    return Dataset(np.asarray(u, float).reshape(len(u), -1), np.asarray(y, float).reshape(len(y), -1))


def extended_joint(params, dataset):
    """Joint Gaussian of ``(x_0..x_n, y_0..y_{n-1})``, including the state after the last sample."""
    n, nx, ny = dataset.n_d, params.dims.nx, params.dims.ny
    u_ext = np.vstack([dataset.inputs, np.zeros((1, params.dims.nu))])
    mom = build_state_moments(params, u_ext)
    Xi = np.zeros((n * ny, (n + 1) * nx))
    for t in range(n):
        Xi[t * ny : (t + 1) * ny, t * nx : (t + 1) * nx] = params.C[0] + np.tensordot(dataset.inputs[t], params.C[1:], 1)
    mu_y = Xi @ mom.mu_x + (dataset.inputs @ params.D.T).ravel()
    S_xy = mom.S_x @ Xi.T
    S_yy = Xi @ mom.S_x @ Xi.T + np.kron(np.eye(n), params.S_v)
    return mom.mu_x, mom.S_x, mu_y, S_xy, 0.5 * (S_yy + S_yy.T)


def random_feasible_near(rng, p):
    """Random feasible parameters around ``p``, with fresh covariances."""
    scale = rng.uniform(0.05, 1.0)
    d = p.dims
    return p.replace(
        A=p.A + scale * rng.standard_normal(p.A.shape),
        B=p.B + scale * rng.standard_normal(p.B.shape),
        C=p.C + scale * rng.standard_normal(p.C.shape),
        D=p.D + scale * rng.standard_normal(p.D.shape),
        mu_x0=p.mu_x0 + scale * rng.standard_normal(d.nx),
        S_x0=random_spd(rng, d.nx, floor=1e-3),
        S_w=random_spd(rng, d.nx, floor=1e-3),
        S_v=random_spd(rng, d.ny, floor=1e-3),
    )
