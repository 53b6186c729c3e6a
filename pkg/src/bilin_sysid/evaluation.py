"""Validation metrics, Monte-Carlo sweeps and runtime benchmarks.

Random streams are derived with ``numpy.random.SeedSequence`` from the base
seed and a key ``(stream tag, n_d, snr in milli-dB, trial)``, so every trial is
reproducible on its own and results do not depend on execution order or on
the number of worker processes.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .em import EmOptions, fit_em
from .errors import DegenerateValidationError, EstimationError, UndefinedMetricError
from .ml import FitOptions, fit_ml
from .model import SystemParams
from .simulate import calibrate_snr, gen_random_binary, simulate
from .systems import builtin, scalar_system

logger = logging.getLogger(__name__)

OUTPUT_NORM_FLOOR = 1e-12
DEGRADED_FAILURE_FRACTION = 0.2
THREADS_ENV = "BILIN_SYSID_THREADS"

STREAM_INPUTS, STREAM_NOISE, STREAM_CALIBRATION, STREAM_INIT, STREAM_VALIDATION = range(5)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OutputErrorDetails:
    total: float
    mean: float
    n_terms: int
    n_skipped: int
    y_true: np.ndarray
    y_est: np.ndarray


def output_error_details(true_params, est_params, val_inputs):
    """Noise-free rollouts of both systems from their own ``mu_x0`` and the per-step error ratios."""
    if true_params.dims != est_params.dims:
        raise ValueError("true and estimated parameters have different dimensions")
    y = simulate(true_params, val_inputs, noise=False).outputs
    y_hat = simulate(est_params, val_inputs, noise=False).outputs
    norms = np.linalg.norm(y, axis=1)
    keep = norms > OUTPUT_NORM_FLOOR
    if not keep.any():
        raise DegenerateValidationError("every reference output is numerically zero")
    ratios = np.linalg.norm(y - y_hat, axis=1)[keep] / norms[keep]
    n_skipped = int(np.count_nonzero(~keep))
    if n_skipped:
        logger.info("skipped %d validation steps with zero reference output", n_skipped)
    return OutputErrorDetails(
        total=float(ratios.sum()),
        mean=float(ratios.mean()),
        n_terms=int(ratios.size),
        n_skipped=n_skipped,
        y_true=y,
        y_est=y_hat,
    )


def normalized_output_error(true_params, est_params, val_inputs, mean=False):
    """Sum over steps of ``||y_t - y_hat_t|| / ||y_t||``; ``mean=True`` divides by the number of terms."""
    d = output_error_details(true_params, est_params, val_inputs)
    return d.mean if mean else d.total


def param_relative_error(true_params, est_params):
    """Frobenius relative errors of ``[C_0 ... C_nu]`` and ``[A B]``."""
    if true_params.dims != est_params.dims:
        raise ValueError("true and estimated parameters have different dimensions")
    out = []
    for name, ref, est in (
        ("C", true_params.C_stack, est_params.C_stack),
        ("M", true_params.M, est_params.M),
    ):
        denom = np.linalg.norm(ref)
        if denom == 0.0:
            raise UndefinedMetricError(f"true {name} has zero norm")
        out.append(float(np.linalg.norm(ref - est) / denom))
    return tuple(out)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def stream(seed, tag, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag,) + tuple(int(k) for k in key)))


def _snr_key(snr_db):
    return int(round(float(snr_db) * 1000))


@dataclass(frozen=True)
class McConfig:
    trials: int = 100
    snr_db_levels: tuple = (5.0, 10.0, 15.0, 20.0)
    dataset_lengths: tuple = (100, 200)
    validation_length: int = 100
    init_policy: str = "half-truth"
    perturbation_scale: float = 0.5
    seed: int = 0
    system: str = "example1"
    truth: SystemParams | None = None
    explicit_init: SystemParams | None = None
    fit_options: FitOptions = field(default_factory=FitOptions)
    em_options: EmOptions = field(default_factory=EmOptions)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if any(int(n) < 2 for n in self.dataset_lengths) or self.validation_length < 2:
            raise ValueError("dataset and validation lengths must be >= 2")
        if self.init_policy not in ("half-truth", "random-perturbation", "explicit"):
            raise ValueError(f"unknown init policy {self.init_policy!r}")
        if self.init_policy == "explicit" and self.explicit_init is None:
            raise ValueError("init policy 'explicit' needs explicit_init")
        object.__setattr__(self, "snr_db_levels", tuple(float(s) for s in self.snr_db_levels))
        object.__setattr__(self, "dataset_lengths", tuple(int(n) for n in self.dataset_lengths))

    def true_params(self):
        return self.truth if self.truth is not None else builtin(self.system)

    def as_dict(self):
        d = {
            "trials": self.trials,
            "snr_db_levels": list(self.snr_db_levels),
            "dataset_lengths": list(self.dataset_lengths),
            "validation_length": self.validation_length,
            "init_policy": self.init_policy,
            "perturbation_scale": self.perturbation_scale,
            "seed": self.seed,
            "system": self.system,
            "truth": None if self.truth is None else self.truth.as_dict(),
            "explicit_init": None if self.explicit_init is None else self.explicit_init.as_dict(),
            "fit_options": dataclasses.asdict(self.fit_options),
            "em_options": dataclasses.asdict(self.em_options),
        }
        return d


def initial_guess(truth, policy, rng=None, scale=0.5, explicit=None):
    if policy == "half-truth":
        return truth.scaled(0.5)
    if policy == "explicit":
        return explicit
    if policy == "random-perturbation":
        blocks = {}
        for f in dataclasses.fields(truth):
            if f.name == "dims":
                continue
            blocks[f.name] = getattr(truth, f.name) * (1.0 + rng.uniform(-scale, scale))
        return truth.replace(**blocks)
    raise ValueError(f"unknown init policy {policy!r}")


@dataclass(frozen=True)
class TrialRecord:
    method: str
    snr_db: float
    n_d: int
    trial: int
    ok: bool
    output_error_sum: float = float("nan")
    output_error_mean: float = float("nan")
    C_error: float = float("nan")
    M_error: float = float("nan")
    runtime: float = float("nan")
    n_iter: int = 0
    termination: str = ""
    failure: str = ""
    train_key: tuple = ()
    validation_key: tuple = ()


SUMMARY_METRICS = ("output_error_mean", "output_error_sum", "C_error", "M_error")


def run_trial(config, method, snr_db, n_d, trial):
    """One Monte-Carlo trial; estimation failures are recorded, not raised."""
    truth = config.true_params()
    nu = truth.dims.nu
    u = gen_random_binary(n_d, nu, seed=stream(config.seed, STREAM_INPUTS, n_d))
    S_w, S_v = calibrate_snr(truth, u, snr_db, seed=stream(config.seed, STREAM_CALIBRATION, n_d, _snr_key(snr_db)))
    sys_ = truth.replace(S_w=S_w, S_v=S_v)
    train_key = (STREAM_NOISE, n_d, _snr_key(snr_db), trial)
    val_key = (STREAM_VALIDATION, n_d, _snr_key(snr_db), trial)
    data = simulate(sys_, u, seed=stream(config.seed, *train_key)).dataset
    init = initial_guess(
        sys_,
        config.init_policy,
        rng=stream(config.seed, STREAM_INIT, n_d, _snr_key(snr_db), trial),
        scale=config.perturbation_scale,
        explicit=config.explicit_init,
    )
    base = dict(method=method, snr_db=float(snr_db), n_d=int(n_d), trial=int(trial), train_key=train_key, validation_key=val_key)
    t0 = time.perf_counter()
    try:
        if method == "ml":
            report = fit_ml(data, init, config.fit_options)
        elif method == "em":
            report = fit_em(data, init, config.em_options)
        else:
            raise ValueError(f"unknown method {method!r}")
        runtime = time.perf_counter() - t0
        u_val = gen_random_binary(config.validation_length, nu, seed=stream(config.seed, *val_key))
        err = output_error_details(sys_, report.params, u_val)
        C_err, M_err = param_relative_error(sys_, report.params)
    except EstimationError as exc:
        return TrialRecord(ok=False, failure=type(exc).__name__, runtime=time.perf_counter() - t0, **base)
    return TrialRecord(
        ok=True,
        output_error_sum=err.total,
        output_error_mean=err.mean,
        C_error=C_err,
        M_error=M_err,
        runtime=runtime,
        n_iter=report.n_iter,
        termination=report.termination,
        **base,
    )


def _run_job(job):
    config, method, snr_db, n_d, trial = job
    with threadpool_limits(limits=1):
        return run_trial(config, method, snr_db, n_d, trial)


def _stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std, float(np.median(v))


@dataclass(frozen=True)
class CellSummary:
    snr_db: float
    n_d: int
    n_trials: int
    n_fail: int
    degraded: bool
    stats: dict  # metric -> (mean, std, median)


def summarize(records, metrics=SUMMARY_METRICS + ("runtime",)):
    """Per-(snr, n_d) statistics over successful trials, ordered by (n_d, snr)."""
    cells = {}
    for r in records:
        cells.setdefault((r.n_d, r.snr_db), []).append(r)
    out = []
    for (n_d, snr), recs in sorted(cells.items()):
        recs = sorted(recs, key=lambda r: r.trial)
        ok = [r for r in recs if r.ok]
        n_fail = len(recs) - len(ok)
        stats = {m: _stats([getattr(r, m) for r in ok]) for m in metrics}
        out.append(
            CellSummary(
                snr_db=snr,
                n_d=n_d,
                n_trials=len(recs),
                n_fail=n_fail,
                degraded=n_fail > DEGRADED_FAILURE_FRACTION * len(recs),
                stats=stats,
            )
        )
    return out


@dataclass(frozen=True, eq=False)
class McSummary:
    config: McConfig
    method: str
    records: tuple
    cells: tuple

    def cell(self, snr_db, n_d):
        for c in self.cells:
            if c.snr_db == float(snr_db) and c.n_d == int(n_d):
                return c
        raise KeyError((snr_db, n_d))

    def median(self, snr_db, n_d, metric="output_error_mean"):
        return self.cell(snr_db, n_d).stats[metric][2]

    def recompute(self):
        return tuple(summarize(self.records))


def worker_count(requested):
    requested = max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        requested = min(requested, max(1, int(cap)))
    return requested


def run_monte_carlo(config, method, parallel=1):
    """Run every (snr, n_d, trial) job and aggregate; results do not depend on ``parallel``."""
    jobs = [
        (config, method, snr, n_d, trial)
        for n_d in config.dataset_lengths
        for snr in config.snr_db_levels
        for trial in range(config.trials)
    ]
    workers = worker_count(parallel)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_job, jobs, chunksize=1))
    else:
        records = [_run_job(job) for job in jobs]
    for r in records:
        assert r.train_key != r.validation_key
    return McSummary(config=config, method=method, records=tuple(records), cells=tuple(summarize(records)))


# ---------------------------------------------------------------------------
# runtime benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRow:
    n_d: int
    mean_seconds: float
    std_seconds: float
    mean_iters: float


def runtime_benchmark(method, dataset_lengths, repetitions=5, iterations=100, snr_db=18.0, seed=0):
    """Time fits with a fixed iteration budget on scalar-system data.

    Each repetition draws fresh binary inputs and noise, calibrates the noise
    to ``snr_db`` and fits from half of the true parameters.
    """
    lengths = [int(n) for n in dataset_lengths]
    if lengths != sorted(lengths):
        raise ValueError("dataset lengths must be ascending")
    if method not in ("ml", "em"):
        raise ValueError(f"unknown method {method!r}")
    truth = scalar_system()

    def problem(n_d, rep):
        u = gen_random_binary(n_d, 1, seed=stream(seed, STREAM_INPUTS, n_d, rep))
        S_w, S_v = calibrate_snr(truth, u, snr_db, seed=stream(seed, STREAM_CALIBRATION, n_d, rep))
        sys_ = truth.replace(S_w=S_w, S_v=S_v)
        return simulate(sys_, u, seed=stream(seed, STREAM_NOISE, n_d, rep)).dataset, sys_.scaled(0.5)

    def fit(data, init, iters):
        if method == "ml":
            return fit_ml(data, init, FitOptions(max_iters=iters, epsilon=1e-300, record_trace=False))
        return fit_em(data, init, EmOptions(max_iters=iters, epsilon=1e-300, record_trace=False))

    # untimed warm-up so compiled kernels are loaded before the first measurement
    fit(*problem(lengths[0], repetitions), 2)
    rows = []
    for n_d in lengths:
        times, iters = [], []
        for rep in range(repetitions):
            data, init = problem(n_d, rep)
            t0 = time.perf_counter()
            rep_ = fit(data, init, iterations)
            times.append(time.perf_counter() - t0)
            iters.append(rep_.n_iter)
        mean, std, _ = _stats(times)
        rows.append(BenchmarkRow(n_d=n_d, mean_seconds=mean, std_seconds=std, mean_iters=float(np.mean(iters))))
    return rows
