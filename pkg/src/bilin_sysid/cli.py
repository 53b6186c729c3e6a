"""Command-line interface.

Subcommands: simulate, fit, validate, montecarlo, bench, discretize-rc.
Options may also come from a JSON file given with ``--config``; command-line
flags override it.  Exit codes: 0 success, 2 numerical or usage error,
3 file or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .em import EmOptions, fit_em
from .errors import BilinSysIdError, EstimationError, FormatError
from .evaluation import (
    McConfig,
    initial_guess,
    output_error_details,
    param_relative_error,
    run_monte_carlo,
    runtime_benchmark,
    stream,
)
from .ml import FitOptions, fit_ml
from .model import Dataset
from .simulate import calibrate_snr, gen_random_binary, gen_sinusoid, simulate
from .systems import RC_DEFAULTS, builtin, discretize_rc

logger = logging.getLogger("bilin_sysid")

EXIT_OK, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3


def parse_float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def parse_int_list(text):
    """Comma-separated integers; ``20,40,...,200`` expands an arithmetic range."""
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if "..." in parts:
        i = parts.index("...")
        if i < 2 or i != len(parts) - 2:
            raise argparse.ArgumentTypeError("use the form a,b,...,z for ranges")
        a, b, z = int(parts[i - 2]), int(parts[i - 1]), int(parts[i + 1])
        head = [int(p) for p in parts[: i - 2]]
        step = b - a
        if step <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        return head + list(range(a, z + 1, step))
    return [int(p) for p in parts]


def _load_system(args):
    if getattr(args, "params", None):
        return io.read_params(args.params)
    return builtin(args.system)


def _make_inputs(kind, n, nu, seed, amplitudes, freqs, sample_time):
    if kind == "binary":
        return gen_random_binary(n, nu, seed=seed)
    if kind == "sinusoid":
        amps = [parse_float_list(a) for a in amplitudes.split(";")]
        ws = [parse_float_list(w) for w in freqs.split(";")]
        if len(amps) == 1 and nu > 1:
            amps, ws = amps * nu, ws * nu
        return gen_sinusoid(n, nu, amps, ws, sample_time)
    raise BilinSysIdError(f"unknown input kind {kind!r}")


def _resolved(args):
    out = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    return out


def _out_dir(args):
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    truth = _load_system(args)
    u = _make_inputs(args.input, args.n, truth.dims.nu, args.seed, args.amplitudes, args.freqs, args.sample_time)
    if args.snr is not None:
        S_w, S_v = calibrate_snr(truth, u, args.snr, seed=stream(args.seed, 2))
        truth = truth.replace(S_w=S_w, S_v=S_v)
    traj = simulate(truth, u, seed=stream(args.seed, 1))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_dataset(out, traj.dataset, traj.states if args.with_states else None)
    io.write_json(out.with_suffix(".meta.json"), {"config": _resolved(args), "seed": args.seed, "params": truth.as_dict()})
    print(f"wrote {out} ({args.n} rows)")
    return EXIT_OK


def _fit_init(args, data):
    if args.init == "file":
        if not args.init_params:
            raise BilinSysIdError("--init file requires --init-params")
        return io.read_params(args.init_params)
    if not args.truth:
        raise BilinSysIdError(f"--init {args.init} requires --truth")
    truth = io.read_params(args.truth)
    if args.init == "half-truth":
        return initial_guess(truth, "half-truth")
    rng = np.random.default_rng(args.seed)
    return initial_guess(truth, "random-perturbation", rng=rng, scale=args.perturbation_scale)


def cmd_fit(args):
    data = io.read_dataset(args.data)
    init = _fit_init(args, data)
    if args.method == "ml":
        opts = FitOptions(
            max_iters=args.max_iters,
            epsilon=args.epsilon if args.epsilon is not None else 1e-6,
            step_size=args.step_size,
        )
        report = fit_ml(data, init, opts)
    else:
        opts = EmOptions(
            max_iters=args.max_iters,
            epsilon=args.epsilon if args.epsilon is not None else 1e-5,
            monotonicity_audit=args.audit,
        )
        report = fit_em(data, init, opts)
    d = _out_dir(args)
    io.write_params(d / "params.json", report.params)
    io.write_trace(d / "trace.csv", report)
    summary = {
        "method": report.method,
        "termination": report.termination,
        "iterations": report.n_iter,
        "final_cost": report.final_cost,
        "final_step_norm": report.final_step_norm,
        "wall_time_seconds": report.wall_time,
        "config": _resolved(args),
    }
    io.write_json(d / "summary.json", summary)
    text = (
        f"method: {report.method}\n"
        f"termination: {report.termination}\n"
        f"iterations: {report.n_iter}\n"
        f"final cost: {io.fmt(report.final_cost)}\n"
        f"final step norm: {io.fmt(report.final_step_norm)}\n"
        f"wall time: {report.wall_time:.3f} s\n"
    )
    (d / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_validate(args):
    truth = io.read_params(args.truth)
    est = io.read_params(args.estimate)
    u = _make_inputs(args.input, args.length, truth.dims.nu, args.seed, args.amplitudes, args.freqs, args.sample_time)
    det = output_error_details(truth, est, u)
    C_err, M_err = param_relative_error(truth, est)
    metrics = {
        "output_error_sum": det.total,
        "output_error_mean": det.mean,
        "n_terms": det.n_terms,
        "n_skipped": det.n_skipped,
        "C_error": C_err,
        "M_error": M_err,
        "config": _resolved(args),
    }
    d = _out_dir(args)
    io.write_json(d / "metrics.json", metrics)
    traj = Dataset(u, det.y_true)
    header = ["t"] + [f"u_{i + 1}" for i in range(truth.dims.nu)]
    header += [f"y_true_{i + 1}" for i in range(truth.dims.ny)] + [f"y_est_{i + 1}" for i in range(truth.dims.ny)]
    with open(d / "trajectories.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(traj.n_d):
            vals = [str(t)] + [io.fmt(v) for v in u[t]] + [io.fmt(v) for v in det.y_true[t]] + [io.fmt(v) for v in det.y_est[t]]
            fh.write(",".join(vals) + "\n")
    print(json.dumps({k: v for k, v in metrics.items() if k != "config"}))
    return EXIT_OK


def cmd_montecarlo(args):
    kw = {"max_iters": args.max_iters}
    if args.epsilon is not None:
        kw["epsilon"] = args.epsilon
    truth = io.read_params(args.params) if args.params else None
    config = McConfig(
        trials=args.trials,
        snr_db_levels=tuple(args.snr),
        dataset_lengths=tuple(args.n),
        validation_length=args.validation_length,
        init_policy=args.init,
        perturbation_scale=args.perturbation_scale,
        seed=args.seed,
        system=args.system,
        truth=truth,
        fit_options=FitOptions(**kw),
        em_options=EmOptions(**kw),
    )
    summary = run_monte_carlo(config, args.method, parallel=args.parallel)
    d = _out_dir(args)
    embedded = {"method": args.method, "config": config.as_dict()}
    io.write_summary_csv(d / "summary.csv", summary, header_comment=json.dumps(embedded, sort_keys=True))
    io.write_records_csv(d / "records.csv", summary, include_runtime=False)
    with open(d / "timing.csv", "w") as fh:
        fh.write("snr_db,n_d,trial,runtime_seconds,n_iter\n")
        for r in summary.records:
            fh.write(f"{io.fmt(r.snr_db)},{r.n_d},{r.trial},{io.fmt(r.runtime)},{r.n_iter}\n")
    cells = [
        {
            "snr_db": c.snr_db,
            "n_d": c.n_d,
            "n_trials": c.n_trials,
            "n_fail": c.n_fail,
            "degraded": c.degraded,
            "stats": {m: dict(zip(("mean", "std", "median"), v)) for m, v in c.stats.items() if m != "runtime"},
        }
        for c in summary.cells
    ]
    # wall-clock figures live only in timing.csv so every other file is reproducible
    io.write_json(d / "report.json", {**embedded, "cells": cells})
    for c in summary.cells:
        flag = " DEGRADED" if c.degraded else ""
        med = c.stats["output_error_mean"][2]
        print(f"snr={c.snr_db:g} dB n_d={c.n_d}: median output error {med:.4g} ({c.n_fail}/{c.n_trials} failed){flag}")
    return EXIT_OK


def cmd_bench(args):
    rows = runtime_benchmark(args.method, args.lengths, args.repetitions, args.iterations, args.snr, args.seed)
    d = _out_dir(args)
    io.write_benchmark_csv(d / "bench.csv", rows)
    io.write_json(d / "bench.json", {"config": _resolved(args), "rows": [r.__dict__ for r in rows]})
    for r in rows:
        print(f"n_d={r.n_d}: {r.mean_seconds:.4f} s +/- {r.std_seconds:.4f} s")
    return EXIT_OK


def cmd_discretize_rc(args):
    params = discretize_rc(
        R0=args.R0, Rs=args.Rs, Rp=args.Rp, L=args.L, C=args.C, alpha=args.alpha, sample_time=args.sample_time
    )
    io.write_params(args.out, params)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_input_opts(p, default_kind="binary"):
    p.add_argument("--input", choices=("binary", "sinusoid"), default=default_kind)
    p.add_argument("--amplitudes", default="1", help="comma list per channel, ';' between channels")
    p.add_argument("--freqs", default="1", help="angular frequencies, same layout as --amplitudes")
    p.add_argument("--sample-time", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="bilin-sysid", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with option values (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--system", default="example1", help="built-in system: example1, example2, scalar")
    g.add_argument("--params", help="parameter JSON file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--snr", type=float, default=None, help="calibrate noise to this SNR in dB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--with-states", action="store_true")
    _add_input_opts(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="identify parameters from a dataset")
    p.add_argument("--method", choices=("ml", "em"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", choices=("half-truth", "random", "file"), default="half-truth")
    p.add_argument("--truth")
    p.add_argument("--init-params")
    p.add_argument("--perturbation-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--audit", action="store_true", help="EM: record the log-likelihood every iteration")
    p.add_argument("--out-dir", default="fit_out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="compare an estimate with the true system")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="validate_out")
    _add_input_opts(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("montecarlo", help="Monte-Carlo sweep over SNR and dataset length")
    p.add_argument("--method", choices=("ml", "em"), required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--snr", type=parse_float_list, default=[5.0, 10.0, 15.0, 20.0])
    p.add_argument("--n", type=parse_int_list, default=[100, 200])
    p.add_argument("--validation-length", type=int, default=100)
    p.add_argument("--init", choices=("half-truth", "random-perturbation"), default="half-truth")
    p.add_argument("--perturbation-scale", type=float, default=0.5)
    p.add_argument("--system", default="example1")
    p.add_argument("--params", help="true system parameter JSON (overrides --system)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out-dir", default="mc_out")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("bench", help="runtime versus dataset length")
    p.add_argument("--method", choices=("ml", "em"), required=True)
    p.add_argument("--lengths", type=parse_int_list, default=[20, 40, 80])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--snr", type=float, default=18.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("discretize-rc", help="zero-order-hold model of the RC load")
    for name in ("R0", "Rs", "Rp", "L", "C", "alpha"):
        p.add_argument(f"--{name}", type=float, default=RC_DEFAULTS[name])
    p.add_argument("--sample-time", type=float, default=RC_DEFAULTS["sample_time"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discretize_rc)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` JSON file, if any.

    The file holds either a flat object of options for the chosen command or
    one object per command name.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in subparsers), None)
        if command is not None:
            cfg = io.read_json(known.config)
            if not isinstance(cfg, dict):
                raise FormatError(f"{known.config}: top level must be an object")
            section = cfg.get(command, cfg)
            section = {k.replace("-", "_"): v for k, v in section.items() if not isinstance(v, dict)}
            subparser = subparsers[command]
            known_dests = {a.dest for a in subparser._actions}
            unknown = sorted(set(section) - known_dests)
            if unknown:
                raise FormatError(f"{known.config}: unknown options for {command}: {unknown}")
            for action in subparser._actions:
                if action.dest in section:
                    action.required = False
                    if action.type is not None and isinstance(section[action.dest], str):
                        section[action.dest] = action.type(section[action.dest])
            subparser.set_defaults(**section)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except EstimationError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BilinSysIdError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
