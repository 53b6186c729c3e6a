"""Dataset and parameter files.

Datasets are CSV with header ``t,u_1..u_nu,y_1..y_ny`` (optionally followed
by ``x_1..x_nx``).  Parameters are JSON with keys ``dims, A, B, C, D, mu_x0,
S_x0, S_w, S_v``.  Floats are written with 17 significant digits, which
round-trips every IEEE double exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .evaluation import SUMMARY_METRICS, TrialRecord
from .model import Dataset, SystemParams, validate_params

FLOAT_FMT = ".17g"


def fmt(x):
    return format(float(x), FLOAT_FMT)


def _jsonable(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return str(obj)
        return obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def dumps(obj):
    """JSON text; Python's float repr is the shortest string that round-trips."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def write_params(path, params):
    write_json(path, params.as_dict())


def read_params(path):
    d = read_json(path)
    missing = [k for k in ("dims", "A", "B", "C", "D", "mu_x0", "S_x0", "S_w", "S_v") if k not in d]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    try:
        params = SystemParams.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    problems = validate_params(params)
    if problems:
        raise FormatError(f"{path}: invalid parameters: {'; '.join(problems)}")
    return params


def dataset_header(nu, ny, nx=0):
    return ["t"] + [f"u_{i + 1}" for i in range(nu)] + [f"y_{i + 1}" for i in range(ny)] + [f"x_{i + 1}" for i in range(nx)]


def write_dataset(path, dataset, states=None):
    nx = 0 if states is None else np.asarray(states).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(dataset.nu, dataset.ny, nx))
        for t in range(dataset.n_d):
            row = [str(t)] + [fmt(v) for v in dataset.inputs[t]] + [fmt(v) for v in dataset.outputs[t]]
            if nx:
                row += [fmt(v) for v in states[t]]
            w.writerow(row)


def read_dataset(path, return_states=False):
    """Read a dataset CSV; malformed content raises FormatError with the line number."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise FormatError(f"{path}:1: header must start with 't'")
    cols = {"u": [], "y": [], "x": []}
    for j, name in enumerate(header[1:], start=1):
        prefix, _, idx = name.partition("_")
        if prefix not in cols or not idx.isdigit():
            raise FormatError(f"{path}:1: unexpected column {name!r}")
        cols[prefix].append(j)
    for prefix in ("u", "y", "x"):
        expected = [f"{prefix}_{i + 1}" for i in range(len(cols[prefix]))]
        if [header[j] for j in cols[prefix]] != expected:
            raise FormatError(f"{path}:1: {prefix} columns must be numbered {expected}")
    if not cols["u"] or not cols["y"]:
        raise FormatError(f"{path}:1: need at least one u and one y column")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{i}: expected {len(header)} fields, found {len(row)}")
        try:
            data[i - 2] = [float(v) for v in row]
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: {exc}") from exc
        if not np.all(np.isfinite(data[i - 2])):
            raise FormatError(f"{path}:{i}: non-finite value")
    try:
        ds = Dataset(data[:, cols["u"]], data[:, cols["y"]])
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if return_states:
        return ds, (data[:, cols["x"]] if cols["x"] else None)
    return ds


def write_trace(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "cost", "step_norm", "loglik"])
        for i, cost, step, ll in report.trace_rows():
            w.writerow([i, fmt(cost), fmt(step), fmt(ll)])


def write_summary_csv(path, summary, metrics=None, header_comment=None):
    """Per-cell statistics; wall-clock runtimes are deliberately excluded so the file is reproducible."""
    metrics = metrics or SUMMARY_METRICS
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snr_db", "n_d", "metric", "mean", "std", "median", "n_fail", "n_trials", "degraded"])
        for c in summary.cells:
            for m in metrics:
                mean, std, med = c.stats[m]
                w.writerow([fmt(c.snr_db), c.n_d, m, fmt(mean), fmt(std), fmt(med), c.n_fail, c.n_trials, int(c.degraded)])


def write_records_csv(path, summary, include_runtime=True):
    names = [f.name for f in fields(TrialRecord) if f.name not in ("train_key", "validation_key")]
    if not include_runtime:
        names.remove("runtime")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in summary.records:
            row = []
            for n in names:
                v = getattr(r, n)
                row.append(fmt(v) if isinstance(v, float) else (int(v) if isinstance(v, bool) else v))
            w.writerow(row)


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_d", "mean_seconds", "std_seconds", "mean_iters"])
        for r in rows:
            w.writerow([r.n_d, fmt(r.mean_seconds), fmt(r.std_seconds), fmt(r.mean_iters)])
