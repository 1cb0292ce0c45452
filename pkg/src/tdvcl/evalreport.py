"""Monte-Carlo predictive evaluation, accuracy bookkeeping and reports.

Report files (schema version 1):

``runs.csv``
    ``run_id,seed,method,t,task,accuracy``; one row per defined matrix entry
    (``task <= t``, both 1-based). Floats are written with ``repr`` so a
    reload reproduces the matrix bit for bit.
``aggregate.json``
    ``{"schema": 1, "rows": [{"method", "t", "mean", "two_sigma", "n_seeds"}]}``
    where ``mean`` and ``two_sigma`` are taken over seeds of the average
    accuracy across tasks ``1..t`` (population std, ``ddof=0``).
``avg_accuracy.svg`` and ``task_<k>.svg``
    Optional self-contained line plots.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import forward
from .numcore import ContractError, Tensor
from .vardist import sample

CSV_COLUMNS = ("run_id", "seed", "method", "t", "task", "accuracy")
SCHEMA_VERSION = 1


@dataclass
class AccuracyMatrix:
    """``rows[t-1][k-1]`` is the accuracy on task ``k`` after training task ``t``."""

    rows: list = field(default_factory=list)
    seed: int = 0
    method: str = ""
    run_id: str = ""

    def append_row(self, row):
        if len(row) != len(self.rows) + 1:
            raise ContractError(f"row {len(self.rows) + 1} needs {len(self.rows) + 1} entries, got {len(row)}")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ContractError("accuracies must lie in [0, 1]")
        self.rows.append([float(a) for a in row])

    @property
    def T(self):
        return len(self.rows)

    def acc(self, t, k):
        return self.rows[t - 1][k - 1]

    def to_array(self):
        out = np.full((self.T, self.T), np.nan)
        for i, row in enumerate(self.rows):
            out[i, :len(row)] = row
        return out


def predictive(q, x, S, rng, *, head=None, deterministic=False, chunk=20):
    """Posterior predictive ``(1/S) sum_s softmax(f(x; theta_s))``.

    ``x`` is ``(N, D)`` or ``(D,)``; ``head`` is ``(index, size)`` for the
    multi-head protocol. ``deterministic`` uses the mean parameters only.
    """
    if S < 1:
        raise ContractError("S must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    xb = x[None, :] if vector else x
    hi, hs = head if head is not None else (None, None)
    if deterministic:
        logits = forward(Tensor(q.mu), q.layer_spec, xb, hi, hs).value
        probs = _softmax(logits)
    else:
        total = None
        done = 0
        while done < S:
            m = min(chunk, S - done)
            theta = sample(q, rng, n_samples=m)
            p = _softmax(forward(theta, q.layer_spec, xb, hi, hs).value).sum(axis=0)
            total = p if total is None else total + p
            done += m
        probs = total / S
    return probs[0] if vector else probs


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def accuracy(q, dataset, S, rng, deterministic=False):
    head = None if dataset.head is None else (dataset.head, dataset.class_count)
    probs = predictive(q, dataset.inputs, S, rng, head=head, deterministic=deterministic)
    return float(np.mean(probs.argmax(axis=-1) == dataset.labels))


def avg_accuracy(matrix, t):
    """Mean accuracy over tasks ``1..t`` after training task ``t``."""
    if t < 1 or t > matrix.T or len(matrix.rows[t - 1]) != t:
        raise ContractError(f"row {t} of the accuracy matrix is not complete")
    return float(np.mean(matrix.rows[t - 1]))


def write_csv(matrices, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, m in enumerate(matrices):
            run_id = m.run_id or f"{m.method}-s{m.seed}-{i}"
            for t, row in enumerate(m.rows, start=1):
                for k, a in enumerate(row, start=1):
                    w.writerow([run_id, m.seed, m.method, t, k, repr(a)])
    return path


def read_csv(path):
    """Inverse of :func:`write_csv`; returns matrices in file order."""
    runs: dict[str, AccuracyMatrix] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            m = runs.get(rec["run_id"])
            if m is None:
                m = runs[rec["run_id"]] = AccuracyMatrix(seed=int(rec["seed"]), method=rec["method"],
                                                         run_id=rec["run_id"])
            t, k = int(rec["t"]), int(rec["task"])
            while len(m.rows) < t:
                m.rows.append([])
            m.rows[t - 1].append(float(rec["accuracy"]))
            if len(m.rows[t - 1]) != k:
                raise ValueError(f"{path}: out-of-order entry for run {rec['run_id']} t={t} task={k}")
    return list(runs.values())


def aggregate(matrices):
    """Mean and two standard deviations over seeds of avg accuracy, per (method, t)."""
    groups = defaultdict(list)
    for m in matrices:
        for t in range(1, m.T + 1):
            groups[(m.method, t)].append(avg_accuracy(m, t))
    rows = []
    for (method, t), vals in sorted(groups.items()):
        arr = np.asarray(vals)
        rows.append({"method": method, "t": t, "mean": float(arr.mean()),
                     "two_sigma": float(2.0 * arr.std()), "n_seeds": len(vals)})
    return rows


def table_rows(agg):
    """Text lines in the layout of a results table: one line per method."""
    by_method = defaultdict(dict)
    for r in agg:
        by_method[r["method"]][r["t"]] = r
    ts = sorted({r["t"] for r in agg})
    lines = ["method".ljust(12) + "".join(f"t={t}".rjust(13) for t in ts)]
    for method, cells in by_method.items():
        parts = []
        for t in ts:
            c = cells.get(t)
            parts.append((f"{c['mean']:.2f}±{c['two_sigma']:.2f}" if c else "-").rjust(13))
        lines.append(method.ljust(12) + "".join(parts))
    return lines


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def line_plot_svg(series, title, xlabel="tasks observed", ylabel="accuracy",
                  width=480, height=320):
    """Minimal SVG line chart; ``series`` maps label -> list of (x, y) with y in [0, 1]."""
    pad_l, pad_r, pad_t, pad_b = 50, 120, 30, 40
    xs = [x for pts in series.values() for x, _ in pts] or [1]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1.0 - y) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for y in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{pad_l - 6}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.2f}</text>')
        out.append(f'<line x1="{pad_l}" x2="{pad_l + pw}" y1="{py(y):.1f}" y2="{py(y):.1f}" stroke="#ddd"/>')
    for x in range(int(x0), int(x1) + 1):
        out.append(f'<text x="{px(x):.1f}" y="{pad_t + ph + 15}" text-anchor="middle">{x}</text>')
    out.append(f'<text x="{pad_l + pw / 2}" y="{height - 6}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2})">{ylabel}</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = pad_t + 14 * i + 8
        out.append(f'<line x1="{pad_l + pw + 10}" x2="{pad_l + pw + 28}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 32}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out)


def emit_report(matrices, out_dir, plots=True):
    """Write ``runs.csv``, ``aggregate.json`` and optional SVG plots to ``out_dir``."""
    matrices = list(matrices)
    if not matrices:
        raise ContractError("emit_report needs at least one matrix")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": write_csv(matrices, out / "runs.csv")}
    agg = aggregate(matrices)
    paths["json"] = out / "aggregate.json"
    paths["json"].write_text(json.dumps({"schema": SCHEMA_VERSION, "rows": agg}, indent=2))
    if plots:
        series = defaultdict(list)
        for r in agg:
            series[r["method"]].append((r["t"], r["mean"]))
        paths["avg_svg"] = out / "avg_accuracy.svg"
        paths["avg_svg"].write_text(line_plot_svg(dict(series), "Average accuracy"))
        T = max(m.T for m in matrices)
        for k in range(1, T + 1):
            per_task = defaultdict(lambda: defaultdict(list))
            for m in matrices:
                for t in range(k, m.T + 1):
                    per_task[m.method][t].append(m.acc(t, k))
            s = {meth: [(t, float(np.mean(v))) for t, v in sorted(d.items())]
                 for meth, d in per_task.items()}
            p = out / f"task_{k}.svg"
            p.write_text(line_plot_svg(s, f"Task {k}"))
            paths[f"task_{k}_svg"] = p
    return paths
