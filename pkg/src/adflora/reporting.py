"""Trace CSVs, JSON run summaries, and ASCII comparison tables.

Trace CSV columns (schema version 1)::

    step, phase, mean_loss, grad_norm_sq, consensus_err_a, consensus_err_b,
    cross_term_norm, mean_accuracy

Floats are written with ``repr`` so a re-read trace is bit-identical.
``mean_accuracy`` is empty when the task has no classifier.
"""

import csv
import hashlib
import json
import math

import numpy as np

SCHEMA_VERSION = 1
TRACE_COLUMNS = ["step", "phase", "mean_loss", "grad_norm_sq", "consensus_err_a",
                 "consensus_err_b", "cross_term_norm", "mean_accuracy"]
SUMMARY_METRICS = ["mean_loss", "local_loss", "grad_norm_sq", "consensus_err_a",
                   "consensus_err_b", "consensus_err", "cross_term_norm", "mean_accuracy"]
# metrics where larger is better; everything else is minimized
MAXIMIZE = {"mean_accuracy"}


def run_id(config_echo, seeds):
    blob = json.dumps({"config": config_echo, "seeds": list(seeds)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def write_trace_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, c)) for c in TRACE_COLUMNS])


def read_trace_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            out = {"step": int(row["step"]), "phase": row["phase"]}
            for c in TRACE_COLUMNS[2:]:
                out[c] = float(row[c]) if row[c] != "" else None
            rows.append(out)
    return rows


def final_metrics(result):
    f = result.final
    return {
        "step": f.step,
        "mean_loss": f.mean_loss,
        "local_loss": f.local_loss,
        "loss_at_mean": f.loss_at_mean,
        "grad_norm_sq": f.grad_norm_sq,
        "consensus_err_a": f.consensus_err_a,
        "consensus_err_b": f.consensus_err_b,
        "consensus_err": math.hypot(f.consensus_err_a, f.consensus_err_b),
        "cross_term_norm": f.cross_term_norm,
        "mean_accuracy": f.mean_accuracy,
    }


def aggregate(per_seed):
    """Mean and population std of each final metric across seeds."""
    out = {}
    for key in SUMMARY_METRICS:
        vals = [p["final"][key] for p in per_seed if p["final"].get(key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def build_summary(config_echo, rid, per_seed, wall_time):
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": rid,
        "config": config_echo,
        "seeds": [p["seed"] for p in per_seed],
        "wall_time": wall_time,
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
    }


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def table_rows(labelled_summaries, metrics=SUMMARY_METRICS):
    """One row per ``(label, summary)`` with mean and std per metric."""
    rows = []
    for label, summary in labelled_summaries:
        row = {"label": str(label), "run_id": summary["run_id"]}
        for m in metrics:
            agg = summary["aggregate"].get(m)
            row[f"{m}_mean"] = agg["mean"] if agg else None
            row[f"{m}_std"] = agg["std"] if agg else None
        rows.append(row)
    return rows


def write_table_csv(path, rows):
    if not rows:
        raise ValueError("empty table")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def read_table_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k not in ("label", "run_id"):
                r[k] = float(v) if v != "" else None
    return rows


def format_table(rows, label_header, metrics=SUMMARY_METRICS, with_std=True):
    """Aligned ASCII table; the per-column best value is wrapped in ``**``."""
    metrics = [m for m in metrics if any(r.get(f"{m}_mean") is not None for r in rows)]
    best = {}
    for m in metrics:
        vals = [r[f"{m}_mean"] for r in rows if r[f"{m}_mean"] is not None]
        best[m] = max(vals) if m in MAXIMIZE else min(vals)
    header = [label_header] + metrics
    body = []
    for r in rows:
        cells = [r["label"]]
        for m in metrics:
            mean, std = r[f"{m}_mean"], r[f"{m}_std"]
            if mean is None:
                cells.append("-")
                continue
            cell = f"{mean:.4g} +- {std:.2g}" if with_std else f"{mean:.4g}"
            if len(rows) > 1 and mean == best[m]:
                cell = f"**{cell}**"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    sep = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    return "\n".join([sep, line(header), sep] + [line(b) for b in body] + [sep]) + "\n"
