"""Join a run's metrics log, finalization record and retention export into one table."""

from __future__ import annotations

import csv
import json
import statistics
from pathlib import Path

from .metrics import RetentionPattern

METRICS_LOG = "metrics.log"
FINAL_JSON = "final.json"
RETENTION_CSV = "retention.csv"
SUMMARY_CSV = "summary.csv"
CONFIG_COPY = "config.txt"
PLAN_JSON = "plan.json"


def read_metrics(path) -> tuple[list[dict], list[dict]]:
    train, evals = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            (evals if rec.get("type") == "eval" else train).append(rec)
    return train, evals


def _read_config(run: Path) -> dict:
    path = run / CONFIG_COPY
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def run_summary(run_dir) -> dict:
    """One flat record describing a run; missing pieces are simply absent."""
    run = Path(run_dir)
    row: dict = {"run": run.name}
    cfg = _read_config(run)
    for key in ("task", "target_sparsity", "seed", "preset", "data"):
        if key in cfg:
            row[key] = cfg[key]

    if (run / METRICS_LOG).exists():
        train, evals = read_metrics(run / METRICS_LOG)
        if train:
            last = train[-1]
            row["steps"] = last["step"] + 1
            for key in ("s_hat", "t_now", "lambda1", "lambda2", "task_loss"):
                row[key] = last[key]
        if evals:
            for key, value in evals[-1].items():
                if key not in ("type", "step", "epoch", "s_hat"):
                    row[f"train_eval_{key}"] = value

    if (run / FINAL_JSON).exists():
        final = json.loads((run / FINAL_JSON).read_text())
        for key in ("target", "realized_sparsity", "realized_params", "original_params",
                    "realized_flops", "original_flops", "equivalence_max_abs_diff"):
            if key in final:
                row[key] = final[key]
        for key, value in final.get("eval", {}).items():
            row[key] = value

    if (run / RETENTION_CSV).exists():
        pattern = RetentionPattern.from_csv(run / RETENTION_CSV)
        for r in pattern.rows():
            row[f"keep_{r['kind']}_{r['layer']}"] = r["fraction"]
    return row


def write_table(rows: list[dict], dest) -> list[str]:
    """CSV over the union of keys in first-seen order, to a path or an open stream."""
    header: list[str] = []
    for r in rows:
        for k in r:
            if k not in header:
                header.append(k)
    fh = dest if hasattr(dest, "write") else open(dest, "w", newline="")
    try:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not dest:
            fh.close()
    return header


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(run_dirs, out_path=None) -> list[dict]:
    rows = [run_summary(d) for d in run_dirs]
    if out_path is not None:
        write_table(rows, out_path)
    return rows


def add_seed_medians(rows: list[dict], keys=("eer", "min_dcf", "accuracy", "realized_sparsity")) -> list[dict]:
    """Attach ``<key>_median_over_seeds`` to every row, grouped by target."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r["target"], []).append(r)
    for group in groups.values():
        for key in keys:
            vals = [float(r[key]) for r in group if r.get(key) not in (None, "")]
            if vals:
                med = statistics.median(vals)
                for r in group:
                    r[f"{key}_median_over_seeds"] = med
    return rows
