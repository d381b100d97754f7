"""Run-directory level operations behind the command line.

A run directory holds ``config.txt``, ``checkpoints/``, ``metrics.log``,
``retention.csv`` and ``summary.csv``; finalization adds ``plan.json``,
``final.json`` and ``checkpoints/compacted.hpck``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import report
from . import synth
from .compactor import binarize, compact, make_plan, verify_equivalence
from .config import TrainConfig, write_config_file
from .metrics import retention_report
from .model import count_flops
from .trainer import Trainer, evaluate, load_model, save_model, task_data

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "HPRUNE_OUT_ROOT"
LAST_CKPT = Path("checkpoints") / "last.hpck"
COMPACTED_CKPT = Path("checkpoints") / "compacted.hpck"
REFERENCE_LEN = 50
EQUIVALENCE_INPUTS = 4


class EquivalenceFailure(RuntimeError):
    pass


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def default_run_name(config: TrainConfig) -> str:
    return f"{config.task}_t{config.target_sparsity:g}_s{config.seed}"


def run_dir_of(checkpoint) -> Path:
    path = Path(checkpoint)
    return path.parent.parent if path.parent.name == "checkpoints" else path.parent


def train(config: TrainConfig, out_dir, resume: bool = False) -> Trainer:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = dataclasses.replace(config, out_dir=str(out))
    last = out / LAST_CKPT
    if resume and last.exists():
        trainer = Trainer.from_checkpoint(last)
        if trainer.config != config:
            raise ValueError(f"{last} was written with a different config")
        log.info("resuming %s at step %d", out, trainer.step)
    else:
        trainer = Trainer(config)
    write_config_file(config, out / report.CONFIG_COPY)
    trainer.fit(out)
    retention_report(trainer.fabric).to_csv(out / report.RETENTION_CSV)
    report.summarize([out], out / report.SUMMARY_CSV)
    return trainer


def finalize(checkpoint, target: float | None = None, out_dir=None, evaluate_model: bool = True) -> dict:
    """Binarize, compact and verify; nothing is written for the compacted model unless verification passes."""
    model, header = load_model(checkpoint)
    if header.get("compacted") or model.fabric is None:
        raise ValueError(f"{checkpoint} is already compacted")
    config = TrainConfig(**header["train_config"]) if "train_config" in header else None
    if target is None:
        if config is None:
            raise ValueError("no target given and the checkpoint carries no training config")
        target = config.target_sparsity
    out = Path(out_dir) if out_dir else run_dir_of(checkpoint)
    out.mkdir(parents=True, exist_ok=True)

    keep = binarize(model.fabric, target)
    plan = make_plan(model, keep, reference_len=REFERENCE_LEN)
    small = compact(model, plan)
    eq = verify_equivalence(model, keep, small, n_inputs=EQUIVALENCE_INPUTS, input_len=REFERENCE_LEN)
    if not eq.passed:
        raise EquivalenceFailure(
            f"compacted model differs from the gated model by {eq.max_abs_diff:.3e} "
            f"(tolerance {eq.tolerance:g}); refusing to write it")
    if small.num_params() != plan.realized_params:
        raise EquivalenceFailure("compacted parameter count disagrees with the plan")

    final = {
        "checkpoint": str(checkpoint),
        "target": target,
        "realized_sparsity": plan.realized_sparsity,
        "realized_params": plan.realized_params,
        "original_params": model.num_params(),
        "realized_flops": plan.realized_flops,
        "original_flops": count_flops(model, REFERENCE_LEN),
        "reference_len": REFERENCE_LEN,
        "equivalence_max_abs_diff": eq.max_abs_diff,
        "equivalence_inputs": eq.n_inputs,
    }
    if evaluate_model and config is not None:
        final["eval"] = evaluate(small, task_data(config), config.task)

    extra = {"plan": plan.to_dict()}
    if config is not None:
        extra["train_config"] = config.to_dict()
    save_model(small, out / COMPACTED_CKPT, compacted=True, extra=extra)
    plan.to_json(out / report.PLAN_JSON)
    retention_report(plan).to_csv(out / report.RETENTION_CSV)
    (out / report.FINAL_JSON).write_text(json.dumps(final, indent=1, sort_keys=True) + "\n")
    report.summarize([out], out / report.SUMMARY_CSV)
    return final


def eval_checkpoint(checkpoint, split: str = "eval") -> dict:
    model, header = load_model(checkpoint)
    if "train_config" not in header:
        raise ValueError(f"{checkpoint} does not record which task it was trained on")
    config = TrainConfig(**header["train_config"])
    data = task_data(config)
    if split == "train":
        if config.task == "toy_sv":
            trials = synth.make_trials(data.train.y, config.data_seed)
            data = synth.SvData(train=data.train, eval=data.train, trials=trials)
        else:
            data = synth.SpoofData(train=data.train, eval=data.train)
    elif split != "eval":
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    out = evaluate(model, data, config.task)
    out.update({"split": split, "compacted": bool(header.get("compacted")), "params": model.num_params()})
    return out


def _sweep_one(args) -> dict:
    config, run = args
    train(config, run, resume=True)
    final = finalize(Path(run) / LAST_CKPT)
    row = {"target": config.target_sparsity, "seed": config.seed, "run": str(run)}
    row["s_hat"] = report.run_summary(run).get("s_hat")
    for key in ("realized_sparsity", "realized_params", "realized_flops"):
        row[key] = final[key]
    row.update(final.get("eval", {}))
    return row


SWEEP_CSV = "sweep.csv"


def sweep(config: TrainConfig, targets, seeds, out_dir, jobs: int = 1) -> list[dict]:
    """Train and finalize every (target, seed); one CSV row each plus per-target seed medians."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = []
    for t in targets:
        for s in seeds:
            cfg = dataclasses.replace(config, target_sparsity=float(t), seed=int(s))
            work.append((cfg, out / f"t{float(t):g}_s{int(s)}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, work))
    else:
        rows = [_sweep_one(w) for w in work]
    report.add_seed_medians(rows)
    report.write_table(rows, out / SWEEP_CSV)
    return rows
