"""Single-stage joint fine-tuning and pruning.

Each step descends on (weights, gate log_alphas) for task loss plus the
sparsity penalty, then ascends the two multipliers using the expected
sparsity measured before the descent.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import controller as ctl
from . import hard_concrete as hc
from . import synth
from . import tensor as T
from .config import TrainConfig
from .metrics import TrialScores, accuracy, cosine_scores, eer, min_dcf
from .model import Architecture, ModelConfig, PrunableModel, preset
from .fabric import GateFabric
from .streams import stream

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay over parameter groups."""

    def __init__(self, groups: list[dict], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in groups]

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        sq = 0.0
        for g in self.groups:
            for p in g["params"]:
                if p.grad is not None:
                    sq += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(sq)
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for g in self.groups:
                for p in g["params"]:
                    if p.grad is not None:
                        p.grad = p.grad * scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for gi, g in enumerate(self.groups):
            lr, wd = g["lr"], g.get("weight_decay", 0.0)
            for pi, p in enumerate(g["params"]):
                if p.grad is None:
                    continue
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    p.data -= lr * wd * p.data
                p.data -= lr * update


@dataclass
class StepRecord:
    step: int
    epoch: float
    task_loss: float
    reg_loss: float
    s_hat: float
    t_now: float
    lambda1: float
    lambda2: float
    lr: float

    def to_dict(self) -> dict:
        return {"type": "train", **asdict(self)}


def task_data(config: TrainConfig):
    if config.task == "toy_sv":
        spec = synth.with_seed(synth.SV_PRESETS[config.data], config.data_seed)
        return synth.gen_sv(spec)
    spec = synth.SpoofTaskSpec(amplitude=config.spoof_amplitude, seed=config.data_seed)
    if config.data == "small":
        spec = dataclasses.replace(spec, train_size=512)
    return synth.gen_spoof(spec)


def model_config_for(config: TrainConfig, data) -> ModelConfig:
    feat = data.train.x.shape[2]
    if config.task == "toy_sv":
        n_cls = int(data.train.y.max()) + 1
        return preset(config.preset, feat_dim=feat, num_classes=n_cls, head="aam", precision=config.precision)
    return preset(config.preset, feat_dim=feat, num_classes=1, head="bce", precision=config.precision)


class Trainer:
    def __init__(self, config: TrainConfig, data=None, model: PrunableModel | None = None):
        self.config = config
        self.data = data if data is not None else task_data(config)
        self.model = model or PrunableModel(model_config_for(config, self.data), seed=config.seed)
        if self.model.fabric is None:
            raise ValueError("training needs a gated model")
        self.controller = ctl.ControllerState(
            target_final=config.target_sparsity,
            warmup_epochs=config.warmup_epochs,
            multiplier_lr=config.lr_multipliers,
        )
        self.optimizer = AdamW([
            {"name": "weights", "params": self.model.parameters(), "lr": config.lr_weights,
             "weight_decay": config.weight_decay},
            {"name": "gates", "params": [self.model.fabric.log_alpha], "lr": config.lr_gates,
             "weight_decay": 0.0},
        ])
        self.step = 0
        n = len(self.data.train)
        self.steps_per_epoch = n // config.batch_size
        if self.steps_per_epoch == 0:
            raise ValueError(f"batch_size {config.batch_size} exceeds training set size {n}")
        self.total_steps = self.steps_per_epoch * config.epochs
        self.history: list[dict] = []

    @property
    def fabric(self) -> GateFabric:
        return self.model.fabric

    @property
    def epoch_progress(self) -> float:
        return self.step / self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = stream(self.config.seed, "order", epoch).permutation(len(self.data.train))
        b = self.config.batch_size
        return np.sort(order[pos * b : (pos + 1) * b])

    def gate_draws(self, step: int) -> np.ndarray:
        return hc.draw_uniform(stream(self.config.seed, "gates", step), self.fabric.num_gates)

    def train_step(self, batch) -> StepRecord:
        x, y = batch
        model, fabric = self.model, self.fabric
        t_now = ctl.scheduled_target(self.controller, self.epoch_progress)

        self.optimizer.zero_grad()
        out = model.forward(x, mode="train", u=self.gate_draws(self.step))
        task_loss = model.task_head().loss(out.embedding, y)
        s_hat = fabric.expected_sparsity()
        reg = ctl.regularizer(self.controller, s_hat, t_now)
        total = task_loss + reg
        if not np.isfinite(total.item()):
            self._dump_divergence(x, y, task_loss.item(), reg.item())
        total.backward()
        self.optimizer.clip_grad_norm(self.config.clip_norm)
        self.optimizer.step()
        self.controller = ctl.ascend_multipliers(self.controller, s_hat.item(), t_now)

        record = StepRecord(
            step=self.step,
            epoch=self.epoch_progress,
            task_loss=task_loss.item(),
            reg_loss=reg.item(),
            s_hat=s_hat.item(),
            t_now=t_now,
            lambda1=self.controller.lambda1,
            lambda2=self.controller.lambda2,
            lr=self.optimizer.groups[0]["lr"],
        )
        self.step += 1
        return record

    def _dump_divergence(self, x, y, task_loss, reg_loss):
        out = Path(self.config.out_dir) / "divergence"
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / f"batch_step{self.step}.npz", x=x, y=y)
        stats = {"step": self.step, "task_loss": task_loss, "reg_loss": reg_loss, **self.fabric.stats()}
        (out / f"gates_step{self.step}.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
        raise TrainingDiverged(f"non-finite loss at step {self.step}; diagnostics in {out}")

    def evaluate(self, model: PrunableModel | None = None) -> dict:
        return evaluate(model or self.model, self.data, self.config.task)

    # -- loop -------------------------------------------------------------

    def fit(self, out_dir=None, stop_at: int | None = None) -> dict:
        """Train to ``config.epochs`` (or until step ``stop_at``), writing logs and checkpoints."""
        out = Path(out_dir or self.config.out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.log"
        _truncate_log(log_path, self.step)
        last_eval: dict = {}
        end = self.total_steps if stop_at is None else min(stop_at, self.total_steps)
        with open(log_path, "a") as fh:
            while self.step < end:
                idx = self.batch_indices(self.step)
                rec = self.train_step((self.data.train.x[idx], self.data.train.y[idx]))
                self._write(fh, rec.to_dict())
                if self.step % self.steps_per_epoch == 0:
                    epoch = self.step // self.steps_per_epoch
                    if epoch % self.config.eval_every == 0 or self.step == self.total_steps:
                        last_eval = {"type": "eval", "step": self.step, "epoch": float(epoch),
                                     "s_hat": self.fabric.expected_sparsity().item(), **self.evaluate()}
                        self._write(fh, last_eval)
                        log.info("epoch %d: %s", epoch, last_eval)
                    if epoch % self.config.checkpoint_every == 0 or self.step == self.total_steps:
                        self.save(out / "checkpoints" / "last.hpck")
        if self.step < self.total_steps or stop_at is not None:
            self.save(out / "checkpoints" / "last.hpck")
        if self.config.recovery_epochs:
            log.warning("recovery_epochs is accepted but ignored: training is single-stage")
        return last_eval

    def _write(self, fh, record: dict) -> None:
        self.history.append(record)
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    # -- checkpoints ------------------------------------------------------

    def save(self, path) -> None:
        arrays: OrderedDict[str, np.ndarray] = OrderedDict(self.model.state_arrays())
        for gi, g in enumerate(self.optimizer.groups):
            names = list(self.model.params) if g["name"] == "weights" else ["gates.log_alpha"]
            for name, m, v in zip(names, self.optimizer.m[gi], self.optimizer.v[gi]):
                arrays[f"adam.m.{name}"] = m
                arrays[f"adam.v.{name}"] = v
        header = model_header(self.model, compacted=False)
        header.update({
            "train_config": self.config.to_dict(),
            "controller": asdict(self.controller),
            "counters": {"step": self.step, "epoch": self.step // self.steps_per_epoch,
                         "steps_per_epoch": self.steps_per_epoch},
            "optimizer": {"t": self.optimizer.t, "betas": list(self.optimizer.betas), "eps": self.optimizer.eps,
                          "groups": [{"name": g["name"], "lr": g["lr"], "weight_decay": g.get("weight_decay", 0.0)}
                                     for g in self.optimizer.groups]},
            "rng": {"scheme": "philox/seedsequence", "seed": self.config.seed, "data_seed": self.config.data_seed},
        })
        ckpt.save(path, header, arrays)

    @classmethod
    def from_checkpoint(cls, path, data=None) -> "Trainer":
        header, arrays = ckpt.load(path)
        if header.get("compacted"):
            raise ckpt.CheckpointError("cannot resume training from a compacted checkpoint")
        config = TrainConfig(**header["train_config"])
        model = load_model_from(header, arrays)
        trainer = cls(config, data=data, model=model)
        trainer.controller = ctl.ControllerState(**header["controller"])
        trainer.step = header["counters"]["step"]
        opt = trainer.optimizer
        opt.t = header["optimizer"]["t"]
        for gi, g in enumerate(opt.groups):
            names = list(model.params) if g["name"] == "weights" else ["gates.log_alpha"]
            for pi, name in enumerate(names):
                opt.m[gi][pi] = arrays[f"adam.m.{name}"].copy()
                opt.v[gi][pi] = arrays[f"adam.v.{name}"].copy()
        return trainer


def _truncate_log(path: Path, step: int) -> None:
    """Drop records written after ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if (rec["type"] == "train" and rec["step"] < step) or (rec["type"] == "eval" and rec["step"] <= step):
            keep.append(line)
    path.write_text("".join(line + "\n" for line in keep))


def model_header(model: PrunableModel, compacted: bool) -> dict:
    return {
        "format": "hprune-checkpoint",
        "compacted": compacted,
        "model_config": model.config.to_dict(),
        "architecture": model.arch.to_dict(),
        "fabric": model.fabric.layout() if model.fabric is not None else None,
    }


def load_model_from(header: dict, arrays: dict) -> PrunableModel:
    mc = header["model_config"]
    mc = {**mc, **{k: tuple(mc[k]) for k in ("conv_channels", "conv_kernels", "conv_strides")}}
    cfg = ModelConfig(**mc)
    arch = Architecture.from_dict(header["architecture"])
    model = PrunableModel(cfg, gated=header["fabric"] is not None, arch=arch, init=False)
    model.load_arrays(arrays)
    return model


def load_model(path) -> tuple[PrunableModel, dict]:
    header, arrays = ckpt.load(path)
    return load_model_from(header, arrays), header


def save_model(model: PrunableModel, path, compacted: bool, extra: dict | None = None) -> None:
    header = model_header(model, compacted)
    header.update(extra or {})
    ckpt.save(path, header, OrderedDict(model.state_arrays()))


def embed(model: PrunableModel, x: np.ndarray) -> np.ndarray:
    chunks = []
    with T.no_grad():
        for i in range(0, len(x), EVAL_BATCH):
            chunks.append(model.forward(x[i : i + EVAL_BATCH], mode="eval").embedding.data)
    return np.concatenate(chunks)


def evaluate(model: PrunableModel, data, task: str) -> dict:
    emb = embed(model, data.eval.x)
    if task == "toy_sv":
        scores = cosine_scores(emb, data.trials)
        return {"eer": eer(scores), "min_dcf": min_dcf(scores)}
    head = model.task_head()
    with T.no_grad():
        logits = head.logits(T.Tensor(emb, dtype=model.config.dtype)).data
    scores = TrialScores.from_labels(logits, data.eval.y)
    return {"eer": eer(scores), "min_dcf": min_dcf(scores), "accuracy": accuracy(logits, data.eval.y)}


def fit(config: TrainConfig, out_dir=None) -> Trainer:
    trainer = Trainer(config)
    trainer.fit(out_dir)
    return trainer
