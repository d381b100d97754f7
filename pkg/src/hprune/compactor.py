"""Turn trained gates into a physically smaller, gate-free model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fabric import GateFabric
from .model import Architecture, PrunableModel, architecture_flops

RETHRESHOLD_TOL = 0.01
EQUIVALENCE_TOL = 1e-9


class PlanError(ValueError):
    pass


@dataclass
class CompactionPlan:
    original: dict
    conv_keep: list[list[int]]
    head_keep: list[list[int]]
    ffn_keep: list[list[int]]
    keep: list[bool] = field(default_factory=list)
    realized_params: int = 0
    realized_sparsity: float = 0.0
    realized_flops: int = 0
    reference_len: int = 0

    def architecture(self) -> Architecture:
        return Architecture(
            tuple(len(k) for k in self.conv_keep),
            tuple(len(k) for k in self.head_keep),
            tuple(len(k) for k in self.ffn_keep),
        )

    def to_dict(self) -> dict:
        return {
            "original": self.original,
            "conv_keep": self.conv_keep,
            "head_keep": self.head_keep,
            "ffn_keep": self.ffn_keep,
            "keep": [int(k) for k in self.keep],
            "realized_params": self.realized_params,
            "realized_sparsity": self.realized_sparsity,
            "realized_flops": self.realized_flops,
            "reference_len": self.reference_len,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "CompactionPlan":
        d = dict(d)
        d["keep"] = [bool(k) for k in d.get("keep", [])]
        return cls(**d)


def binarize(fabric: GateFabric, target: float, tol: float = RETHRESHOLD_TOL) -> np.ndarray:
    """Binary keep assignment: open gates first, then the rank cut nearest ``target`` if needed."""
    with T.no_grad():
        keep = fabric.deterministic_gates().data > 0
    if abs(fabric.realized_sparsity(keep) - target) <= tol:
        return keep
    order = np.argsort(-fabric.log_alpha.data, kind="stable")
    counts = fabric.cut_counts(order)
    sparsity = 1.0 - counts / fabric.total_params
    gap = np.abs(sparsity - target)
    # ties go to the larger (denser) cut
    k = int(np.flatnonzero(gap == gap.min())[-1])
    keep = np.zeros(fabric.num_gates, dtype=bool)
    keep[order[:k]] = True
    return keep


def make_plan(model: PrunableModel, keep, reference_len: int = 50) -> CompactionPlan:
    fabric = model.fabric
    if fabric is None:
        raise PlanError("model has no gates")
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (fabric.num_gates,):
        raise PlanError(f"keep vector has shape {keep.shape}, expected ({fabric.num_gates},)")
    arch = model.arch
    n_conv = len(arch.conv_channels)

    def kept(kind, layer, width):
        lo, hi = fabric.span(kind, layer)
        if hi - lo != width:
            raise PlanError(f"{kind} layer {layer}: {hi - lo} gates for width {width}")
        return [int(i) for i in np.flatnonzero(keep[lo:hi])]

    conv_keep = [kept("conv_channel", i, arch.conv_channels[i]) for i in range(n_conv - 1)]
    conv_keep.append(list(range(arch.conv_channels[-1])))
    head_keep = [kept("mhsa_head", l, h) for l, h in enumerate(arch.heads)]
    ffn_keep = [kept("ffn_neuron", l, f) for l, f in enumerate(arch.ffn)]
    plan = CompactionPlan(arch.to_dict(), conv_keep, head_keep, ffn_keep, keep=[bool(k) for k in keep])
    plan.realized_params = fabric.remaining_count(keep)
    plan.realized_sparsity = 1.0 - plan.realized_params / fabric.total_params
    plan.realized_flops = architecture_flops(model.config, plan.architecture(), reference_len)
    plan.reference_len = reference_len
    return plan


def _check_plan(model: PrunableModel, plan: CompactionPlan) -> None:
    arch = model.arch
    if plan.original != arch.to_dict():
        raise PlanError("plan was made for a different architecture")

    def check(indices, width, what):
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= width):
            raise PlanError(f"{what}: index out of range for width {width}")
        if np.any(np.diff(idx) <= 0):
            raise PlanError(f"{what}: indices must be sorted and unique")

    if len(plan.conv_keep) != len(arch.conv_channels):
        raise PlanError("conv layer count mismatch")
    for i, (idx, w) in enumerate(zip(plan.conv_keep, arch.conv_channels)):
        check(idx, w, f"conv layer {i}")
    if len(plan.conv_keep[-1]) != arch.conv_channels[-1]:
        raise PlanError("the last conv layer cannot be pruned")
    if len(plan.head_keep) != len(arch.heads) or len(plan.ffn_keep) != len(arch.ffn):
        raise PlanError("block count mismatch")
    for l, (idx, w) in enumerate(zip(plan.head_keep, arch.heads)):
        check(idx, w, f"heads of block {l}")
    for l, (idx, w) in enumerate(zip(plan.ffn_keep, arch.ffn)):
        check(idx, w, f"ffn of block {l}")


def compact(model: PrunableModel, plan: CompactionPlan) -> PrunableModel:
    """Slice every weight to the kept structures; the result carries no gates."""
    _check_plan(model, plan)
    cfg = model.config
    new = PrunableModel(cfg, gated=False, arch=plan.architecture(), init=False)
    src = {k: v.data for k, v in model.params.items()}
    out: dict[str, np.ndarray] = {}

    prev = np.arange(cfg.feat_dim)
    for i, idx in enumerate(plan.conv_keep):
        idx = np.asarray(idx, dtype=np.int64)
        out[f"conv.{i}.weight"] = src[f"conv.{i}.weight"][idx][:, prev]
        out[f"conv.{i}.bias"] = src[f"conv.{i}.bias"][idx]
        prev = idx

    dh = cfg.d_head
    for l in range(cfg.num_layers):
        pre = f"blocks.{l}."
        heads = np.asarray(plan.head_keep[l], dtype=np.int64)
        cols = (heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        for name in ("q", "k", "v"):
            out[pre + f"attn.w{name}"] = src[pre + f"attn.w{name}"][:, cols]
            out[pre + f"attn.b{name}"] = src[pre + f"attn.b{name}"][cols]
        out[pre + "attn.wo"] = src[pre + "attn.wo"][cols, :]
        neurons = np.asarray(plan.ffn_keep[l], dtype=np.int64)
        out[pre + "ffn.w1"] = src[pre + "ffn.w1"][:, neurons]
        out[pre + "ffn.b1"] = src[pre + "ffn.b1"][neurons]
        out[pre + "ffn.w2"] = src[pre + "ffn.w2"][neurons, :]

    for name in new.params:
        new.params[name].data = np.array(out.get(name, src[name]), dtype=cfg.dtype, copy=True)
        if new.params[name].shape != _expected_shape(new, name):
            raise PlanError(f"sliced {name} has the wrong shape")
    return new


def _expected_shape(model: PrunableModel, name: str) -> tuple:
    from .model import _param_shapes

    return _param_shapes(model.config, model.arch)[name]


@dataclass
class EquivalenceReport:
    n_inputs: int
    max_abs_diff: float
    tolerance: float = EQUIVALENCE_TOL

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff < self.tolerance)


def verify_equivalence(model: PrunableModel, keep, compacted: PrunableModel, n_inputs: int = 4,
                       input_len: int = 50, batch: int = 2, seed: int = 0,
                       tolerance: float = EQUIVALENCE_TOL) -> EquivalenceReport:
    """Max-abs difference of frames and embeddings between binary-gated and compacted forwards."""
    from .streams import stream

    gates = np.asarray(keep, dtype=model.config.dtype)
    worst = 0.0
    with T.no_grad():
        for i in range(n_inputs):
            x = stream(seed, "equivalence", i).standard_normal((batch, input_len, model.config.feat_dim))
            ref = model.forward(x, mode="eval", gates=gates)
            got = compacted.forward(x, mode="eval")
            worst = max(
                worst,
                float(np.max(np.abs(ref.embedding.data - got.embedding.data))),
                float(np.max(np.abs(ref.frames.data - got.frames.data))),
            )
    return EquivalenceReport(n_inputs=n_inputs, max_abs_diff=worst, tolerance=tolerance)
