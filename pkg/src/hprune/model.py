"""Desk-scale prunable encoder: conv front-end, pre-norm transformer stack,
multi-head layer-weighted attentive pooling, and a task head.

Structures that can be pruned:

* conv output channels of every conv layer except the last (the last one
  produces the residual stream, so its width is fixed at ``d_model``);
* attention heads of every block;
* FFN intermediate neurons of every block.

Per-layer widths live in :class:`Architecture` so a compacted model uses
the same forward code with narrower weights and no gates.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .fabric import GateFabric, SharedSlice, StructuralGroup
from .objectives import AAMHead, BCEHead
from .streams import stream
from .tensor import Tensor

# per-element FLOP charges for the analytic counter
GELU_FLOPS = 8
SOFTMAX_FLOPS = 5
LAYERNORM_FLOPS = 8


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 24
    conv_channels: tuple[int, ...] = (32, 64)
    conv_kernels: tuple[int, ...] = (3, 3)
    conv_strides: tuple[int, ...] = (2, 2)
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    d_head: int = 16
    ffn_dim: int = 256
    pooling_heads: int = 4
    embedding_dim: int = 32
    num_classes: int = 64
    head: str = "aam"
    max_frames: int = 64
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(int(c) for c in self.conv_kernels))
        object.__setattr__(self, "conv_strides", tuple(int(c) for c in self.conv_strides))
        if self.d_model != self.num_heads * self.d_head:
            raise ValueError(f"d_model={self.d_model} != num_heads*d_head={self.num_heads * self.d_head}")
        n = len(self.conv_channels)
        if n == 0 or len(self.conv_kernels) != n or len(self.conv_strides) != n:
            raise ValueError("conv_channels/kernels/strides must be non-empty and equal length")
        if self.conv_channels[-1] != self.d_model:
            raise ValueError("last conv layer must produce d_model channels")
        ints = [self.feat_dim, self.num_layers, self.d_model, self.num_heads, self.d_head, self.ffn_dim,
                self.pooling_heads, self.embedding_dim, self.max_frames, *self.conv_channels,
                *self.conv_kernels, *self.conv_strides]
        if any(v <= 0 for v in ints):
            raise ValueError("all extents must be positive")
        if self.head not in ("aam", "bce"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "aam" and self.num_classes <= 1:
            raise ValueError("aam head needs at least 2 classes")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "small": ModelConfig(),
    "large": ModelConfig(conv_channels=(32, 96), num_layers=8, d_model=96, num_heads=6, d_head=16, ffn_dim=384),
    "tiny": ModelConfig(
        feat_dim=3, conv_channels=(4, 8), conv_kernels=(3, 3), conv_strides=(1, 1), num_layers=1,
        d_model=8, num_heads=2, d_head=4, ffn_dim=16, pooling_heads=2, embedding_dim=4,
        num_classes=3, max_frames=8,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class Architecture:
    conv_channels: tuple[int, ...]
    heads: tuple[int, ...]
    ffn: tuple[int, ...]

    @classmethod
    def full(cls, cfg: ModelConfig) -> "Architecture":
        return cls(cfg.conv_channels, (cfg.num_heads,) * cfg.num_layers, (cfg.ffn_dim,) * cfg.num_layers)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["conv_channels"]), tuple(d["heads"]), tuple(d["ffn"]))


@dataclass
class ForwardOutput:
    frames: Tensor
    embedding: Tensor
    gates: Tensor | None = None
    layers: list[Tensor] = field(default_factory=list)


def conv_lengths(cfg: ModelConfig, input_len: int) -> list[int]:
    """Frame count after each conv layer; raises if the input is too short."""
    lengths = []
    t = input_len
    for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides)):
        if t < k:
            raise ModelError(f"conv layer {i}: input length {t} shorter than kernel {k}")
        t = (t - k) // s + 1
        lengths.append(t)
    return lengths


def _param_shapes(cfg: ModelConfig, arch: Architecture) -> "OrderedDict[str, tuple]":
    shapes: OrderedDict[str, tuple] = OrderedDict()
    c_in = cfg.feat_dim
    for i, (c, k) in enumerate(zip(arch.conv_channels, cfg.conv_kernels)):
        shapes[f"conv.{i}.weight"] = (c, c_in, k)
        shapes[f"conv.{i}.bias"] = (c,)
        c_in = c
    D, dh = cfg.d_model, cfg.d_head
    shapes["pos"] = (cfg.max_frames, D)
    for l in range(cfg.num_layers):
        hd = arch.heads[l] * dh
        f = arch.ffn[l]
        p = f"blocks.{l}."
        shapes[p + "ln1.weight"] = (D,)
        shapes[p + "ln1.bias"] = (D,)
        for name in ("q", "k", "v"):
            shapes[p + f"attn.w{name}"] = (D, hd)
            shapes[p + f"attn.b{name}"] = (hd,)
        shapes[p + "attn.wo"] = (hd, D)
        shapes[p + "attn.bo"] = (D,)
        shapes[p + "ln2.weight"] = (D,)
        shapes[p + "ln2.bias"] = (D,)
        shapes[p + "ffn.w1"] = (D, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, D)
        shapes[p + "ffn.b2"] = (D,)
    n_states = cfg.num_layers + 1
    H, E = cfg.pooling_heads, cfg.embedding_dim
    shapes["pool.layer_k"] = (n_states,)
    shapes["pool.layer_v"] = (n_states,)
    shapes["pool.att_w"] = (D, H)
    shapes["pool.att_b"] = (H,)
    shapes["pool.proj_w"] = (H * D, E)
    shapes["pool.proj_b"] = (E,)
    if cfg.head == "aam":
        shapes["head.weight"] = (cfg.num_classes, E)
    else:
        shapes["head.weight"] = (E, 1)
        shapes["head.bias"] = (1,)
    return shapes


def _init_array(name: str, shape: tuple, cfg: ModelConfig, seed: int) -> np.ndarray:
    rng = stream(seed, "init", name)
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("ln1.weight") or name.endswith("ln2.weight"):
        return np.ones(shape)
    if leaf.startswith("b") or leaf in ("bias", "layer_k", "layer_v", "att_b", "proj_b"):
        return np.zeros(shape)
    if name == "pos":
        return 0.02 * rng.standard_normal(shape)
    if name == "head.weight" and cfg.head == "aam":
        w = rng.standard_normal(shape)
        return w / np.linalg.norm(w, axis=1, keepdims=True)
    if name.startswith("conv."):
        fan_in = shape[1] * shape[2]
    else:
        fan_in = shape[0]
    return rng.standard_normal(shape) / math.sqrt(max(fan_in, 1))


class PrunableModel:
    """Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, config: ModelConfig, seed: int = 0, gated: bool = True,
                 arch: Architecture | None = None, init: bool = True):
        self.config = config
        self.arch = arch or Architecture.full(config)
        if len(self.arch.heads) != config.num_layers or len(self.arch.ffn) != config.num_layers:
            raise ValueError("architecture does not match num_layers")
        if len(self.arch.conv_channels) != len(config.conv_channels) or \
                self.arch.conv_channels[-1] != config.d_model:
            raise ValueError("architecture conv widths do not match config")
        dtype = config.dtype
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in _param_shapes(config, self.arch).items():
            data = _init_array(name, shape, config, seed) if init else np.zeros(shape)
            self.params[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)
        self.fabric: GateFabric | None = build_fabric(self) if gated else None
        if self.fabric is not None and config.precision == "float32":
            self.fabric.log_alpha = Tensor(self.fabric.log_alpha.data, requires_grad=True, dtype=np.float32)

    @property
    def gated(self) -> bool:
        return self.fabric is not None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def task_head(self):
        if self.config.head == "aam":
            return AAMHead(self.params["head.weight"])
        return BCEHead(self.params["head.weight"], self.params["head.bias"])

    # -- forward ----------------------------------------------------------

    def forward(self, batch, mode: str = "eval", u: np.ndarray | None = None,
                gates=None, return_layers: bool = False) -> ForwardOutput:
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=cfg.dtype)
        if x.ndim != 3 or x.shape[2] != cfg.feat_dim:
            raise T.ShapeError("forward", x.shape, detail=f"expected (B, T, {cfg.feat_dim})")
        if not np.all(np.isfinite(x.data)):
            raise ModelError("forward: non-finite input")
        lengths = conv_lengths(cfg, x.shape[1])
        if lengths[-1] > cfg.max_frames:
            raise ModelError(f"{lengths[-1]} frames after conv exceed max_frames={cfg.max_frames}")

        z = None
        if self.fabric is not None:
            if gates is not None:
                z = gates if isinstance(gates, Tensor) else Tensor(gates, dtype=cfg.dtype)
            else:
                z = self.fabric.gate_values(mode, u)
        p = self.params

        h = x.transpose(0, 2, 1)
        n_conv = len(cfg.conv_channels)
        for i in range(n_conv):
            h = T.conv1d(h, p[f"conv.{i}.weight"], p[f"conv.{i}.bias"], stride=cfg.conv_strides[i])
            h = T.gelu(h)
            if z is not None and i < n_conv - 1:
                h = self.fabric.apply(h, z, "conv_channel", i, axis=1)
        h = h.transpose(0, 2, 1)
        h = h + p["pos"][: h.shape[1]]
        self._check(h, "conv front-end")

        layers = [h]
        for l in range(cfg.num_layers):
            h = self._block(h, l, z)
            self._check(h, f"block {l}")
            layers.append(h)
        emb = self._pool(layers)
        self._check(emb, "pooling")
        return ForwardOutput(frames=h, embedding=emb, gates=z, layers=layers if return_layers else [])

    __call__ = forward

    @staticmethod
    def _check(t: Tensor, where: str) -> None:
        if not np.all(np.isfinite(t.data)):
            raise ModelError(f"non-finite activations after {where}")

    def _block(self, x: Tensor, l: int, z: Tensor | None) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"blocks.{l}."
        B, Tn, D = x.shape
        H, dh = self.arch.heads[l], cfg.d_head

        if H > 0:
            a = T.layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"]).reshape(B * Tn, D)

            def split(name):
                y = T.matmul(a, p[pre + f"attn.w{name}"]) + p[pre + f"attn.b{name}"]
                return y.reshape(B, Tn, H, dh).transpose(0, 2, 1, 3).reshape(B * H, Tn, dh)

            q, k, v = split("q"), split("k"), split("v")
            scores = T.matmul(q, k.swapaxes(1, 2)) * (1.0 / math.sqrt(dh))
            ctx = T.matmul(T.softmax(scores), v).reshape(B, H, Tn, dh)
            if z is not None:
                ctx = self.fabric.apply(ctx, z, "mhsa_head", l, axis=1)
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B * Tn, H * dh)
            attn = (T.matmul(ctx, p[pre + "attn.wo"]) + p[pre + "attn.bo"]).reshape(B, Tn, D)
            x = x + attn
        else:
            # no heads left: the sublayer is the residual plus its output bias
            x = x + p[pre + "attn.bo"]

        F = self.arch.ffn[l]
        if F > 0:
            b = T.layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"]).reshape(B * Tn, D)
            hdn = T.gelu(T.matmul(b, p[pre + "ffn.w1"]) + p[pre + "ffn.b1"])
            if z is not None:
                hdn = self.fabric.apply(hdn, z, "ffn_neuron", l, axis=1)
            ffn = (T.matmul(hdn, p[pre + "ffn.w2"]) + p[pre + "ffn.b2"]).reshape(B, Tn, D)
            x = x + ffn
        else:
            x = x + p[pre + "ffn.b2"]
        return x

    def layer_weights(self) -> tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            return (T.softmax(self.params["pool.layer_k"]).data.copy(),
                    T.softmax(self.params["pool.layer_v"]).data.copy())

    def _pool(self, layers: list[Tensor]) -> Tensor:
        cfg = self.config
        p = self.params
        B, Tn, D = layers[0].shape
        n = len(layers)
        Hp = cfg.pooling_heads
        stacked = T.stack(layers).reshape(n, B * Tn * D)
        wk = T.softmax(p["pool.layer_k"]).reshape(1, n)
        wv = T.softmax(p["pool.layer_v"]).reshape(1, n)
        keys = T.matmul(wk, stacked).reshape(B * Tn, D)
        values = T.matmul(wv, stacked).reshape(B, Tn, D)
        logits = (T.matmul(keys, p["pool.att_w"]) + p["pool.att_b"]).reshape(B, Tn, Hp)
        att = T.softmax(logits.transpose(0, 2, 1))
        pooled = T.matmul(att, values).reshape(B, Hp * D)
        return T.matmul(pooled, p["pool.proj_w"]) + p["pool.proj_b"]

    # -- (de)serialisation helpers ---------------------------------------

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        if self.fabric is not None:
            out["gates.log_alpha"] = self.fabric.log_alpha.data
        return out

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            arr = arrays[name]
            if arr.shape != t.shape:
                raise T.ShapeError("load", t.shape, arr.shape, detail=name)
            t.data[...] = arr
        if self.fabric is not None:
            self.fabric.log_alpha.data[...] = arrays["gates.log_alpha"]


def build_fabric(model: PrunableModel) -> GateFabric:
    """Create gates and the exact ownership of every parameter."""
    cfg, arch = model.config, model.arch
    groups: list[StructuralGroup] = []
    shared: list[SharedSlice] = []
    fixed = 0
    n_conv = len(arch.conv_channels)
    D, dh = cfg.d_model, cfg.d_head

    # conv layers 0..n_conv-2 are gated; their gate index base per layer
    base: dict[int, int] = {}
    for i in range(n_conv - 1):
        base[i] = len(groups)
        c_in = cfg.feat_dim if i == 0 else arch.conv_channels[i - 1]
        k = cfg.conv_kernels[i]
        for c in range(arch.conv_channels[i]):
            owned = 1  # bias
            if i == 0:
                owned += c_in * k  # ungated input features
            if i + 1 == n_conv - 1:
                owned += arch.conv_channels[i + 1] * cfg.conv_kernels[i + 1]  # taps in the ungated last layer
            groups.append(StructuralGroup("conv_channel", i, c, owned))
        if i >= 1:
            for c in range(arch.conv_channels[i - 1]):
                for o in range(arch.conv_channels[i]):
                    shared.append(SharedSlice(base[i - 1] + c, base[i] + o, k))
    last = n_conv - 1
    fixed += arch.conv_channels[last]  # last conv bias
    if n_conv == 1:
        fixed += arch.conv_channels[0] * cfg.feat_dim * cfg.conv_kernels[0]

    fixed += cfg.max_frames * D
    for l in range(cfg.num_layers):
        for h in range(arch.heads[l]):
            groups.append(StructuralGroup("mhsa_head", l, h, 4 * D * dh + 3 * dh))
        for j in range(arch.ffn[l]):
            groups.append(StructuralGroup("ffn_neuron", l, j, 2 * D + 1))
        fixed += 2 * D + 2 * D + D + D  # ln1, ln2, attn.bo, ffn.b2

    n_states = cfg.num_layers + 1
    H, E = cfg.pooling_heads, cfg.embedding_dim
    fixed += 2 * n_states + D * H + H + H * D * E + E
    fixed += cfg.num_classes * E if cfg.head == "aam" else E + 1

    return GateFabric(groups, shared, fixed, expected_total=model.num_params())


def count_params(model: PrunableModel) -> int:
    return model.num_params()


def count_flops(model: PrunableModel, input_len: int) -> int:
    """Analytic FLOPs for one utterance of ``input_len`` frames (encoder + pooling).

    Matmul/conv cost 2 per multiply-accumulate; bias adds, residual adds,
    scaling and positional adds cost 1 per element; GELU, softmax and layer
    norm use the per-element charges defined at module level. Gate
    multiplies and the task head are not charged.
    """
    return architecture_flops(model.config, model.arch, input_len)


def architecture_flops(cfg: ModelConfig, arch: Architecture, input_len: int) -> int:
    lengths = conv_lengths(cfg, input_len)
    flops = 0
    c_in = cfg.feat_dim
    for i, c in enumerate(arch.conv_channels):
        t = lengths[i]
        flops += 2 * c * c_in * cfg.conv_kernels[i] * t + c * t + GELU_FLOPS * c * t
        c_in = c
    Tn, D, dh = lengths[-1], cfg.d_model, cfg.d_head
    flops += Tn * D  # positional add
    for l in range(cfg.num_layers):
        H, F = arch.heads[l], arch.ffn[l]
        hd = H * dh
        if H > 0:
            flops += LAYERNORM_FLOPS * Tn * D
            flops += 3 * (2 * Tn * D * hd + Tn * hd)
            flops += 2 * H * Tn * Tn * dh + H * Tn * Tn + SOFTMAX_FLOPS * H * Tn * Tn
            flops += 2 * H * Tn * Tn * dh
            flops += 2 * Tn * hd * D + Tn * D
        else:
            flops += Tn * D
        flops += Tn * D  # residual
        if F > 0:
            flops += LAYERNORM_FLOPS * Tn * D
            flops += 2 * Tn * D * F + Tn * F + GELU_FLOPS * Tn * F
            flops += 2 * Tn * F * D + Tn * D
        else:
            flops += Tn * D
        flops += Tn * D  # residual
    n = cfg.num_layers + 1
    Hp, E = cfg.pooling_heads, cfg.embedding_dim
    flops += 2 * (2 * n * Tn * D)  # layer mixing for keys and values
    flops += 2 * Tn * D * Hp + Tn * Hp + SOFTMAX_FLOPS * Hp * Tn
    flops += 2 * Hp * Tn * D
    flops += 2 * Hp * D * E + E
    return int(flops)
