"""Deterministic synthetic stand-ins for speaker verification and spoof detection.

Every utterance is generated from its own random stream addressed by
``(seed, task, split, index)``, so any sample can be regenerated alone.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .streams import stream


@dataclass(frozen=True)
class SvTaskSpec:
    num_classes: int = 64
    eval_classes: int = 16
    frames: int = 50
    feat_dim: int = 24
    prototype_scale: float = 1.0
    session_scale: float = 0.6
    noise_scale: float = 1.0
    mixing_depth: int = 2
    train_per_class: int = 40
    eval_per_class: int = 8
    seed: int = 0


@dataclass(frozen=True)
class SpoofTaskSpec:
    amplitude: float = 0.05
    period: int = 2
    bonafide_fraction: float = 0.5
    frames: int = 50
    feat_dim: int = 24
    smoothing: int = 5
    train_size: int = 2048
    eval_size: int = 512
    seed: int = 0


SV_PRESETS = {
    "full": SvTaskSpec(),
    "small": SvTaskSpec(num_classes=32, train_per_class=8, session_scale=1.0),
}


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class SvData:
    train: Split
    eval: Split
    trials: np.ndarray  # (n, 3): enroll index, test index, is_target


@dataclass
class SpoofData:
    train: Split
    eval: Split


def _mixer(spec: SvTaskSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = stream(spec.seed, "sv", "mixer")
    d = spec.feat_dim
    layers = []
    for _ in range(spec.mixing_depth):
        w = rng.standard_normal((d, d)) / np.sqrt(d)
        b = 0.1 * rng.standard_normal(d)
        layers.append((w, b))
    return layers


def sv_prototype(spec: SvTaskSpec, cls: int) -> np.ndarray:
    return spec.prototype_scale * stream(spec.seed, "sv", "proto", cls).standard_normal(spec.feat_dim)


def sv_utterance(spec: SvTaskSpec, cls: int, index: int, mixer=None) -> np.ndarray:
    """Frames of utterance ``index`` of class ``cls``: tanh-mixed (prototype + session + frame noise)."""
    mixer = mixer if mixer is not None else _mixer(spec)
    rng = stream(spec.seed, "sv", "utt", cls, index)
    latent = (
        sv_prototype(spec, cls)
        + spec.session_scale * rng.standard_normal(spec.feat_dim)
        + spec.noise_scale * rng.standard_normal((spec.frames, spec.feat_dim))
    )
    h = latent
    for w, b in mixer:
        h = np.tanh(h @ w + b)
    return h


def gen_sv(spec: SvTaskSpec = SvTaskSpec()) -> SvData:
    mixer = _mixer(spec)
    train_x, train_y = [], []
    for c in range(spec.num_classes):
        for i in range(spec.train_per_class):
            train_x.append(sv_utterance(spec, c, i, mixer))
            train_y.append(c)
    eval_x, eval_y = [], []
    # open set: evaluation speakers are indexed after the training ones
    for j in range(spec.eval_classes):
        c = spec.num_classes + j
        for i in range(spec.eval_per_class):
            eval_x.append(sv_utterance(spec, c, i, mixer))
            eval_y.append(j)
    eval_y = np.asarray(eval_y, dtype=np.int64)
    return SvData(
        train=Split(np.stack(train_x), np.asarray(train_y, dtype=np.int64)),
        eval=Split(np.stack(eval_x), eval_y),
        trials=make_trials(eval_y, spec.seed),
    )


def make_trials(labels: np.ndarray, seed: int) -> np.ndarray:
    """All same-class pairs as targets, plus an equal number of sampled different-class pairs."""
    labels = np.asarray(labels)
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    targets = np.stack([iu[same], ju[same]], axis=1)
    nontargets = np.stack([iu[~same], ju[~same]], axis=1)
    k = min(len(targets), len(nontargets))
    rng = stream(seed, "trials")
    if len(targets) > k:
        targets = targets[np.sort(rng.choice(len(targets), k, replace=False))]
    if len(nontargets) > k:
        nontargets = nontargets[np.sort(rng.choice(len(nontargets), k, replace=False))]
    out = np.concatenate([
        np.column_stack([targets, np.ones(len(targets), dtype=np.int64)]),
        np.column_stack([nontargets, np.zeros(len(nontargets), dtype=np.int64)]),
    ])
    return out.astype(np.int64)


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    kernel = np.ones(window) / window
    out = np.stack([np.convolve(x[:, j], kernel, mode="same") for j in range(x.shape[1])], axis=1)
    return out * np.sqrt(window)  # back to roughly unit variance


def spoof_utterance(spec: SpoofTaskSpec, split: str, index: int) -> tuple[np.ndarray, int]:
    """Returns (frames, label) with label 1 for bona fide and 0 for spoof."""
    rng = stream(spec.seed, "spoof", split, index)
    f = spec.bonafide_fraction
    bonafide = int(np.floor((index + 1) * f) - np.floor(index * f))
    base = _smooth(rng.standard_normal((spec.frames, spec.feat_dim)), spec.smoothing)
    start = int(rng.integers(0, spec.frames - spec.frames // 2 + 1))
    if not bonafide:
        span = spec.frames // 2
        t = np.arange(span)
        sign = np.where((t // (spec.period // 2 or 1)) % 2 == 0, 1.0, -1.0)
        base[start : start + span] += spec.amplitude * sign[:, None]
    return base, bonafide


def gen_spoof(spec: SpoofTaskSpec = SpoofTaskSpec()) -> SpoofData:
    def build(split, n):
        xs, ys = zip(*(spoof_utterance(spec, split, i) for i in range(n)))
        return Split(np.stack(xs), np.asarray(ys, dtype=np.int64))

    return SpoofData(train=build("train", spec.train_size), eval=build("eval", spec.eval_size))


def export_flat(path, x: np.ndarray, y: np.ndarray) -> None:
    """Write ``b'HPDS'``, uint32 version, uint32 n/frames/feat, int32 labels, float32 frames (little-endian)."""
    n, t, d = x.shape
    with open(path, "wb") as fh:
        fh.write(b"HPDS")
        fh.write(struct.pack("<IIII", 1, n, t, d))
        fh.write(np.asarray(y, dtype="<i4").tobytes())
        fh.write(np.asarray(x, dtype="<f4").tobytes())


def import_flat(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"HPDS":
        raise ValueError("not a flat dataset file")
    version, n, t, d = struct.unpack("<IIII", raw[4:20])
    if version != 1:
        raise ValueError(f"unsupported dataset version {version}")
    off = 20
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    x = np.frombuffer(raw, dtype="<f4", count=n * t * d, offset=off).reshape(n, t, d)
    return x, y


def spec_dict(spec) -> dict:
    return asdict(spec)


def with_seed(spec, seed: int):
    return replace(spec, seed=seed)
