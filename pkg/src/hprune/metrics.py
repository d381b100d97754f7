"""Detection metrics and layer-wise retention patterns."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .fabric import KINDS


@dataclass
class TrialScores:
    target: np.ndarray
    nontarget: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).ravel()
        self.nontarget = np.asarray(self.nontarget, dtype=np.float64).ravel()
        if self.target.size == 0 or self.nontarget.size == 0:
            raise ValueError("need at least one target and one non-target score")
        if not (np.all(np.isfinite(self.target)) and np.all(np.isfinite(self.nontarget))):
            raise ValueError("scores must be finite")

    @classmethod
    def from_labels(cls, scores, labels) -> "TrialScores":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels).astype(bool)
        return cls(scores[labels], scores[~labels])


def error_rates(scores: TrialScores) -> tuple[np.ndarray, np.ndarray]:
    """(FRR, FAR) at every distinct threshold, ascending, then at +inf.

    A trial is accepted when its score is >= the threshold.
    """
    tgt = np.sort(scores.target)
    non = np.sort(scores.nontarget)
    thr = np.unique(np.concatenate([tgt, non]))
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    return np.append(frr, 1.0), np.append(far, 0.0)


def eer(scores: TrialScores) -> float:
    """Equal error rate, interpolating linearly between adjacent operating points."""
    frr, far = error_rates(scores)
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(frr[i])
    lam = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(frr[i - 1] + lam * (frr[i] - frr[i - 1]))


def min_dcf(scores: TrialScores, p_target: float = 0.05, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    frr, far = error_rates(scores)
    cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(cost.min() / norm)


def accuracy(logits, labels) -> float:
    pred = np.asarray(logits) > 0
    return float(np.mean(pred == np.asarray(labels).astype(bool)))


def cosine_scores(embeddings: np.ndarray, trials: np.ndarray) -> TrialScores:
    """Cosine similarity of L2-normalised embeddings for each (enroll, test, is_target) trial."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    s = np.einsum("ij,ij->i", e[trials[:, 0]], e[trials[:, 1]])
    return TrialScores.from_labels(s, trials[:, 2])


# -- retention patterns ----------------------------------------------------


@dataclass
class RetentionPattern:
    """Per-layer kept/total counts for each structure kind."""

    kept: dict[str, np.ndarray] = field(default_factory=dict)
    total: dict[str, np.ndarray] = field(default_factory=dict)

    def fraction(self, kind: str) -> np.ndarray:
        tot = self.total[kind]
        return np.where(tot > 0, self.kept[kind] / np.maximum(tot, 1), 0.0)

    def kinds(self) -> list[str]:
        return [k for k in KINDS if k in self.kept]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.fraction(k) for k in self.kinds()]) if self.kept else np.zeros(0)

    def rows(self) -> list[dict]:
        rows = []
        for kind in self.kinds():
            for layer, (k, t) in enumerate(zip(self.kept[kind], self.total[kind])):
                rows.append({
                    "layer": layer,
                    "kind": kind,
                    "kept": int(k),
                    "total": int(t),
                    "fraction": float(k / t) if t else 0.0,
                })
        return rows

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["layer", "kind", "kept", "total", "fraction"], lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "RetentionPattern":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        pattern = cls()
        for kind in KINDS:
            sel = sorted((int(r["layer"]), int(r["kept"]), int(r["total"])) for r in rows if r["kind"] == kind)
            if sel:
                pattern.kept[kind] = np.array([s[1] for s in sel])
                pattern.total[kind] = np.array([s[2] for s in sel])
        return pattern


def retention_report(source) -> RetentionPattern:
    """Retention from a CompactionPlan or a GateFabric (gate open iff its deterministic value > 0)."""
    from .compactor import CompactionPlan
    from .fabric import GateFabric

    if isinstance(source, CompactionPlan):
        pattern = RetentionPattern()
        arch = source.original
        n_conv = len(arch["conv_channels"])
        if n_conv > 1:
            pattern.kept["conv_channel"] = np.array([len(k) for k in source.conv_keep[: n_conv - 1]])
            pattern.total["conv_channel"] = np.array(arch["conv_channels"][: n_conv - 1])
        pattern.kept["mhsa_head"] = np.array([len(k) for k in source.head_keep])
        pattern.total["mhsa_head"] = np.array(arch["heads"])
        pattern.kept["ffn_neuron"] = np.array([len(k) for k in source.ffn_keep])
        pattern.total["ffn_neuron"] = np.array(arch["ffn"])
        return pattern
    if isinstance(source, GateFabric):
        keep = source.deterministic_gates().data > 0
        return pattern_from_keep(source, keep)
    raise TypeError(f"cannot build a retention pattern from {type(source).__name__}")


def pattern_from_keep(fabric, keep) -> RetentionPattern:
    keep = np.asarray(keep, dtype=bool)
    pattern = RetentionPattern()
    for kind in KINDS:
        layers = fabric.layers(kind)
        if not layers:
            continue
        n_layers = max(layers) + 1
        kept = np.zeros(n_layers, dtype=np.int64)
        total = np.zeros(n_layers, dtype=np.int64)
        for layer in layers:
            lo, hi = fabric.span(kind, layer)
            kept[layer] = int(keep[lo:hi].sum())
            total[layer] = hi - lo
        pattern.kept[kind] = kept
        pattern.total[kind] = total
    return pattern


def pattern_distance(a: RetentionPattern, b: RetentionPattern) -> float:
    """L1 distance between the per-layer kept fractions of two patterns."""
    va, vb = a.vector(), b.vector()
    if va.shape != vb.shape:
        raise ValueError(f"patterns have different layouts: {va.shape} vs {vb.shape}")
    return float(np.abs(va - vb).sum())
