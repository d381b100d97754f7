"""Gate registry and exact parameter accounting.

Every model parameter lands in exactly one bucket:

* fixed: never removable (layer norms, output biases, back-end, head);
* owned: removable as soon as its single gate is closed;
* shared: a slice that survives only while *both* of its gates are open
  (a conv filter tap between a gated input channel and a gated output
  channel).

Because gates are independent, the expected number of surviving
parameters is linear in the per-gate open probabilities plus one product
term per shared slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hard_concrete as hc
from . import tensor as T
from .tensor import ShapeError, Tensor

KINDS = ("conv_channel", "mhsa_head", "ffn_neuron")
LOG_ALPHA_INIT = 2.5


class AccountingError(AssertionError):
    pass


@dataclass(frozen=True)
class StructuralGroup:
    kind: str
    layer: int
    index: int
    owned: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.owned < 0:
            raise ValueError("owned count must be non-negative")


@dataclass(frozen=True)
class SharedSlice:
    gate: int
    partner: int
    count: int


class GateFabric:
    """One Hard Concrete gate per structural group, stored as one log_alpha vector."""

    def __init__(
        self,
        groups: list[StructuralGroup],
        shared: list[SharedSlice] | None = None,
        fixed_count: int = 0,
        params: hc.HardConcreteParams = hc.DEFAULT,
        log_alpha_init: float = LOG_ALPHA_INIT,
        expected_total: int | None = None,
    ):
        self.groups = list(groups)
        self.shared = list(shared or [])
        self.fixed_count = int(fixed_count)
        self.params = params
        n = len(self.groups)
        self.log_alpha = Tensor(np.full(n, float(log_alpha_init)), requires_grad=True)

        self._owned = np.array([g.owned for g in self.groups], dtype=np.int64)
        self._pair_i = np.array([s.gate for s in self.shared], dtype=np.int64)
        self._pair_j = np.array([s.partner for s in self.shared], dtype=np.int64)
        self._pair_n = np.array([s.count for s in self.shared], dtype=np.int64)
        for s in self.shared:
            if not (0 <= s.gate < n and 0 <= s.partner < n) or s.gate == s.partner:
                raise ValueError(f"bad shared slice {s}")

        self.total_params = int(self.fixed_count + self._owned.sum() + self._pair_n.sum())
        if expected_total is not None and expected_total != self.total_params:
            raise AccountingError(
                f"bucket sizes sum to {self.total_params}, model has {expected_total} parameters"
            )

        self._spans: dict[tuple[str, int], tuple[int, int]] = {}
        for i, g in enumerate(self.groups):
            key = (g.kind, g.layer)
            lo, hi = self._spans.get(key, (i, i))
            if hi != i:
                raise ValueError(f"groups of {key} are not contiguous")
            self._spans[key] = (lo, i + 1)

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def num_gates(self) -> int:
        return len(self.groups)

    def span(self, kind: str, layer: int) -> tuple[int, int]:
        return self._spans.get((kind, layer), (0, 0))

    def layers(self, kind: str) -> list[int]:
        return sorted(layer for k, layer in self._spans if k == kind)

    # -- gate values ------------------------------------------------------

    def sample_gates(self, u: np.ndarray) -> Tensor:
        return hc.sample(self.log_alpha, u, self.params).z

    def deterministic_gates(self) -> Tensor:
        return hc.deterministic_gate(self.log_alpha, self.params)

    def gate_values(self, mode: str, u: np.ndarray | None = None) -> Tensor:
        if mode == "train":
            if u is None:
                raise ValueError("train mode needs uniform draws")
            return self.sample_gates(u)
        if mode == "eval":
            return self.deterministic_gates()
        raise ValueError(f"unknown mode {mode!r}")

    def apply(self, x: Tensor, gates: Tensor, kind: str, layer: int, axis: int) -> Tensor:
        """Scale ``x`` along ``axis`` by the gates of (kind, layer)."""
        lo, hi = self.span(kind, layer)
        if x.shape[axis] != hi - lo:
            raise ShapeError(
                "apply_gates", x.shape, (hi - lo,), detail=f"{kind} layer {layer} axis {axis}"
            )
        z = gates[lo:hi]
        shape = [1] * x.ndim
        shape[axis] = hi - lo
        return x * z.reshape(tuple(shape))

    # -- accounting -------------------------------------------------------

    def prob_nonzero(self) -> Tensor:
        return hc.prob_nonzero(self.log_alpha, self.params)

    def expected_remaining_params(self) -> Tensor:
        p = self.prob_nonzero()
        owned = Tensor(self._owned.astype(p.dtype))
        total = (p * owned).sum() + float(self.fixed_count)
        if len(self.shared):
            pair = p[self._pair_i] * p[self._pair_j] * Tensor(self._pair_n.astype(p.dtype))
            total = total + pair.sum()
        return total

    def expected_sparsity(self) -> Tensor:
        return 1.0 - self.expected_remaining_params() * (1.0 / self.total_params)

    def remaining_count(self, keep) -> int:
        """Exact surviving parameter count for a binary keep assignment."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.num_gates,):
            raise ShapeError("remaining_count", keep.shape, (self.num_gates,))
        total = self.fixed_count + int(self._owned[keep].sum())
        if len(self.shared):
            both = keep[self._pair_i] & keep[self._pair_j]
            total += int(self._pair_n[both].sum())
        return total

    def realized_sparsity(self, keep) -> float:
        return 1.0 - self.remaining_count(keep) / self.total_params

    def cut_counts(self, order: np.ndarray) -> np.ndarray:
        """Remaining counts when keeping the first k gates of ``order``, k = 0..n."""
        n = self.num_gates
        rank = np.empty(n, dtype=np.int64)
        rank[np.asarray(order)] = np.arange(n)
        counts = np.zeros(n + 1, dtype=np.int64)
        np.add.at(counts, rank + 1, self._owned)
        if len(self.shared):
            # a shared slice appears once both of its gates are inside the cut
            need = np.maximum(rank[self._pair_i], rank[self._pair_j]) + 1
            np.add.at(counts, need, self._pair_n)
        return self.fixed_count + np.cumsum(counts)

    # -- serialisation ----------------------------------------------------

    def layout(self) -> dict:
        return {
            "groups": [[g.kind, g.layer, g.index, g.owned] for g in self.groups],
            "shared": [[s.gate, s.partner, s.count] for s in self.shared],
            "fixed_count": self.fixed_count,
            "hard_concrete": [self.params.beta, self.params.gamma, self.params.zeta],
        }

    @classmethod
    def from_layout(cls, layout: dict, log_alpha: np.ndarray | None = None) -> "GateFabric":
        beta, gamma, zeta = layout["hard_concrete"]
        fabric = cls(
            [StructuralGroup(*g) for g in layout["groups"]],
            [SharedSlice(*s) for s in layout["shared"]],
            layout["fixed_count"],
            params=hc.HardConcreteParams(beta, gamma, zeta),
        )
        if log_alpha is not None:
            fabric.log_alpha.data[...] = log_alpha
        return fabric

    def stats(self) -> dict:
        la = self.log_alpha.data
        with T.no_grad():
            p = self.prob_nonzero().data
            det = self.deterministic_gates().data
        return {
            "log_alpha_min": float(la.min()) if la.size else 0.0,
            "log_alpha_max": float(la.max()) if la.size else 0.0,
            "log_alpha_mean": float(la.mean()) if la.size else 0.0,
            "prob_nonzero_mean": float(p.mean()) if p.size else 0.0,
            "closed_gates": int((det <= 0).sum()),
        }
