"""Property suites shared by the ``selftest`` command and the test-suite.

Three families: finite-difference gradient checks, Monte-Carlo checks of
the gate statistics, and compaction equivalence on random plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hard_concrete as hc
from . import tensor as T
from .compactor import compact, make_plan, verify_equivalence
from .model import PrunableModel, preset
from .streams import stream

FD_STEP = 1e-6
OP_TOL = 1e-5
MODEL_TOL = 1e-4
# The key bias gets an exactly-zero gradient (softmax ignores per-query shifts),
# so whole-model tensors are compared against at least this magnitude.
MODEL_GRAD_FLOOR = 1e-3
LOG_ALPHAS = (-3.0, -1.0, 0.0, 1.0, 3.0)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# -- gradients ---------------------------------------------------------------


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger gradient magnitude (never below ``floor``)."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _positive(x):
    return np.abs(x) + 0.5


def _conv(x, w, b):
    return T.conv1d(x, w, b, stride=2)


# name -> (function of Tensors, input shapes, optional input transform)
OP_CASES: dict[str, tuple] = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)], None),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], None),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)], None),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)], [None, _positive]),
    "neg": (lambda a: -a, [(5,)], None),
    "power": (lambda a: a ** 3, [(4, 3)], None),
    "scalar_ops": (lambda a: (a * 2.5 + 1.0) / 3.0 - 0.25, [(4,)], None),
    "sigmoid": (T.sigmoid, [(3, 5)], None),
    "tanh": (T.tanh, [(3, 5)], None),
    "gelu": (T.gelu, [(3, 5)], None),
    "relu": (T.relu, [(3, 5)], None),
    "exp": (T.exp, [(3, 5)], None),
    "log": (T.log, [(3, 5)], [_positive]),
    "sqrt": (T.sqrt, [(3, 5)], [_positive]),
    "softplus": (T.softplus, [(3, 5)], None),
    "clamp": (lambda a: T.clamp(a, -1.0, 1.0), [(6, 5)], None),
    "sum_axis": (lambda a: T.sum_(a, axis=1, keepdims=True), [(3, 4, 2)], None),
    "mean_axis": (lambda a: T.mean(a, axis=(0, 2)), [(3, 4, 2)], None),
    "matmul": (T.matmul, [(3, 4), (4, 5)], None),
    "batched_matmul": (T.matmul, [(2, 3, 4), (2, 4, 2)], None),
    "conv1d": (_conv, [(2, 3, 9), (4, 3, 3), (4,)], None),
    "softmax": (T.softmax, [(3, 6)], None),
    "log_softmax": (T.log_softmax, [(3, 6)], None),
    "layer_norm": (T.layer_norm, [(4, 6), (6,), (6,)], None),
    "reshape": (lambda a: a.reshape(6, 2) * T.Tensor(np.arange(12.0).reshape(6, 2)), [(3, 4)], None),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)], None),
    "slice": (lambda a: a[1:, ::2], [(4, 5)], None),
    "fancy_index": (lambda a: a[np.array([0, 2, 2, 1])], [(3, 4)], None),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], None),
    "stack": (lambda a, b: T.stack([a, b], axis=0), [(2, 3), (2, 3)], None),
}


def check_op(name: str, seed: int = 0) -> float:
    fn, shapes, transforms = OP_CASES[name]
    rng = stream(seed, "gradcheck", name)
    arrays = []
    for i, shape in enumerate(shapes):
        a = rng.uniform(-2.0, 2.0, size=shape)
        tf = transforms[i] if transforms else None
        arrays.append(tf(a) if tf else a)
    inputs = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)
    (out * T.Tensor(weights)).sum().backward()

    def value() -> float:
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(t.data) for t in inputs]).data * weights))

    worst = 0.0
    for t in inputs:
        worst = max(worst, rel_error(t.grad, numeric_grad(value, t.data)))
    return worst


def tiny_model_gradient(seed: int = 0, frames: int = 6, head: str = "aam") -> dict[str, float]:
    """Relative error per parameter (and gate vector) for the task loss of a tiny gated model."""
    n_cls = 3 if head == "aam" else 1
    cfg = preset("tiny", head=head, num_classes=n_cls)
    model = PrunableModel(cfg, seed=seed)
    rng = stream(seed, "tiny-grad")
    x = rng.standard_normal((2, frames, cfg.feat_dim))
    y = np.array([0, 2]) if head == "aam" else np.array([0, 1])
    u = hc.draw_uniform(rng, model.fabric.num_gates)
    model.fabric.log_alpha.data[:] = rng.uniform(-1.0, 1.0, model.fabric.num_gates)

    def loss() -> T.Tensor:
        out = model.forward(x, mode="train", u=u)
        return model.task_head().loss(out.embedding, y)

    targets = dict(model.params)
    targets["gates.log_alpha"] = model.fabric.log_alpha
    for t in targets.values():
        t.grad = None
    loss().backward()

    def value() -> float:
        with T.no_grad():
            return loss().item()

    return {name: rel_error(t.grad, numeric_grad(value, t.data), MODEL_GRAD_FLOOR) for name, t in targets.items()}


def gradient_checks(seed: int = 0) -> list[Check]:
    checks = []
    with T.default_dtype(np.float64):
        for name in OP_CASES:
            err = check_op(name, seed)
            checks.append(Check(f"grad {name}", err < OP_TOL, f"rel err {err:.2e}"))
        for head in ("aam", "bce"):
            errs = tiny_model_gradient(seed, head=head)
            worst = max(errs, key=errs.get)
            checks.append(Check(f"grad tiny model ({head})", errs[worst] < MODEL_TOL,
                                f"worst {worst} rel err {errs[worst]:.2e}"))
    return checks


# -- gate statistics -----------------------------------------------------------


def monte_carlo_gate(log_alpha: float, n: int = 100_000, seed: int = 0) -> dict:
    """Sample z at a fixed log_alpha and compare against the closed forms."""
    u = hc.draw_uniform(stream(seed, "mc", repr(log_alpha)), n)
    with T.no_grad():
        z = hc.sample(np.full(n, log_alpha), u).z.data
        p = float(hc.prob_nonzero(np.array([log_alpha])).data[0])
    mean_z = float(hc.expected_gate(np.array([log_alpha]))[0])
    nonzero = float(np.mean(z > 0))
    se_p = math.sqrt(p * (1 - p) / n)
    se_z = float(np.std(z)) / math.sqrt(n)
    return {
        "log_alpha": log_alpha,
        "prob_nonzero": p,
        "mc_nonzero": nonzero,
        "z_nonzero": abs(nonzero - p) / se_p if se_p > 0 else 0.0,
        "expected_gate": mean_z,
        "mc_mean": float(np.mean(z)),
        "z_mean": abs(float(np.mean(z)) - mean_z) / se_z if se_z > 0 else 0.0,
    }


def monte_carlo_checks(n: int = 100_000, seed: int = 0) -> list[Check]:
    checks = []
    for la in LOG_ALPHAS:
        r = monte_carlo_gate(la, n, seed)
        ok = r["z_nonzero"] < 3 and r["z_mean"] < 3
        checks.append(Check(
            f"hard concrete log_alpha={la:+.0f}", ok,
            f"P(z!=0) {r['prob_nonzero']:.4f} vs {r['mc_nonzero']:.4f} ({r['z_nonzero']:.2f} se); "
            f"E[z] {r['expected_gate']:.4f} vs {r['mc_mean']:.4f} ({r['z_mean']:.2f} se)",
        ))
    return checks


# -- compaction ------------------------------------------------------------------


def random_keep(fabric, rng: np.random.Generator) -> np.ndarray:
    """Random keep vector; the drop rate itself is random so plans range from dense to empty."""
    rate = rng.uniform(0.0, 1.0)
    return rng.uniform(size=fabric.num_gates) >= rate


def equivalence_checks(n_plans: int = 50, seed: int = 0, preset_name: str = "small",
                       input_len: int = 50) -> list[Check]:
    model = PrunableModel(preset(preset_name), seed=seed)
    rng = stream(seed, "plans")
    # perturb the gates so the reference is not trivially the dense model
    model.fabric.log_alpha.data[:] = rng.normal(0.0, 2.0, model.fabric.num_gates)
    worst = 0.0
    count_mismatch = 0
    for i in range(n_plans):
        keep = random_keep(model.fabric, rng)
        plan = make_plan(model, keep, reference_len=input_len)
        small = compact(model, plan)
        rep = verify_equivalence(model, keep, small, n_inputs=1, input_len=input_len, seed=seed + i)
        worst = max(worst, rep.max_abs_diff)
        if small.num_params() != model.fabric.remaining_count(keep):
            count_mismatch += 1
    return [
        Check(f"compaction equivalence ({n_plans} plans)", worst < 1e-9, f"max abs diff {worst:.2e}"),
        Check("compacted parameter counts", count_mismatch == 0, f"{count_mismatch} mismatches"),
    ]


def run_all(n_plans: int = 50, mc_samples: int = 100_000, seed: int = 0) -> list[Check]:
    return gradient_checks(seed) + monte_carlo_checks(mc_samples, seed) + equivalence_checks(n_plans, seed)
