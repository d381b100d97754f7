import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hprune import tensor as T
from hprune.compactor import (CompactionPlan, PlanError, binarize, compact, make_plan, verify_equivalence)
from hprune.model import ModelConfig, PrunableModel, count_flops, preset
from hprune.selftest import equivalence_checks


def _model(seed=0, name="small"):
    model = PrunableModel(preset(name), seed=seed)
    model.fabric.log_alpha.data[:] = np.random.default_rng(seed).normal(0, 2, model.fabric.num_gates)
    return model


def _x(seed=0, frames=50, feat=24):
    return np.random.default_rng(seed).normal(size=(2, frames, feat))


def test_full_keep_is_bit_equal():
    model = _model()
    keep = np.ones(model.fabric.num_gates, dtype=bool)
    small = compact(model, make_plan(model, keep))
    x = _x()
    a = model.forward(x, gates=keep.astype(float)).embedding.data
    b = small.forward(x).embedding.data
    assert a.tobytes() == b.tobytes()
    assert small.num_params() == model.num_params()


def test_dropping_one_head_matches_zeroed_output_rows():
    # independent oracle: a head that is gone contributes nothing through wo
    model = _model(1)
    lo, _ = model.fabric.span("mhsa_head", 2)
    keep = np.ones(model.fabric.num_gates, dtype=bool)
    keep[lo + 1] = False
    small = compact(model, make_plan(model, keep))

    dense = PrunableModel(model.config, gated=False, init=False)
    dense.load_arrays({k: v.data.copy() for k, v in model.params.items()})
    dh = model.config.d_head
    dense.params["blocks.2.attn.wo"].data[dh : 2 * dh] = 0.0
    x = _x(1)
    np.testing.assert_allclose(small.forward(x).embedding.data, dense.forward(x).embedding.data, rtol=0, atol=1e-12)


def test_dropping_ffn_neurons_matches_zeroed_rows():
    model = _model(2)
    lo, hi = model.fabric.span("ffn_neuron", 0)
    keep = np.ones(model.fabric.num_gates, dtype=bool)
    keep[lo : lo + 100 : 3] = False
    small = compact(model, make_plan(model, keep))
    dense = PrunableModel(model.config, gated=False, init=False)
    dense.load_arrays({k: v.data.copy() for k, v in model.params.items()})
    dense.params["blocks.0.ffn.w2"].data[~keep[lo:hi]] = 0.0
    x = _x(2)
    np.testing.assert_allclose(small.forward(x).embedding.data, dense.forward(x).embedding.data, rtol=0, atol=1e-12)


def test_dropping_everything_stays_finite():
    model = _model(3)
    keep = np.zeros(model.fabric.num_gates, dtype=bool)
    plan = make_plan(model, keep)
    small = compact(model, plan)
    out = small.forward(_x(3)).embedding.data
    assert np.all(np.isfinite(out))
    assert verify_equivalence(model, keep, small).passed
    assert small.num_params() == plan.realized_params < model.num_params()


def test_random_plans_are_equivalent_and_counted():
    checks = equivalence_checks(n_plans=10, seed=5)
    assert all(c.passed for c in checks), [c.line() for c in checks]


def test_negative_control_detects_wrong_slice():
    model = _model(4)
    keep = np.ones(model.fabric.num_gates, dtype=bool)
    lo, _ = model.fabric.span("ffn_neuron", 1)
    keep[lo + 5] = False
    plan = make_plan(model, keep)
    plan.ffn_keep[1] = [i + 1 if i == 4 else i for i in plan.ffn_keep[1]]  # 4 -> 5 swaps in the dropped neuron
    small = compact(model, plan)
    assert not verify_equivalence(model, keep, small).passed


def test_bad_plans_are_rejected():
    model = _model()
    keep = np.ones(model.fabric.num_gates, dtype=bool)
    with pytest.raises(PlanError):
        make_plan(model, keep[:-1])
    plan = make_plan(model, keep)
    plan.head_keep[0] = [0, 0, 1]
    with pytest.raises(PlanError, match="sorted"):
        compact(model, plan)
    plan = make_plan(model, keep)
    plan.conv_keep[-1] = plan.conv_keep[-1][:-1]
    with pytest.raises(PlanError):
        compact(model, plan)


def test_plan_json_round_trip(tmp_path):
    model = _model()
    keep = np.random.default_rng(0).uniform(size=model.fabric.num_gates) > 0.4
    plan = make_plan(model, keep)
    text = plan.to_json(tmp_path / "plan.json")
    back = CompactionPlan.from_dict(json.loads((tmp_path / "plan.json").read_text()))
    assert back.to_json() == text
    assert back.architecture() == plan.architecture()


def test_plan_counts_match_compacted_model():
    model = _model()
    keep = np.random.default_rng(1).uniform(size=model.fabric.num_gates) > 0.5
    plan = make_plan(model, keep)
    small = compact(model, plan)
    assert small.num_params() == plan.realized_params
    assert count_flops(small, 50) == plan.realized_flops < count_flops(model, 50)


def _small_gate_model(seed):
    cfg = ModelConfig(feat_dim=3, conv_channels=(3, 8), conv_kernels=(3, 3), conv_strides=(1, 1), num_layers=1,
                      d_model=8, num_heads=2, d_head=4, ffn_dim=8, pooling_heads=2, embedding_dim=4,
                      num_classes=3, max_frames=8)
    return PrunableModel(cfg, seed=seed)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 0.95))
def test_binarize_matches_brute_force_prefix_search(seed, target):
    model = _small_gate_model(seed)
    fabric = model.fabric
    assert fabric.num_gates <= 20
    fabric.log_alpha.data[:] = np.random.default_rng(seed).normal(0, 3, fabric.num_gates)
    keep = binarize(fabric, target, tol=0.0)
    # brute force: every rank-ordered prefix, counted directly
    order = np.argsort(-fabric.log_alpha.data, kind="stable")
    best_k, best_gap = None, np.inf
    for k in range(fabric.num_gates + 1):
        cand = np.zeros(fabric.num_gates, dtype=bool)
        cand[order[:k]] = True
        gap = abs(fabric.realized_sparsity(cand) - target)
        if gap <= best_gap:
            best_k, best_gap = k, gap
    open_keep = fabric.deterministic_gates().data > 0
    if abs(fabric.realized_sparsity(open_keep) - target) == 0.0:
        np.testing.assert_array_equal(keep, open_keep)
    else:
        assert abs(fabric.realized_sparsity(keep) - target) == pytest.approx(best_gap, abs=1e-15)
        assert keep.sum() == best_k


def test_binarize_extremes():
    model = _model()
    fabric = model.fabric
    fabric.log_alpha.data[:] = 20.0
    assert binarize(fabric, 0.0).all()
    fabric.log_alpha.data[:] = -20.0
    keep = binarize(fabric, 0.0)
    assert keep.all()  # deterministic gates are all closed, so the rank cut restores the dense model
    fabric.log_alpha.data[:] = -20.0
    keep = binarize(fabric, 0.5)
    assert abs(fabric.realized_sparsity(keep) - 0.5) < 0.01


def test_binarize_keeps_open_gates_when_already_on_target():
    model = _model()
    fabric = model.fabric
    with T.no_grad():
        open_keep = fabric.deterministic_gates().data > 0
    s = fabric.realized_sparsity(open_keep)
    np.testing.assert_array_equal(binarize(fabric, s), open_keep)
