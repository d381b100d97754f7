import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hprune import controller as ctl
from hprune import selftest
from hprune import tensor as T
from hprune.fabric import GateFabric, StructuralGroup


def state(**kw):
    return ctl.ControllerState(target_final=kw.pop("t", 0.5), **kw)


@pytest.mark.parametrize("progress,expected", [(0, 0.0), (1.25, 0.125), (2.5, 0.25), (5, 0.5), (7, 0.5)])
def test_warmup_ramp_exact(progress, expected):
    assert ctl.scheduled_target(state(), progress) == expected


def test_negative_progress_rejected():
    with pytest.raises(ValueError):
        ctl.scheduled_target(state(), -0.1)


@pytest.mark.parametrize("t", [-0.1, 1.0])
def test_target_range(t):
    with pytest.raises(ValueError):
        state(t=t)


def test_regularizer_zero_at_target():
    assert ctl.regularizer(state(lambda1=3.0, lambda2=4.0), T.Tensor(0.3), 0.3).item() == 0.0


def test_regularizer_substitution():
    r = ctl.regularizer(state(lambda1=2.0, lambda2=10.0), T.Tensor(0.6), 0.5).item()
    assert r == pytest.approx(0.3, abs=1e-12)


def toy_fabric():
    fab = GateFabric([StructuralGroup("ffn_neuron", 0, i, o) for i, o in enumerate([4, 9, 1])], fixed_count=6)
    fab.log_alpha.data[:] = [0.3, -0.7, 1.1]
    return fab


def test_regularizer_gradient_matches_finite_differences():
    fab = toy_fabric()
    st_ = state(lambda1=-1.5, lambda2=2.5)
    ctl.regularizer(st_, fab.expected_sparsity(), 0.4).backward()

    def value():
        with T.no_grad():
            return ctl.regularizer(st_, fab.expected_sparsity(), 0.4).item()

    assert selftest.rel_error(fab.log_alpha.grad, selftest.numeric_grad(value, fab.log_alpha.data)) < 1e-5


def test_ascent_unchanged_at_target():
    s = state(lambda1=1.0, lambda2=2.0, multiplier_lr=1.0)
    assert ctl.ascend_multipliers(s, 0.5, 0.5) == s


def test_ascent_substitution():
    s = ctl.ascend_multipliers(state(multiplier_lr=1.0), 0.7, 0.5)
    assert s.lambda1 == pytest.approx(0.2, abs=1e-15)
    assert s.lambda2 == pytest.approx(0.04, abs=1e-15)


def test_repeated_ascent_grows_linearly():
    s = state(multiplier_lr=0.5)
    for _ in range(10):
        s = ctl.ascend_multipliers(s, 0.2, 0.5)
    assert s.lambda1 == pytest.approx(10 * 0.5 * -0.3)
    assert s.lambda2 == pytest.approx(10 * 0.5 * 0.09)


def test_lambda1_may_go_negative():
    s = ctl.ascend_multipliers(state(multiplier_lr=1.0), 0.1, 0.5)
    assert s.lambda1 < 0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 0.99)), max_size=30), st.floats(0.0, 5.0))
def test_lambda2_nondecreasing(pairs, lr):
    s = state(multiplier_lr=lr)
    for s_hat, t in pairs:
        nxt = ctl.ascend_multipliers(s, s_hat, t)
        assert nxt.lambda2 >= s.lambda2 >= 0
        s = nxt


def test_below_target_pushes_bigger_gates_down_harder():
    fab = GateFabric([StructuralGroup("ffn_neuron", 0, 0, 10), StructuralGroup("ffn_neuron", 0, 1, 40)])
    fab.log_alpha.data[:] = 1.0
    s_hat = fab.expected_sparsity()
    st_ = ctl.ascend_multipliers(state(multiplier_lr=1.0), s_hat.item(), 0.5)  # below target -> lambda1 < 0
    ctl.regularizer(st_, s_hat, 0.5).backward()
    g = fab.log_alpha.grad
    assert np.all(g > 0)  # descent lowers both log_alphas
    assert g[1] > g[0]
