import json
import math
import shutil
import struct
from collections import OrderedDict

import numpy as np
import pytest

from hprune import checkpoint as ckpt
from hprune import controller as ctl
from hprune import synth
from hprune import tensor as T
from hprune.config import ConfigError, TrainConfig, load_config, parse_pairs, read_config_file, write_config_file
from hprune.fabric import GateFabric, StructuralGroup
from hprune.trainer import Trainer, TrainingDiverged, load_model, save_model

SPEC = synth.SvTaskSpec(num_classes=6, eval_classes=4, train_per_class=8, eval_per_class=4, frames=8, feat_dim=3)


@pytest.fixture(scope="module")
def data():
    return synth.gen_sv(SPEC)


def _config(tmp_path, **kw):
    base = dict(preset="tiny", epochs=3, batch_size=8, warmup_epochs=1.0, target_sparsity=0.5,
                out_dir=str(tmp_path))
    base.update(kw)
    return TrainConfig(**base)


# -- config ------------------------------------------------------------------


def test_unknown_and_bad_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key 'bogus'"):
        parse_pairs(["bogus=1"])
    with pytest.raises(ConfigError, match="bad value"):
        parse_pairs(["epochs=three"])
    with pytest.raises(ConfigError):
        TrainConfig(target_sparsity=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(task="asr")
    with pytest.raises(ConfigError):
        load_config(overrides=["lr_gates=0"])


def test_config_file_round_trip(tmp_path):
    cfg = _config(tmp_path, seed=4, lr_gates=0.125)
    write_config_file(cfg, tmp_path / "c.txt")
    assert TrainConfig(**read_config_file(tmp_path / "c.txt")) == cfg
    (tmp_path / "d.txt").write_text("# comment\nepochs = 7  # trailing\n\nseed=2\n")
    assert load_config(tmp_path / "d.txt", ["seed=3"]) == TrainConfig(epochs=7, seed=3)


# -- checkpoint file format ------------------------------------------------------


def test_checkpoint_round_trip_and_layout(tmp_path):
    arrays = OrderedDict([
        ("a", np.arange(6, dtype=np.float64).reshape(2, 3)),
        ("b", np.array([1.5, -2.5], dtype=np.float32)),
        ("c", np.array([3, 4, 5], dtype=np.int64)),
        ("scalar", np.array(7.0)),
    ])
    ckpt.save(tmp_path / "x.hpck", {"note": "hi"}, arrays)
    header, back = ckpt.load(tmp_path / "x.hpck")
    assert header["note"] == "hi" and list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])
    raw = (tmp_path / "x.hpck").read_bytes()
    assert raw[:4] == b"HPCK"
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1 and json.loads(raw[16 : 16 + hlen]) == ckpt.read_header(tmp_path / "x.hpck")
    start = 16 + hlen + (-(16 + hlen)) % 8
    assert start % 8 == 0
    entry = header["tensors"][1]
    assert np.frombuffer(raw, "<f4", 2, start + entry["offset"]).tolist() == [1.5, -2.5]


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load(tmp_path / "bad")
    ckpt.save(tmp_path / "ok", {}, OrderedDict(a=np.zeros(1)))
    raw = bytearray((tmp_path / "ok").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "ok").write_bytes(bytes(raw))
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load(tmp_path / "ok")


def test_model_round_trip(tmp_path, data):
    tr = Trainer(_config(tmp_path), data=data)
    tr.fabric.log_alpha.data[:] = np.linspace(-2, 2, tr.fabric.num_gates)
    save_model(tr.model, tmp_path / "m.hpck", compacted=False)
    model, header = load_model(tmp_path / "m.hpck")
    x = data.eval.x[:4]
    assert model.forward(x).embedding.data.tobytes() == tr.model.forward(x).embedding.data.tobytes()
    assert header["compacted"] is False


# -- training loop ---------------------------------------------------------------


def test_resume_mid_epoch_is_identical(tmp_path, data):
    run = tmp_path / "run"
    names = ("metrics.log", "checkpoints/last.hpck")
    Trainer(_config(run), data=data).fit(run)
    reference = {n: (run / n).read_bytes() for n in names}
    shutil.rmtree(run)
    part = Trainer(_config(run), data=data)
    part.fit(run, stop_at=7)
    assert part.step == 7 and part.step % part.steps_per_epoch != 0
    resumed = Trainer.from_checkpoint(run / "checkpoints" / "last.hpck", data=data)
    resumed.fit(run)
    for n in names:
        assert (run / n).read_bytes() == reference[n], n


def test_zero_learning_rates_leave_model_unchanged(tmp_path, data):
    tr = Trainer(_config(tmp_path), data=data)
    before = {k: v.copy() for k, v in tr.model.state_arrays().items()}
    for g in tr.optimizer.groups:
        g["lr"] = 0.0
    tr.fit(tmp_path, stop_at=4)
    for k, v in tr.model.state_arrays().items():
        assert v.tobytes() == before[k].tobytes(), k


def test_dense_target_stays_dense(tmp_path, data):
    tr = Trainer(_config(tmp_path, target_sparsity=0.0, epochs=4), data=data)
    tr.fit(tmp_path)
    train = [r for r in tr.history if r["type"] == "train"]
    assert max(r["s_hat"] for r in train) < 0.05
    assert all(r["t_now"] == 0.0 for r in train)


def test_log_records_have_the_documented_fields(tmp_path, data):
    tr = Trainer(_config(tmp_path, epochs=1), data=data)
    tr.fit(tmp_path)
    recs = [json.loads(line) for line in (tmp_path / "metrics.log").read_text().splitlines()]
    train_keys = {"type", "step", "epoch", "task_loss", "reg_loss", "s_hat", "t_now", "lambda1", "lambda2", "lr"}
    assert set(recs[0]) == train_keys
    assert recs[-1]["type"] == "eval" and {"eer", "min_dcf"} <= set(recs[-1])
    assert [r["step"] for r in recs if r["type"] == "train"] == list(range(tr.total_steps))


def test_divergence_dumps_diagnostics(tmp_path, data):
    tr = Trainer(_config(tmp_path), data=data)
    tr.controller = ctl.ControllerState(target_final=0.5, lambda1=math.inf, warmup_epochs=1.0)
    with pytest.raises(TrainingDiverged, match="step 0"):
        tr.fit(tmp_path)
    dump = tmp_path / "divergence"
    assert (dump / "batch_step0.npz").exists()
    assert json.loads((dump / "gates_step0.json").read_text())["step"] == 0


def test_both_loss_terms_reach_the_gates(tmp_path, data):
    tr = Trainer(_config(tmp_path), data=data)
    model, fabric = tr.model, tr.fabric
    x, y = data.train.x[:8], data.train.y[:8]
    u = tr.gate_draws(0)
    fabric.log_alpha.data[:] = np.linspace(-0.5, 0.5, fabric.num_gates)
    task = model.task_head().loss(model.forward(x, mode="train", u=u).embedding, y)
    task.backward()
    task_grad = fabric.log_alpha.grad.copy()
    fabric.log_alpha.grad = None
    # below target the ascent drives lambda1 negative
    state = ctl.ControllerState(target_final=0.5, lambda1=-1.0, lambda2=0.0)
    assert fabric.expected_sparsity().item() < 0.5
    ctl.regularizer(state, fabric.expected_sparsity(), 0.5).backward()
    reg_grad = fabric.log_alpha.grad
    with T.no_grad():
        z = fabric.sample_gates(u).data
    interior = (z > 0) & (z < 1)
    # the task loss reaches every gate whose sample is not clamped, and only those
    assert interior.sum() > 0
    assert np.all(task_grad[interior] != 0) and np.all(task_grad[~interior] == 0)
    # so the penalty's descent step lowers every log_alpha, raising s_hat
    assert np.all(reg_grad > 0)


def test_two_gate_regularizer_dynamics_match_hand_recurrence():
    """Plain gradient descent on two gates under the penalty alone, against a float recurrence."""
    owned = [30, 10]
    fabric = GateFabric([StructuralGroup("ffn_neuron", 0, i, n) for i, n in enumerate(owned)], fixed_count=10)
    fabric.log_alpha.data[:] = [1.0, 1.0]
    state = ctl.ControllerState(target_final=0.4, multiplier_lr=0.5, warmup_epochs=1.0)
    lr, t = 0.3, 0.4

    shift = (2.0 / 3.0) * math.log(0.1 / 1.1)
    la = [1.0, 1.0]
    l1 = l2 = 0.0
    for _ in range(60):
        fabric.log_alpha.grad = None
        s = fabric.expected_sparsity()
        ctl.regularizer(state, s, t).backward()
        fabric.log_alpha.data -= lr * fabric.log_alpha.grad
        state = ctl.ascend_multipliers(state, s.item(), t)

        p = [1 / (1 + math.exp(-(a - shift))) for a in la]
        s_ref = 1 - (10 + owned[0] * p[0] + owned[1] * p[1]) / 50
        coef = l1 + 2 * l2 * (s_ref - t)
        la = [a - lr * coef * (-n * q * (1 - q) / 50) for a, n, q in zip(la, owned, p)]
        l1 += 0.5 * (s_ref - t)
        l2 = max(l2 + 0.5 * (s_ref - t) ** 2, 0.0)

        assert s.item() == pytest.approx(s_ref, abs=1e-12)
    np.testing.assert_allclose(fabric.log_alpha.data, la, rtol=0, atol=1e-10)
    assert state.lambda1 == pytest.approx(l1, abs=1e-10)
    # the larger group moves first: its gate ends lower
    assert la[0] < la[1]


def test_float32_training_runs(tmp_path, data):
    tr = Trainer(_config(tmp_path, precision="float32", epochs=1), data=data)
    tr.fit(tmp_path)
    assert tr.model.params["blocks.0.ffn.w1"].data.dtype == np.float32


def test_batch_larger_than_data_is_rejected(data):
    with pytest.raises(ValueError, match="batch_size"):
        Trainer(TrainConfig(preset="tiny", batch_size=10_000), data=data)
