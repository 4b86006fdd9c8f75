from dataclasses import replace

import numpy as np
import pytest

from terrasparse.checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from terrasparse.config import PRESETS, ModelConfig
from terrasparse.errors import CorruptionError, TrainingDiverged
from terrasparse.model import Terraformer
from terrasparse.tensor import Tensor
from terrasparse.train import Adam, TrainConfig, batch_token_accuracy, eval_generalization, train_loop

SMALL = replace(PRESETS["toy-terraformer"], d_model=16, d_ff=32, n_heads=4, S_qkv=4, d_lowrank=4, d_sru=8,
                n_enc_layers=1, n_dec_layers=1)


def test_learning_rate_schedule():
    opt = Adam([("p", Tensor(np.zeros(1), requires_grad=True))], lr=1.0, warmup=100)
    assert opt.rate(50) == pytest.approx(0.5)
    assert opt.rate(100) == pytest.approx(1.0)
    assert opt.rate(400) == pytest.approx(0.5)


def test_adam_first_step_and_clipping():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1, warmup=1, clip_norm=1.0)
    p.grad = np.array([30.0, 40.0])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, 0.9], atol=1e-6)


def test_token_accuracy_is_weighted():
    logits = np.zeros((1, 3, 4))
    logits[0, [0, 1, 2], [1, 2, 0]] = 1.0
    assert batch_token_accuracy(logits, np.array([[1, 2, 3]]), np.array([[1, 1, 0]])) == 1.0


def test_training_is_deterministic_and_reduces_loss():
    cfg = TrainConfig(steps=30, batch_size=4, max_len=4, lr=1e-2, warmup=10, log_every=0)
    runs = [train_loop(Terraformer(SMALL, seed=0), cfg).trace for _ in range(2)]
    assert [r.loss for r in runs[0]] == [r.loss for r in runs[1]]
    assert np.mean([r.loss for r in runs[0][-5:]]) < np.mean([r.loss for r in runs[0][:5]])


def test_divergence_is_reported():
    m = Terraformer(SMALL, seed=0)
    m.weights.embed.data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train_loop(m, TrainConfig(steps=2, batch_size=2, max_len=3, log_every=0))


def test_eval_range_must_exceed_training_range():
    with pytest.raises(ValueError):
        TrainConfig(max_len=8, eval_min_len=8)


def test_untrained_model_has_near_zero_sequence_accuracy():
    res = eval_generalization(Terraformer(SMALL, seed=0), "copy", 4, (5, 6), n_samples=20)
    assert res["seq_acc"] <= 0.05


def test_trace_csv(tmp_path):
    res = train_loop(Terraformer(SMALL), TrainConfig(steps=3, batch_size=2, max_len=3, log_every=0))
    path = tmp_path / "trace.csv"
    res.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,token_acc" and len(lines) == 4


def test_checkpoint_round_trip(tmp_path):
    m = Terraformer(SMALL, seed=3)
    path = tmp_path / "m.stck"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    for (n1, a), (n2, b) in zip(m.parameters(), m2.parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_corruption_is_detected(tmp_path):
    path = tmp_path / "t.stck"
    write_tensors(path, [("a", np.arange(6.0).reshape(2, 3)), ("b", np.ones(2, dtype=np.float32))])
    out = read_tensors(path)
    assert out["a"].shape == (2, 3) and out["b"].dtype == np.float32
    raw = path.read_bytes()
    for bad in (raw[:-1], raw + b"x", b"XXXX" + raw[4:]):
        path.write_bytes(bad)
        with pytest.raises(CorruptionError):
            read_tensors(path)


def test_checkpoint_config_mismatch(tmp_path):
    m = Terraformer(SMALL)
    path = tmp_path / "m.stck"
    save_checkpoint(m, path)
    (tmp_path / "m.stck.cfg").write_text(ModelConfig().to_text())
    with pytest.raises(CorruptionError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.stck")
