from dataclasses import replace

import numpy as np
import pytest

from helpers import rel_err

from terrasparse import tensor as T
from terrasparse.config import PRESETS, ModelConfig
from terrasparse.errors import ConfigError, ContractError
from terrasparse.model import (
    DecoderBlockWeights,
    DecisionRecord,
    ForwardContext,
    SRUWeights,
    SparseLossHead,
    Terraformer,
    decoder_block_forward,
    loss_head,
    reversible_decoder_backward,
    reversible_decoder_forward,
    reversible_decoder_vjp,
    sinusoidal_positions,
    sru_lowrank,
)
from terrasparse.sparse_qkv import MultiplicativeWeights
from terrasparse.tensor import Tensor

TOY = PRESETS["toy-terraformer"]


def _block(seed, cfg=TOY):
    return DecoderBlockWeights.init(np.random.default_rng(seed), cfg)


def test_sinusoidal_positions_values():
    pe = sinusoidal_positions([0, 3], 6)
    assert pe[0, 0] == 0.0 and pe[0, 1] == 1.0
    assert pe[1, 2] == pytest.approx(np.sin(3 / 10000 ** (2 / 6)))


def test_sru_matches_step_loop():
    rng = np.random.default_rng(0)
    w = SRUWeights.init(rng, 8, 4, np.float64)
    h = rng.normal(size=(2, 5, 8))
    out, c_last = sru_lowrank(Tensor(h), w)
    sig = lambda v: 1 / (1 + np.exp(-v))
    c = np.zeros((2, 4))
    for t in range(5):
        r = h[:, t] @ w.U_in.data
        f = sig(r @ w.W_f.data + w.b_f.data)
        rho = sig(r @ w.W_r.data + w.b_r.data)
        c = f * c + (1 - f) * (r @ w.W.data)
        o = rho * c + (1 - rho) * r
        np.testing.assert_allclose(out.data[:, t], o @ w.U_out.data, atol=1e-12)
    np.testing.assert_allclose(c_last, c, atol=1e-12)


def test_sparse_loss_head_layout():
    rng = np.random.default_rng(1)
    head = SparseLossHead(MultiplicativeWeights.init(rng, 6, 2, 3))
    h = rng.normal(size=6)
    logits = loss_head(h, head)
    D, E = head.mult.D.data, head.mult.E.data
    for s in range(2):
        for m in range(3):
            assert logits[s * 3 + m] == pytest.approx(sum(h[i] * D[i, s] * E[i, m] for i in range(6)))


def test_decoder_block_is_causal_after_prefix():
    w = _block(0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 9, 64))
    y = decoder_block_forward(Tensor(x), w, ForwardContext(), n_enc=4).data
    x2 = x.copy()
    x2[:, 7:] += 3.0
    y2 = decoder_block_forward(Tensor(x2), w, ForwardContext(), n_enc=4).data
    np.testing.assert_allclose(y[:, :7], y2[:, :7], atol=1e-12)
    x3 = x.copy()
    x3[:, 3] += rng.normal(size=64)  # an encoder position is visible to every position
    y3 = decoder_block_forward(Tensor(x3), w, ForwardContext(), n_enc=4).data
    assert np.abs(y3[:, 0] - y[:, 0]).max() > 1e-6


def test_decoder_block_rejects_short_sequence():
    with pytest.raises(ContractError):
        decoder_block_forward(Tensor(np.ones((1, 2, 64))), _block(0), ForwardContext(), n_enc=3)


@pytest.mark.parametrize("training", [False, True])
def test_reversible_block_inverts_with_record(training):
    w = _block(2)
    rng = np.random.default_rng(3)
    x1, x2 = (Tensor(rng.normal(size=(2, 7, 64))) for _ in range(2))
    ctx = ForwardContext(training=training, rng=np.random.default_rng(4), dropout=0.1 if training else 0.0)
    y1, y2, rec = reversible_decoder_forward(x1, x2, w, ctx, n_enc=3)
    r1, r2 = reversible_decoder_backward(y1, y2, w, rec, ctx, n_enc=3)
    assert max(np.abs(r1.data - x1.data).max(), np.abs(r2.data - x2.data).max()) <= 1e-10


def test_reversal_requires_decisions():
    w = _block(2)
    x = Tensor(np.ones((1, 4, 64)))
    y1, y2, _ = reversible_decoder_forward(x, x, w, ForwardContext(), n_enc=2)
    with pytest.raises(ContractError):
        reversible_decoder_backward(y1, y2, w, DecisionRecord(), n_enc=2)
    with pytest.raises(ContractError):
        reversible_decoder_backward(y1, y2, w, None, ForwardContext(training=True), n_enc=2)
    with pytest.raises(ConfigError):
        reversible_decoder_forward(x, Tensor(np.ones((1, 3, 64))), w)


def test_memory_free_vjp_matches_taped_gradients():
    cfg = replace(TOY, d_model=16, d_ff=32, n_heads=4, S_qkv=4, d_lowrank=4, d_sru=8)
    w = _block(5, cfg)
    rng = np.random.default_rng(6)
    x1 = Tensor(rng.normal(size=(1, 5, 16)), requires_grad=True)
    x2 = Tensor(rng.normal(size=(1, 5, 16)), requires_grad=True)
    G1, G2 = rng.normal(size=(1, 5, 16)), rng.normal(size=(1, 5, 16))
    ctx = ForwardContext(training=True, rng=np.random.default_rng(7), dropout=0.2)
    y1, y2, rec = reversible_decoder_forward(x1, x2, w, ctx, n_enc=2)
    loss = T.add(T.sum_(T.mul(y1, Tensor(G1))), T.sum_(T.mul(y2, Tensor(G2))))
    taped = T.backward(loss)
    params = [p for _, p in __import__("terrasparse.params", fromlist=["x"]).iter_params(w)]
    want = {id(p): taped[p].copy() for p in params if p in taped}
    for p in params:
        p.grad = None
    r1, r2, g1, g2 = reversible_decoder_vjp(y1.data, y2.data, G1, G2, w, rec, ctx, n_enc=2)
    np.testing.assert_allclose(r1.data, x1.data, atol=1e-10)
    np.testing.assert_allclose(g1, taped[x1], atol=1e-9)
    np.testing.assert_allclose(g2, taped[x2], atol=1e-9)
    for p in params:
        if id(p) in want:
            np.testing.assert_allclose(p.grad, want[id(p)], atol=1e-9)


def test_forward_shapes_and_loss_value():
    m = Terraformer(replace(TOY, dropout=0.1), seed=0)
    src = np.array([[1, 2, 3]])
    dec_in = np.array([[11, 1, 2, 3]])
    logits = m.forward(src, dec_in)
    assert logits.shape == (1, 4, 16)
    loss, _ = m.loss(src, dec_in, np.array([[1, 2, 3, 12]]))
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    assert loss.item() == pytest.approx(-lp[0, np.arange(4), [1, 2, 3, 12]].mean())


def test_eval_forward_is_deterministic_and_training_is_not():
    m = Terraformer(replace(TOY, dropout=0.1), seed=0)
    src, dec = np.array([[1, 2, 3]]), np.array([[11, 1]])
    a = m.forward(src, dec).data
    np.testing.assert_array_equal(a, m.forward(src, dec).data)
    ctx = lambda s: ForwardContext.for_config(m.cfg, training=True, rng=np.random.default_rng(s))
    assert not np.allclose(m.forward(src, dec, ctx(0)).data, m.forward(src, dec, ctx(1)).data)


def test_decision_replay_reproduces_training_forward():
    m = Terraformer(replace(TOY, dropout=0.1), seed=1)
    src, dec = np.array([[4, 5, 6]]), np.array([[11, 4, 5]])
    rec = DecisionRecord()
    ctx = ForwardContext.for_config(m.cfg, training=True, rng=np.random.default_rng(0), record=rec)
    a = m.forward(src, dec, ctx).data
    assert rec.names() == sorted(f"{p}.{i}.ffn" for p in ("enc", "dec") for i in range(2))
    replay = ForwardContext.for_config(m.cfg, training=True, rng=np.random.default_rng(99), replay=rec)
    np.testing.assert_array_equal(a, m.forward(src, dec, replay).data)


def test_dense_model_parameters_have_grads():
    cfg = ModelConfig(n_enc_layers=1, n_dec_layers=1, d_model=16, d_ff=32, n_heads=2, dropout=0.0)
    m = Terraformer(cfg)
    loss, _ = m.loss(np.array([[1, 2]]), np.array([[11, 1, 2]]), np.array([[1, 2, 12]]))
    grads = T.backward(loss)
    for name, p in m.parameters():
        assert p in grads, name


def test_invalid_config_rejected_at_construction():
    with pytest.raises(ConfigError):
        Terraformer(ModelConfig(d_ff=30, N=4))
