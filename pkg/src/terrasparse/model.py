"""Terraformer encoder/decoder: blocks, reversible couplings, low-rank SRU, loss head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import MaskSpec, attend
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .params import iter_params, param_count
from .sparse_ff import (
    SparseFFWeights,
    controller_train,
    one_hot_blocks,
    sparse_ff_train,
)
from .sparse_qkv import ConvHeadWeights, MultiplicativeWeights, conv_head_forward, mult_forward
from .tensor import Tensor


# ---------------------------------------------------------------- weights


def _glorot(rng, shape, dtype):
    lim = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)


def _const(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


@dataclass
class AttentionWeights:
    ln_g: Tensor
    ln_b: Tensor
    heads: int
    Wq: Tensor | None = None
    Wk: Tensor | None = None
    Wv: Tensor | None = None
    Wo: Tensor | None = None
    mult: MultiplicativeWeights | None = None
    conv_q: ConvHeadWeights | None = None
    conv_k: ConvHeadWeights | None = None
    conv_v: ConvHeadWeights | None = None

    @property
    def sparse(self) -> bool:
        return self.mult is not None

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype):
        d = cfg.d_model
        w = cls(_const(1.0, d, dtype), _const(0.0, d, dtype), cfg.S_qkv if cfg.sparse_qkv else cfg.n_heads)
        if cfg.sparse_qkv:
            M = d // cfg.S_qkv
            w.mult = MultiplicativeWeights.init(rng, d, cfg.S_qkv, M, dtype)
            w.conv_q, w.conv_k, w.conv_v = (ConvHeadWeights.init(rng, cfg.F, M, dtype) for _ in range(3))
            if cfg.qkv_output:
                w.Wo = _glorot(rng, (d, d), dtype)
        else:
            w.Wq, w.Wk, w.Wv, w.Wo = (_glorot(rng, (d, d), dtype) for _ in range(4))
        return w


@dataclass
class SRUWeights:
    U_in: Tensor   # [d_model, d_sru]
    W: Tensor      # [d_sru, d_sru]
    W_f: Tensor
    b_f: Tensor
    W_r: Tensor
    b_r: Tensor
    U_out: Tensor  # [d_sru, d_model]

    @classmethod
    def init(cls, rng, d_model, d_sru, dtype):
        return cls(
            _glorot(rng, (d_model, d_sru), dtype), _glorot(rng, (d_sru, d_sru), dtype),
            _glorot(rng, (d_sru, d_sru), dtype), _const(0.0, d_sru, dtype),
            _glorot(rng, (d_sru, d_sru), dtype), _const(0.0, d_sru, dtype),
            _glorot(rng, (d_sru, d_model), dtype),
        )


@dataclass
class FFNWeights:
    ln_g: Tensor
    ln_b: Tensor
    ff: SparseFFWeights
    sru: SRUWeights | None = None

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype):
        d = cfg.d_model
        ff = SparseFFWeights.init(rng, d, cfg.d_ff, cfg.ff_N, cfg.d_lowrank, dtype, sparse=cfg.sparse_ff)
        sru = SRUWeights.init(rng, d, cfg.d_sru, dtype) if cfg.sru else None
        return cls(_const(1.0, d, dtype), _const(0.0, d, dtype), ff, sru)


@dataclass
class EncoderBlockWeights:
    attn: AttentionWeights
    ffn: FFNWeights


@dataclass
class DecoderBlockWeights:
    attn1: AttentionWeights
    attn2: AttentionWeights
    ffn: FFNWeights

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=None):
        dtype = dtype or np.dtype(cfg.dtype)
        return cls(AttentionWeights.init(rng, cfg, dtype), AttentionWeights.init(rng, cfg, dtype),
                   FFNWeights.init(rng, cfg, dtype))


@dataclass
class SparseLossHead:
    mult: MultiplicativeWeights  # S = loss sparsity, M = vocab / S

    @property
    def vocab(self) -> int:
        return self.mult.S * self.mult.M


@dataclass
class DenseLossHead:
    W: Tensor  # [d_model, vocab]

    @property
    def vocab(self) -> int:
        return self.W.shape[1]


@dataclass
class ModelWeights:
    embed: Tensor
    encoder: list
    enc_ln_g: Tensor
    enc_ln_b: Tensor
    decoder: list
    dec_ln_g: Tensor
    dec_ln_b: Tensor
    head: object

    @classmethod
    def init(cls, cfg: ModelConfig, rng):
        dtype = np.dtype(cfg.dtype)
        d = cfg.d_model
        embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab, d)).astype(dtype), requires_grad=True)
        enc = [EncoderBlockWeights(AttentionWeights.init(rng, cfg, dtype), FFNWeights.init(rng, cfg, dtype))
               for _ in range(cfg.n_enc_layers)]
        dec = [DecoderBlockWeights.init(rng, cfg, dtype) for _ in range(cfg.n_dec_layers)]
        if cfg.sparse_loss:
            S = cfg.loss_sparsity
            head = SparseLossHead(MultiplicativeWeights.init(rng, d, S, cfg.vocab // S, dtype))
        else:
            head = DenseLossHead(_glorot(rng, (d, cfg.vocab), dtype))
        return cls(embed, enc, _const(1.0, d, dtype), _const(0.0, d, dtype),
                   dec, _const(1.0, d, dtype), _const(0.0, d, dtype), head)


# ---------------------------------------------------------------- decisions and context


@dataclass
class LayerDecision:
    indices: np.ndarray
    noise: np.ndarray | None = None
    hard: np.ndarray | None = None


@dataclass
class DecisionRecord:
    """Discrete choices made during a forward pass, keyed by sub-layer name."""

    ffn: dict = field(default_factory=dict)
    dropout: dict = field(default_factory=dict)

    def indices(self, name) -> np.ndarray:
        return self.ffn[name].indices

    def names(self):
        return sorted(self.ffn)


@dataclass
class ForwardContext:
    training: bool = False
    rng: np.random.Generator | None = None
    temperature: float = 0.1
    argmax_mix_prob: float = 0.3
    dropout: float = 0.0
    record: DecisionRecord | None = None
    replay: DecisionRecord | None = None
    capture: dict | None = None

    @classmethod
    def for_config(cls, cfg: ModelConfig, training=False, rng=None, **kw):
        kw.setdefault("temperature", cfg.temperature)
        kw.setdefault("argmax_mix_prob", cfg.argmax_mix_prob)
        kw.setdefault("dropout", cfg.dropout if training else 0.0)
        return cls(training=training, rng=rng, **kw)

    def apply_dropout(self, x: Tensor, name: str) -> Tensor:
        if not self.training:
            return x
        mask = self.replay.dropout.get(name) if self.replay is not None else None
        if mask is None and self.dropout <= 0.0:
            return x
        y, mask = T.dropout(x, self.dropout, self.rng, mask=mask)
        if self.record is not None and mask is not None:
            self.record.dropout[name] = mask
        return y

    def controller_mask(self, z: Tensor, w: SparseFFWeights, name: str):
        """Mask tensor for a sparse FF sub-layer, replaying stored decisions when present."""
        prev = self.replay.ffn.get(name) if self.replay is not None else None
        if self.training:
            if prev is not None:
                ctrl = controller_train(z, w, self.temperature, self.argmax_mix_prob,
                                        noise=prev.noise, hard=prev.hard, indices=prev.indices)
            else:
                ctrl = controller_train(z, w, self.temperature, self.argmax_mix_prob, rng=self.rng)
            decision = LayerDecision(ctrl.indices, ctrl.noise, ctrl.hard)
            mask = ctrl.mask
        else:
            if prev is not None:
                idx = prev.indices
            else:
                logits = (z.data @ w.C1.data) @ w.C2.data
                idx = logits.reshape(logits.shape[:-1] + (-1, w.N)).argmax(axis=-1)
            decision = LayerDecision(idx)
            mask = Tensor(one_hot_blocks(idx, w.N, dtype=z.dtype))
        if self.record is not None:
            self.record.ffn[name] = decision
        return mask


# ---------------------------------------------------------------- sub-layers


def sinusoidal_positions(positions, d_model, dtype=np.float64) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d_model - d_model // 2]
    return pe.astype(dtype)


def attention_sublayer(h: Tensor, w: AttentionWeights, mask: MaskSpec, ctx: ForwardContext, name: str) -> Tensor:
    """``Attention(LayerNorm(h))`` with dense or multiplicative+convolutional projections."""
    z = T.layernorm(h, w.ln_g, w.ln_b)
    L, d = z.shape[-2:]
    if w.sparse:
        y = mult_forward(z, w.mult)
        q, k, v = (conv_head_forward(y, c) for c in (w.conv_q, w.conv_k, w.conv_v))
    else:
        y = None
        shape = z.shape[:-1] + (w.heads, d // w.heads)
        q, k, v = (T.reshape(T.matmul(z, W), shape) for W in (w.Wq, w.Wk, w.Wv))
    out = attend(q, k, v, mask)
    if w.Wo is not None:
        out = T.matmul(out, w.Wo)
    if ctx.capture is not None:
        ctx.capture[name] = {"k": k.data, "v": v.data, "y": None if y is None else y.data}
    return out


def sru_lowrank(h, w: SRUWeights, state=None):
    """Low-rank SRU branch: project to ``d_sru``, recur over length, project back.

    ``h`` is ``[..., L, d_model]``; ``state`` the carry ``c`` before the first
    position. Returns ``(output [..., L, d_model], final carry)``.
    """
    r = T.matmul(h, w.U_in)
    cand = T.matmul(r, w.W)
    f = T.sigmoid(T.add(T.matmul(r, w.W_f), w.b_f))
    rho = T.sigmoid(T.add(T.matmul(r, w.W_r), w.b_r))
    c = T.linear_scan(f, cand, state)
    o = T.add(T.mul(rho, c), T.mul(T.sub(1.0, rho), r))
    return T.matmul(o, w.U_out), c.data[..., -1, :]


def ffn_sublayer(h: Tensor, w: FFNWeights, ctx: ForwardContext, name: str) -> Tensor:
    z = T.layernorm(h, w.ln_g, w.ln_b)
    mask = ctx.controller_mask(z, w.ff, name) if w.ff.sparse else None
    out = sparse_ff_train(z, w.ff, mask)
    if w.sru is not None:
        s, c_last = sru_lowrank(z, w.sru)
        out = T.add(out, s)
        if ctx.capture is not None:
            ctx.capture[name] = {"sru_c": c_last}
    return out


# ---------------------------------------------------------------- blocks


def decoder_block_forward(x: Tensor, w: DecoderBlockWeights, ctx: ForwardContext, n_enc: int = 0,
                          name: str = "dec") -> Tensor:
    """``y1 = x + Drop(Attn(LN x))``, ``y2 = y1 + Drop(Attn(LN y1))``, ``y = y2 + FFN(y2)``."""
    if x.shape[-2] < n_enc:
        raise ContractError(f"sequence length {x.shape[-2]} is shorter than the encoder prefix {n_enc}")
    mask = MaskSpec.prefix(n_enc)
    y1 = T.add(x, ctx.apply_dropout(attention_sublayer(x, w.attn1, mask, ctx, f"{name}.attn1"), f"{name}.attn1"))
    y2 = T.add(y1, ctx.apply_dropout(attention_sublayer(y1, w.attn2, mask, ctx, f"{name}.attn2"), f"{name}.attn2"))
    return T.add(y2, ffn_sublayer(y2, w.ffn, ctx, f"{name}.ffn"))


def encoder_block_forward(x: Tensor, w: EncoderBlockWeights, ctx: ForwardContext, name="enc") -> Tensor:
    mask = MaskSpec("none")
    y = T.add(x, ctx.apply_dropout(attention_sublayer(x, w.attn, mask, ctx, f"{name}.attn"), f"{name}.attn"))
    return T.add(y, ffn_sublayer(y, w.ffn, ctx, f"{name}.ffn"))


def _decoder_couplings(w: DecoderBlockWeights, ctx, n_enc, name):
    mask = MaskSpec.prefix(n_enc)

    def attn(sub, tag):
        return lambda z: ctx.apply_dropout(attention_sublayer(z, sub, mask, ctx, f"{name}.{tag}"), f"{name}.{tag}")

    return [attn(w.attn1, "attn1"), attn(w.attn2, "attn2"), lambda z: ffn_sublayer(z, w.ffn, ctx, f"{name}.ffn")]


def _encoder_couplings(w: EncoderBlockWeights, ctx, name):
    mask = MaskSpec("none")
    return [lambda z: ctx.apply_dropout(attention_sublayer(z, w.attn, mask, ctx, f"{name}.attn"), f"{name}.attn"),
            lambda z: ffn_sublayer(z, w.ffn, ctx, f"{name}.ffn")]


def _couple_forward(x1, x2, funcs):
    # (a, b) -> (b, a + f(b)) for each coupling in turn
    for f in funcs:
        x1, x2 = x2, T.add(x1, f(x2))
    return x1, x2


def _couple_inverse(y1, y2, funcs):
    for f in reversed(funcs):
        y1, y2 = T.sub(y2, f(y1)), y1
    return y1, y2


def _check_halves(x1, x2):
    if x1.shape != x2.shape:
        raise ConfigError(f"reversible streams must match: {x1.shape} vs {x2.shape}")


def reversible_decoder_forward(x1: Tensor, x2: Tensor, w: DecoderBlockWeights, ctx: ForwardContext | None = None,
                               n_enc: int = 0, name: str = "dec"):
    """Three reversible couplings (attention, attention, FFN+SRU), swapping streams after each.

    Returns ``(y1, y2, record)``; the record holds every controller choice so the
    block can be inverted without recomputing argmaxes.
    """
    _check_halves(x1, x2)
    ctx = ctx or ForwardContext()
    if ctx.record is None:
        ctx.record = DecisionRecord()
    y1, y2 = _couple_forward(x1, x2, _decoder_couplings(w, ctx, n_enc, name))
    return y1, y2, ctx.record


def reversible_decoder_backward(y1, y2, w: DecoderBlockWeights, record: DecisionRecord | None,
                                ctx: ForwardContext | None = None, n_enc: int = 0, name: str = "dec",
                                used: DecisionRecord | None = None):
    """Reconstruct ``(x1, x2)`` from the block outputs, forcing controller choices from ``record``.

    Passing ``record=None`` recomputes the decisions from the reconstructed
    activations instead (kept for comparison; it is not exact near ties).
    ``used`` collects the decisions actually applied during the inversion.
    """
    _check_halves(y1, y2)
    base = ctx or ForwardContext()
    if record is not None and w.ffn.ff.sparse and f"{name}.ffn" not in record.ffn:
        raise ContractError(f"record has no decisions for {name}.ffn")
    inv_ctx = ForwardContext(training=base.training, rng=None, temperature=base.temperature,
                             argmax_mix_prob=base.argmax_mix_prob, dropout=base.dropout,
                             replay=record, record=used)
    if base.training and record is None:
        raise ContractError("training-mode reversal needs the recorded noise draws")
    with T.no_grad():
        x1, x2 = _couple_inverse(_as(y1), _as(y2), _decoder_couplings(w, inv_ctx, n_enc, name))
    return x1, x2


def reversible_encoder_forward(x1, x2, w: EncoderBlockWeights, ctx: ForwardContext, name="enc"):
    _check_halves(x1, x2)
    return _couple_forward(x1, x2, _encoder_couplings(w, ctx, name))


def reversible_encoder_backward(y1, y2, w: EncoderBlockWeights, record, ctx=None, name="enc"):
    base = ctx or ForwardContext()
    inv_ctx = ForwardContext(training=base.training, temperature=base.temperature,
                             argmax_mix_prob=base.argmax_mix_prob, dropout=base.dropout, replay=record)
    with T.no_grad():
        return _couple_inverse(_as(y1), _as(y2), _encoder_couplings(w, inv_ctx, name))


def _as(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def reversible_decoder_vjp(y1, y2, g1, g2, w: DecoderBlockWeights, record: DecisionRecord,
                           ctx: ForwardContext | None = None, n_enc: int = 0, name: str = "dec"):
    """Backward pass through one reversible block without stored activations.

    Each coupling is inverted (with replayed decisions) and then re-run on a
    local tape to obtain its input and parameter gradients. Returns
    ``(x1, x2, gx1, gx2)`` and accumulates parameter gradients into ``.grad``.
    """
    base = ctx or ForwardContext()
    rctx = ForwardContext(training=base.training, temperature=base.temperature,
                          argmax_mix_prob=base.argmax_mix_prob, dropout=base.dropout, replay=record)
    funcs = _decoder_couplings(w, rctx, n_enc, name)
    p, q = _as(y1).data, _as(y2).data
    gp, gq = np.asarray(g1), np.asarray(g2)
    for f in reversed(funcs):
        # forward was (a, b) -> (p, q) = (b, a + f(b))
        b = Tensor(p, requires_grad=True)
        fb = f(b)
        a = q - fb.data
        T.backward(T.sum_(T.mul(fb, Tensor(gq))))
        ga, gb = gq, gp + b.grad
        p, q, gp, gq = a, p, ga, gb
    return Tensor(p), Tensor(q), gp, gq


# ---------------------------------------------------------------- head and full model


def loss_head(h, head) -> Tensor:
    """Vocabulary logits; for the sparse head ``logits[..., s*M + m] = mult(h)[..., s, m]``."""
    if isinstance(head, SparseLossHead):
        y = mult_forward(h, head.mult)
        shape = y.shape[:-2] + (head.vocab,)
        return T.reshape(y, shape) if isinstance(y, Tensor) else y.reshape(shape)
    if isinstance(h, Tensor):
        return T.matmul(h, head.W)
    return h @ head.W.data


def check_loss_sparsity(vocab: int, S: int):
    if vocab % S:
        raise ConfigError(f"vocab={vocab} is not divisible by loss sparsity S={S}")


class Terraformer:
    """Encoder plus concatenating decoder, with every sparsity mechanism behind config flags."""

    def __init__(self, cfg: ModelConfig, weights: ModelWeights | None = None, seed: int = 0):
        self.cfg = cfg.check()
        self.weights = weights if weights is not None else ModelWeights.init(cfg, np.random.default_rng(seed))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def parameters(self):
        return list(iter_params(self.weights))

    def num_params(self) -> int:
        return param_count(self.weights)

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def embed(self, ids, start: int = 0) -> Tensor:
        ids = np.asarray(ids)
        pe = sinusoidal_positions(np.arange(start, start + ids.shape[-1]), self.cfg.d_model, self.dtype)
        return T.add(T.gather_rows(self.weights.embed, ids), Tensor(pe))

    def encode(self, src, ctx: ForwardContext) -> Tensor:
        w, cfg = self.weights, self.cfg
        x = self.embed(src, 0)
        if cfg.reversible:
            x1, x2 = x, x
            for i, blk in enumerate(w.encoder):
                x1, x2 = reversible_encoder_forward(x1, x2, blk, ctx, f"enc.{i}")
            x = T.mul(T.add(x1, x2), 0.5)
        else:
            for i, blk in enumerate(w.encoder):
                x = encoder_block_forward(x, blk, ctx, f"enc.{i}")
        return T.layernorm(x, w.enc_ln_g, w.enc_ln_b)

    def decode_stack(self, x: Tensor, n_enc: int, ctx: ForwardContext) -> Tensor:
        w = self.weights
        if self.cfg.reversible:
            x1, x2 = x, x
            for i, blk in enumerate(w.decoder):
                x1, x2, _ = reversible_decoder_forward(x1, x2, blk, ctx, n_enc, f"dec.{i}")
            x = T.mul(T.add(x1, x2), 0.5)
        else:
            for i, blk in enumerate(w.decoder):
                x = decoder_block_forward(x, blk, ctx, n_enc, f"dec.{i}")
        return T.layernorm(x, w.dec_ln_g, w.dec_ln_b)

    def forward(self, src, dec_in, ctx: ForwardContext | None = None) -> Tensor:
        """Logits ``[B, m, vocab]`` for decoder inputs ``dec_in [B, m]`` given sources ``src [B, n]``."""
        ctx = ctx or ForwardContext()
        src, dec_in = np.atleast_2d(src), np.atleast_2d(dec_in)
        enc = self.encode(src, ctx)
        n_enc = src.shape[-1]
        x = T.concat([enc, self.embed(dec_in, n_enc)], axis=-2)
        h = self.decode_stack(x, n_enc, ctx)
        return loss_head(T.take(h, (Ellipsis, slice(n_enc, None), slice(None))), self.weights.head)

    def loss(self, src, dec_in, dec_out, weights=None, ctx: ForwardContext | None = None):
        logits = self.forward(src, dec_in, ctx)
        return T.cross_entropy(logits, dec_out, weights), logits
