"""Incremental (cached) decoding on plain numpy arrays.

The encoder and the encoder prefix of the decoder run once through the taped
forward code under ``no_grad``; every later token goes through ``step`` which
reuses KV caches, convolution history rings and SRU carries, and the
gather-based sparse feedforward.
"""
from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .attention import ConvRing, DecodeCaches, KVCache, LayerCache, MaskSpec, SubLayerCache, attend_incremental
from .errors import ConfigError
from .model import ForwardContext, SparseLossHead, Terraformer, sinusoidal_positions
from .sparse_ff import InferenceBundle, TouchCounter, active_units, dense_ff
from .tasks import EOS, SEP


def _layernorm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    # same operation order as the taped layernorm so float32 results agree closely
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return (xc * inv) * g + b


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _AttnStep:
    def __init__(self, w):
        self.ln = (w.ln_g.data, w.ln_b.data)
        self.heads = w.heads
        self.Wo = None if w.Wo is None else w.Wo.data
        if w.sparse:
            self.D, self.E = w.mult.D.data, w.mult.E.data
            convs = (w.conv_q, w.conv_k, w.conv_v)
            F, _, M, _ = convs[0].kernel.shape
            self.F, self.M = F, M
            # one [F*F*M, 3M] matrix so Q, K, V come out of a single product
            self.K = np.concatenate([c.kernel.data.reshape(F * F * M, M) for c in convs], axis=1)
            self.kb = np.concatenate([c.bias.data for c in convs])
            self.Wqkv = None
        else:
            self.Wqkv = np.concatenate([w.Wq.data, w.Wk.data, w.Wv.data], axis=1)

    def __call__(self, x, sub: SubLayerCache):
        z = _layernorm(x, *self.ln)
        B = x.shape[0]
        if self.Wqkv is None:
            y = np.swapaxes(z[:, :, None] * self.D[None], 1, 2) @ self.E       # [B, S, M]
            win = sub.ring.window(y)                                          # [B, F, S, M]
            F, S, M = self.F, y.shape[1], self.M
            left = (F - 1) // 2
            wp = np.pad(win, ((0, 0), (0, 0), (left, F - 1 - left), (0, 0)))
            patches = np.lib.stride_tricks.sliding_window_view(wp, F, axis=2)  # [B, F, S, M, F]
            patches = patches.transpose(0, 2, 1, 4, 3).reshape(B, S, F * F * M)
            qkv = patches @ self.K + self.kb                                  # [B, S, 3M]
            q, k, v = qkv[..., :M], qkv[..., M:2 * M], qkv[..., 2 * M:]
        else:
            qkv = z @ self.Wqkv
            d = x.shape[1]
            q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(B, self.heads, -1) for i in range(3))
        out = attend_incremental(q, sub.kv, k, v)
        return out if self.Wo is None else out @ self.Wo


class _FFNStep:
    def __init__(self, w):
        self.ln = (w.ln_g.data, w.ln_b.data)
        self.bundle = InferenceBundle.from_weights(w.ff)
        self.sparse = w.ff.sparse
        self.sru = None
        if w.sru is not None:
            s = w.sru
            self.sru = tuple(t.data for t in (s.U_in, s.W, s.W_f, s.b_f, s.W_r, s.b_r, s.U_out))

    def __call__(self, x, layer: LayerCache, counter=None):
        z = _layernorm(x, *self.ln)
        wb = self.bundle
        if self.sparse:
            logits = (z @ wb.C1) @ wb.C2
            idx = logits.reshape(z.shape[0], -1, wb.N).argmax(axis=-1)
            units = active_units(idx, wb.N)
            if z.shape[0] == 1:
                u = units[0]
                h = np.maximum(wb.W1T[u] @ z[0] + wb.b1[u], 0.0)
                out = (h @ wb.W2[u] + wb.b2)[None]
            else:
                h = np.maximum(np.einsum("bkd,bd->bk", wb.W1T[units], z) + wb.b1[units], 0.0)
                out = np.einsum("bk,bkd->bd", h, wb.W2[units]) + wb.b2
            if counter is not None:
                counter.add(units.size * (2 * z.shape[1] + 1))
        else:
            out = dense_ff(z, wb, counter)
        if self.sru is not None:
            U_in, W, W_f, b_f, W_r, b_r, U_out = self.sru
            r = z @ U_in
            f = _sigmoid(r @ W_f + b_f)
            rho = _sigmoid(r @ W_r + b_r)
            c = f * layer.sru_state + (1.0 - f) * (r @ W)
            layer.sru_state = c
            out = out + (rho * c + (1.0 - rho) * r) @ U_out
        return out


class IncrementalDecoder:
    """Token-at-a-time decoding for a batch of equal-length sources."""

    def __init__(self, model: Terraformer):
        self.model = model
        cfg = model.cfg
        w = model.weights
        self.rev = cfg.reversible
        self.embed_w = w.embed.data
        self.layers = [(_AttnStep(b.attn1), _AttnStep(b.attn2), _FFNStep(b.ffn)) for b in w.decoder]
        self.final_ln = (w.dec_ln_g.data, w.dec_ln_b.data)
        self.head = w.head
        self.caches: DecodeCaches | None = None
        self.pos = 0
        self.counter: TouchCounter | None = None
        self.block_times: list | None = None

    def prefill(self, src, capacity: int):
        """Run encoder and decoder prefix once and seed all caches. ``src`` is ``[B, n]``."""
        model, cfg = self.model, self.model.cfg
        src = np.atleast_2d(src)
        B, n = src.shape
        ctx = ForwardContext(capture={})
        with T.no_grad():
            enc = model.encode(src, ctx)
            ctx.capture = {}
            model.decode_stack(enc, n, ctx)
        dtype = model.dtype
        layers = []
        for i, blk in enumerate(model.weights.decoder):
            subs = []
            for tag, aw in (("attn1", blk.attn1), ("attn2", blk.attn2)):
                cap = ctx.capture[f"dec.{i}.{tag}"]
                H, M = cap["k"].shape[-2:]
                kv = KVCache(B, n + capacity, H, M, dtype)
                kv.k[:, :n], kv.v[:, :n] = cap["k"], cap["v"]
                kv.length = n
                ring = None
                if aw.sparse:
                    ring = ConvRing(B, cfg.F, H, M, dtype)
                    keep = min(cfg.F - 1, n)
                    if keep:
                        ring.buf[:, cfg.F - keep:] = cap["y"][:, n - keep:]
                    ring.seen = n
                subs.append(SubLayerCache(kv, ring))
            state = None
            if blk.ffn.sru is not None:
                state = ctx.capture[f"dec.{i}.ffn"]["sru_c"].copy()
            layers.append(LayerCache(subs, state))
        self.caches = DecodeCaches(layers, n_enc=n)
        self.pos = n
        return self

    def step(self, tokens) -> np.ndarray:
        """Feed one token per sequence; return next-token logits ``[B, vocab]``."""
        tokens = np.asarray(tokens).reshape(-1)
        x = self.embed_w[tokens] + sinusoidal_positions([self.pos], self.embed_w.shape[1], self.embed_w.dtype)
        timing = self.block_times is not None
        if self.rev:
            x1 = x2 = x
        for (a1, a2, ff), cache in zip(self.layers, self.caches.layers):
            t0 = time.perf_counter() if timing else 0.0
            if self.rev:
                x1, x2 = x2, x1 + a1(x2, cache.attn[0])
                x1, x2 = x2, x1 + a2(x2, cache.attn[1])
                x1, x2 = x2, x1 + ff(x2, cache, self.counter)
            else:
                x = x + a1(x, cache.attn[0])
                x = x + a2(x, cache.attn[1])
                x = x + ff(x, cache, self.counter)
            if timing:
                self.block_times.append(time.perf_counter() - t0)
        if self.rev:
            x = 0.5 * (x1 + x2)
        h = _layernorm(x, *self.final_ln)
        self.pos += 1
        if isinstance(self.head, SparseLossHead):
            D, E = self.head.mult.D.data, self.head.mult.E.data
            return (np.swapaxes(h[:, :, None] * D[None], 1, 2) @ E).reshape(h.shape[0], -1)
        return h @ self.head.W.data


def greedy_decode(model: Terraformer, source_tokens, max_len: int, start_token: int = SEP,
                  end_token: int = EOS):
    """Greedy decoding; ``source_tokens`` is one sequence or a ``[B, n]`` batch of equal length.

    Returns a list of token lists (end token stripped), one per source.
    """
    if max_len <= 0:
        raise ConfigError(f"max_len must be positive, got {max_len}")
    src = np.asarray(source_tokens)
    single = src.ndim == 1
    src = np.atleast_2d(src)
    dec = IncrementalDecoder(model).prefill(src, capacity=max_len + 1)
    B = src.shape[0]
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    tok = np.full(B, start_token)
    for _ in range(max_len):
        tok = dec.step(tok).argmax(axis=-1)
        for b in np.flatnonzero(~done):
            if tok[b] == end_token:
                done[b] = True
            else:
                out[b].append(int(tok[b]))
        if done.all():
            break
    return out[0] if single else out


def full_prefix_logits(model: Terraformer, src, dec_in) -> np.ndarray:
    """Reference: rerun the whole taped forward (no caches) and return last-position logits."""
    with T.no_grad():
        return model.forward(np.atleast_2d(src), np.atleast_2d(dec_in), ForwardContext()).data[:, -1]


__all__ = ["IncrementalDecoder", "greedy_decode", "full_prefix_logits", "MaskSpec"]
