"""Exact multi-head attention over the concatenated encoder+decoder sequence, plus decode caches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CorruptionError, DimensionError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class MaskSpec:
    """``kind`` is ``"prefix"`` (full attention inside the first ``n_enc`` positions,
    causal after), ``"causal"`` or ``"none"``."""

    kind: str = "none"
    n_enc: int = 0

    @classmethod
    def prefix(cls, n_enc: int) -> "MaskSpec":
        return cls("prefix", n_enc)

    def allowed(self, lq: int, lk: int, q_offset: int = 0) -> np.ndarray:
        q = np.arange(lq)[:, None] + q_offset
        k = np.arange(lk)[None, :]
        if self.kind == "none":
            return np.ones((lq, lk), dtype=bool)
        if self.kind == "causal":
            return k <= q
        if self.kind == "prefix":
            return (k <= q) | (k < self.n_enc)
        raise ValueError(f"unknown mask kind {self.kind!r}")

    def additive(self, lq: int, lk: int, dtype=np.float64) -> np.ndarray:
        return np.where(self.allowed(lq, lk), 0.0, MASK_VALUE).astype(dtype)


def attend(Q, K, V, mask: MaskSpec = MaskSpec()):
    """``softmax(Q K^T / sqrt(M) + mask) V`` per head; inputs ``[..., L, H, M]``, output ``[..., L, H*M]``."""
    if Q.shape[-2:] != K.shape[-2:] or K.shape != V.shape:
        raise DimensionError(f"attend: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if Q.shape[:-3] != K.shape[:-3] or Q.shape[-3] != K.shape[-3]:
        raise DimensionError(f"attend: query length {Q.shape} vs key length {K.shape}")
    L, H, M = Q.shape[-3:]
    if not isinstance(Q, Tensor):
        return _attend_np(Q, K, V, mask)
    lead = Q.ndim - 3
    perm = tuple(range(lead)) + (lead + 1, lead, lead + 2)   # [..., H, L, M]
    q, k, v = (T.transpose(t, perm) for t in (Q, K, V))
    kt = T.transpose(k, tuple(range(lead + 1)) + (lead + 2, lead + 1))
    scores = T.mul(T.matmul(q, kt), 1.0 / np.sqrt(M))
    scores = T.add(scores, Tensor(mask.additive(L, L, dtype=Q.dtype)))
    probs = T.softmax_lastdim(scores)
    out = T.transpose(T.matmul(probs, v), perm)               # back to [..., L, H, M]
    return T.reshape(out, Q.shape[:-2] + (H * M,))


def _attend_np(Q, K, V, mask):
    L, H, M = Q.shape[-3:]
    q, k, v = (np.swapaxes(t, -3, -2) for t in (Q, K, V))
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(M) + mask.additive(L, L, dtype=Q.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.swapaxes(p @ v, -3, -2)
    return out.reshape(Q.shape[:-2] + (H * M,))


class KVCache:
    """Preallocated key/value store ``[B, capacity, H, M]`` for one attention sub-layer."""

    def __init__(self, batch, capacity, heads, head_dim, dtype=np.float64):
        self.k = np.zeros((batch, capacity, heads, head_dim), dtype=dtype)
        self.v = np.zeros_like(self.k)
        self.length = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[1]

    def append(self, k_t, v_t):
        if k_t.shape != self.k.shape[:1] + self.k.shape[2:] or v_t.shape != k_t.shape:
            raise CorruptionError(f"cache expects {self.k.shape[:1] + self.k.shape[2:]}, got {k_t.shape}")
        if self.length >= self.capacity:
            raise CorruptionError(f"cache capacity {self.capacity} exceeded")
        self.k[:, self.length] = k_t
        self.v[:, self.length] = v_t
        self.length += 1

    def keys(self):
        return self.k[:, :self.length]

    def values(self):
        return self.v[:, :self.length]


class ConvRing:
    """The last ``F-1`` multiplicative-layer outputs ``[B, S, M]`` for causal convolution."""

    def __init__(self, batch, F, S, M, dtype=np.float64):
        self.buf = np.zeros((batch, F, S, M), dtype=dtype)
        self.F = F
        self.seen = 0

    def window(self, y_t):
        """Shift ``y_t`` in and return the ``[B, F, S, M]`` window, oldest first."""
        self.buf[:, :-1] = self.buf[:, 1:]
        self.buf[:, -1] = y_t
        self.seen += 1
        return self.buf

    @property
    def filled(self) -> int:
        return min(self.F - 1, self.seen)


@dataclass
class SubLayerCache:
    kv: KVCache
    ring: ConvRing | None = None


@dataclass
class LayerCache:
    attn: list = field(default_factory=list)   # one SubLayerCache per attention sub-layer
    sru_state: np.ndarray | None = None


@dataclass
class DecodeCaches:
    layers: list
    n_enc: int = 0

    @property
    def length(self) -> int:
        return self.layers[0].attn[0].kv.length if self.layers else 0

    def check(self):
        lengths = {sub.kv.length for layer in self.layers for sub in layer.attn}
        if len(lengths) > 1:
            raise CorruptionError(f"cache length drift: {sorted(lengths)}")


def attend_incremental(q_t, cache: KVCache, k_t, v_t, mask: MaskSpec = MaskSpec("causal")):
    """Append ``(k_t, v_t)`` and attend from the new position over the whole cache.

    Under both causal and prefix masks a newly decoded position sees every
    stored key, so the mask only matters for validation.
    """
    cache.append(k_t, v_t)
    if mask.kind == "prefix" and cache.length <= mask.n_enc:
        raise CorruptionError("incremental attention inside the encoder prefix")
    keys, vals = cache.keys(), cache.values()      # [B, t, H, M]
    M = q_t.shape[-1]
    scores = np.einsum("bhm,bthm->bht", q_t, keys) * (1.0 / np.sqrt(M))
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.einsum("bht,bthm->bhm", p, vals)
    return out.reshape(out.shape[0], -1)
