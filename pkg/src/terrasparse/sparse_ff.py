"""Sparse feedforward block with a low-rank controller.

Training runs the full dense computation with a straight-through Gumbel-Softmax
mask. Inference selects one unit per block of ``N`` with an argmax and only
touches the matching columns of ``W1`` and rows of ``W2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, CorruptionError, DimensionError
from .tensor import Tensor

GUMBEL_EPS = 1e-10


@dataclass
class SparseFFWeights:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    C1: Tensor | None
    C2: Tensor | None
    N: int = 1

    def __post_init__(self):
        if self.W1.shape[1] % self.N:
            raise ConfigError(f"d_ff={self.W1.shape[1]} is not divisible by N={self.N}")
        if self.C1 is not None and self.C1.shape[1] < 1:
            raise ConfigError("d_lowrank must be >= 1")

    @property
    def d_model(self) -> int:
        return self.W1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W1.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.d_ff // self.N

    @property
    def sparse(self) -> bool:
        return self.C1 is not None

    @classmethod
    def init(cls, rng, d_model, d_ff, N=1, d_lowrank=None, dtype=np.float64, sparse=True):
        if d_ff % N:
            raise ConfigError(f"d_ff={d_ff} is not divisible by N={N}")

        def glorot(shape):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        C1 = C2 = None
        if sparse:
            r = d_lowrank or max(1, d_model // N)
            C1, C2 = glorot((d_model, r)), glorot((r, d_ff))
        return cls(glorot((d_model, d_ff)), zeros(d_ff), glorot((d_ff, d_model)), zeros(d_model), C1, C2, N)

    def bundle(self) -> "InferenceBundle":
        return InferenceBundle.from_weights(self)


@dataclass
class InferenceBundle:
    """Read-only numpy view of the weights for decoding.

    ``W1T`` duplicates ``W1`` transposed so gathering a column of ``W1`` is a
    contiguous row read.
    """

    W1: np.ndarray
    W1T: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    C1: np.ndarray | None
    C2: np.ndarray | None
    N: int

    @classmethod
    def from_weights(cls, w: SparseFFWeights) -> "InferenceBundle":
        return cls(
            w.W1.data, np.ascontiguousarray(w.W1.data.T), w.b1.data, w.W2.data, w.b2.data,
            None if w.C1 is None else w.C1.data, None if w.C2 is None else w.C2.data, w.N,
        )

    @property
    def d_ff(self) -> int:
        return self.W1.shape[1]


@dataclass
class ControllerOutput:
    mask: object          # Tensor (training) or ndarray [..., d_ff]
    soft: object          # softmax surrogate, same shape as mask
    indices: np.ndarray   # [..., d_ff // N]


class TouchCounter:
    """Counts weight scalars read from W1, b1 and W2."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)


def _raw(w):
    return w.data if isinstance(w, Tensor) else w


def controller_logits(x, w) -> np.ndarray:
    x = _raw(x)
    return (x @ _raw(w.C1)) @ _raw(w.C2)


def one_hot_blocks(indices: np.ndarray, N: int, dtype=np.float64) -> np.ndarray:
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (N,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out.reshape(indices.shape[:-1] + (indices.shape[-1] * N,))


def controller_infer(x, w) -> ControllerOutput:
    """Deterministic argmax controller. Ties go to the lowest index."""
    if _raw(w.W1).shape[1] % w.N:
        raise ConfigError(f"d_ff={_raw(w.W1).shape[1]} is not divisible by N={w.N}")
    x = _raw(x)
    if w.C1 is None or w.N == 1:
        nb = _raw(w.W1).shape[1] // w.N
        idx = np.zeros(x.shape[:-1] + (nb,), dtype=np.int64)
    else:
        logits = controller_logits(x, w)
        idx = logits.reshape(logits.shape[:-1] + (-1, w.N)).argmax(axis=-1)
    mask = one_hot_blocks(idx, w.N, dtype=x.dtype)
    return ControllerOutput(mask=mask, soft=mask, indices=idx)


def gumbel_noise(rng, shape, dtype=np.float64) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return (-np.log(-np.log(u))).astype(dtype)


def controller_train(x: Tensor, w: SparseFFWeights, temperature: float, argmax_mix_prob: float,
                     rng=None, noise=None, hard=None, indices=None) -> ControllerOutput:
    """Straight-Through Gumbel-Softmax controller.

    Each block independently outputs the one-hot argmax of its noised logits with
    probability ``argmax_mix_prob``, otherwise the tempered softmax. The backward
    pass always goes through the softmax. ``noise``/``hard``/``indices`` replay a
    previous draw; when ``indices`` is given the hard blocks use it instead of
    recomputing the argmax.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if not 0.0 <= argmax_mix_prob <= 1.0:
        raise ConfigError(f"argmax_mix_prob must lie in [0, 1], got {argmax_mix_prob}")
    N = w.N
    logits = T.matmul(T.matmul(x, w.C1), w.C2)
    blocks_shape = logits.shape[:-1] + (logits.shape[-1] // N, N)
    if noise is None:
        noise = gumbel_noise(rng, blocks_shape, dtype=logits.dtype)
    if hard is None:
        hard = rng.random(blocks_shape[:-1]) < argmax_mix_prob
    noised = T.add(T.reshape(logits, blocks_shape), Tensor(noise))
    soft = T.softmax_lastdim(T.mul(noised, 1.0 / temperature))
    if indices is None:
        indices = noised.data.argmax(axis=-1)
    onehot = one_hot_blocks(indices, N, dtype=logits.dtype).reshape(blocks_shape)
    value = np.where(hard[..., None], onehot, soft.data)
    mask = T.reshape(T.straight_through(value, soft), logits.shape)
    ctrl = ControllerOutput(mask=mask, soft=T.reshape(soft, logits.shape), indices=indices)
    ctrl.noise, ctrl.hard = noise, hard
    return ctrl


def sparse_ff_train(x: Tensor, w: SparseFFWeights, mask) -> Tensor:
    """``(relu(x W1 + b1) * mask) W2 + b2`` on the taped path; ``mask=None`` is the dense FFN."""
    h = T.relu(T.add(T.matmul(x, w.W1), w.b1))
    if mask is not None:
        h = T.mul(h, mask)
    return T.add(T.matmul(h, w.W2), w.b2)


def dense_ff(x, w, counter: TouchCounter | None = None) -> np.ndarray:
    """Plain FFN on numpy arrays; counts the full weight read when instrumented."""
    x = _raw(x)
    h = np.maximum(x @ _raw(w.W1) + _raw(w.b1), 0.0)
    if counter is not None:
        d_model, d_ff = _raw(w.W1).shape
        counter.add(2 * d_model * d_ff + d_ff)
    return h @ _raw(w.W2) + _raw(w.b2)


def sparse_ff_dense_oracle(x, w, ctrl: ControllerOutput) -> np.ndarray:
    x = _raw(x)
    y_sparse = np.maximum(x @ _raw(w.W1) + _raw(w.b1), 0.0) * _raw(ctrl.mask)
    return y_sparse @ _raw(w.W2) + _raw(w.b2)


def active_units(indices: np.ndarray, N: int) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= N):
        raise CorruptionError(f"controller index outside [0, {N})")
    return indices + N * np.arange(indices.shape[-1])


def sparse_ff_fast(x, w: InferenceBundle, ctrl, counter: TouchCounter | None = None) -> np.ndarray:
    """Gather-based sparse FFN: only ``d_ff / N`` columns of W1 and rows of W2 are read.

    ``x`` is ``[d_model]`` or ``[B, d_model]``; ``ctrl`` is a ControllerOutput or
    an index array ``[..., d_ff / N]``.
    """
    if isinstance(w, SparseFFWeights):
        w = w.bundle()
    x = _raw(x)
    idx = ctrl.indices if isinstance(ctrl, ControllerOutput) else np.asarray(ctrl)
    if idx.shape[-1] != w.d_ff // w.N:
        raise CorruptionError(f"expected {w.d_ff // w.N} controller indices, got {idx.shape[-1]}")
    units = active_units(idx, w.N)
    if x.ndim == 1:
        h = np.maximum(w.W1T[units] @ x + w.b1[units], 0.0)
        out = h @ w.W2[units] + w.b2
    elif x.ndim == 2:
        if units.shape[0] != x.shape[0]:
            raise DimensionError(f"sparse_ff_fast: x {x.shape} vs indices {idx.shape}")
        h = np.maximum(np.einsum("bkd,bd->bk", w.W1T[units], x) + w.b1[units], 0.0)
        out = np.einsum("bk,bkd->bd", h, w.W2[units]) + w.b2
    else:
        raise DimensionError(f"sparse_ff_fast expects [d] or [B, d] input, got {x.shape}")
    if counter is not None:
        counter.add(units.size * (2 * w.W1.shape[0] + 1))
    return out
