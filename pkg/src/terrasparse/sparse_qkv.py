"""Multiplicative and convolutional layers replacing the dense Q/K/V projections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .params import param_count
from .tensor import Tensor


@dataclass
class MultiplicativeWeights:
    D: Tensor  # [d_model, S]
    E: Tensor  # [d_model, M]

    def __post_init__(self):
        if self.D.shape[0] != self.E.shape[0]:
            raise DimensionError(f"D {self.D.shape} and E {self.E.shape} disagree on d_model")

    S = property(lambda self: self.D.shape[1])
    M = property(lambda self: self.E.shape[1])
    d_in = property(lambda self: self.D.shape[0])

    @classmethod
    def init(cls, rng, d_in, S, M, dtype=np.float64):
        # y has variance ~ d_in * var(D) * var(E); keep it near var(x).
        scale = (1.0 / d_in) ** 0.25
        D = rng.normal(0.0, scale, size=(d_in, S)).astype(dtype)
        E = rng.normal(0.0, scale, size=(d_in, M)).astype(dtype)
        return cls(Tensor(D, requires_grad=True), Tensor(E, requires_grad=True))


@dataclass
class ConvHeadWeights:
    kernel: Tensor  # [F, F, M, M]
    bias: Tensor    # [M]

    F = property(lambda self: self.kernel.shape[0])

    @classmethod
    def init(cls, rng, F, M, dtype=np.float64):
        lim = np.sqrt(3.0 / (F * F * M))
        k = rng.uniform(-lim, lim, size=(F, F, M, M)).astype(dtype)
        return cls(Tensor(k, requires_grad=True), Tensor(np.zeros(M, dtype=dtype), requires_grad=True))


def mult_forward(x, w: MultiplicativeWeights):
    """``y[..., s, m] = sum_i x[..., i] D[i, s] E[i, m]``.

    Taped when ``x`` is a Tensor, plain numpy otherwise.
    """
    xs = x.shape
    if xs[-1] != w.d_in:
        raise DimensionError(f"mult_forward: input {xs} vs D {w.D.shape}")
    if isinstance(x, Tensor):
        x2 = T.reshape(x, (-1, xs[-1]))
        y = T.einsum("bi,is,im->bsm", x2, w.D, w.E)
        return T.reshape(y, xs[:-1] + (w.S, w.M))
    # (x * D)^T E: avoids materialising an [i, s, m] intermediate.
    xd = x.reshape(-1, xs[-1])[:, :, None] * w.D.data[None]
    y = np.swapaxes(xd, 1, 2) @ w.E.data
    return y.reshape(xs[:-1] + (w.S, w.M))


def build_permutation(f, d_model: int, S: int, M: int, dtype=np.float64) -> MultiplicativeWeights:
    """0/1 weights for which ``mult_forward(x)[f(i)] == x[i]``.

    ``f`` is a callable ``i -> (s, m)`` or a sequence of pairs.
    """
    pairs = [tuple(f(i)) for i in range(d_model)] if callable(f) else [tuple(p) for p in f]
    if len(pairs) != d_model or S * M != d_model:
        raise ContractError(f"f must map {d_model} inputs onto a {S}x{M} grid")
    if any(not (0 <= s < S and 0 <= m < M) for s, m in pairs) or len(set(pairs)) != d_model:
        raise ContractError("f is not a bijection onto [0, S) x [0, M)")
    D = np.zeros((d_model, S), dtype=dtype)
    E = np.zeros((d_model, M), dtype=dtype)
    for i, (s, m) in enumerate(pairs):
        D[i, s] = 1.0
        E[i, m] = 1.0
    return MultiplicativeWeights(Tensor(D), Tensor(E))


def conv_head_forward(y, w: ConvHeadWeights):
    """Causal-in-length, same-size-in-modules convolution with ``M`` filters."""
    if isinstance(y, Tensor):
        return T.add(T.conv2d(y, w.kernel), w.bias)
    return conv_numpy(y, w.kernel.data) + w.bias.data


def conv_numpy(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return T.conv2d(Tensor(y), Tensor(kernel)).data


def conv_window(window: np.ndarray, w: ConvHeadWeights) -> np.ndarray:
    """Conv output for the newest token given its ``[..., F, S, M]`` history window (oldest first)."""
    k = w.kernel.data
    F = k.shape[0]
    S = window.shape[-2]
    left = (F - 1) // 2
    pad = [(0, 0)] * (window.ndim - 2) + [(left, F - 1 - left), (0, 0)]
    wp = np.pad(window, pad)
    out = np.zeros(window.shape[:-3] + (S, k.shape[3]), dtype=window.dtype)
    for a in range(F):
        for b in range(F):
            out += wp[..., a, b:b + S, :] @ k[a, b]
    return out + w.bias.data


def sparse_qkv_forward(x, mult: MultiplicativeWeights, conv_q: ConvHeadWeights,
                       conv_k: ConvHeadWeights, conv_v: ConvHeadWeights):
    """Shared multiplicative layer feeding three convolutional heads; no output projection."""
    if mult.S * mult.M != mult.d_in:
        raise ConfigError(f"S*M={mult.S * mult.M} must equal d_model={mult.d_in}")
    y = mult_forward(x, mult)
    return conv_head_forward(y, conv_q), conv_head_forward(y, conv_k), conv_head_forward(y, conv_v)


def count_params(component) -> int:
    """Number of stored scalars in a weight bundle (dataclass of Tensors)."""
    return param_count(component)


def mult_param_count(d_model: int, S: int, M: int | None = None) -> int:
    M = d_model // S if M is None else M
    return d_model * S + d_model * M


def conv_param_count(d_model: int, S: int, F: int) -> int:
    M = d_model // S
    return F * F * M * M + M
