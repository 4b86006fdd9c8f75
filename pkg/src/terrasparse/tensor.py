"""Dense row-major tensors with reverse-mode differentiation.

Arrays are plain numpy buffers. Every primitive below records its inputs and a
closure computing the vector-Jacobian product, so ``backward`` can walk the
graph in reverse topological order. Broadcasting is limited to the case where
one operand's shape is a suffix of the other's (bias-add over trailing axes).
"""
from __future__ import annotations

import contextlib
import functools

import numpy as np

from .errors import ContractError, DimensionError

_state = {"grad": True, "dtype": np.float64}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype).type


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_state["dtype"])
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns {leaf: grad}."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not computed under an active tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------- helpers


def _suffix_compatible(a, b):
    if a == b:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return tuple(long_[len(long_) - len(short):]) == tuple(short)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_args(a, b, opname):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if not _suffix_compatible(a.shape, b.shape):
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not agree")
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_args(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_args(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_args(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def dropout(x: Tensor, rate: float, rng=None, mask=None):
    """Inverted dropout. Returns ``(y, mask)`` so callers can replay the mask."""
    if mask is None:
        if rate <= 0.0:
            return x, None
        keep = rng.random(x.shape) >= rate
        mask = keep.astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(mask)), mask


def straight_through(value, surrogate: Tensor) -> Tensor:
    """Forward ``value``; backward passes the gradient to ``surrogate`` unchanged."""
    value = np.asarray(value, dtype=surrogate.dtype)
    if value.shape != surrogate.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {surrogate.shape}")
    return _node(value, (surrogate,), lambda g: (g,))


# ---------------------------------------------------------------- reductions / shape


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    y = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _node(np.asarray(y), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _node(np.array(x.data[key], copy=True), (x,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        s0 = tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        s1 = t.shape[:axis] + t.shape[axis + 1:]
        if t.ndim != tensors[0].ndim or s0 != s1:
            raise DimensionError(f"concat: {tensors[0].shape} and {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), vjp)


@functools.lru_cache(maxsize=512)
def _einsum_path(spec, shapes):
    dummies = [np.empty(s) for s in shapes]
    return np.einsum_path(spec, *dummies, optimize="optimal")[0]


def _einsum(spec, *arrays):
    if len(arrays) == 1:
        return np.einsum(spec, *arrays)
    path = _einsum_path(spec, tuple(a.shape for a in arrays))
    return np.einsum(spec, *arrays, optimize=path)


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-index einsum (no ellipsis). Each operand's indices must be distinct."""
    operands = [as_tensor(o) for o in operands]
    spec = spec.replace(" ", "")
    lhs, out = spec.split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise DimensionError(f"einsum '{spec}' expects {len(ins)} operands")
    extents = {}
    for sub_, op in zip(ins, operands):
        if len(sub_) != op.ndim:
            raise DimensionError(f"einsum '{spec}': operand shape {op.shape} vs '{sub_}'")
        for c, n in zip(sub_, op.shape):
            if extents.setdefault(c, n) != n:
                raise DimensionError(f"einsum '{spec}': index '{c}' has extents {extents[c]} and {n}")
    datas = [o.data for o in operands]

    def vjp(g):
        grads = []
        for k, op in enumerate(operands):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ins)) if j != k]
            avail = set(out).union(*others) if others else set(out)
            target = "".join(c for c in ins[k] if c in avail)
            gk = _einsum(",".join([out] + others) + "->" + target, g, *[datas[j] for j in range(len(ins)) if j != k])
            if target != ins[k]:
                idx = tuple(slice(None) if c in avail else None for c in ins[k])
                gk = np.broadcast_to(gk[idx], op.shape).copy()
            grads.append(gk)
        return grads

    return _node(_einsum(spec, *datas), operands, vjp)


def gather_rows(w: Tensor, idx) -> Tensor:
    """``w[idx]`` for an integer array ``idx`` of any shape; result ``idx.shape + w.shape[1:]``."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {w.shape}")
    shape, dtype = w.shape, w.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _node(w.data[idx], (w,), vjp)


def gather_columns(w: Tensor, idx) -> Tensor:
    """``w[:, idx]`` for a 1-D integer array."""
    idx = np.asarray(idx).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[1]):
        raise DimensionError(f"gather_columns: index out of range for {w.shape}")
    shape, dtype = w.shape, w.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _node(np.ascontiguousarray(w.data[:, idx]), (w,), vjp)


# ---------------------------------------------------------------- normalisation / softmax


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), vjp)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over all leading positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no positions carry weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (w / total)[..., None] * g,)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------- convolution / recurrence


def _conv_pads(f):
    left = (f - 1) // 2
    return (f - 1, 0), (left, f - 1 - left)


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """2-D convolution over (length, modules) of ``x[..., L, S, Cin]`` with ``kernel[F, F, Cin, Cout]``.

    Length is padded causally (F-1 leading zeros), modules symmetrically, so the
    output is ``[..., L, S, Cout]`` and position ``l`` sees only inputs ``<= l``.
    Kernel tap ``[F-1, c]`` multiplies the current token.
    """
    if x.ndim < 3 or kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[2] != x.shape[-1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {kernel.shape} do not agree")
    f = kernel.shape[0]
    L, S = x.shape[-3], x.shape[-2]
    pl, ps = _conv_pads(f)
    if f > L + f - 1 or f > S + f - 1 or L == 0 or S == 0:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    lead = x.ndim - 3
    xp = np.pad(x.data, [(0, 0)] * lead + [pl, ps, (0, 0)])
    kd = kernel.data
    cin, cout = kd.shape[2], kd.shape[3]
    # im2col: patches[..., l, s, a, b, c] = xp[..., l + a, s + b, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, (f, f), axis=(-3, -2))
    patches = np.moveaxis(win, -3, -1).reshape(-1, f * f * cin)
    kmat = kd.reshape(f * f * cin, cout)
    out = (patches @ kmat).reshape(x.shape[:-1] + (cout,))

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gk = (patches.T @ g2).reshape(kd.shape)
        gp = (g2 @ kmat.T).reshape(x.shape[:-1] + (f, f, cin))
        gxp = np.zeros_like(xp)
        for a in range(f):
            for b in range(f):
                gxp[..., a:a + L, b:b + S, :] += gp[..., a, b, :]
        gx = gxp[..., pl[0]:pl[0] + L, ps[0]:ps[0] + S, :]
        return np.ascontiguousarray(gx), gk

    return _node(out, (x, kernel), vjp)


def linear_scan(forget: Tensor, cand: Tensor, c0=None) -> Tensor:
    """``c_t = f_t * c_{t-1} + (1 - f_t) * cand_t`` along axis -2 of ``[..., L, d]``."""
    if forget.shape != cand.shape:
        raise DimensionError(f"linear_scan: {forget.shape} vs {cand.shape}")
    fd, xd = forget.data, cand.data
    L = fd.shape[-2]
    prev0 = np.zeros(fd.shape[:-2] + fd.shape[-1:], dtype=fd.dtype) if c0 is None else np.asarray(c0, dtype=fd.dtype)
    c = np.empty_like(fd)
    prev = prev0
    for t in range(L):
        prev = fd[..., t, :] * prev + (1.0 - fd[..., t, :]) * xd[..., t, :]
        c[..., t, :] = prev

    def vjp(g):
        gf = np.empty_like(fd)
        gx = np.empty_like(xd)
        carry = np.zeros_like(prev0)
        for t in range(L - 1, -1, -1):
            gc = g[..., t, :] + carry
            before = c[..., t - 1, :] if t > 0 else prev0
            gf[..., t, :] = gc * (before - xd[..., t, :])
            gx[..., t, :] = gc * (1.0 - fd[..., t, :])
            carry = gc * fd[..., t, :]
        return gf, gx

    return _node(c, (forget, cand), vjp)
