"""Shared oracles for the test suite."""
import numpy as np

from terrasparse import tensor as T


def numeric_grad(f, x: np.ndarray, eps=1e-6, idx=None):
    """Central differences of scalar ``f(x)``; all entries or only ``idx`` (list of tuples)."""
    x = x.copy()
    if idx is None:
        idx = list(np.ndindex(x.shape))
    out = {}
    for i in idx:
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out


def check_op_grad(op, *arrays, rng=None, eps=1e-6, tol=1e-6):
    """Compare the taped gradient of ``sum(op(*tensors) * G)`` against central differences."""
    rng = rng or np.random.default_rng(0)
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    y = op(*ts)
    G = rng.normal(size=y.shape)
    grads = T.backward(T.sum_(T.mul(y, T.Tensor(G))))
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [T.Tensor(v) if j == k else T.Tensor(arrays[j]) for j in range(len(arrays))]
            return float((op(*args).data * G).sum())

        num = numeric_grad(f, a, eps)
        ana = grads[ts[k]]
        for i, g in num.items():
            assert abs(ana[i] - g) <= tol * max(1.0, abs(g)), (k, i, ana[i], g)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)
