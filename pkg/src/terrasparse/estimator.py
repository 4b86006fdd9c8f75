"""scikit-learn style wrapper around training and greedy decoding for string tasks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import load_config
from .model import Terraformer
from .tasks import TaskSample, encode, make_batch


def _check_strings(X, name="X"):
    if isinstance(X, str):
        raise ValueError(f"{name} must be a sequence of strings, not a single string")
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    for s in X:
        if not isinstance(s, str) or not s:
            raise ValueError(f"{name} must hold non-empty strings, got {s!r}")
        encode(s)  # raises on characters outside the vocabulary
    return X


class TerraformerSeq2Seq(BaseEstimator):
    """Fit on ``(source, target)`` digit strings; predict by greedy decoding.

    Batches are drawn from groups of equal source length.
    """

    def __init__(self, config="toy-terraformer", steps=1000, batch_size=16, lr=3e-3, warmup=200,
                 seed=0, max_decode_len=None):
        self.config = config
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.seed = seed
        self.max_decode_len = max_decode_len

    def fit(self, X, y):
        from .train import TrainConfig, train_loop

        X, y = _check_strings(X), _check_strings(y, "y")
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
        cfg = load_config(self.config) if isinstance(self.config, str) else self.config
        groups = {}
        for s, t in zip(X, y):
            groups.setdefault(len(s), []).append(TaskSample(s, t, "custom"))
        keys = sorted(groups)
        weights = np.array([len(groups[k]) for k in keys], dtype=float)
        weights /= weights.sum()

        def batches(rng):
            g = groups[keys[rng.choice(len(keys), p=weights)]]
            pick = rng.integers(0, len(g), size=self.batch_size)
            return make_batch([g[i] for i in pick])

        self.model_ = Terraformer(cfg, seed=self.seed)
        tcfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, warmup=self.warmup,
                           seed=self.seed, log_every=0)
        self.trace_ = train_loop(self.model_, tcfg, np.random.default_rng(self.seed), batches).trace
        self.max_target_len_ = max(len(t) for t in y)
        return self

    def predict(self, X):
        from .train import predict_targets

        check_is_fitted(self, "model_")
        X = _check_strings(X)
        return np.array(predict_targets(self.model_, X, self.max_decode_len), dtype=object)

    def score(self, X, y):
        """Exact-match sequence accuracy."""
        pred = self.predict(X)
        y = _check_strings(y, "y")
        return float(np.mean([p == t for p, t in zip(pred, y)]))
