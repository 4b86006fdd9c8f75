"""Toy-scale training loop, Adam, and length-generalization evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .decoding import greedy_decode
from .errors import TrainingDiverged
from .model import ForwardContext, Terraformer
from .tasks import GENERATORS, SEP, encode, sample_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    temperature: float = 0.1
    argmax_mix_prob: float = 0.3
    task: str = "copy"
    min_len: int = 1
    max_len: int = 8
    eval_min_len: int | None = None
    eval_max_len: int | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.eval_min_len is not None and self.eval_min_len <= self.max_len:
            raise ValueError("generalization eval range must start beyond the training range")


@dataclass
class TraceRow:
    step: int
    loss: float
    token_acc: float


@dataclass
class TrainResult:
    model: Terraformer
    trace: list = field(default_factory=list)

    def write_csv(self, path):
        write_trace(self.trace, path)


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "token_acc"])
        for r in trace:
            w.writerow([r.step, repr(r.loss), repr(r.token_acc)])


class Adam:
    """Adam with linear warmup then inverse-square-root decay and global-norm clipping."""

    def __init__(self, params, lr, warmup=200, beta1=0.9, beta2=0.98, eps=1e-9, clip_norm=None):
        self.params = [p for _, p in params]
        self.lr, self.warmup = lr, warmup
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def rate(self, step) -> float:
        step = max(step, 1)
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self):
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip_norm:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        lr = self.rate(self.t)
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def batch_token_accuracy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    hit = (logits.argmax(axis=-1) == targets) * weights
    return float(hit.sum() / weights.sum())


def train_loop(model: Terraformer, cfg: TrainConfig, rng=None, batch_source=None) -> TrainResult:
    """Teacher-forced cross-entropy training.

    ``batch_source(rng) -> batch dict`` overrides the synthetic task sampler.
    Raises TrainingDiverged as soon as the loss stops being finite.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if batch_source is None:
        def batch_source(r):
            return sample_batch(cfg.task, r, cfg.batch_size, cfg.min_len, cfg.max_len)
    opt = Adam(model.parameters(), cfg.lr, cfg.warmup, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    result = TrainResult(model)
    for step in range(cfg.steps):
        batch = batch_source(rng)
        ctx = ForwardContext.for_config(model.cfg, training=True, rng=rng,
                                        temperature=cfg.temperature, argmax_mix_prob=cfg.argmax_mix_prob)
        loss, logits = model.loss(batch["src"], batch["dec_in"], batch["dec_out"], batch["weights"], ctx)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step} (lr={opt.rate(opt.t + 1):.3g})")
        T.backward(loss)
        opt.step()
        acc = batch_token_accuracy(logits.data, batch["dec_out"], batch["weights"])
        result.trace.append(TraceRow(step, value, acc))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f token_acc %.4f", step, value, acc)
        if cfg.checkpoint_every and cfg.checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, cfg.checkpoint_path)
    return result


def _group_by_source_length(samples):
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s.source), []).append(i)
    return groups


def predict_targets(model: Terraformer, sources, max_len=None, batch_size=64) -> list[str]:
    """Greedy-decode strings for each source, batching sequences of equal length."""
    from .tasks import TaskSample, decode

    samples = [TaskSample(s, "", "") for s in sources]
    preds = [""] * len(samples)
    for n, idx in _group_by_source_length(samples).items():
        limit = max_len or n + 2
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            src = np.array([encode(samples[i].source) for i in chunk])
            for i, toks in zip(chunk, greedy_decode(model, src, limit)):
                preds[i] = decode(toks)
    return preds


def eval_generalization(model: Terraformer, task: str, train_max_len: int, eval_range, n_samples=500,
                        rng=None) -> dict:
    """Greedy-decode fresh samples with lengths in ``eval_range`` (inclusive).

    ``token_acc`` is the per-position match rate over target positions (missing
    positions count as wrong); ``seq_acc`` the fraction of exact matches.
    """
    lo, hi = eval_range
    rng = rng if rng is not None else np.random.default_rng(12345)
    samples = [GENERATORS[task](rng, lo, hi) for _ in range(n_samples)]
    preds = predict_targets(model, [s.source for s in samples])
    hits = total = exact = 0
    for s, p in zip(samples, preds):
        total += len(s.target)
        hits += sum(a == b for a, b in zip(s.target, p))
        exact += p == s.target
    return {"token_acc": hits / total, "seq_acc": exact / len(samples),
            "n": len(samples), "train_max_len": train_max_len, "eval_range": (lo, hi)}


__all__ = ["TrainConfig", "train_loop", "eval_generalization", "Adam", "predict_targets", "SEP"]
