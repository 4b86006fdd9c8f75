"""Unbatched per-token CPU decoding benchmark.

Each variant decodes the same fixed token stream after the same source prefix.
Only ``IncrementalDecoder.step`` is timed; caches are allocated up front by
``prefill`` so no allocation of cache storage lands inside the timed region.
"""
from __future__ import annotations

import csv
import gc
import os
import platform
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig, load_config
from .decoding import IncrementalDecoder
from .errors import ConfigError
from .model import Terraformer
from .sparse_ff import TouchCounter

CSV_HEADER = ["variant", "d_model", "d_ff", "N", "S", "F", "loss_S", "median_s", "p10_s", "p90_s",
              "weights_touched", "speedup_vs_dense"]
MIN_SAMPLES, MIN_WARMUP = 30, 5


@dataclass
class VariantTiming:
    variant: str
    cfg: ModelConfig | None
    times: np.ndarray
    block_s: float
    weights_touched: int
    warmup: int
    threads: int = 1
    speedup_vs_dense: float = float("nan")

    @property
    def median_s(self) -> float:
        return float(np.median(self.times))

    @property
    def p10_s(self) -> float:
        return float(np.percentile(self.times, 10))

    @property
    def p90_s(self) -> float:
        return float(np.percentile(self.times, 90))

    @property
    def samples(self) -> int:
        return len(self.times)

    @property
    def config_hash(self) -> str:
        return self.cfg.hash() if self.cfg is not None else "-"

    def csv_row(self) -> list:
        c = self.cfg
        if c is None:
            shape = [0, 0, 0, 0, 0, 0]
        else:
            S = c.S_qkv if c.sparse_qkv else 1
            shape = [c.d_model, c.d_ff, c.ff_N, S, c.F, c.loss_sparsity if c.sparse_loss else 1]
        return [self.variant, *shape, f"{self.median_s:.6e}", f"{self.p10_s:.6e}", f"{self.p90_s:.6e}",
                self.weights_touched, f"{self.speedup_vs_dense:.4f}"]


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    hardware: dict = field(default_factory=dict)
    null: VariantTiming | None = None

    def row(self, variant: str) -> VariantTiming:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(r.csv_row())

    def table(self) -> str:
        head = f"{'variant':<24}{'median ms':>11}{'p10 ms':>9}{'p90 ms':>9}{'block ms':>10}{'touched':>12}{'speedup':>10}"
        lines = [head, "-" * len(head)]
        for r in self.rows + ([self.null] if self.null else []):
            lines.append(f"{r.variant:<24}{r.median_s * 1e3:>11.3f}{r.p10_s * 1e3:>9.3f}{r.p90_s * 1e3:>9.3f}"
                         f"{r.block_s * 1e3:>10.3f}{r.weights_touched:>12}{r.speedup_vs_dense:>10.2f}")
        r0 = self.rows[0] if self.rows else None
        if r0 is not None:
            lines.append(f"threads={r0.threads} warmup={r0.warmup} samples={r0.samples}")
        lines.append(", ".join(f"{k}={v}" for k, v in self.hardware.items()))
        return "\n".join(lines)


def hardware_info() -> dict:
    info = {"machine": platform.machine(), "python": platform.python_version(), "numpy": np.__version__,
            "cpu_count": os.cpu_count()}
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    info["cpu"] = line.split(":", 1)[1].strip()
                    break
    except OSError:
        info["cpu"] = platform.processor() or "unknown"
    return info


def check_threads() -> int:
    raw = os.environ.get("STCK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STCK_THREADS must be an integer, got {raw!r}") from None
    if n != 1:
        raise ConfigError(f"the benchmark is single-threaded; STCK_THREADS must be 1, got {n}")
    return n


def bench_overrides(cfg: ModelConfig, dec_layers=None, enc_layers=None, vocab=None) -> ModelConfig:
    """Shrink a preset to desk scale: fewer layers and optionally a smaller vocabulary.

    Per-token decoding never touches the encoder, so by default it keeps one layer.
    """
    kw = {"dropout": 0.0}
    if dec_layers is not None:
        kw["n_dec_layers"] = dec_layers
    kw["n_enc_layers"] = 1 if enc_layers is None else enc_layers
    if vocab is not None:
        kw["vocab"] = vocab
    return replace(cfg, **kw).check()


def token_stream(seed: int, seq_len: int, n_steps: int, vocab: int):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=(1, seq_len)), rng.integers(0, vocab, size=n_steps)


def bench_model(model: Terraformer, name: str, seq_len: int, samples: int, warmup: int = MIN_WARMUP,
                seed: int = 0, batch: int = 1) -> VariantTiming:
    """Time ``samples`` decoding steps after ``warmup`` untimed steps."""
    if samples < MIN_SAMPLES or warmup < MIN_WARMUP:
        raise ConfigError(f"need samples >= {MIN_SAMPLES} and warmup >= {MIN_WARMUP}")
    src, stream = token_stream(seed, seq_len, warmup + samples, model.cfg.vocab)
    src = np.repeat(src, batch, axis=0)
    dec = IncrementalDecoder(model).prefill(src, capacity=warmup + samples + 1)
    times = np.empty(samples)
    blocks = []
    touched = 0
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for i, tok in enumerate(stream):
            toks = np.full(batch, tok)
            timed = i >= warmup
            dec.block_times = [] if timed else None
            dec.counter = TouchCounter() if i == warmup else None
            t0 = time.perf_counter()
            dec.step(toks)
            dt = time.perf_counter() - t0
            if timed:
                times[i - warmup] = dt
                blocks.extend(dec.block_times)
            if i == warmup:
                touched = dec.counter.count // batch
    finally:
        if gc_was:
            gc.enable()
    return VariantTiming(name, model.cfg, times, float(np.median(blocks)) if blocks else 0.0, touched, warmup)


def bench_null(samples: int, warmup: int = MIN_WARMUP, d_model: int = 1024, vocab: int = 16) -> VariantTiming:
    """Harness-only run: an embedding lookup per step, timed exactly like a real variant."""
    emb = np.zeros((vocab, d_model), dtype=np.float32)
    out = np.empty(d_model, dtype=np.float32)
    times = np.empty(samples)
    for i in range(warmup + samples):
        t0 = time.perf_counter()
        np.copyto(out, emb[i % vocab])
        dt = time.perf_counter() - t0
        if i >= warmup:
            times[i - warmup] = dt
    return VariantTiming("null", None, times, 0.0, 0, warmup)


def _limits():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def cmd_bench(configs, seq_len: int = 32, samples: int = MIN_SAMPLES, warmup: int = MIN_WARMUP,
              dec_layers=None, enc_layers=None, vocab=None, seed: int = 0, batch: int = 1,
              csv_path=None) -> BenchReport:
    """Benchmark each config (preset name, path, or ModelConfig); the first dense one is the baseline."""
    threads = check_threads()
    resolved = []
    for c in configs:
        name = c if isinstance(c, str) else f"cfg-{c.hash()}"
        cfg = load_config(c) if isinstance(c, str) else c
        problems = cfg.validate()
        if problems:
            raise ConfigError(f"invalid config {name}: " + "; ".join(problems), problems)
        resolved.append((os.path.basename(str(name)).removesuffix(".cfg"),
                         bench_overrides(cfg, dec_layers, enc_layers, vocab)))
    report = BenchReport(hardware=hardware_info())
    limiter = _limits()
    try:
        for name, cfg in resolved:
            model = Terraformer(cfg, seed=seed)
            row = bench_model(model, name, seq_len, samples, warmup, seed, batch)
            row.threads = threads
            report.rows.append(row)
            del model
            gc.collect()
        report.null = bench_null(samples, warmup)
    finally:
        limiter.unregister()
    dense = next((r for r in report.rows if not (r.cfg.sparse_ff or r.cfg.sparse_qkv)), report.rows[0])
    for r in report.rows + [report.null]:
        r.speedup_vs_dense = dense.median_s / r.median_s
    if csv_path:
        report.write_csv(csv_path)
    return report


__all__ = ["BenchReport", "VariantTiming", "cmd_bench", "bench_model", "bench_null", "CSV_HEADER"]
