"""Synthetic copy and long-addition tasks over a character-level digit vocabulary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLUS, SEP, EOS, PAD = 10, 11, 12, 13
VOCAB_SIZE = 16  # 14 used symbols, padded so loss sparsity 2/4/8 divides it
_SYMBOLS = {PLUS: "+"}
_CHARS = {str(i): i for i in range(10)} | {"+": PLUS}


@dataclass(frozen=True)
class TaskSample:
    source: str
    target: str
    task: str


def encode(text: str) -> list[int]:
    try:
        return [_CHARS[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"unsupported character {exc.args[0]!r}") from None


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < 10:
            out.append(str(i))
        elif i in _SYMBOLS:
            out.append(_SYMBOLS[i])
    return "".join(out)


def _digits(rng, n, leading_nonzero=False) -> str:
    d = rng.integers(0, 10, size=n)
    if leading_nonzero and n > 1:
        d[0] = rng.integers(1, 10)
    return "".join(map(str, d))


def gen_copy(rng, min_len: int, max_len: int) -> TaskSample:
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    s = _digits(rng, int(rng.integers(min_len, max_len + 1)))
    return TaskSample(s, s, "copy")


def gen_add(rng, min_len: int, max_len: int) -> TaskSample:
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    a = _digits(rng, int(rng.integers(min_len, max_len + 1)), leading_nonzero=True)
    b = _digits(rng, int(rng.integers(min_len, max_len + 1)), leading_nonzero=True)
    return TaskSample(f"{a}+{b}", str(int(a) + int(b)), "add")


GENERATORS = {"copy": gen_copy, "add": gen_add}


def make_batch(samples) -> dict:
    """Pack samples with equal source length into arrays.

    Decoder input is ``SEP + target``; output is ``target + EOS``; shorter
    targets are right-padded with PAD and weighted 0.
    """
    n = {len(s.source) for s in samples}
    if len(n) != 1:
        raise ValueError("a batch needs equal source lengths")
    m = max(len(s.target) for s in samples) + 1
    B = len(samples)
    src = np.array([encode(s.source) for s in samples], dtype=np.int64)
    dec_in = np.full((B, m), PAD, dtype=np.int64)
    dec_out = np.full((B, m), PAD, dtype=np.int64)
    w = np.zeros((B, m))
    for i, s in enumerate(samples):
        t = encode(s.target)
        dec_in[i, 0] = SEP
        dec_in[i, 1:len(t) + 1] = t
        dec_out[i, :len(t)] = t
        dec_out[i, len(t)] = EOS
        w[i, :len(t) + 1] = 1.0
    return {"src": src, "dec_in": dec_in, "dec_out": dec_out, "weights": w}


def sample_batch(task: str, rng, batch_size: int, min_len: int, max_len: int) -> dict:
    """One batch; all samples share their operand lengths so no source padding is needed."""
    gen = GENERATORS[task]
    if task == "copy":
        n = int(rng.integers(min_len, max_len + 1))
        return make_batch([gen(rng, n, n) for _ in range(batch_size)])
    la, lb = (int(rng.integers(min_len, max_len + 1)) for _ in range(2))
    samples = []
    for _ in range(batch_size):
        a, b = _digits(rng, la, True), _digits(rng, lb, True)
        samples.append(TaskSample(f"{a}+{b}", str(int(a) + int(b)), "add"))
    return make_batch(samples)
