"""Model configuration, validation, presets and parameter-budget matching."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    N: int = 4
    S_qkv: int = 4
    F: int = 3
    d_lowrank: int = 16
    loss_sparsity: int = 1
    d_sru: int = 32
    vocab: int = 16
    sparse_ff: bool = False
    sparse_qkv: bool = False
    sparse_loss: bool = False
    reversible: bool = False
    sru: bool = False
    qkv_output: bool = False
    dropout: float = 0.1
    temperature: float = 0.1
    argmax_mix_prob: float = 0.3
    dtype: str = "float64"

    @property
    def head_dim(self) -> int:
        return self.d_model // (self.S_qkv if self.sparse_qkv else self.n_heads)

    @property
    def ff_blocks(self) -> int:
        return self.d_ff // self.ff_N

    @property
    def ff_N(self) -> int:
        return self.N if self.sparse_ff else 1

    def validate(self) -> list[str]:
        return validate(self)

    def check(self) -> "ModelConfig":
        problems = validate(self)
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems), problems)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def validate(cfg: ModelConfig) -> list[str]:
    """Every violated invariant, all at once; empty list means valid."""
    out = []
    for name in ("n_enc_layers", "n_dec_layers"):
        if getattr(cfg, name) < 0:
            out.append(f"{name} must be >= 0")
    for name in ("d_model", "d_ff", "n_heads", "N", "S_qkv", "F", "d_lowrank", "loss_sparsity", "d_sru", "vocab"):
        if getattr(cfg, name) < 1:
            out.append(f"{name} must be >= 1")
    if out:
        return out
    if cfg.d_ff % cfg.N:
        out.append(f"d_ff={cfg.d_ff} is not divisible by N={cfg.N}")
    if cfg.d_model % cfg.n_heads:
        out.append(f"d_model={cfg.d_model} is not divisible by n_heads={cfg.n_heads}")
    if cfg.sparse_qkv:
        if cfg.d_model % cfg.S_qkv:
            out.append(f"d_model={cfg.d_model} is not divisible by S_qkv={cfg.S_qkv}")
        if cfg.S_qkv != cfg.n_heads:
            out.append(f"sparse QKV aligns modules with heads: S_qkv={cfg.S_qkv} != n_heads={cfg.n_heads}")
    if cfg.sparse_loss and cfg.vocab % cfg.loss_sparsity:
        out.append(f"vocab={cfg.vocab} is not divisible by loss_sparsity={cfg.loss_sparsity}")
    if cfg.temperature <= 0:
        out.append("temperature must be > 0")
    if not 0.0 <= cfg.argmax_mix_prob <= 1.0:
        out.append("argmax_mix_prob must lie in [0, 1]")
    if not 0.0 <= cfg.dropout < 1.0:
        out.append("dropout must lie in [0, 1)")
    if cfg.dtype not in ("float32", "float64"):
        out.append(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(field_type, key, raw):
    raw = raw.strip()
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    if kind == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Flat ``key=value`` lines; ``#`` comments and blank lines ignored; unknown keys rejected."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key=value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(types[key], key, raw)
        except ConfigError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors), errors)
    return replace(base or ModelConfig(), **values)


def load_config(path_or_preset) -> ModelConfig:
    """A preset name or a config file path (a file may start from ``preset=<name>``)."""
    name = str(path_or_preset)
    if name in PRESETS:
        return PRESETS[name]
    text = Path(name).read_text(encoding="utf-8")
    base = None
    kept = []
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped.startswith("preset"):
            key, _, val = stripped.partition("=")
            if key.strip() == "preset":
                if val.strip() not in PRESETS:
                    raise ConfigError(f"unknown preset {val.strip()!r}")
                base = PRESETS[val.strip()]
                continue
        kept.append(line)
    return parse_config("\n".join(kept), base)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")


_T5_LARGE = ModelConfig(
    n_enc_layers=24, n_dec_layers=24, d_model=1024, d_ff=4096, n_heads=16, N=64, S_qkv=16, F=3,
    d_lowrank=64, loss_sparsity=4, d_sru=32, vocab=32000, dropout=0.1, dtype="float32",
)

PRESETS = {
    "t5large-dense": _T5_LARGE,
    "t5large-sparse-ff64": replace(_T5_LARGE, sparse_ff=True),
    "t5large-sparse-qkv": replace(_T5_LARGE, sparse_qkv=True, qkv_output=True, d_ff=6144),
    "t5large-sparse-ffqkv": replace(_T5_LARGE, sparse_ff=True, sparse_qkv=True, d_ff=6144),
    "toy-terraformer": ModelConfig(
        n_enc_layers=2, n_dec_layers=2, d_model=64, d_ff=256, n_heads=4, N=4, S_qkv=4, F=3,
        d_lowrank=16, loss_sparsity=2, d_sru=32, vocab=16, sparse_ff=True, sparse_qkv=True,
        sparse_loss=True, reversible=True, sru=True, dropout=0.0,
    ),
}


# ---------------------------------------------------------------- parameter counting


def attention_params(cfg: ModelConfig) -> int:
    d = cfg.d_model
    n = 2 * d  # layernorm
    if cfg.sparse_qkv:
        S, M = cfg.S_qkv, d // cfg.S_qkv
        n += d * S + d * M + 3 * (cfg.F * cfg.F * M * M + M)
        if cfg.qkv_output:
            n += d * d
    else:
        n += 4 * d * d
    return n


def ffn_params(cfg: ModelConfig, d_ff: int | None = None) -> int:
    d, dff = cfg.d_model, cfg.d_ff if d_ff is None else d_ff
    n = 2 * d + 2 * d * dff + dff + d
    if cfg.sparse_ff:
        n += d * cfg.d_lowrank + cfg.d_lowrank * dff
    if cfg.sru:
        r = cfg.d_sru
        n += 2 * d * r + 3 * r * r + 2 * r
    return n


def head_params(cfg: ModelConfig) -> int:
    if cfg.sparse_loss:
        return cfg.d_model * cfg.loss_sparsity + cfg.d_model * (cfg.vocab // cfg.loss_sparsity)
    return cfg.d_model * cfg.vocab


def count_model_params(cfg: ModelConfig) -> int:
    """Closed-form total matching the entries of an instantiated model."""
    d = cfg.d_model
    enc = cfg.n_enc_layers * (attention_params(cfg) + ffn_params(cfg))
    dec = cfg.n_dec_layers * (2 * attention_params(cfg) + ffn_params(cfg))
    return cfg.vocab * d + enc + dec + 4 * d + head_params(cfg)


def match_param_budget(dense_cfg: ModelConfig, sparse_cfg: ModelConfig, tolerance: float = 0.02) -> ModelConfig:
    """Raise ``sparse_cfg.d_ff`` in steps of N until its total is within ``tolerance`` of the dense total.

    Returns the nearest achievable config (with a warning) when no multiple of N
    lands inside the tolerance band.
    """
    for cfg in (dense_cfg, sparse_cfg):
        cfg.check()
    target = count_model_params(dense_cfg)
    step = sparse_cfg.N
    d_ff = -(-sparse_cfg.d_ff // step) * step
    lo, hi = (1 - tolerance) * target, (1 + tolerance) * target

    def total(x):
        return count_model_params(replace(sparse_cfg, d_ff=x))

    best = d_ff
    while total(d_ff) < lo:
        best = d_ff
        d_ff += step
    if total(d_ff) <= hi:
        return replace(sparse_cfg, d_ff=d_ff)
    if abs(total(d_ff) - target) > abs(total(best) - target):
        d_ff = best
    warnings.warn(f"no d_ff multiple of {step} within {tolerance:.0%}; nearest is {d_ff}")
    return replace(sparse_cfg, d_ff=d_ff)


def config_fields() -> list[str]:
    return [f.name for f in dataclasses.fields(ModelConfig)]
