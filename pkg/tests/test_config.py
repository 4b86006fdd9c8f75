import warnings
from dataclasses import replace

import numpy as np
import pytest

from terrasparse.config import (
    PRESETS,
    ModelConfig,
    count_model_params,
    load_config,
    match_param_budget,
    parse_config,
    save_config,
)
from terrasparse.errors import ConfigError
from terrasparse.model import Terraformer


def test_defaults_are_valid():
    assert ModelConfig().validate() == []


def test_validate_reports_every_problem():
    cfg = ModelConfig(d_ff=250, N=4, d_model=65, n_heads=4, sparse_qkv=True, S_qkv=4, dropout=1.5)
    problems = cfg.validate()
    assert len(problems) >= 4
    with pytest.raises(ConfigError) as exc:
        cfg.check()
    assert exc.value.violations == problems


def test_loss_sparsity_only_checked_when_enabled():
    assert ModelConfig(vocab=15, loss_sparsity=2).validate() == []
    assert ModelConfig(vocab=15, loss_sparsity=2, sparse_loss=True).validate()


def test_sparse_qkv_needs_modules_equal_heads():
    assert ModelConfig(sparse_qkv=True, S_qkv=8, n_heads=4).validate()


def test_parse_round_trip(tmp_path):
    cfg = replace(PRESETS["toy-terraformer"], d_ff=128, dropout=0.05)
    path = tmp_path / "a.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_parse_comments_preset_and_errors(tmp_path):
    p = tmp_path / "b.cfg"
    p.write_text("preset = toy-terraformer  # start here\nd_ff=512\n\n# nothing\n")
    cfg = load_config(p)
    assert cfg.d_ff == 512 and cfg.sparse_ff
    with pytest.raises(ConfigError) as exc:
        parse_config("bogus=1\nd_ff=abc\nsparse_ff=maybe\nno equals\n")
    assert len(exc.value.violations) == 4
    p.write_text("preset=nope\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_presets_are_valid_and_named():
    for name in ("t5large-dense", "t5large-sparse-ff64", "t5large-sparse-ffqkv", "toy-terraformer"):
        assert load_config(name).validate() == []


@pytest.mark.parametrize("flags", [
    {},
    {"sparse_ff": True},
    {"sparse_qkv": True},
    {"sparse_qkv": True, "qkv_output": True},
    {"sparse_loss": True, "loss_sparsity": 4},
    {"sru": True, "reversible": True},
    {"sparse_ff": True, "sparse_qkv": True, "sparse_loss": True, "loss_sparsity": 2, "sru": True},
])
def test_closed_form_count_matches_instantiated_model(flags):
    cfg = ModelConfig(n_enc_layers=1, n_dec_layers=2, d_model=32, d_ff=64, n_heads=4, S_qkv=4, **flags)
    assert count_model_params(cfg) == Terraformer(cfg).num_params()


def test_budget_matcher_reproduces_qkv_preset():
    dense = PRESETS["t5large-dense"]
    qkv = replace(PRESETS["t5large-sparse-qkv"], d_ff=dense.d_ff)
    assert match_param_budget(dense, qkv).d_ff == 6144


def test_budget_matcher_keeps_multiple_of_n_and_warns_when_band_missed():
    dense = ModelConfig(d_model=32, d_ff=64, n_heads=4)
    sparse = replace(dense, sparse_qkv=True, N=64, d_ff=64)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = match_param_budget(dense, sparse, tolerance=1e-6)
    assert out.d_ff % 64 == 0
    assert any("nearest" in str(x.message) for x in w)


def test_budget_matcher_never_shrinks_an_already_large_budget():
    dense = ModelConfig()
    assert match_param_budget(dense, dense).d_ff == dense.d_ff


def test_config_hash_tracks_content():
    a = ModelConfig()
    assert a.hash() == ModelConfig().hash()
    assert a.hash() != replace(a, d_ff=128).hash()
