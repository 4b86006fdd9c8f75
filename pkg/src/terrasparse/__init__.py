"""Sparse Transformer building blocks on a small numpy autodiff engine.

Sparse feedforward with a one-hot block controller, sparse Q/K/V through a
multiplicative layer plus convolution, a factored loss head, reversible blocks
with a low-rank recurrent unit, cached decoding and a per-token benchmark.
"""
from .config import PRESETS, ModelConfig, count_model_params, load_config, match_param_budget
from .decoding import IncrementalDecoder, full_prefix_logits, greedy_decode
from .errors import ConfigError, ContractError, CorruptionError, DimensionError, TrainingDiverged
from .model import DecisionRecord, ForwardContext, Terraformer
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "ModelConfig", "count_model_params", "load_config", "match_param_budget",
    "IncrementalDecoder", "full_prefix_logits", "greedy_decode",
    "ConfigError", "ContractError", "CorruptionError", "DimensionError", "TrainingDiverged",
    "DecisionRecord", "ForwardContext", "Terraformer", "Tensor", "backward", "no_grad",
]
