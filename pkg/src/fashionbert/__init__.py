"""Patch-based multimodal transformer pretraining with adaptive loss weights."""

__version__ = "0.1.0"

from .adaptive import aggregate_loss, normalize_signal, qp_oracle, solve_weights
from .model import FashionBERT, ModelConfig, load_checkpoint, match_score, save_checkpoint

__all__ = [
    "FashionBERT",
    "ModelConfig",
    "aggregate_loss",
    "load_checkpoint",
    "match_score",
    "normalize_signal",
    "qp_oracle",
    "save_checkpoint",
    "solve_weights",
]
