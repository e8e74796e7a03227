"""Word-level tokenizer and a small decoder-only transformer LM."""

from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint, save_model
from .model import LanguageModel, ModelConfig, SpanPatch, generate_prefixes
from .tokenizer import Tokenizer, UnknownTokenError
from .train import TrainConfig, TrainingDivergedError, pretrain

__all__ = [
    "CheckpointError",
    "LanguageModel",
    "ModelConfig",
    "SpanPatch",
    "Tokenizer",
    "TrainConfig",
    "TrainingDivergedError",
    "UnknownTokenError",
    "generate_prefixes",
    "load_checkpoint",
    "load_model",
    "pretrain",
    "save_checkpoint",
    "save_model",
]
