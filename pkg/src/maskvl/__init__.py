"""Desk-scale masked vision-language pretraining on a small numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, load_config
from .data import Vocab, build_vocab, encode, generate_synthetic, load_jsonl
from .objectives import PretrainLosses, PretrainModel, pretrain_step
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Config",
    "PretrainLosses",
    "PretrainModel",
    "Tensor",
    "Vocab",
    "build_vocab",
    "encode",
    "generate_synthetic",
    "load_checkpoint",
    "load_config",
    "load_jsonl",
    "pretrain_step",
    "save_checkpoint",
]
