"""From-scratch autoregressive micro language model (numpy, float64)."""

from .model import (
    MicroLM,
    ModelConfig,
    forward_batch,
    init_params,
    load_checkpoint,
    loss_and_grads,
    pad_batch,
)
from .tokenizer import EOS, PAD, SEP, UNK, Tokenizer, build_tokenizer
from .trainer import (
    TrainConfig,
    corpus_from_prompts,
    eval_loss,
    tokenize_prompts,
    train,
    write_loss_log,
)

__all__ = [
    "EOS",
    "PAD",
    "SEP",
    "UNK",
    "MicroLM",
    "ModelConfig",
    "Tokenizer",
    "TrainConfig",
    "build_tokenizer",
    "corpus_from_prompts",
    "eval_loss",
    "forward_batch",
    "init_params",
    "load_checkpoint",
    "loss_and_grads",
    "pad_batch",
    "tokenize_prompts",
    "train",
    "write_loss_log",
]
