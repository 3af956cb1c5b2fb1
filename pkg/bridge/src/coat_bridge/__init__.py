"""HTTP bridge exposing language-model likelihoods to the scorer protocol."""

from .app import ScoreRequest, create_app
from .backends import (
    BackendError,
    BridgeConfig,
    ScoreBackend,
    StubLookupBackend,
    TransformersBackend,
    build_backend,
    teacher_forced_logprobs,
)
from .cli import main, parse_args, serve

__all__ = [
    "BackendError",
    "BridgeConfig",
    "ScoreBackend",
    "ScoreRequest",
    "StubLookupBackend",
    "TransformersBackend",
    "build_backend",
    "create_app",
    "main",
    "parse_args",
    "serve",
    "teacher_forced_logprobs",
]
