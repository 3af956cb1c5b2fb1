"""Deterministic RNG derivation and config digests.

All pipeline stages derive child RNG streams from (seed, label parts)
through SHA-256, so results are independent of iteration order, process
boundaries, and PYTHONHASHSEED. Parallel and serial executions of the
same stage therefore produce identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import random

import numpy as np


def _mix(seed: int, parts: tuple) -> int:
    material = repr((int(seed),) + parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def derive_rng(seed: int, *parts: str | int) -> random.Random:
    """Child `random.Random` for (seed, parts), stable across runs."""
    return random.Random(_mix(seed, parts))


def derive_np_rng(seed: int, *parts: str | int) -> np.random.Generator:
    """Child numpy generator for (seed, parts), stable across runs."""
    return np.random.default_rng(_mix(seed, parts))


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON; the digest input format."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_digest(obj) -> str:
    """Hex digest identifying a run configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
