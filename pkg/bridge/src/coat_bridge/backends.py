"""Scoring backends: a frozen-table stub and a transformers adapter.

A backend owns tokenization. `score` returns the backend's own tokens of
the target plus one log-probability per token, computed by teacher
forcing the concatenated prompt+target. `self_check` proves that ability
once at startup; a service over a backend that fails it must not come up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


class BackendError(RuntimeError):
    """The backend cannot produce the requested likelihoods."""


@dataclass
class BridgeConfig:
    """Service settings: which model to expose and how to serve it."""

    model: str
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8900
    max_concurrency: int = 4
    token: str | None = None
    # Cross-request batching trades determinism for throughput; keep it
    # opt-in and off.
    batching: bool = False


class ScoreBackend:
    """Interface: tokenize the target and teacher-force log-probs."""

    model_id: str = "unset"

    def score(self, prompt: str, target: str) -> tuple[list[str], list[float]]:
        raise NotImplementedError

    def check_fixture(self) -> tuple[str, str]:
        """A (prompt, target) pair this backend must be able to score."""
        return ("self check", "ok")

    def self_check(self) -> None:
        """Prove teacher-forced per-token log-likelihoods work end to end."""
        prompt, target = self.check_fixture()
        tokens, logprobs = self.score(prompt, target)
        if not tokens or len(tokens) != len(logprobs):
            raise BackendError(
                f"self check returned {len(tokens)} tokens but {len(logprobs)} log-probs"
            )
        for lp in logprobs:
            if not math.isfinite(lp) or lp > 0.0:
                raise BackendError(f"self check produced an invalid log-prob {lp!r}")


class StubLookupBackend(ScoreBackend):
    """Replays a frozen likelihood table; rows are
    {"prompt", "target", "probs"[, "tokens"]}. Meant for conformance
    tests and offline development against recorded scores."""

    def __init__(self, table_path: str | Path):
        self.table_path = Path(table_path)
        self.model_id = f"stub:{self.table_path.name}"
        self.table: dict[tuple[str, str], tuple[list[str], list[float]]] = {}
        try:
            with open(self.table_path, "r", encoding="utf-8") as fh:
                rows = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"cannot load likelihood table {self.table_path}: {exc}")
        for row in rows:
            probs = [float(p) for p in row["probs"]]
            tokens = [str(t) for t in row.get("tokens", [f"t{i}" for i in range(len(probs))])]
            if len(tokens) != len(probs):
                raise BackendError(f"table row for {row['target']!r} has mismatched lengths")
            if any(p <= 0.0 or p > 1.0 for p in probs):
                raise BackendError(f"table row for {row['target']!r} has probs outside (0, 1]")
            key = (str(row["prompt"]), str(row["target"]))
            self.table[key] = (tokens, [math.log(p) for p in probs])
        if not self.table:
            raise BackendError(f"likelihood table {self.table_path} is empty")

    def check_fixture(self) -> tuple[str, str]:
        return min(self.table)

    def score(self, prompt: str, target: str) -> tuple[list[str], list[float]]:
        key = (prompt, target)
        if key not in self.table:
            raise BackendError(f"no table entry for target {target!r}")
        tokens, logprobs = self.table[key]
        return list(tokens), list(logprobs)


def teacher_forced_logprobs(logits, full_ids: list[int], target_start: int) -> list[float]:
    """Log-probs of full_ids[target_start:] from next-token logits.

    `logits` is a [len(full_ids), vocab] tensor; row i predicts token
    i+1, so target token j is read from row j-1.
    """
    import torch

    logp = torch.log_softmax(logits.double(), dim=-1)
    out = []
    for pos in range(target_start, len(full_ids)):
        out.append(float(logp[pos - 1, full_ids[pos]]))
    return out


class TransformersBackend(ScoreBackend):
    """Causal-LM adapter. Loads lazily; inference is greedy-free (pure
    teacher forcing) and runs under no_grad in eval mode, so repeated
    calls are deterministic."""

    def __init__(self, model_name: str, device: str = "cpu"):
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.model_id = model_name
        self.device = device
        self._torch = torch
        torch.manual_seed(0)
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForCausalLM.from_pretrained(model_name)
        self.model.to(device)
        self.model.eval()

    def _bos_ids(self) -> list[int]:
        bos = self.tokenizer.bos_token_id
        if bos is None:
            raise BackendError(
                f"{self.model_id} has no BOS token to anchor an empty prompt"
            )
        return [bos]

    def score(self, prompt: str, target: str) -> tuple[list[str], list[float]]:
        torch = self._torch
        prompt_ids = self.tokenizer.encode(prompt, add_special_tokens=False)
        if not prompt_ids:
            prompt_ids = self._bos_ids()
        target_ids = self.tokenizer.encode(target, add_special_tokens=False)
        if not target_ids:
            raise BackendError(f"target {target!r} tokenizes to nothing")
        full_ids = prompt_ids + target_ids
        with torch.no_grad():
            logits = self.model(
                torch.tensor([full_ids], device=self.device)
            ).logits[0].cpu()
        tokens = self.tokenizer.convert_ids_to_tokens(target_ids)
        return list(tokens), teacher_forced_logprobs(logits, full_ids, len(prompt_ids))


def build_backend(config: BridgeConfig) -> ScoreBackend:
    """`stub:<table.json>` replays a table; anything else loads a
    transformers causal LM by name."""
    if config.model.startswith("stub:"):
        return StubLookupBackend(config.model[len("stub:"):])
    return TransformersBackend(config.model, config.device)
