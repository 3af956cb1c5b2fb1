"""Likelihood providers behind one interface.

A scorer answers: under model Θ, how likely is each token of `target`
as a teacher-forced continuation of `prompt`? Selection only ever
consumes the per-token probabilities and their mean, so test doubles
(uniform, lookup tables), the in-repo micro-LM, and a remote HTTP
backend are interchangeable here.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean

import httpx

from .errors import (
    ConfigInvalid,
    EmptyTarget,
    LookupMiss,
    RemoteMalformed,
    RemoteUnavailable,
)

TOKEN_ENV_VAR = "COAT_SCORER_TOKEN"


@dataclass(frozen=True)
class TokenLikelihoods:
    tokens: tuple[str, ...]
    probs: tuple[float, ...]
    mean_prob: float

    def validate(self) -> None:
        if len(self.tokens) != len(self.probs) or not self.probs:
            raise ConfigInvalid("tokens and probs must be equal-length and non-empty")
        for p in self.probs:
            if not (0.0 < p <= 1.0):
                raise ConfigInvalid(f"token probability {p} outside (0, 1]")
        if abs(self.mean_prob - fmean(self.probs)) > 1e-12:
            raise ConfigInvalid("mean_prob inconsistent with probs")

    @classmethod
    def from_probs(cls, tokens: list[str], probs: list[float]) -> "TokenLikelihoods":
        out = cls(tuple(tokens), tuple(float(p) for p in probs), fmean(probs))
        out.validate()
        return out

    def aggregate(self, kind: str = "arithmetic") -> float:
        """Mean probability; "geometric" gives exp(mean log-prob)."""
        if kind == "arithmetic":
            return self.mean_prob
        if kind == "geometric":
            return math.exp(fmean(math.log(p) for p in self.probs))
        raise ConfigInvalid(f"unknown aggregation {kind!r}")


def _target_tokens(target: str) -> list[str]:
    if not target:
        raise EmptyTarget("cannot score an empty target")
    tokens = target.split()
    if not tokens:
        raise EmptyTarget("target has no tokens")
    return tokens


class Scorer:
    """Base interface. Subclasses implement score(); calls are stateless."""

    stateless_per_call = True

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        raise NotImplementedError

    def score_batch(self, pairs: list[tuple[str, str]]) -> list[TokenLikelihoods]:
        """Same contract as score(), batched; kinds override when they can vectorize."""
        return [self.score(prompt, target) for prompt, target in pairs]

    def close(self) -> None:
        pass


class UniformScorer(Scorer):
    """Constant probability p for every target token (whitespace tokens)."""

    def __init__(self, p: float):
        if not (0.0 < p <= 1.0):
            raise ConfigInvalid(f"uniform scorer needs p in (0, 1], got {p}")
        self.p = float(p)

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        tokens = _target_tokens(target)
        return TokenLikelihoods.from_probs(tokens, [self.p] * len(tokens))


class LookupScorer(Scorer):
    """Frozen (prompt, target) → per-token probability table.

    Table values are either a bare probability list or a
    {"tokens": [...], "probs": [...]} record; bare lists get positional
    token labels.
    """

    def __init__(self, table: dict[tuple[str, str], object]):
        self.table = dict(table)

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        if not target:
            raise EmptyTarget("cannot score an empty target")
        key = (prompt, target)
        if key not in self.table:
            raise LookupMiss(f"no table entry for target {target!r} (prompt of {len(prompt)} chars)")
        entry = self.table[key]
        if isinstance(entry, dict):
            return TokenLikelihoods.from_probs(list(entry["tokens"]), list(entry["probs"]))
        probs = list(entry)
        return TokenLikelihoods.from_probs([f"t{i}" for i in range(len(probs))], probs)

    def to_json(self) -> list[dict]:
        rows = []
        for (prompt, target), entry in sorted(self.table.items()):
            row = {"prompt": prompt, "target": target}
            if isinstance(entry, dict):
                row["tokens"] = list(entry["tokens"])
                row["probs"] = list(entry["probs"])
            else:
                row["probs"] = list(entry)
            rows.append(row)
        return rows

    @classmethod
    def from_json(cls, rows: list[dict]) -> "LookupScorer":
        table: dict[tuple[str, str], object] = {}
        for row in rows:
            key = (row["prompt"], row["target"])
            if "tokens" in row:
                table[key] = {"tokens": row["tokens"], "probs": row["probs"]}
            else:
                table[key] = row["probs"]
        return cls(table)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "LookupScorer":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


class LocalModelScorer(Scorer):
    """Scores with an in-process micro-LM loaded from a checkpoint."""

    def __init__(self, checkpoint: str | Path | None = None, model=None):
        if model is None:
            if checkpoint is None:
                raise ConfigInvalid("local scorer needs a checkpoint path or a model")
            from .microlm import load_checkpoint  # deferred: heavy import

            model = load_checkpoint(checkpoint)
        self.model = model

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        if not target:
            raise EmptyTarget("cannot score an empty target")
        return self.model.sequence_likelihood(prompt, target)

    def score_batch(self, pairs: list[tuple[str, str]]) -> list[TokenLikelihoods]:
        if any(not target for _, target in pairs):
            raise EmptyTarget("cannot score an empty target")
        return self.model.sequence_likelihood_many(pairs)


class RemoteScorer(Scorer):
    """HTTP client for the /score wire protocol.

    Tokenization belongs to the backend; this client only exponentiates
    the returned log-probs and averages. Transient failures are retried
    with exponential backoff, then surfaced — selection must abort
    rather than silently degrade.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 10.0,
        retries: int = 2,
        backoff: float = 0.25,
        max_connections: int = 8,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            timeout=timeout,
            headers=headers,
            limits=httpx.Limits(max_connections=max_connections),
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post_with_retries(self, url: str, payload: dict) -> httpx.Response:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last_exc = exc
            else:
                if response.status_code == 200:
                    return response
                if response.status_code < 500 and response.status_code != 429:
                    raise RemoteMalformed(
                        f"scorer endpoint rejected the request: HTTP {response.status_code}"
                    )
                last_exc = RemoteUnavailable(f"HTTP {response.status_code} from {url}")
            if attempt < self.retries:
                self._sleep(self.backoff * (2 ** attempt))
        raise RemoteUnavailable(f"scorer endpoint unreachable after {self.retries + 1} attempts: {last_exc}")

    def score(self, prompt: str, target: str) -> TokenLikelihoods:
        if not target:
            raise EmptyTarget("cannot score an empty target")
        response = self._post_with_retries(f"{self.endpoint}/score", {"prompt": prompt, "target": target})
        try:
            body = response.json()
        except (json.JSONDecodeError, ValueError):
            raise RemoteMalformed("scorer response is not JSON")
        if not isinstance(body, dict) or "tokens" not in body or "logprobs" not in body:
            raise RemoteMalformed("scorer response missing tokens/logprobs")
        tokens, logprobs = body["tokens"], body["logprobs"]
        if (
            not isinstance(tokens, list)
            or not isinstance(logprobs, list)
            or len(tokens) != len(logprobs)
            or not tokens
        ):
            raise RemoteMalformed("tokens and logprobs must be equal-length non-empty lists")
        if any(not isinstance(lp, (int, float)) or lp > 0.0 for lp in logprobs):
            raise RemoteMalformed("logprobs must be numbers <= 0")
        probs = [math.exp(float(lp)) for lp in logprobs]
        # exp underflow would violate the (0, 1] contract
        probs = [max(p, 1e-300) for p in probs]
        return TokenLikelihoods.from_probs([str(t) for t in tokens], probs)

    def health(self) -> dict:
        try:
            response = self._client.get(f"{self.endpoint}/health")
        except httpx.HTTPError as exc:
            raise RemoteUnavailable(f"health check failed: {exc}")
        if response.status_code != 200:
            raise RemoteUnavailable(f"health check returned HTTP {response.status_code}")
        return response.json()


def build_scorer(config: dict) -> Scorer:
    """Scorer factory for run configs: {"kind": ..., ...kind-specific}."""
    kind = config.get("kind")
    if kind == "uniform":
        return UniformScorer(config.get("p", 0.5))
    if kind == "lookup":
        return LookupScorer.from_json_file(config["table"])
    if kind == "local":
        return LocalModelScorer(checkpoint=config["checkpoint"])
    if kind == "remote":
        return RemoteScorer(
            config["endpoint"],
            timeout=config.get("timeout", 10.0),
            retries=config.get("retries", 2),
            backoff=config.get("backoff", 0.25),
            max_connections=config.get("max_connections", 8),
        )
    raise ConfigInvalid(f"unknown scorer kind {kind!r}")
