"""Adam training loop with eval-loss early stopping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigInvalid, DivergenceDetected
from ..promptfmt import PromptSpec, PromptStyle, serialize
from ..seeding import derive_np_rng
from .model import MicroLM, forward_batch, loss_and_grads, pad_batch
from .tokenizer import EOS, Tokenizer

TokenPairs = list[tuple[list[int], list[int]]]


@dataclass
class TrainConfig:
    seed: int
    learning_rate: float = 5e-5
    batch_size: int = 30
    patience: int = 2000
    max_steps: int = 2000
    eval_every: int = 100

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigInvalid("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigInvalid("patience must be >= 1")
        if min(self.batch_size, self.eval_every) < 1 or self.max_steps < 0:
            raise ConfigInvalid("batch_size/eval_every must be >= 1, max_steps >= 0")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
        }


def corpus_from_prompts(prompts: list[PromptSpec], style: PromptStyle) -> list[str]:
    return [f"{serialize(p, style)}{p.y_pred}" for p in prompts]


def tokenize_prompts(
    prompts: list[PromptSpec], style: PromptStyle, tokenizer: Tokenizer
) -> TokenPairs:
    """(prompt ids, target ids) pairs; EOS closes every target."""
    pairs: TokenPairs = []
    for spec in prompts:
        prompt_ids = tokenizer.encode(serialize(spec, style))
        target_ids = tokenizer.encode(spec.y_pred) + [EOS]
        pairs.append((prompt_ids, target_ids))
    return pairs


def _nll(params, cfg, pairs: TokenPairs) -> tuple[float, float]:
    """(total negative log-likelihood, target positions) without gradients."""
    ids, labels, mask = pad_batch(pairs, cfg)
    probs, cache = forward_batch(params, cfg, ids, need_cache=True)
    picked = np.take_along_axis(cache["logp"], labels[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum()), float(mask.sum())


def eval_loss(model_params, cfg, pairs: TokenPairs, batch_size: int = 30) -> float:
    total, count = 0.0, 0.0
    for i in range(0, len(pairs), batch_size):
        t, c = _nll(model_params, cfg, pairs[i : i + batch_size])
        total += t
        count += c
    return total / count


def train(
    model: MicroLM,
    train_pairs: TokenPairs,
    eval_pairs: TokenPairs,
    cfg: TrainConfig,
) -> tuple[MicroLM, list[dict]]:
    """Returns the best-eval-loss model and the loss log.

    Early stop: at evaluation points, stop once `patience` updates have
    passed since the best evaluation loss. With no eval pairs the loop
    just runs to max_steps and keeps the final parameters.
    """
    cfg.validate()
    if not train_pairs:
        raise ConfigInvalid("no training pairs")
    rng = derive_np_rng(cfg.seed, "train")
    params = {k: v.copy() for k, v in model.params.items()}
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    log: list[dict] = []
    best_loss = math.inf
    best_step = 0
    best_params = {k: v.copy() for k, v in params.items()}
    track = bool(eval_pairs)

    def evaluate(step: int, train_loss: float) -> bool:
        """Record one log row; True means the patience budget is spent."""
        nonlocal best_loss, best_step, best_params
        if not track:
            log.append({"step": step, "train_loss": train_loss, "eval_loss": math.nan})
            return False
        el = eval_loss(params, model.cfg, eval_pairs, cfg.batch_size)
        log.append({"step": step, "train_loss": train_loss, "eval_loss": el})
        if el < best_loss:
            best_loss = el
            best_step = step
            best_params = {k: v.copy() for k, v in params.items()}
            return False
        return step - best_step >= cfg.patience

    evaluate(0, math.nan)
    n = len(train_pairs)
    running: list[float] = []
    for step in range(1, cfg.max_steps + 1):
        idx = rng.permutation(n)[: cfg.batch_size]
        batch = [train_pairs[i] for i in idx]
        loss, grads = loss_and_grads(params, model.cfg, batch)
        if not math.isfinite(loss):
            raise DivergenceDetected(f"non-finite training loss at step {step}")
        running.append(loss)
        for name in params:
            g = grads[name]
            m_state[name] = beta1 * m_state[name] + (1 - beta1) * g
            v_state[name] = beta2 * v_state[name] + (1 - beta2) * g * g
            m_hat = m_state[name] / (1 - beta1 ** step)
            v_hat = v_state[name] / (1 - beta2 ** step)
            params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        if step % cfg.eval_every == 0:
            if any(not np.isfinite(p).all() for p in params.values()):
                raise DivergenceDetected(f"non-finite parameters at step {step}")
            stop = evaluate(step, float(np.mean(running)))
            running = []
            if stop:
                break

    final = best_params if track else params
    trained = MicroLM(model.cfg, model.tokenizer, {k: v.copy() for k, v in final.items()})
    return trained, log


def write_loss_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_loss", "eval_loss"])
        for row in log:
            writer.writerow([row["step"], repr(row["train_loss"]), repr(row["eval_loss"])])
