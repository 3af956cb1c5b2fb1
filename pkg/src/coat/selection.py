"""Demonstration selection: informativeness + non-triviality.

The concept-aware strategy picks demos that (a) share the predicted
sample's latent concept and (b) greedily minimize the training model's
mean likelihood of the correct target, so every demonstration is both
on-concept and non-trivially informative. Random and info-only
baselines live here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import (
    ConceptUnderpopulated,
    ConfigInvalid,
    InsufficientSamples,
)
from .promptfmt import PromptSpec, PromptStyle, serialize
from .scorers import Scorer
from .seeding import derive_rng
from .taskgen import QASample


class DemoStrategy(str, Enum):
    RANDOM = "random"
    INFO_ONLY = "info_only"
    COAT = "coat"


def sample_xy(sample: QASample) -> tuple[str, str]:
    """Verbalize a sample into prompt-segment (x, y) texts."""
    if sample.context:
        return f"{sample.question} Context: {sample.context}", sample.answer
    return sample.question, sample.answer


@dataclass
class ConceptIndex:
    by_key: dict[str, list[str]]

    def members(self, key: str) -> list[str]:
        return self.by_key.get(key, [])


def index_by_concept(dataset: list[QASample], extractor=None) -> ConceptIndex:
    """Exhaustive concept-key → sorted-id index; extractor defaults to the
    stored concept field."""
    if not dataset:
        raise ConfigInvalid("cannot index an empty dataset")
    if extractor is None:
        extractor = lambda s: s.concept
    by_key: dict[str, list[str]] = {}
    for sample in dataset:
        by_key.setdefault(extractor(sample), []).append(sample.id)
    for ids in by_key.values():
        ids.sort()
    return ConceptIndex(by_key)


def informative_candidates(
    index: ConceptIndex, sample: QASample, m: int = 20, rng=None, *, concept: str | None = None
) -> list[str]:
    """Concept-sharing candidate ids, self excluded, subsampled to m.

    Always returned ascending so downstream tie-breaks are stable.
    """
    key = sample.concept if concept is None else concept
    peers = [i for i in index.members(key) if i != sample.id]
    if not peers:
        raise ConceptUnderpopulated(f"concept {key!r} has no members besides {sample.id!r}")
    if len(peers) <= m:
        return peers
    if rng is None:
        raise ConfigInvalid("subsampling candidates requires an rng")
    return sorted(rng.sample(peers, m))


def likelihood_of_target(
    scorer: Scorer,
    demos: list[tuple[str, str]],
    x_pred: str,
    y_pred: str,
    style: PromptStyle,
    aggregate: str = "arithmetic",
) -> float:
    """Model Θ's mean per-token probability of y_pred after the demos."""
    prompt = serialize(PromptSpec(demos=list(demos), x_pred=x_pred), style)
    return scorer.score(prompt, y_pred).aggregate(aggregate)


def nontrivial_select(
    candidates: list[QASample],
    sample: QASample,
    k: int,
    scorer: Scorer,
    style: PromptStyle,
    aggregate: str = "arithmetic",
) -> list[QASample]:
    """Greedy argmin over target likelihood, one demo at a time.

    The candidate pool is fixed across the k steps; ties go to the
    smallest sample id. Returns min(k, |candidates|) demos.
    """
    if not candidates:
        raise ConfigInvalid("nontrivial_select needs a non-empty candidate pool")
    if k < 1:
        raise ConfigInvalid(f"k must be >= 1, got {k}")
    x_pred, y_pred = sample_xy(sample)
    pool = list(candidates)
    chosen: list[QASample] = []
    while pool and len(chosen) < k:
        prefix = [sample_xy(d) for d in chosen]
        prompts = [
            serialize(PromptSpec(demos=prefix + [sample_xy(c)], x_pred=x_pred), style)
            for c in pool
        ]
        scored = scorer.score_batch([(p, y_pred) for p in prompts])
        best = min(
            range(len(pool)), key=lambda i: (scored[i].aggregate(aggregate), pool[i].id)
        )
        chosen.append(pool.pop(best))
    return chosen


def random_select(dataset: list[QASample], sample: QASample, k: int, rng) -> list[QASample]:
    """Uniform without replacement over the dataset, self excluded."""
    others = [s for s in dataset if s.id != sample.id]
    if len(others) < k:
        raise InsufficientSamples(f"need {k} demos, only {len(others)} other samples exist")
    return rng.sample(others, k)


@dataclass
class SelectionConfig:
    seed: int
    k_min: int = 2
    k_max: int = 8
    m: int = 20
    aggregate: str = "arithmetic"
    style: PromptStyle = field(default_factory=PromptStyle)

    def validate(self) -> None:
        if not (1 <= self.k_min <= self.k_max):
            raise ConfigInvalid(f"need 1 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")
        if self.m < 1:
            raise ConfigInvalid("candidate pool size m must be >= 1")


def build_training_prompts(
    dataset: list[QASample],
    strategy: DemoStrategy,
    scorer: Scorer | None,
    config: SelectionConfig,
) -> tuple[list[PromptSpec], dict]:
    """One PromptSpec per eligible sample of `dataset` (pass the train split).

    Per-prompt k is uniform over {k_min..k_max}. Samples with no
    concept-sharing peers (or, for RANDOM, no other samples at all) are
    skipped and tallied in the report.
    """
    config.validate()
    if strategy is DemoStrategy.COAT and scorer is None:
        raise ConfigInvalid("the coat strategy requires a scorer")
    index = index_by_concept(dataset)
    by_id = {s.id: s for s in dataset}
    prompts: list[PromptSpec] = []
    reasons: dict[str, int] = {}
    for sample in dataset:
        rng = derive_rng(config.seed, "prompt", sample.id)
        k = rng.randint(config.k_min, config.k_max)
        try:
            if strategy is DemoStrategy.RANDOM:
                k_eff = min(k, len(dataset) - 1)
                if k_eff < 1:
                    raise ConceptUnderpopulated("no other samples to draw from")
                demo_samples = random_select(dataset, sample, k_eff, rng)
            else:
                cand_ids = informative_candidates(index, sample, config.m, rng)
                cands = [by_id[i] for i in cand_ids]
                if strategy is DemoStrategy.COAT:
                    demo_samples = nontrivial_select(
                        cands, sample, k, scorer, config.style, config.aggregate
                    )
                else:
                    demo_samples = rng.sample(cands, min(k, len(cands)))
        except ConceptUnderpopulated:
            reasons["concept_underpopulated"] = reasons.get("concept_underpopulated", 0) + 1
            continue
        x_pred, y_pred = sample_xy(sample)
        prompts.append(
            PromptSpec(
                demos=[sample_xy(d) for d in demo_samples],
                x_pred=x_pred,
                y_pred=y_pred,
                k=len(demo_samples),
                sep=config.style.sep,
                sample_id=sample.id,
                strategy=strategy.value,
                concept=sample.concept,
            )
        )
    report = {"skipped": sum(reasons.values()), "reasons": reasons}
    return prompts, report


def write_prompts_jsonl(prompts: list[PromptSpec], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for prompt in prompts:
            fh.write(json.dumps(prompt.to_json(), ensure_ascii=False))
            fh.write("\n")


def load_prompts_jsonl(path: str | Path) -> list[PromptSpec]:
    prompts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                prompts.append(PromptSpec.from_json(json.loads(line)))
    return prompts
