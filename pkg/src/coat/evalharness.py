"""Measurement machinery: metrics, bootstrap CIs, demo-mode evaluation,
label perturbations, and CI-overlap task comparison.

Evaluation-side demo selection is deliberately simpler than training
construction: concept-sharing demos are drawn uniformly from concept
peers; the non-triviality condition is a training-time device only.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    ConfigInvalid,
    EmptyEvalSet,
    LabelSpaceTooLarge,
    NoDerangement,
    TaskSetMismatch,
)
from .promptfmt import PromptSpec, PromptStyle, parse, serialize
from .seeding import derive_np_rng, derive_rng
from .selection import index_by_concept, sample_xy
from .taskgen import QASample


class DemoMode(str, Enum):
    RANDOM_DEMOS = "random_demos"
    CONCEPT_DEMOS = "concept_demos"


class PerturbMode(str, Enum):
    NONE = "none"
    NONSENSE = "nonsense"
    FLIPPED = "flipped"


@dataclass
class Prediction:
    sample_id: str
    prompt: str
    gold: str
    output: str
    demo_mode: DemoMode
    perturb: PerturbMode

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "prompt": self.prompt,
            "gold": self.gold,
            "output": self.output,
            "demo_mode": self.demo_mode.value,
            "perturb": self.perturb.value,
        }


@dataclass
class EvalReport:
    metric: str
    mean: float
    ci_lo: float
    ci_hi: float
    n: int
    config_digest: str = ""

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
            "config_digest": self.config_digest,
        }


@dataclass
class ComparisonOutcome:
    wins_a: int
    wins_b: int
    similar: int


# --- metrics ---

def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 over lowercased whitespace tokens."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def _normalize(text: str) -> str:
    lowered = re.sub(r"[^0-9a-z\s]", "", text.lower())
    return " ".join(lowered.split())


def exact_match(candidate: str, reference: str) -> int:
    """1 iff the two normalize to the same string (case/punctuation folded)."""
    return int(_normalize(candidate) == _normalize(reference))


METRICS: dict[str, Callable[[str, str], float]] = {
    "rouge_l": rouge_l,
    "exact_match": exact_match,
}


def bootstrap_ci(
    scores: list[float],
    n: int = 100,
    r: int = 200,
    level: float = 0.95,
    rng: np.random.Generator | None = None,
) -> tuple[float, float, float]:
    """(mean of resample means, CI low, CI high) by percentile bootstrap."""
    if not scores:
        raise ConfigInvalid("bootstrap over an empty score list")
    if rng is None:
        rng = derive_np_rng(0, "bootstrap")
    arr = np.asarray(scores, dtype=np.float64)
    draws = rng.integers(0, len(arr), size=(r, n))
    means = arr[draws].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(means.mean()), float(lo), float(hi)


# --- label perturbation ---

NONSENSE_VOCAB = [
    "foo", "bar", "baz", "qux", "quux", "corge", "grault", "garply",
    "waldo", "fred", "plugh", "xyzzy", "thud", "spam", "ham", "eggs",
    "wibble", "wobble", "wubble", "flob",
]

MAX_LABEL_SPACE = 20


@dataclass
class PerturbedEvalset:
    """Eval samples plus one label bijection per evaluation instance."""

    samples: list[QASample]
    mode: PerturbMode
    mappings: dict[str, dict[str, str]]

    def map_label(self, instance_id: str, label: str) -> str:
        if self.mode is PerturbMode.NONE:
            return label
        return self.mappings[instance_id][label]


def _derangement(labels: list[str], rng) -> dict[str, str]:
    if len(labels) < 2:
        raise NoDerangement("a derangement needs at least 2 labels")
    while True:
        perm = list(labels)
        rng.shuffle(perm)
        if all(a != b for a, b in zip(labels, perm)):
            return dict(zip(labels, perm))


def perturb_labels(
    evalset: list[QASample], mode: PerturbMode, seed: int
) -> PerturbedEvalset:
    """Per-instance label bijections: NONSENSE into metasyntactic tokens,
    FLIPPED into a derangement of the original label set. Both demo labels
    and the scored gold go through the instance's bijection."""
    if mode is PerturbMode.NONE:
        return PerturbedEvalset(list(evalset), mode, {})
    labels = sorted({s.answer for s in evalset})
    if len(labels) > MAX_LABEL_SPACE:
        raise LabelSpaceTooLarge(
            f"{len(labels)} distinct golds exceed the {MAX_LABEL_SPACE}-label cap"
        )
    mappings: dict[str, dict[str, str]] = {}
    for sample in evalset:
        rng = derive_rng(seed, "perturb", mode.value, sample.id)
        if mode is PerturbMode.NONSENSE:
            tokens = rng.sample(NONSENSE_VOCAB, len(labels))
            mappings[sample.id] = dict(zip(labels, tokens))
        else:
            mappings[sample.id] = _derangement(labels, rng)
    return PerturbedEvalset(list(evalset), mode, mappings)


# --- evaluation runs ---

Predictor = Callable[[str], str]


def run_eval(
    predictor: Predictor,
    evalset: list[QASample] | PerturbedEvalset,
    demo_mode: DemoMode,
    k: int = 3,
    metric: str = "exact_match",
    style: PromptStyle | None = None,
    seed: int = 0,
    config_digest: str = "",
    n: int = 100,
    r: int = 200,
) -> tuple[EvalReport, list[Prediction], dict]:
    """Prompt-build, predict, score, bootstrap.

    Demo draws depend only on (seed, demo_mode, sample id), so two
    predictors evaluated with the same seed see identical prompts.
    """
    if isinstance(evalset, PerturbedEvalset):
        wrapped = evalset
    else:
        wrapped = PerturbedEvalset(list(evalset), PerturbMode.NONE, {})
    if not wrapped.samples:
        raise EmptyEvalSet("evaluation set is empty")
    if metric not in METRICS:
        raise ConfigInvalid(f"unknown metric {metric!r}")
    style = PromptStyle() if style is None else style
    metric_fn = METRICS[metric]
    index = index_by_concept(wrapped.samples)
    by_id = {s.id: s for s in wrapped.samples}

    predictions: list[Prediction] = []
    scores: list[float] = []
    reasons: dict[str, int] = {}
    for sample in wrapped.samples:
        rng = derive_rng(seed, "demos", demo_mode.value, sample.id)
        if demo_mode is DemoMode.CONCEPT_DEMOS:
            pool_ids = [i for i in index.members(sample.concept) if i != sample.id]
            reason = "insufficient_concept_peers"
        else:
            pool_ids = [i for i in by_id if i != sample.id]
            reason = "insufficient_samples"
        if len(pool_ids) < k:
            reasons[reason] = reasons.get(reason, 0) + 1
            continue
        demo_ids = rng.sample(pool_ids, k)
        demos = []
        for did in demo_ids:
            demo = by_id[did]
            demos.append((sample_xy(demo)[0], wrapped.map_label(sample.id, demo.answer)))
        x_pred = sample_xy(sample)[0]
        gold = wrapped.map_label(sample.id, sample.answer)
        prompt = serialize(PromptSpec(demos=demos, x_pred=x_pred), style)
        output = predictor(prompt)
        predictions.append(
            Prediction(sample.id, prompt, gold, output, demo_mode, wrapped.mode)
        )
        scores.append(float(metric_fn(output, gold)))

    if not scores:
        raise EmptyEvalSet("no evaluable samples (all skipped)")
    mean, lo, hi = bootstrap_ci(
        scores, n=n, r=r, rng=derive_np_rng(seed, "bootstrap", demo_mode.value)
    )
    report = EvalReport(metric, mean, lo, hi, len(scores), config_digest)
    skip_report = {"skipped": sum(reasons.values()), "reasons": reasons}
    return report, predictions, skip_report


@dataclass
class ConceptGain:
    concept_mean: float
    random_mean: float
    absolute: float
    relative: float | None
    flagged_zero_denominator: bool

    @property
    def value(self) -> float:
        return self.absolute if self.flagged_zero_denominator else self.relative

    def to_json(self) -> dict:
        return {
            "concept_mean": self.concept_mean,
            "random_mean": self.random_mean,
            "absolute": self.absolute,
            "relative": self.relative,
            "flagged_zero_denominator": self.flagged_zero_denominator,
        }


def gain_from_means(concept_mean: float, random_mean: float) -> ConceptGain:
    """Relative concept gain; absolute delta with a flag when the random
    baseline is exactly zero."""
    flagged = random_mean == 0.0
    delta = concept_mean - random_mean
    return ConceptGain(
        concept_mean=concept_mean,
        random_mean=random_mean,
        absolute=delta,
        relative=None if flagged else delta / random_mean,
        flagged_zero_denominator=flagged,
    )


def concept_gain(
    predictor: Predictor,
    evalset: list[QASample],
    k: int = 3,
    metric: str = "exact_match",
    style: PromptStyle | None = None,
    seed: int = 0,
    n: int = 100,
    r: int = 200,
) -> ConceptGain:
    """(concept-demo score − random-demo score) / random-demo score."""
    concept_report, _, _ = run_eval(
        predictor, evalset, DemoMode.CONCEPT_DEMOS, k, metric, style, seed, n=n, r=r
    )
    random_report, _, _ = run_eval(
        predictor, evalset, DemoMode.RANDOM_DEMOS, k, metric, style, seed, n=n, r=r
    )
    return gain_from_means(concept_report.mean, random_report.mean)


# --- oracle predictors (harness self-tests) ---

def semantic_oracle(evalset: list[QASample], style: PromptStyle | None = None) -> Predictor:
    """Emits the original-semantics gold for x_pred, ignoring the demos."""
    style = PromptStyle() if style is None else style
    truth = {sample_xy(s)[0]: s.answer for s in evalset}

    def predict(prompt: str) -> str:
        spec = parse(prompt, style)
        return truth.get(spec.x_pred, "")

    return predict


def functional_oracle(evalset: list[QASample], style: PromptStyle | None = None) -> Predictor:
    """Learns the original-label → demo-label mapping from the prompt and
    applies it to x_pred's original label."""
    style = PromptStyle() if style is None else style
    truth = {sample_xy(s)[0]: s.answer for s in evalset}

    def predict(prompt: str) -> str:
        spec = parse(prompt, style)
        mapping = {}
        for x, y in spec.demos:
            if x in truth:
                mapping[truth[x]] = y
        original = truth.get(spec.x_pred, "")
        return mapping.get(original, original)

    return predict


def copy_last_demo_label(style: PromptStyle | None = None) -> Predictor:
    style = PromptStyle() if style is None else style

    def predict(prompt: str) -> str:
        spec = parse(prompt, style)
        return spec.demos[-1][1] if spec.demos else ""

    return predict


# --- task comparison ---

def compare_tasks(
    reports_a: dict[str, EvalReport], reports_b: dict[str, EvalReport]
) -> ComparisonOutcome:
    """Wins by strict bootstrap-CI disjointness, per paired task id."""
    if set(reports_a) != set(reports_b):
        raise TaskSetMismatch("task id sets differ between the two report maps")
    wins_a = wins_b = similar = 0
    for task in sorted(reports_a):
        a, b = reports_a[task], reports_b[task]
        if a.metric != b.metric:
            raise TaskSetMismatch(f"task {task!r} compared across different metrics")
        if a.ci_lo > b.ci_hi:
            wins_a += 1
        elif b.ci_lo > a.ci_hi:
            wins_b += 1
        else:
            similar += 1
    return ComparisonOutcome(wins_a, wins_b, similar)


# --- artifact writers ---

def write_predictions_jsonl(predictions: list[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pred in predictions:
            fh.write(json.dumps(pred.to_json(), ensure_ascii=False))
            fh.write("\n")


def write_reports_csv(rows: list[tuple[str, EvalReport]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "metric", "mean", "ci_lo", "ci_hi", "n"])
        for task, rep in rows:
            writer.writerow([task, rep.metric, repr(rep.mean), repr(rep.ci_lo), repr(rep.ci_hi), rep.n])


def reports_markdown(rows: list[tuple[str, EvalReport]]) -> str:
    lines = [
        "| task | metric | mean | 95% CI | n |",
        "| --- | --- | --- | --- | --- |",
    ]
    for task, rep in rows:
        lines.append(
            f"| {task} | {rep.metric} | {rep.mean:.4f} | [{rep.ci_lo:.4f}, {rep.ci_hi:.4f}] | {rep.n} |"
        )
    return "\n".join(lines) + "\n"
