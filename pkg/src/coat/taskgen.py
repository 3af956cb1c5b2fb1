"""Synthetic concept-annotated QA generation.

Latent concepts are executable reasoning chains: small programs over a
pool of (attribute, value) records that a stack machine evaluates to the
answer. Two instantiations of the same program shape share one concept
key, which is what the selection stage filters on.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import (
    ArityUnderflow,
    ConfigInvalid,
    EmptyChain,
    EmptyQuestion,
    EntityAbsent,
    NonTerminalEnd,
    SelectNotFirst,
)
from .seeding import derive_rng


class OpKind(str, Enum):
    SELECT = "select"
    FILTER_EQ = "filter_eq"
    MAXIMUM = "maximum"
    MINIMUM = "minimum"
    LIST = "list"
    SUM = "sum"
    COUNT = "count"
    DIFFERENCE = "difference"


POP_KINDS = (OpKind.MAXIMUM, OpKind.MINIMUM)
TERMINAL_KINDS = (OpKind.SUM, OpKind.COUNT, OpKind.DIFFERENCE, OpKind.MAXIMUM, OpKind.MINIMUM)


@dataclass(frozen=True)
class Operation:
    kind: OpKind
    # SELECT binds an entity name, FILTER_EQ an attribute label; other
    # kinds never carry a parameter.
    param: str | None = None


@dataclass(frozen=True)
class ReasoningChain:
    steps: tuple[Operation, ...]

    @property
    def key(self) -> str:
        """Canonical concept key: step kinds only, parameters excluded."""
        return "->".join(op.kind.value for op in self.steps)

    def instantiate(self, entity: str, filter_attr: str | None = None) -> "ReasoningChain":
        bound = []
        for op in self.steps:
            if op.kind is OpKind.SELECT:
                bound.append(replace(op, param=entity))
            elif op.kind is OpKind.FILTER_EQ:
                bound.append(replace(op, param=filter_attr))
            else:
                bound.append(op)
        return ReasoningChain(tuple(bound))

    @property
    def entity(self) -> str | None:
        return self.steps[0].param if self.steps else None

    @property
    def filter_attr(self) -> str | None:
        for op in self.steps:
            if op.kind is OpKind.FILTER_EQ:
                return op.param
        return None


def chain_from_key(key: str) -> ReasoningChain:
    """Rebuild an uninstantiated chain from its canonical key."""
    kinds = []
    for part in key.split("->"):
        try:
            kinds.append(OpKind(part))
        except ValueError:
            raise ConfigInvalid(f"unknown operation kind in chain key: {part!r}")
    return ReasoningChain(tuple(Operation(k) for k in kinds))


def pops_required(chain: ReasoningChain) -> int:
    """Records the pool must hold for the chain to run to completion."""
    return sum(1 for op in chain.steps if op.kind in POP_KINDS)


def validate_chain(chain: ReasoningChain) -> None:
    """Type-check a chain under the stack semantics; raises on violation.

    Rules: SELECT opens the chain (and appears nowhere else); the final
    step is terminal (SUM/COUNT/DIFFERENCE, or a MAXIMUM/MINIMUM whose
    popped value is the answer); reducers never appear mid-chain; SUM
    and DIFFERENCE need enough values accumulated by earlier pops.
    """
    steps = chain.steps
    if not steps:
        raise EmptyChain("chain has no operations")
    if steps[0].kind is not OpKind.SELECT:
        raise SelectNotFirst(f"chain must start with select, got {steps[0].kind.value}")
    for op in steps[1:]:
        if op.kind is OpKind.SELECT:
            raise SelectNotFirst("select is only allowed as the first step")
    last = steps[-1]
    if last.kind not in TERMINAL_KINDS:
        raise NonTerminalEnd(f"chain ends in non-terminal {last.kind.value}")
    for op in steps[:-1]:
        if op.kind in (OpKind.SUM, OpKind.COUNT, OpKind.DIFFERENCE):
            raise NonTerminalEnd(f"{op.kind.value} may only appear as the final step")
    accumulated = sum(1 for op in steps[:-1] if op.kind in POP_KINDS)
    if last.kind is OpKind.DIFFERENCE and accumulated < 2:
        raise ArityUnderflow(f"difference needs 2 accumulated values, chain pops {accumulated}")
    if last.kind is OpKind.SUM and accumulated < 1:
        raise ArityUnderflow("sum over an empty accumulator")


@dataclass(frozen=True)
class Record:
    entity: str
    attribute: str
    value: int


@dataclass
class SyntheticContext:
    records: list[Record]

    def entities(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.entity not in seen:
                seen.append(r.entity)
        return seen

    def render(self) -> str:
        return " ".join(f"{r.attribute} of {r.entity}. {r.value}" for r in self.records)


def execute_chain(chain: ReasoningChain, context: SyntheticContext, entity: str) -> str:
    """Run the stack machine and render the answer as text.

    SELECT loads the entity's records as the pool; MAXIMUM/MINIMUM pop
    the extremal value (first record attaining it) into the accumulator;
    LIST keeps the reduced pool live; SUM totals the accumulator, COUNT
    reports pool size, DIFFERENCE reports acc[0]-acc[1]. A terminal
    MAXIMUM/MINIMUM answers with the popped value itself.
    """
    validate_chain(chain)
    pool = [r for r in context.records if r.entity == entity]
    if not pool:
        raise EntityAbsent(f"entity {entity!r} has no records in context")
    acc: list[int] = []
    answer: int | None = None
    for i, op in enumerate(chain.steps):
        terminal = i == len(chain.steps) - 1
        if op.kind is OpKind.SELECT:
            continue
        if op.kind is OpKind.FILTER_EQ:
            if op.param is None:
                raise ConfigInvalid("filter_eq executed without a bound attribute")
            pool = [r for r in pool if r.attribute == op.param]
        elif op.kind in POP_KINDS:
            if not pool:
                raise ArityUnderflow(f"{op.kind.value} on an empty pool")
            pick = max if op.kind is OpKind.MAXIMUM else min
            extremum = pick(r.value for r in pool)
            idx = next(j for j, r in enumerate(pool) if r.value == extremum)
            pool.pop(idx)
            acc.append(extremum)
            if terminal:
                answer = extremum
        elif op.kind is OpKind.LIST:
            continue
        elif op.kind is OpKind.SUM:
            answer = sum(acc)
        elif op.kind is OpKind.COUNT:
            answer = len(pool)
        elif op.kind is OpKind.DIFFERENCE:
            if len(acc) < 2:
                raise ArityUnderflow("difference with fewer than 2 accumulated values")
            answer = acc[0] - acc[1]
    assert answer is not None
    return str(answer)


# --- samples and datasets ---

class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class QASample:
    id: str
    question: str
    context: str
    answer: str
    concept: str
    split: Split

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "answer": self.answer,
            "concept": self.concept,
            "split": self.split.value,
        }


DEFAULT_ENTITIES = [
    "bell 212", "monte vesuvio", "pentagon", "s-50", "red baron",
    "blue comet", "iron duke", "silver arrow", "green hornet",
    "golden eagle", "black pearl", "white falcon", "north star",
    "sea breeze", "desert fox", "mountain lion",
]

DEFAULT_ATTRIBUTES = ["points", "scores of games", "laps", "goals", "wins", "marks"]


@dataclass
class DatasetConfig:
    n_chains: int
    samples_per_chain: int
    heldout_chain_fraction: float
    seed: int
    value_range: tuple[int, int] = (0, 99)
    entity_vocabulary: list[str] = field(default_factory=lambda: list(DEFAULT_ENTITIES))
    attribute_vocabulary: list[str] = field(default_factory=lambda: list(DEFAULT_ATTRIBUTES))
    max_extra_records: int = 2
    distractor_range: tuple[int, int] = (1, 3)

    def validate(self) -> None:
        if self.n_chains < 1 or self.samples_per_chain < 1:
            raise ConfigInvalid("n_chains and samples_per_chain must be positive")
        if not (0.0 <= self.heldout_chain_fraction < 1.0):
            raise ConfigInvalid("heldout_chain_fraction must be in [0, 1)")
        lo, hi = self.value_range
        if lo >= hi:
            raise ConfigInvalid(f"degenerate value_range {self.value_range}")
        if not self.entity_vocabulary or not self.attribute_vocabulary:
            raise ConfigInvalid("entity and attribute vocabularies must be non-empty")

    def to_json(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "samples_per_chain": self.samples_per_chain,
            "heldout_chain_fraction": self.heldout_chain_fraction,
            "seed": self.seed,
            "value_range": list(self.value_range),
            "entity_vocabulary": self.entity_vocabulary,
            "attribute_vocabulary": self.attribute_vocabulary,
            "max_extra_records": self.max_extra_records,
            "distractor_range": list(self.distractor_range),
        }


# --- question templating ---

GENERIC_TEMPLATE = "apply {key} to {entity}"

_NUM_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"]
_ORDINALS = ["zeroth", "first", "second", "third", "fourth", "fifth", "sixth"]


def default_registry() -> dict[str, list[str]]:
    """Question-template families keyed by chain key, from the packaged data file."""
    payload = resources.files("coat").joinpath("data/templates.json").read_text("utf-8")
    return json.loads(payload)


def _pop_word(kind: OpKind) -> str:
    return "highest" if kind is OpKind.MAXIMUM else "lowest"


def _pops_phrase(pops: list[OpKind]) -> str:
    if len(pops) == 1:
        return _pop_word(pops[0])
    if all(k is pops[0] for k in pops):
        return f"{_NUM_WORDS[len(pops)]} {_pop_word(pops[0])}"
    return " and ".join(_pop_word(k) for k in pops)


def compose_template_family(chain: ReasoningChain) -> list[str]:
    """Build question templates paraphrasing the chain.

    Placeholders: {entity} and {attribute}. Returns surface variants so
    questions are not word-for-word identical within a chain family.
    """
    kinds = [op.kind for op in chain.steps]
    pops = [k for k in kinds[:-1] if k in POP_KINDS]
    terminal = kinds[-1]
    if terminal is OpKind.SUM:
        phrase = _pops_phrase(pops)
        return [
            "what is the sum of the " + phrase + " {attribute} of {entity} ?",
            "how many {attribute} did {entity} total over their " + phrase + " entries ?",
        ]
    if terminal is OpKind.COUNT:
        if not pops:
            return [
                "how many {attribute} entries does {entity} have ?",
                "what is the number of {attribute} entries of {entity} ?",
            ]
        phrase = _pops_phrase(pops)
        return [
            "how many {attribute} entries of {entity} remain after taking out the " + phrase + " ?",
        ]
    if terminal is OpKind.DIFFERENCE:
        first, second = _pop_word(pops[0]), _pop_word(pops[1])
        if pops[0] is pops[1]:
            first, second = _pop_word(pops[0]), "second " + _pop_word(pops[1])
        return [
            "what is the difference between the " + first + " and the " + second
            + " {attribute} of {entity} ?",
        ]
    # terminal MAXIMUM / MINIMUM: the popped value is the answer
    if not pops:
        word = _pop_word(terminal)
        return [
            "what is the " + word + " {attribute} of {entity} ?",
            "which value is the " + word + " among the {attribute} of {entity} ?",
        ]
    if all(k is terminal for k in pops):
        rank = _ORDINALS[len(pops) + 1]
        return ["what is the " + rank + " " + _pop_word(terminal) + " {attribute} of {entity} ?"]
    return [
        "after taking out the " + _pops_phrase(pops) + " , what is the "
        + _pop_word(terminal) + " {attribute} of {entity} ?",
    ]


def registry_for_chains(chains: list[ReasoningChain]) -> dict[str, list[str]]:
    """Packaged registry plus composed families for every given chain."""
    registry = default_registry()
    for chain in chains:
        registry.setdefault(chain.key, compose_template_family(chain))
    return registry


def render_sample(
    chain: ReasoningChain,
    context: SyntheticContext,
    answer: str,
    rng,
    *,
    sample_id: str = "",
    split: Split = Split.TRAIN,
    registry: dict[str, list[str]] | None = None,
) -> QASample:
    """Render an instantiated chain + context into a QASample.

    Falls back to the generic template (which names the chain key) when
    the chain has no registered question family.
    """
    entity = chain.entity
    if entity is None:
        raise ConfigInvalid("render_sample requires an instantiated chain")
    attribute = chain.filter_attr
    if attribute is None:
        owned = [r.attribute for r in context.records if r.entity == entity]
        attribute = owned[0] if owned else ""
    registry = default_registry() if registry is None else registry
    family = registry.get(chain.key)
    if family:
        template = family[rng.randrange(len(family))]
        question = template.format(entity=entity, attribute=attribute)
    else:
        question = GENERIC_TEMPLATE.format(key=chain.key, entity=entity)
    return QASample(
        id=sample_id,
        question=question,
        context=context.render(),
        answer=answer,
        concept=chain.key,
        split=split,
    )


def initial_word_concept(question: str) -> str:
    """Naive concept for natural questions: first token, lowercased, stripped."""
    trimmed = question.strip()
    if not trimmed:
        raise EmptyQuestion("question is empty after trimming")
    return re.sub(r"[^0-9a-z]", "", trimmed.split()[0].lower())


# --- random chain inventory ---

def _random_chain(rng) -> ReasoningChain:
    terminal = rng.choice(
        [OpKind.SUM, OpKind.SUM, OpKind.COUNT, OpKind.DIFFERENCE, OpKind.MAXIMUM, OpKind.MINIMUM]
    )
    use_filter = rng.random() < 0.25
    if terminal is OpKind.SUM:
        n_pops = rng.randint(1, 3)
        kind = rng.choice(POP_KINDS)
        pops = [kind] * n_pops
    elif terminal is OpKind.COUNT:
        n_pops = rng.randint(0, 2)
        pops = [rng.choice(POP_KINDS) for _ in range(n_pops)]
    elif terminal is OpKind.DIFFERENCE:
        pops = [rng.choice(POP_KINDS), rng.choice(POP_KINDS)]
    else:
        n_pops = rng.randint(0, 2)
        pops = [terminal] * n_pops
    steps: list[Operation] = [Operation(OpKind.SELECT)]
    if use_filter:
        steps.append(Operation(OpKind.FILTER_EQ))
    for i, kind in enumerate(pops):
        steps.append(Operation(kind))
        if (i < len(pops) - 1 or terminal is not kind) and rng.random() < 0.5:
            steps.append(Operation(OpKind.LIST))
    steps.append(Operation(terminal))
    chain = ReasoningChain(tuple(steps))
    validate_chain(chain)
    return chain


def build_chain_inventory(n_chains: int, rng) -> list[ReasoningChain]:
    chains: list[ReasoningChain] = []
    keys: set[str] = set()
    attempts = 0
    while len(chains) < n_chains:
        attempts += 1
        if attempts > 200 * n_chains:
            raise ConfigInvalid(f"could not find {n_chains} distinct chain shapes")
        chain = _random_chain(rng)
        if chain.key not in keys:
            keys.add(chain.key)
            chains.append(chain)
    return chains


# --- dataset generation ---

@dataclass
class Provenance:
    chain: ReasoningChain
    context: SyntheticContext
    entity: str


def _random_context(
    chain: ReasoningChain, entity: str, cfg: DatasetConfig, rng
) -> tuple[SyntheticContext, ReasoningChain]:
    """Context with enough target records for the chain, plus distractors."""
    lo, hi = cfg.value_range
    needs_filter = any(op.kind is OpKind.FILTER_EQ for op in chain.steps)
    attrs = list(cfg.attribute_vocabulary)
    rng.shuffle(attrs)
    attribute = attrs[0]
    bound = chain.instantiate(entity, attribute if needs_filter else None)

    n_target = max(2, pops_required(chain)) + rng.randint(0, cfg.max_extra_records)
    records = [Record(entity, attribute, rng.randint(lo, hi)) for _ in range(n_target)]
    if needs_filter and len(attrs) > 1:
        # off-attribute records for the same entity, so the filter matters
        other = attrs[1]
        for _ in range(rng.randint(1, 2)):
            records.append(Record(entity, other, rng.randint(lo, hi)))

    others = [e for e in cfg.entity_vocabulary if e != entity]
    rng.shuffle(others)
    d_lo, d_hi = cfg.distractor_range
    for distractor in others[: rng.randint(d_lo, d_hi)]:
        for _ in range(rng.randint(1, 3)):
            records.append(Record(distractor, attribute, rng.randint(lo, hi)))
    rng.shuffle(records)
    return SyntheticContext(records), bound


def generate_with_provenance(
    config: DatasetConfig,
) -> tuple[list[QASample], dict[str, Provenance]]:
    config.validate()
    inventory_rng = derive_rng(config.seed, "chains")
    chains = build_chain_inventory(config.n_chains, inventory_rng)
    n_heldout = min(int(round(config.n_chains * config.heldout_chain_fraction)), config.n_chains - 1)
    order = list(range(config.n_chains))
    inventory_rng.shuffle(order)
    heldout = set(order[:n_heldout])

    registry = registry_for_chains(chains)
    samples: list[QASample] = []
    provenance: dict[str, Provenance] = {}
    for ci, chain in enumerate(chains):
        split = Split.EVAL if ci in heldout else Split.TRAIN
        for si in range(config.samples_per_chain):
            rng = derive_rng(config.seed, "sample", ci, si)
            entity = config.entity_vocabulary[rng.randrange(len(config.entity_vocabulary))]
            context, bound = _random_context(chain, entity, config, rng)
            answer = execute_chain(bound, context, entity)
            sample = render_sample(
                bound,
                context,
                answer,
                rng,
                sample_id=f"c{ci:03d}-s{si:03d}",
                split=split,
                registry=registry,
            )
            samples.append(sample)
            provenance[sample.id] = Provenance(bound, context, entity)
    return samples, provenance


def generate_dataset(config: DatasetConfig) -> list[QASample]:
    """Deterministic dataset of self-consistent QASamples for a config."""
    samples, _ = generate_with_provenance(config)
    return samples


# --- JSONL interface ---

_REQUIRED_FIELDS = ("id", "question", "context", "answer", "concept", "split")


def write_dataset_jsonl(samples: list[QASample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_json(), ensure_ascii=False))
            fh.write("\n")


def load_dataset_jsonl(path: str | Path) -> list[QASample]:
    """Load dataset JSONL; also the contract for user-supplied datasets."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}:{lineno}: not valid JSON ({exc})")
            for key in _REQUIRED_FIELDS:
                if key not in obj or not isinstance(obj[key], str):
                    raise ConfigInvalid(f"{path}:{lineno}: missing or non-string field {key!r}")
            try:
                split = Split(obj["split"])
            except ValueError:
                raise ConfigInvalid(f"{path}:{lineno}: split must be 'train' or 'eval'")
            samples.append(
                QASample(
                    id=obj["id"],
                    question=obj["question"],
                    context=obj["context"],
                    answer=obj["answer"],
                    concept=obj["concept"],
                    split=split,
                )
            )
    return samples
