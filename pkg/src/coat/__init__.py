"""Concept-aware training-data construction for in-context learning.

Pipeline: synthesize concept-annotated QA data from executable reasoning
chains, select demonstrations that share the predicted sample's concept
and minimize the training model's target likelihood, train a small
from-scratch LM on the resulting prompts, and measure concept gain with
a bootstrap evaluation harness.
"""

from . import errors
from .evalharness import (
    ComparisonOutcome,
    DemoMode,
    EvalReport,
    PerturbMode,
    Prediction,
    bootstrap_ci,
    compare_tasks,
    concept_gain,
    exact_match,
    perturb_labels,
    rouge_l,
    run_eval,
)
from .promptfmt import PromptKind, PromptSpec, PromptStyle, parse, serialize
from .scorers import (
    LocalModelScorer,
    LookupScorer,
    RemoteScorer,
    Scorer,
    TokenLikelihoods,
    UniformScorer,
    build_scorer,
)
from .selection import (
    ConceptIndex,
    DemoStrategy,
    SelectionConfig,
    build_training_prompts,
    index_by_concept,
    informative_candidates,
    likelihood_of_target,
    nontrivial_select,
    random_select,
    sample_xy,
)
from .taskgen import (
    DatasetConfig,
    OpKind,
    Operation,
    QASample,
    ReasoningChain,
    Record,
    Split,
    SyntheticContext,
    execute_chain,
    generate_dataset,
    initial_word_concept,
    render_sample,
    validate_chain,
)

__version__ = "0.1.0"
