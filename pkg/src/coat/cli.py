"""Command-line pipeline: generate -> select -> train -> eval -> compare.

Every run is seeded and every artifact gets a .meta.json sidecar with
the digest of the producing config; downstream stages recompute the
digest from their supplied config and refuse mismatched inputs.
Artifacts carry no timestamps, so identical configs reproduce identical
bytes.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from .errors import (
    CoatError,
    ConfigInvalid,
    DigestMismatch,
    EmptyEvalSet,
    UsageError,
)
from .evalharness import (
    DemoMode,
    EvalReport,
    PerturbMode,
    gain_from_means,
    perturb_labels,
    reports_markdown,
    run_eval,
    write_predictions_jsonl,
    write_reports_csv,
)
from .microlm import (
    MicroLM,
    ModelConfig,
    TrainConfig,
    build_tokenizer,
    corpus_from_prompts,
    load_checkpoint,
    tokenize_prompts,
    train,
    write_loss_log,
)
from .promptfmt import PromptStyle
from .scorers import build_scorer
from .seeding import canonical_json, config_digest, derive_rng
from .selection import (
    DemoStrategy,
    SelectionConfig,
    build_training_prompts,
    load_prompts_jsonl,
    sample_xy,
    write_prompts_jsonl,
)
from .taskgen import (
    DatasetConfig,
    QASample,
    Split,
    generate_dataset,
    load_dataset_jsonl,
    write_dataset_jsonl,
)

DEFAULT_CONFIG: dict = {
    "generate": {
        "n_chains": 10,
        "samples_per_chain": 50,
        "heldout_chain_fraction": 0.2,
        "value_range": [0, 99],
        "max_extra_records": 2,
        "distractor_range": [1, 3],
    },
    "select": {
        "strategy": "random",
        "k_min": 2,
        "k_max": 8,
        "m": 20,
        "aggregate": "arithmetic",
        "split": "train",
    },
    "style": {"input_tag": "Input:", "pred_tag": "Prediction:", "sep": "\n", "instruction": None},
    "model": {"d_model": 64, "n_layers": 2, "n_heads": 2, "context_len": 512},
    "train": {
        "learning_rate": 5e-5,
        "batch_size": 30,
        "patience": 2000,
        "max_steps": 2000,
        "eval_every": 100,
        "eval_fraction": 0.1,
    },
    "eval": {
        "k": 3,
        "metric": "exact_match",
        "n": 100,
        "r": 200,
        "demo_mode": "both",
        "perturb": "none",
        "max_new_tokens": 8,
        "split": "eval",
    },
    "scorer": None,
}

# Cumulative config sections that determine each stage's outputs.
STAGE_SCOPES: dict[str, tuple[str, ...]] = {
    "generate": ("generate",),
    "select": ("generate", "select", "style", "scorer"),
    "train": ("generate", "select", "style", "scorer", "model", "train"),
    "eval": ("generate", "select", "style", "scorer", "model", "train", "eval"),
}

STRATEGY_ALIASES = {
    "random": DemoStrategy.RANDOM,
    "info": DemoStrategy.INFO_ONLY,
    "info_only": DemoStrategy.INFO_ONLY,
    "coat": DemoStrategy.COAT,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="run seed (mandatory here or in config)")
    common.add_argument("--workers", type=int, default=1, help="parallelism bound")

    parser = _Parser(prog="coat", description="concept-aware prompt construction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="emit a synthetic dataset JSONL")
    p.add_argument("--out", required=True)

    p = sub.add_parser("select", parents=[common], help="build training prompts from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES))
    p.add_argument("--scorer", choices=["uniform", "lookup", "local", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--table", help="lookup scorer table JSON")
    p.add_argument("--scorer-checkpoint", help="local scorer checkpoint")
    p.add_argument("--split", choices=["train", "eval", "all"])

    p = sub.add_parser("train", parents=[common], help="train the micro-LM on prompts")
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="dataset JSONL to widen the tokenizer vocabulary")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["rouge_l", "exact_match"])
    p.add_argument("--task", help="task label for reports (default: dataset stem)")
    p.add_argument("--split", choices=["train", "eval", "all"])

    p = sub.add_parser("compare", parents=[common], help="win/similar counts across paired tasks")
    p.add_argument("--a", nargs="+", required=True, help="eval report JSONs, side A")
    p.add_argument("--b", nargs="+", required=True, help="eval report JSONs, side B")
    p.add_argument("--demo-mode", choices=["concept_demos", "random_demos"], default="concept_demos")
    p.add_argument("--out")

    p = sub.add_parser("score", parents=[common], help="score one (prompt, target) pair")
    p.add_argument("--prompt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--scorer", choices=["uniform", "lookup", "local", "remote"])
    p.add_argument("--endpoint")
    p.add_argument("--table")
    p.add_argument("--scorer-checkpoint")

    return parser


def _deep_merge(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise UsageError(f"--config: {exc}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: not valid JSON ({exc})")
        if not isinstance(user, dict):
            raise UsageError("--config: top level must be a JSON object")
        _deep_merge(cfg, user)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if not isinstance(cfg.get("seed"), int):
        raise UsageError("--seed: a run seed is mandatory (flag or config field)")
    if getattr(args, "workers", 1) is not None and args.workers < 1:
        raise UsageError("--workers: must be >= 1")
    # flag overrides into sections
    if getattr(args, "strategy", None):
        cfg["select"]["strategy"] = args.strategy
    if getattr(args, "split", None):
        section = "eval" if args.command == "eval" else "select"
        cfg[section]["split"] = args.split
    if getattr(args, "metric", None):
        cfg["eval"]["metric"] = args.metric
    scorer_cfg = cfg.get("scorer")
    if getattr(args, "scorer", None):
        scorer_cfg = dict(scorer_cfg or {})
        scorer_cfg["kind"] = args.scorer
    if getattr(args, "endpoint", None):
        scorer_cfg = dict(scorer_cfg or {})
        scorer_cfg.setdefault("kind", "remote")
        scorer_cfg["endpoint"] = args.endpoint
    if getattr(args, "table", None):
        scorer_cfg = dict(scorer_cfg or {})
        scorer_cfg.setdefault("kind", "lookup")
        scorer_cfg["table"] = args.table
    if getattr(args, "scorer_checkpoint", None):
        scorer_cfg = dict(scorer_cfg or {})
        scorer_cfg.setdefault("kind", "local")
        scorer_cfg["checkpoint"] = args.scorer_checkpoint
    cfg["scorer"] = scorer_cfg
    return cfg


def _stage_digest(stage: str, cfg: dict) -> str:
    payload = {
        "stage": stage,
        "seed": cfg["seed"],
        "config": {key: cfg.get(key) for key in STAGE_SCOPES[stage]},
    }
    return config_digest(payload)


def _sidecar_path(artifact: str | Path) -> Path:
    return Path(str(artifact) + ".meta.json")


def _write_sidecar(artifact: str | Path, stage: str, digest: str) -> None:
    body = canonical_json({"digest": digest, "stage": stage})
    _sidecar_path(artifact).write_text(body + "\n", encoding="utf-8")


def _check_sidecar(artifact: str | Path, expected_digest: str, stage: str) -> None:
    """Reject artifacts whose recorded digest disagrees with the supplied
    config; artifacts without a sidecar (user-supplied files) pass."""
    path = _sidecar_path(artifact)
    if not path.exists():
        return
    meta = json.loads(path.read_text(encoding="utf-8"))
    if meta.get("digest") != expected_digest:
        raise DigestMismatch(
            f"{artifact} was produced by a different {stage} config "
            f"(artifact {meta.get('digest')}, supplied {expected_digest})"
        )


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def _filter_split(samples: list[QASample], split: str) -> list[QASample]:
    if split == "all":
        return list(samples)
    return [s for s in samples if s.split is Split(split)]


# --- subcommands ---

def _cmd_generate(cfg: dict, args) -> int:
    gen = cfg["generate"]
    dataset_cfg = DatasetConfig(
        n_chains=gen["n_chains"],
        samples_per_chain=gen["samples_per_chain"],
        heldout_chain_fraction=gen["heldout_chain_fraction"],
        seed=cfg["seed"],
        value_range=tuple(gen["value_range"]),
        max_extra_records=gen["max_extra_records"],
        distractor_range=tuple(gen["distractor_range"]),
    )
    if "entity_vocabulary" in gen:
        dataset_cfg.entity_vocabulary = list(gen["entity_vocabulary"])
    if "attribute_vocabulary" in gen:
        dataset_cfg.attribute_vocabulary = list(gen["attribute_vocabulary"])
    samples = generate_dataset(dataset_cfg)
    write_dataset_jsonl(samples, args.out)
    digest = _stage_digest("generate", cfg)
    _write_sidecar(args.out, "generate", digest)
    n_train = sum(1 for s in samples if s.split is Split.TRAIN)
    print(f"generate: {len(samples)} samples ({n_train} train) -> {args.out} [{digest}]")
    return 0


def _cmd_select(cfg: dict, args) -> int:
    strategy = STRATEGY_ALIASES[cfg["select"]["strategy"]]
    if strategy is DemoStrategy.COAT and cfg.get("scorer") is None:
        raise UsageError("--strategy coat requires a scorer (--scorer flag or config section)")
    _check_sidecar(args.dataset, _stage_digest("generate", cfg), "generate")
    samples = _filter_split(load_dataset_jsonl(args.dataset), cfg["select"]["split"])
    if not samples:
        raise ConfigInvalid(f"no samples in split {cfg['select']['split']!r}")
    scorer = build_scorer(cfg["scorer"]) if cfg.get("scorer") else None
    style = PromptStyle.from_json(cfg["style"])
    sel_cfg = SelectionConfig(
        seed=cfg["seed"],
        k_min=cfg["select"]["k_min"],
        k_max=cfg["select"]["k_max"],
        m=cfg["select"]["m"],
        aggregate=cfg["select"]["aggregate"],
        style=style,
    )
    try:
        prompts, report = build_training_prompts(samples, strategy, scorer, sel_cfg)
    finally:
        if scorer is not None:
            scorer.close()
    write_prompts_jsonl(prompts, args.out)
    _write_json(str(args.out) + ".report.json", report)
    digest = _stage_digest("select", cfg)
    _write_sidecar(args.out, "select", digest)
    print(
        f"select[{strategy.value}]: {len(prompts)} prompts, "
        f"{report['skipped']} skipped -> {args.out} [{digest}]"
    )
    return 0


def _cmd_train(cfg: dict, args) -> int:
    _check_sidecar(args.prompts, _stage_digest("select", cfg), "select")
    prompts = load_prompts_jsonl(args.prompts)
    if not prompts:
        raise ConfigInvalid("prompt file is empty")
    style = PromptStyle.from_json(cfg["style"])
    corpus = corpus_from_prompts(prompts, style)
    if args.dataset:
        for sample in load_dataset_jsonl(args.dataset):
            x, y = sample_xy(sample)
            corpus.append(f"{x} {y}")
    tokenizer = build_tokenizer(corpus)
    m = cfg["model"]
    model_cfg = ModelConfig(
        vocab_size=tokenizer.vocab_size,
        d_model=m["d_model"],
        n_layers=m["n_layers"],
        n_heads=m["n_heads"],
        context_len=m["context_len"],
        seed=m.get("seed", cfg["seed"]),
    )
    t = cfg["train"]
    train_cfg = TrainConfig(
        seed=cfg["seed"],
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        patience=t["patience"],
        max_steps=t["max_steps"],
        eval_every=t["eval_every"],
    )
    order = list(range(len(prompts)))
    derive_rng(cfg["seed"], "trainsplit").shuffle(order)
    n_eval = int(len(prompts) * t["eval_fraction"])
    eval_prompts = [prompts[i] for i in order[:n_eval]]
    train_prompts = [prompts[i] for i in order[n_eval:]]
    train_pairs = tokenize_prompts(train_prompts, style, tokenizer)
    eval_pairs = tokenize_prompts(eval_prompts, style, tokenizer)
    model = MicroLM(model_cfg, tokenizer)
    trained, log = train(model, train_pairs, eval_pairs, train_cfg)
    trained.save(args.out)
    write_loss_log(log, str(args.out) + ".losslog.csv")
    digest = _stage_digest("train", cfg)
    _write_sidecar(args.out, "train", digest)
    final = log[-1]
    print(
        f"train: {len(train_pairs)} prompts, {len(log)} evals, "
        f"final eval loss {final['eval_loss']:.4f} -> {args.out} [{digest}]"
    )
    return 0


def _cmd_eval(cfg: dict, args) -> int:
    _check_sidecar(args.dataset, _stage_digest("generate", cfg), "generate")
    _check_sidecar(args.checkpoint, _stage_digest("train", cfg), "train")
    e = cfg["eval"]
    evalset = _filter_split(load_dataset_jsonl(args.dataset), e["split"])
    if not evalset:
        raise EmptyEvalSet(f"no samples in split {e['split']!r}")
    model = load_checkpoint(args.checkpoint)
    max_new = e["max_new_tokens"]

    def predictor(prompt: str) -> str:
        return model.greedy_decode(prompt, max_len=max_new)

    style = PromptStyle.from_json(cfg["style"])
    perturb = PerturbMode(e["perturb"])
    if perturb is not PerturbMode.NONE:
        eval_input = perturb_labels(evalset, perturb, cfg["seed"])
    else:
        eval_input = evalset
    digest = _stage_digest("eval", cfg)
    if e["demo_mode"] == "both":
        modes = [DemoMode.CONCEPT_DEMOS, DemoMode.RANDOM_DEMOS]
    else:
        modes = [DemoMode(e["demo_mode"])]
    reports: dict[str, EvalReport] = {}
    skips: dict[str, dict] = {}
    predictions = []
    for mode in modes:
        report, preds, skip = run_eval(
            predictor,
            eval_input,
            mode,
            k=e["k"],
            metric=e["metric"],
            style=style,
            seed=cfg["seed"],
            config_digest=digest,
            n=e["n"],
            r=e["r"],
        )
        reports[mode.value] = report
        skips[mode.value] = skip
        predictions.extend(preds)

    gain = None
    if len(modes) == 2:
        gain = gain_from_means(
            reports[DemoMode.CONCEPT_DEMOS.value].mean,
            reports[DemoMode.RANDOM_DEMOS.value].mean,
        )

    task = args.task or Path(args.dataset).stem
    out_body = {
        "task": task,
        "digest": digest,
        "metric": e["metric"],
        "reports": {mode: rep.to_json() for mode, rep in reports.items()},
        "concept_gain": None if gain is None else gain.to_json(),
        "skips": skips,
    }
    _write_json(args.out, out_body)
    rows = [(f"{task}/{mode}", rep) for mode, rep in sorted(reports.items())]
    write_reports_csv(rows, str(args.out) + ".csv")
    Path(str(args.out) + ".md").write_text(reports_markdown(rows), encoding="utf-8")
    write_predictions_jsonl(predictions, str(args.out) + ".predictions.jsonl")
    _write_sidecar(args.out, "eval", digest)
    for mode, rep in sorted(reports.items()):
        print(
            f"eval[{mode}]: {e['metric']} {rep.mean:.4f} "
            f"[{rep.ci_lo:.4f}, {rep.ci_hi:.4f}] n={rep.n} [{digest}]"
        )
    return 0


def _load_task_reports(paths: list[str], mode: str) -> dict[str, EvalReport]:
    from .errors import TaskSetMismatch

    out: dict[str, EvalReport] = {}
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            body = json.load(fh)
        task = body["task"]
        if task in out:
            raise TaskSetMismatch(f"duplicate task id {task!r} in one comparison side")
        rep = body["reports"].get(mode)
        if rep is None:
            raise ConfigInvalid(f"{path} has no {mode!r} report")
        out[task] = EvalReport(
            metric=rep["metric"],
            mean=rep["mean"],
            ci_lo=rep["ci_lo"],
            ci_hi=rep["ci_hi"],
            n=rep["n"],
            config_digest=rep.get("config_digest", ""),
        )
    return out


def _cmd_compare(cfg: dict, args) -> int:
    from .evalharness import compare_tasks

    side_a = _load_task_reports(args.a, args.demo_mode)
    side_b = _load_task_reports(args.b, args.demo_mode)
    outcome = compare_tasks(side_a, side_b)
    body = {"wins_a": outcome.wins_a, "wins_b": outcome.wins_b, "similar": outcome.similar}
    print(f"compare[{args.demo_mode}]: wins_a={outcome.wins_a} wins_b={outcome.wins_b} similar={outcome.similar}")
    if args.out:
        _write_json(args.out, body)
    return 0


def _cmd_score(cfg: dict, args) -> int:
    if cfg.get("scorer") is None:
        raise UsageError("score requires a scorer (--scorer flag or config section)")
    scorer = build_scorer(cfg["scorer"])
    try:
        likelihoods = scorer.score(args.prompt, args.target)
    finally:
        scorer.close()
    print(
        canonical_json(
            {
                "tokens": list(likelihoods.tokens),
                "probs": list(likelihoods.probs),
                "mean_prob": likelihoods.mean_prob,
            }
        )
    )
    return 0


_DISPATCH = {
    "generate": _cmd_generate,
    "select": _cmd_select,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "score": _cmd_score,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _load_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _DISPATCH[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except CoatError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[OSError]: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
