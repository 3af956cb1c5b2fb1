"""End-to-end tests for the command-line pipeline and its guardrails."""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from coat.cli import main

CONFIG = {
    "seed": 23,
    "generate": {
        "n_chains": 4,
        "samples_per_chain": 5,
        "heldout_chain_fraction": 0.25,
        "value_range": [0, 9],
        "max_extra_records": 0,
        "distractor_range": [1, 1],
    },
    "select": {"strategy": "coat", "k_min": 2, "k_max": 2, "m": 6},
    "scorer": {"kind": "uniform", "p": 0.5},
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "context_len": 512},
    "train": {
        "learning_rate": 0.001,
        "batch_size": 4,
        "patience": 100,
        "max_steps": 20,
        "eval_every": 10,
        "eval_fraction": 0.1,
    },
    "eval": {"k": 2, "n": 50, "r": 50, "max_new_tokens": 3},
}


def write_config(directory, **overrides):
    cfg = json.loads(json.dumps(CONFIG))
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = directory / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full generate -> select -> train -> eval run, shared read-only."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root)
    paths = {
        "root": root,
        "config": cfg,
        "dataset": root / "data.jsonl",
        "prompts": root / "prompts.jsonl",
        "checkpoint": root / "model.json",
        "report": root / "eval.json",
    }
    assert main(["generate", "--config", str(cfg), "--out", str(paths["dataset"])]) == 0
    assert main([
        "select", "--config", str(cfg),
        "--dataset", str(paths["dataset"]), "--out", str(paths["prompts"]),
    ]) == 0
    assert main([
        "train", "--config", str(cfg),
        "--prompts", str(paths["prompts"]), "--out", str(paths["checkpoint"]),
    ]) == 0
    assert main([
        "eval", "--config", str(cfg), "--dataset", str(paths["dataset"]),
        "--checkpoint", str(paths["checkpoint"]), "--out", str(paths["report"]),
    ]) == 0
    return paths


def test_pipeline_writes_all_artifacts(pipeline):
    for key in ("dataset", "prompts", "checkpoint", "report"):
        artifact = pipeline[key]
        assert artifact.exists()
        sidecar = json.loads((artifact.parent / (artifact.name + ".meta.json")).read_text())
        assert set(sidecar) == {"digest", "stage"}
    assert (pipeline["root"] / "prompts.jsonl.report.json").exists()
    assert (pipeline["root"] / "model.json.losslog.csv").exists()
    assert (pipeline["root"] / "eval.json.csv").exists()
    assert (pipeline["root"] / "eval.json.md").exists()
    assert (pipeline["root"] / "eval.json.predictions.jsonl").exists()


def test_prompt_jsonl_schema(pipeline):
    lines = pipeline["prompts"].read_text(encoding="utf-8").splitlines()
    assert lines
    for line in lines:
        obj = json.loads(line)
        assert set(obj) == {"id", "strategy", "k", "concept", "demos", "x_pred", "y_pred"}
        assert obj["strategy"] == "coat"
        assert obj["k"] == len(obj["demos"])
        for demo in obj["demos"]:
            assert set(demo) == {"x", "y"}
    report = json.loads((pipeline["root"] / "prompts.jsonl.report.json").read_text())
    assert set(report) == {"skipped", "reasons"}


def test_eval_report_schema(pipeline):
    body = json.loads(pipeline["report"].read_text(encoding="utf-8"))
    assert body["task"] == "data"
    assert set(body["reports"]) == {"concept_demos", "random_demos"}
    for rep in body["reports"].values():
        assert rep["ci_lo"] <= rep["mean"] <= rep["ci_hi"]
        assert rep["n"] > 0
        assert rep["config_digest"] == body["digest"]
    gain = body["concept_gain"]
    assert set(gain) == {
        "concept_mean", "random_mean", "absolute", "relative", "flagged_zero_denominator",
    }
    csv_text = (pipeline["root"] / "eval.json.csv").read_text(encoding="utf-8")
    assert csv_text.splitlines()[0] == "task,metric,mean,ci_lo,ci_hi,n"
    assert "data/concept_demos" in csv_text


def test_generate_and_select_are_byte_deterministic(pipeline, tmp_path):
    cfg = write_config(tmp_path)
    data2 = tmp_path / "data2.jsonl"
    prompts2 = tmp_path / "prompts2.jsonl"
    assert main(["generate", "--config", str(cfg), "--out", str(data2)]) == 0
    assert main(["select", "--config", str(cfg), "--dataset", str(data2), "--out", str(prompts2)]) == 0
    assert data2.read_bytes() == pipeline["dataset"].read_bytes()
    assert prompts2.read_bytes() == pipeline["prompts"].read_bytes()


def test_stage_digests_reject_foreign_artifacts(pipeline, tmp_path):
    cfg = write_config(tmp_path, seed=99)
    out = tmp_path / "prompts.jsonl"
    code = main(["select", "--config", str(cfg), "--dataset", str(pipeline["dataset"]), "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_missing_sidecar_passes_for_user_supplied_files(pipeline, tmp_path):
    cfg = write_config(tmp_path)
    dataset = tmp_path / "external.jsonl"
    shutil.copy(pipeline["dataset"], dataset)  # no .meta.json next to it
    out = tmp_path / "prompts.jsonl"
    assert main(["select", "--config", str(cfg), "--dataset", str(dataset), "--out", str(out)]) == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    cfg = write_config(tmp_path)
    dataset = tmp_path / "d.jsonl"
    assert main(["generate", "--out", str(dataset)]) == 1  # no seed anywhere
    assert "seed" in capsys.readouterr().err
    assert main(["generate", "--config", str(cfg), "--out", str(dataset), "--bogus"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["generate", "--config", str(cfg), "--out", str(dataset), "--workers", "0"]) == 1
    missing = tmp_path / "nope.json"
    assert main(["generate", "--config", str(missing), "--out", str(dataset)]) == 1


def test_coat_strategy_without_scorer_is_a_usage_error(pipeline, tmp_path, capsys):
    cfg = write_config(tmp_path, scorer=None)
    code = main([
        "select", "--config", str(cfg),
        "--dataset", str(pipeline["dataset"]), "--out", str(tmp_path / "p.jsonl"),
    ])
    assert code == 1
    assert "requires a scorer" in capsys.readouterr().err


def test_runtime_errors_exit_two(pipeline, tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["select", "--config", str(cfg), "--dataset", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "p.jsonl")])
    assert code == 2
    assert "OSError" in capsys.readouterr().err

    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n", encoding="utf-8")
    code = main(["select", "--config", str(cfg), "--dataset", str(bad), "--out", str(tmp_path / "p.jsonl")])
    assert code == 2


def test_select_random_via_flag_override(pipeline, tmp_path):
    cfg = write_config(tmp_path, scorer=None)  # random needs no scorer
    out = tmp_path / "random.jsonl"
    code = main([
        "select", "--config", str(cfg), "--strategy", "random",
        "--dataset", str(pipeline["dataset"]), "--out", str(out),
    ])
    assert code == 0
    strategies = {json.loads(l)["strategy"] for l in out.read_text().splitlines()}
    assert strategies == {"random"}


def test_score_subcommand_prints_likelihoods(capsys):
    assert main(["score", "--seed", "1", "--scorer", "uniform", "--prompt", "p", "--target", "a b"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert body == {"tokens": ["a", "b"], "probs": [0.5, 0.5], "mean_prob": 0.5}
    assert main(["score", "--seed", "1", "--prompt", "p", "--target", "a"]) == 1  # no scorer


def test_score_with_lookup_table(tmp_path, capsys):
    table = tmp_path / "table.json"
    table.write_text(json.dumps([{"prompt": "p", "target": "t", "probs": [0.25]}]))
    assert main(["score", "--seed", "1", "--table", str(table), "--prompt", "p", "--target", "t"]) == 0
    assert json.loads(capsys.readouterr().out)["probs"] == [0.25]
    # a miss is a runtime failure, not a usage error
    assert main(["score", "--seed", "1", "--table", str(table), "--prompt", "p", "--target", "zz"]) == 2


def test_eval_split_flag_and_empty_split(pipeline, tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "eval-train.json"
    code = main([
        "eval", "--config", str(cfg), "--dataset", str(pipeline["dataset"]),
        "--checkpoint", str(pipeline["checkpoint"]), "--out", str(out), "--split", "train",
    ])
    assert code == 0
    capsys.readouterr()

    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    code = main([
        "eval", "--config", str(cfg), "--dataset", str(empty),
        "--checkpoint", str(pipeline["checkpoint"]), "--out", str(tmp_path / "e.json"),
    ])
    assert code == 2


def test_compare_counts_wins(tmp_path, capsys):
    def eval_body(task, mean, lo, hi):
        rep = {"metric": "exact_match", "mean": mean, "ci_lo": lo, "ci_hi": hi, "n": 50, "config_digest": ""}
        return {"task": task, "digest": "", "metric": "exact_match",
                "reports": {"concept_demos": rep, "random_demos": rep},
                "concept_gain": None, "skips": {}}

    a1, b1 = tmp_path / "a1.json", tmp_path / "b1.json"
    a2, b2 = tmp_path / "a2.json", tmp_path / "b2.json"
    a1.write_text(json.dumps(eval_body("t1", 0.9, 0.8, 1.0)))
    b1.write_text(json.dumps(eval_body("t1", 0.5, 0.4, 0.6)))
    a2.write_text(json.dumps(eval_body("t2", 0.5, 0.4, 0.6)))
    b2.write_text(json.dumps(eval_body("t2", 0.55, 0.5, 0.65)))
    out = tmp_path / "cmp.json"
    code = main([
        "compare", "--seed", "0",
        "--a", str(a1), str(a2), "--b", str(b1), str(b2), "--out", str(out),
    ])
    assert code == 0
    assert json.loads(out.read_text()) == {"wins_a": 1, "wins_b": 0, "similar": 1}
    assert "wins_a=1" in capsys.readouterr().out

    dup = main(["compare", "--seed", "0", "--a", str(a1), str(a1), "--b", str(b1), str(b1)])
    assert dup == 2  # duplicate task id on one side
    mismatch = main(["compare", "--seed", "0", "--a", str(a1), "--b", str(b2)])
    assert mismatch == 2  # different task sets


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("coat")
    argv = [exe] if exe else [sys.executable, "-m", "coat.cli"]
    proc = subprocess.run(
        argv + ["score", "--seed", "1", "--scorer", "uniform", "--prompt", "p", "--target", "x"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["mean_prob"] == 0.5


def test_bundled_smoke_config_runs_end_to_end(tmp_path):
    config = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"
    dataset, prompts = tmp_path / "data.jsonl", tmp_path / "prompts.jsonl"
    checkpoint, report = tmp_path / "model.json", tmp_path / "eval.json"
    assert main(["generate", "--config", str(config), "--out", str(dataset)]) == 0
    assert main([
        "select", "--config", str(config),
        "--dataset", str(dataset), "--out", str(prompts),
    ]) == 0
    assert main([
        "train", "--config", str(config),
        "--prompts", str(prompts), "--out", str(checkpoint),
    ]) == 0
    assert main([
        "eval", "--config", str(config), "--dataset", str(dataset),
        "--checkpoint", str(checkpoint), "--out", str(report),
    ]) == 0
    body = json.loads(report.read_text(encoding="utf-8"))
    assert set(body["reports"]) == {"concept_demos", "random_demos"}
    for rep in body["reports"].values():
        assert isinstance(rep["ci_lo"], float) and isinstance(rep["ci_hi"], float)
        assert rep["ci_lo"] <= rep["mean"] <= rep["ci_hi"]
