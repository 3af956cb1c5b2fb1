"""Launcher tests: flag parsing, env token pickup, startup refusal."""

import json

from coat_bridge import parse_args
from coat_bridge.cli import TOKEN_ENV_VAR, main


def test_parse_args_defaults():
    config = parse_args(["--model", "stub:table.json"])
    assert config.model == "stub:table.json"
    assert config.device == "cpu"
    assert config.host == "127.0.0.1"
    assert config.port == 8900
    assert config.max_concurrency == 4
    assert config.token is None


def test_parse_args_flags_and_env_token(monkeypatch):
    monkeypatch.setenv(TOKEN_ENV_VAR, "sekrit")
    config = parse_args([
        "--model", "gpt2", "--device", "cuda", "--host", "0.0.0.0",
        "--port", "9001", "--max-concurrency", "16",
    ])
    assert config.model == "gpt2"
    assert config.device == "cuda"
    assert config.host == "0.0.0.0"
    assert config.port == 9001
    assert config.max_concurrency == 16
    assert config.token == "sekrit"


def test_main_refuses_to_start_on_unscorable_backend(tmp_path, capsys):
    table = tmp_path / "bad.json"
    table.write_text(json.dumps([{"prompt": "p", "target": "t", "probs": [2.0]}]))
    assert main(["--model", f"stub:{table}"]) == 1
    assert "refusing to start" in capsys.readouterr().err


def test_main_refuses_missing_table(tmp_path, capsys):
    assert main(["--model", f"stub:{tmp_path / 'absent.json'}"]) == 1
    assert "refusing to start" in capsys.readouterr().err
