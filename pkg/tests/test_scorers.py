"""Tests for the scorer interface: uniform, lookup, local model, and remote HTTP."""

import json
import math

import httpx
import pytest

from coat.errors import (
    ConfigInvalid,
    EmptyTarget,
    LookupMiss,
    RemoteMalformed,
    RemoteUnavailable,
)
from coat.microlm import MicroLM, ModelConfig, build_tokenizer
from coat.scorers import (
    TOKEN_ENV_VAR,
    LocalModelScorer,
    LookupScorer,
    RemoteScorer,
    TokenLikelihoods,
    UniformScorer,
    build_scorer,
)

# --- TokenLikelihoods ---

def test_from_probs_computes_the_mean():
    tl = TokenLikelihoods.from_probs(["a", "b"], [0.2, 0.6])
    assert tl.mean_prob == pytest.approx(0.4, abs=1e-15)
    assert tl.tokens == ("a", "b")
    assert tl.probs == (0.2, 0.6)


def test_likelihood_validation_rejects_bad_shapes_and_ranges():
    with pytest.raises(ConfigInvalid):
        TokenLikelihoods(("a",), (0.5, 0.5), 0.5).validate()
    with pytest.raises(ConfigInvalid):
        TokenLikelihoods((), (), 0.0).validate()
    with pytest.raises(ConfigInvalid):
        TokenLikelihoods.from_probs(["a"], [0.0])
    with pytest.raises(ConfigInvalid):
        TokenLikelihoods.from_probs(["a"], [1.5])
    with pytest.raises(ConfigInvalid):
        TokenLikelihoods(("a", "b"), (0.2, 0.6), 0.9).validate()


def test_aggregate_arithmetic_and_geometric():
    tl = TokenLikelihoods.from_probs(["a", "b"], [0.25, 1.0])
    assert tl.aggregate() == pytest.approx(0.625)
    assert tl.aggregate("geometric") == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(ConfigInvalid):
        tl.aggregate("harmonic")


# --- uniform ---

def test_uniform_scorer_constant_per_token():
    tl = UniformScorer(0.5).score("any prompt", "two tokens")
    assert tl.tokens == ("two", "tokens")
    assert tl.probs == (0.5, 0.5)
    assert tl.mean_prob == 0.5


def test_uniform_scorer_validates_p_and_target():
    with pytest.raises(ConfigInvalid):
        UniformScorer(0.0)
    with pytest.raises(ConfigInvalid):
        UniformScorer(1.5)
    with pytest.raises(EmptyTarget):
        UniformScorer(0.5).score("p", "")
    with pytest.raises(EmptyTarget):
        UniformScorer(0.5).score("p", "   ")


# --- lookup ---

def test_lookup_scorer_bare_lists_and_token_records():
    scorer = LookupScorer(
        {
            ("p1", "t1"): [0.2, 0.4],
            ("p2", "t2"): {"tokens": ["x", "y"], "probs": [0.3, 0.9]},
        }
    )
    a = scorer.score("p1", "t1")
    assert a.tokens == ("t0", "t1")
    assert a.probs == (0.2, 0.4)
    b = scorer.score("p2", "t2")
    assert b.tokens == ("x", "y")
    assert b.mean_prob == pytest.approx(0.6)


def test_lookup_scorer_miss_and_empty_target():
    scorer = LookupScorer({("p", "t"): [0.5]})
    with pytest.raises(LookupMiss):
        scorer.score("p", "other")
    with pytest.raises(LookupMiss):
        scorer.score("other", "t")
    with pytest.raises(EmptyTarget):
        scorer.score("p", "")


def test_lookup_scorer_json_round_trip(tmp_path):
    scorer = LookupScorer(
        {
            ("p1", "t1"): [0.2, 0.4],
            ("p2", "t2"): {"tokens": ["x"], "probs": [0.3]},
        }
    )
    path = tmp_path / "table.json"
    path.write_text(json.dumps(scorer.to_json()), encoding="utf-8")
    back = LookupScorer.from_json_file(path)
    assert back.score("p1", "t1").probs == (0.2, 0.4)
    assert back.score("p2", "t2").tokens == ("x",)


# --- local model ---

@pytest.fixture(scope="module")
def tiny_model():
    tokenizer = build_tokenizer(["alpha beta gamma delta prompt"])
    cfg = ModelConfig(vocab_size=tokenizer.vocab_size, d_model=16, n_layers=1, n_heads=2, context_len=32, seed=5)
    return MicroLM(cfg, tokenizer)


def test_local_scorer_matches_manual_forward_chaining(tiny_model):
    scorer = LocalModelScorer(model=tiny_model)
    prompt, target = "prompt alpha", "beta gamma"
    got = scorer.score(prompt, target)
    assert got.tokens == ("beta", "gamma")

    prompt_ids = tiny_model.tokenizer.encode(prompt)
    target_ids = tiny_model.tokenizer.encode(target)
    rows = tiny_model.forward(prompt_ids + target_ids)
    start = len(prompt_ids) - 1
    for j, tid in enumerate(target_ids):
        assert got.probs[j] == pytest.approx(rows[start + j][tid], rel=1e-12)


def test_local_scorer_batch_matches_single_calls(tiny_model):
    scorer = LocalModelScorer(model=tiny_model)
    pairs = [("prompt alpha", "beta"), ("prompt beta gamma", "delta alpha")]
    batched = scorer.score_batch(pairs)
    for (prompt, target), tl in zip(pairs, batched):
        single = scorer.score(prompt, target)
        assert tl.tokens == single.tokens
        assert tl.probs == pytest.approx(single.probs, rel=1e-12)


def test_local_scorer_rejects_empty_targets(tiny_model):
    scorer = LocalModelScorer(model=tiny_model)
    with pytest.raises(EmptyTarget):
        scorer.score("prompt", "")
    with pytest.raises(EmptyTarget):
        scorer.score_batch([("prompt", "beta"), ("prompt", "")])


def test_local_scorer_needs_a_source():
    with pytest.raises(ConfigInvalid):
        LocalModelScorer()


# --- remote ---

def remote(handler, **kwargs):
    sleeps = []
    scorer = RemoteScorer(
        "http://scorer.test",
        transport=httpx.MockTransport(handler),
        sleep=sleeps.append,
        **kwargs,
    )
    return scorer, sleeps


def test_remote_scorer_happy_path():
    seen = {}

    def handler(request):
        seen["path"] = request.url.path
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200, json={"tokens": ["143"], "logprobs": [math.log(0.2)]}
        )

    scorer, _ = remote(handler)
    tl = scorer.score("the prompt", "143")
    assert seen["path"] == "/score"
    assert seen["body"] == {"prompt": "the prompt", "target": "143"}
    assert tl.tokens == ("143",)
    assert tl.probs[0] == pytest.approx(0.2, rel=1e-9)
    scorer.close()


def test_remote_scorer_retries_transient_failures():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"tokens": ["a", "b"], "logprobs": [-1.0, -2.0]})

    scorer, sleeps = remote(handler)
    tl = scorer.score("p", "a b")
    assert calls["n"] == 3
    assert sleeps == [0.25, 0.5]  # exponential backoff between attempts
    assert tl.probs == pytest.approx((math.exp(-1.0), math.exp(-2.0)), rel=1e-12)
    scorer.close()


def test_remote_scorer_gives_up_after_retries():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return httpx.Response(500)

    scorer, _ = remote(handler)
    with pytest.raises(RemoteUnavailable):
        scorer.score("p", "t")
    assert calls["n"] == 3  # initial try + 2 retries
    scorer.close()


def test_remote_scorer_retries_429_but_not_400():
    for status, exc, expected_calls in ((429, RemoteUnavailable, 3), (400, RemoteMalformed, 1)):
        calls = {"n": 0}

        def handler(request, status=status):
            calls["n"] += 1
            return httpx.Response(status)

        scorer, _ = remote(handler)
        with pytest.raises(exc):
            scorer.score("p", "t")
        assert calls["n"] == expected_calls
        scorer.close()


def test_remote_scorer_network_errors_become_unavailable():
    def handler(request):
        raise httpx.ConnectError("boom")

    scorer, sleeps = remote(handler)
    with pytest.raises(RemoteUnavailable):
        scorer.score("p", "t")
    assert sleeps == [0.25, 0.5]
    scorer.close()


@pytest.mark.parametrize(
    "body",
    [
        {"tokens": ["a"]},
        {"logprobs": [-1.0]},
        {"tokens": ["a", "b"], "logprobs": [-1.0]},
        {"tokens": [], "logprobs": []},
        {"tokens": ["a"], "logprobs": [0.5]},
        {"tokens": ["a"], "logprobs": ["oops"]},
        ["not", "a", "dict"],
    ],
)
def test_remote_scorer_rejects_malformed_payloads(body):
    scorer, _ = remote(lambda request: httpx.Response(200, json=body))
    with pytest.raises(RemoteMalformed):
        scorer.score("p", "t")
    scorer.close()


def test_remote_scorer_rejects_non_json_bodies():
    scorer, _ = remote(lambda request: httpx.Response(200, text="<html>oops</html>"))
    with pytest.raises(RemoteMalformed):
        scorer.score("p", "t")
    scorer.close()


def test_remote_scorer_floors_underflowing_logprobs():
    scorer, _ = remote(
        lambda request: httpx.Response(200, json={"tokens": ["a"], "logprobs": [-1e6]})
    )
    tl = scorer.score("p", "a")
    assert tl.probs[0] == 1e-300
    scorer.close()


def test_remote_scorer_sends_bearer_token_from_env(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"tokens": ["a"], "logprobs": [-1.0]})

    monkeypatch.setenv(TOKEN_ENV_VAR, "sekrit")
    scorer, _ = remote(handler)
    scorer.score("p", "a")
    assert seen["auth"] == "Bearer sekrit"
    scorer.close()

    monkeypatch.delenv(TOKEN_ENV_VAR)
    scorer, _ = remote(handler)
    scorer.score("p", "a")
    assert seen["auth"] is None
    scorer.close()


def test_remote_scorer_health_endpoint():
    def handler(request):
        if request.url.path == "/health":
            return httpx.Response(200, json={"status": "ok"})
        return httpx.Response(404)

    scorer, _ = remote(handler)
    assert scorer.health() == {"status": "ok"}
    scorer.close()

    scorer, _ = remote(lambda request: httpx.Response(500))
    with pytest.raises(RemoteUnavailable):
        scorer.health()
    scorer.close()


def test_remote_scorer_rejects_empty_target_client_side():
    scorer, _ = remote(lambda request: httpx.Response(200, json={}))
    with pytest.raises(EmptyTarget):
        scorer.score("p", "")
    scorer.close()


# --- factory ---

def test_build_scorer_factory(tmp_path):
    assert isinstance(build_scorer({"kind": "uniform", "p": 0.3}), UniformScorer)
    table = tmp_path / "table.json"
    table.write_text(json.dumps([{"prompt": "p", "target": "t", "probs": [0.5]}]))
    lookup = build_scorer({"kind": "lookup", "table": str(table)})
    assert lookup.score("p", "t").probs == (0.5,)
    remote_scorer = build_scorer({"kind": "remote", "endpoint": "http://h:9/"})
    assert remote_scorer.endpoint == "http://h:9"
    remote_scorer.close()
    with pytest.raises(ConfigInvalid):
        build_scorer({"kind": "mystery"})
