"""Wire-protocol tests for the bridge service over a stub backend."""

import math

import pytest
from fastapi.testclient import TestClient

from coat_bridge import BridgeConfig, ScoreBackend, StubLookupBackend, create_app
from coat_bridge.backends import BackendError

from bridge_helpers import TABLE, client, table_path  # noqa: F401 (fixtures)


def test_health_reports_ok_and_model_id(client):
    body = client.get("/health").json()
    assert body == {"status": "ok", "model": "stub:table.json"}


def test_score_returns_table_logprobs(client):
    response = client.post(
        "/score", json={"prompt": "Input: b Prediction: \\", "target": "7 2"}
    )
    assert response.status_code == 200
    body = response.json()
    assert body["tokens"] == ["7", "2"]
    assert body["logprobs"] == [math.log(0.5), math.log(0.125)]


def test_score_is_deterministic_across_calls(client):
    payload = {"prompt": "Input: a Prediction: \\", "target": "4"}
    first = client.post("/score", json=payload).json()
    second = client.post("/score", json=payload).json()
    assert first == second


def test_responses_keep_lengths_aligned_and_logprobs_nonpositive(client):
    for row in TABLE:
        body = client.post(
            "/score", json={"prompt": row["prompt"], "target": row["target"]}
        ).json()
        assert len(body["tokens"]) == len(body["logprobs"]) == len(row["probs"])
        assert all(lp <= 0.0 for lp in body["logprobs"])


def test_responses_are_independent_of_request_order(client):
    a = {"prompt": "Input: a Prediction: \\", "target": "4"}
    b = {"prompt": "", "target": "x y z"}
    before = client.post("/score", json=a).json()
    client.post("/score", json=b)
    after = client.post("/score", json=a).json()
    assert before == after


def test_empty_target_is_a_schema_violation(client):
    response = client.post("/score", json={"prompt": "p", "target": ""})
    assert response.status_code == 400
    assert response.json()["error"] == "target must be non-empty"


@pytest.mark.parametrize(
    "payload",
    [
        {"prompt": "p"},
        {"target": "t"},
        {"prompt": "p", "target": 7},
        {"prompt": None, "target": "t"},
        ["prompt", "target"],
    ],
)
def test_malformed_payloads_return_400_with_error_body(client, payload):
    response = client.post("/score", json=payload)
    assert response.status_code == 400
    assert response.json()["error"] == "schema violation"


def test_unknown_fixture_is_an_inference_failure(client):
    response = client.post("/score", json={"prompt": "never recorded", "target": "4"})
    assert response.status_code == 500
    assert "no table entry" in response.json()["error"]


def test_service_answers_503_until_started(table_path):
    app = create_app(BridgeConfig(model="stub"), StubLookupBackend(table_path))
    cold = TestClient(app)  # no context manager: startup never runs
    assert cold.get("/health").status_code == 503
    response = cold.post("/score", json={"prompt": "p", "target": "t"})
    assert response.status_code == 503
    assert response.json()["error"] == "model loading"


def test_bearer_token_guards_both_endpoints(table_path):
    app = create_app(
        BridgeConfig(model="stub", token="sekrit"), StubLookupBackend(table_path)
    )
    with TestClient(app) as running:
        assert running.get("/health").status_code == 401
        bad = {"Authorization": "Bearer wrong"}
        good = {"Authorization": "Bearer sekrit"}
        assert running.get("/health", headers=bad).status_code == 401
        assert running.get("/health", headers=good).status_code == 200
        payload = {"prompt": "Input: a Prediction: \\", "target": "4"}
        assert running.post("/score", json=payload).status_code == 401
        assert running.post("/score", json=payload, headers=good).status_code == 200


def test_concurrency_gate_is_bounded_by_config(table_path):
    app = create_app(
        BridgeConfig(model="stub", max_concurrency=3), StubLookupBackend(table_path)
    )
    assert app.state.gate._value == 3
    with TestClient(app) as running:
        payload = {"prompt": "Input: a Prediction: \\", "target": "4"}
        for _ in range(10):
            assert running.post("/score", json=payload).status_code == 200


class _MismatchedBackend(ScoreBackend):
    model_id = "broken"

    def score(self, prompt, target):
        return ["a", "b"], [-0.5]


class _PositiveLogprobBackend(ScoreBackend):
    model_id = "broken"

    def score(self, prompt, target):
        return ["a"], [0.25]


@pytest.mark.parametrize("backend", [_MismatchedBackend(), _PositiveLogprobBackend()])
def test_startup_refuses_backends_that_fail_the_self_check(backend):
    app = create_app(BridgeConfig(model="broken"), backend)
    with pytest.raises(BackendError):
        with TestClient(app):
            pass
