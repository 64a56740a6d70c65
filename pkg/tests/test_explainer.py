import json
from collections import Counter

import httpx
import pytest
from hypothesis import given, strategies as st

from agc_fdia.datagen import split_dataset
from agc_fdia.detector import DetectionResult
from agc_fdia.explainer import (
    ExplanationFailure,
    ExplanationParseError,
    ExplanationReport,
    LlmClient,
    LlmClientConfig,
    LlmConfigurationError,
    LlmRequestError,
    LlmTransportError,
    MockBackend,
    RetryPolicy,
    build_bundle,
    build_query,
    build_system_prompt,
    estimate_tokens,
    explain_many,
    gold_answer,
    parse_explanation,
    select_few_shots,
)
from agc_fdia.explainer.client import API_KEY_ENV
from agc_fdia.explainer.parsing import REPAIR_INSTRUCTION, canonical_target
from agc_fdia.explainer.prompts import (
    FORBIDDEN_QUERY_TOKENS,
    QUERY_KEYS,
    BudgetError,
    QueryMisuseError,
    query_keys,
)
from agc_fdia.features import STATS
from agc_fdia.plant import default_system

ALARM = DetectionResult("attack", 0.93, 0.07, 0.93)


@pytest.fixture(scope="module")
def split(small_samples):
    return split_dataset(small_samples, 0)


@pytest.fixture(scope="module")
def pool(split):
    return [s for s in split.train if s.attack is not None]


@pytest.fixture(scope="module")
def evals(split):
    return [s for s in split.llm_eval if s.attack is not None]


def mock_client(backend, **cfg):
    retry = cfg.pop("retry", RetryPolicy(backoff_base=0.0))
    return LlmClient(LlmClientConfig(retry=retry, **cfg), transport=backend.transport(),
                     clock=lambda: 0.0, sleep=lambda s: None)


# -- prompts ------------------------------------------------------------------

def test_estimate_tokens():
    assert estimate_tokens("") == 0
    assert estimate_tokens("12345678") == 2
    assert estimate_tokens("123456789") == 3


def test_system_prompt_without_shots():
    text = build_system_prompt(default_system())
    assert "cybersecurity analyst" in text
    for key in ("attack_target", "attack_magnitude_pu", "attack_start_time_s", "justification"):
        assert key in text
    assert "20.6" in text and "16.3" in text
    assert "### Example" not in text
    assert text == build_system_prompt(default_system())


def test_system_prompt_with_twenty_shots(pool):
    shots = select_few_shots(pool, 20, seed=3)
    text = build_system_prompt(default_system(), shots)
    assert text.count("### Example ") == 20
    positions = [text.index(f"### Example {i}\n") for i in range(1, 21)]
    assert positions == sorted(positions)
    for i, shot in enumerate(shots, 1):
        block = text.split(f"### Example {i}\n")[1]
        assert json.dumps(shot.answer) in block.split("### Example")[0]


def test_shot_selection(pool):
    assert select_few_shots(pool, 0, 1) == []
    five = select_few_shots(pool, 5, seed=1)
    counts = Counter(s.answer["attack_target"] for s in five)
    assert len(five) == 5 and max(counts.values()) - min(counts.values()) <= 1 and len(counts) == 3
    assert [s.sample_id for s in five] == [s.sample_id for s in select_few_shots(pool, 5, seed=1)]
    assert [s.sample_id for s in five] != [s.sample_id for s in select_few_shots(pool, 5, seed=2)]
    with pytest.raises(ValueError):
        select_few_shots(pool, len(pool) + 1, 0)


def test_shot_pool_must_avoid_holdout(pool, split):
    with pytest.raises(ValueError):
        select_few_shots(pool + split.llm_eval, 3, 0, holdout_ids={s.id for s in split.llm_eval})
    shots = select_few_shots(pool, 20, 0, holdout_ids={s.id for s in split.llm_eval})
    assert not {s.sample_id for s in shots} & {s.id for s in split.llm_eval}


def test_query_contents(evals):
    s = evals[0]
    q = build_query(s, ALARM)
    for sig in ("delta_f1", "delta_f2", "delta_p_tie"):
        assert f'"{sig}"' in q
    for stat in STATS:
        assert q.count(f'"{stat}"') == 3
    assert q == build_query(s, ALARM)
    assert query_keys(q) <= QUERY_KEYS


def test_query_refuses_normal_verdict(evals):
    with pytest.raises(QueryMisuseError):
        build_query(evals[0], DetectionResult("normal", 0.8, 0.8, 0.2))


def test_query_has_no_ground_truth(evals):
    for s in evals:
        q = build_query(s, ALARM, decimate=10)
        low = q.lower()
        for tok in FORBIDDEN_QUERY_TOKENS:
            assert tok not in low
        for v in (s.attack.t_start, s.attack.f_i, s.attack.f_f, s.attack.magnitude):
            assert repr(v) not in q


def test_bundle_budget(pool, evals):
    text = build_system_prompt(default_system(), select_few_shots(pool, 20, 0))
    b = build_bundle(text, evals[0], ALARM, 20)
    assert b.estimated_tokens <= 16000 and b.sample_id == evals[0].id
    with pytest.raises(BudgetError):
        build_bundle(text, evals[0], ALARM, 20, budget=100)


# -- parsing ------------------------------------------------------------------

OBJ = {"attack_target": "delta_p_tie", "attack_magnitude_pu": 0.2138, "attack_start_time_s": 15.0,
       "justification": "tie-line mean jumps at 15 s"}


def test_parse_bare_object():
    r = parse_explanation(json.dumps(OBJ))
    assert (r.attack_target, r.attack_magnitude, r.attack_start_time) == ("delta_p_tie", 0.2138, 15.0)
    assert not r.repaired


@pytest.mark.parametrize("wrap", [
    "Here is my analysis:\n{}\nHope that helps.",
    "```json\n{}\n```",
    "Sure! ```\n{}\n``` The {{braces}} here are prose.",
])
def test_parse_wrapped_object(wrap):
    bare = parse_explanation(json.dumps(OBJ))
    r = parse_explanation(wrap.format(json.dumps(OBJ, indent=2)))
    assert (r.attack_target, r.attack_magnitude, r.attack_start_time, r.justification) == \
        (bare.attack_target, bare.attack_magnitude, bare.attack_start_time, bare.justification)


@pytest.mark.parametrize("alias,canon", [
    ("tie-line", "delta_p_tie"), ("P_tie", "delta_p_tie"), ("ΔP_tie", "delta_p_tie"),
    ("\\Delta P_{tie}", "delta_p_tie"), ("Δf1", "delta_f1"), ("delta_f2", "delta_f2"), ("frequency 2", "delta_f2"),
])
def test_target_aliases(alias, canon):
    assert canonical_target(alias) == canon
    assert parse_explanation(json.dumps({**OBJ, "attack_target": alias})).attack_target == canon


@pytest.mark.parametrize("bad", [
    {**OBJ, "attack_target": "voltage"},
    {**OBJ, "attack_start_time_s": 75},
    {**OBJ, "attack_magnitude_pu": "large"},
    {k: v for k, v in OBJ.items() if k != "attack_target"},
])
def test_schema_violations(bad):
    with pytest.raises(ExplanationParseError):
        parse_explanation(json.dumps(bad))


def test_single_repair_attempt():
    calls = []

    def repair(raw):
        calls.append(raw)
        return json.dumps(OBJ)

    r = parse_explanation("no idea", repair)
    assert r.repaired and calls == ["no idea"]

    calls.clear()
    with pytest.raises(ExplanationParseError) as ei:
        parse_explanation("gibberish", lambda raw: calls.append(raw) or "still gibberish")
    assert calls == ["gibberish"]
    assert ei.value.raw == "gibberish" and ei.value.repaired_raw == "still gibberish"


@given(st.text(max_size=200))
def test_parser_never_crashes(text):
    try:
        parse_explanation(text)
    except ExplanationParseError:
        pass


# -- client -------------------------------------------------------------------

def test_echo_round_trip(evals):
    gold = {s.id: gold_answer(s.attack) for s in evals}
    backend = MockBackend("echo", gold)
    text = build_system_prompt(default_system())
    with mock_client(backend) as client:
        for s in evals[:10]:
            r = client.explain(build_bundle(text, s, ALARM, 0))
            assert r.attack_target == s.attack.target
            assert abs(r.attack_magnitude - s.attack.magnitude) < 1e-9
            assert abs(r.attack_start_time - s.attack.t_start) < 1e-9
            assert r.sample_id == s.id


def test_request_body_and_auth(evals, monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": json.dumps(OBJ)}}]})

    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    cfg = LlmClientConfig(base_url="https://llm.example/", model_name="m1", request_seed=7)
    with LlmClient(cfg, transport=httpx.MockTransport(handler)) as client:
        client.explain(build_bundle("sys", evals[0], ALARM, 0))
    req = seen[0]
    assert str(req.url) == "https://llm.example/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer sk-test"
    body = json.loads(req.content)
    assert body["model"] == "m1" and body["temperature"] == 0.0 and body["seed"] == 7
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_retry_then_success(evals):
    backend = MockBackend("echo", {evals[0].id: gold_answer(evals[0].attack)}, fail_first=2)
    sleeps = []
    client = LlmClient(LlmClientConfig(), transport=backend.transport(), sleep=sleeps.append)
    res = client.request_explanation(build_bundle("sys", evals[0], ALARM, 0))
    assert res.attempts == 3
    assert sleeps == [0.5, 1.0]


def test_always_429_exhausts(evals):
    backend = MockBackend("echo", always_status=429)
    with pytest.raises(LlmTransportError) as ei:
        mock_client(backend).request_explanation(build_bundle("sys", evals[0], ALARM, 0))
    assert ei.value.attempts == 3
    assert backend.requests[evals[0].id] == 3


def test_client_error_not_retried(evals):
    backend = MockBackend("echo", always_status=400)
    with pytest.raises(LlmRequestError):
        mock_client(backend).request_explanation(build_bundle("sys", evals[0], ALARM, 0))
    assert backend.requests[evals[0].id] == 1


def test_transport_errors_retried(evals):
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused")

    client = LlmClient(LlmClientConfig(), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(LlmTransportError):
        client.chat([{"role": "user", "content": "hi"}])
    assert len(calls) == 3


def test_missing_credential(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with pytest.raises(LlmConfigurationError):
        LlmClient(LlmClientConfig())


def test_temperature_fixed():
    with pytest.raises(ValueError):
        LlmClientConfig(temperature=0.7)


def test_fault_mode_and_ordering(evals):
    gold = {s.id: gold_answer(s.attack) for s in evals}
    backend = MockBackend("fault", gold, garbage_rate=0.3, seed=4)
    text = build_system_prompt(default_system())
    bundles = [build_bundle(text, s, ALARM, 0) for s in evals]
    with mock_client(backend, max_in_flight=4) as client:
        out = explain_many(client, bundles)
    assert [o.sample_id for o in out] == [s.id for s in evals]
    for s, o in zip(evals, out):
        if backend.is_garbage(s.id):
            assert isinstance(o, ExplanationFailure)
            assert backend.repairs[s.id] == 1 and backend.requests[s.id] == 2
        else:
            assert isinstance(o, ExplanationReport) and not o.repaired
            assert o.attack_target == s.attack.target
            assert backend.repairs[s.id] == 0
    assert any(isinstance(o, ExplanationFailure) for o in out)


def test_fixed_mode():
    backend = MockBackend("fixed", fixed_response=json.dumps(OBJ))
    r = mock_client(backend).chat([{"role": "user", "content": "x"}])
    assert json.loads(r.content) == OBJ


def test_repair_request_carries_instruction(evals):
    seen = []
    answer = json.dumps(OBJ)

    def handler(request):
        msgs = json.loads(request.content)["messages"]
        seen.append(msgs)
        content = answer if msgs[-1]["content"] == REPAIR_INSTRUCTION else "cannot say"
        return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})

    client = LlmClient(LlmClientConfig(), transport=httpx.MockTransport(handler), clock=iter(range(10)).__next__)
    r = client.explain(build_bundle("sys", evals[0], ALARM, 0))
    assert r.repaired and len(seen) == 2
    assert seen[1][2] == {"role": "assistant", "content": "cannot say"}
    assert r.latency == 2  # both requests count towards latency
