import json
from datetime import date, timedelta

import httpx
import numpy as np
import pytest

from hospcast.context import (
    STRICT_SUFFIX,
    BackendConfig,
    BackendError,
    HttpBackend,
    LLMSettings,
    OracleBackend,
    PersistenceBackend,
    PromptSpec,
    ScriptedBackend,
    TranscriptCache,
    build_prompt,
    context_is_valid,
    context_prompt,
    forecast_llm_direct,
    format_value,
    parse_context,
    parse_y,
    query_with_retry,
    render_response,
    stub_backend,
    univariate_prompt,
    y_is_valid,
)
from hospcast.models import ModelId, Window
from hospcast.synthetic import synthetic_panel

from response_corpus import CONTEXT_CASES, Y_CASES

WEEKS = tuple(date(2021, 1, 3) + timedelta(weeks=k) for k in range(8))


def make_window(y=None, exog=None):
    y = np.arange(1.0, 9.0) if y is None else np.asarray(y, float)
    exog = np.column_stack([y * 2, y / 2, y + 10]) if exog is None else exog
    return Window("Adams County", WEEKS, y, exog, WEEKS[-1] + timedelta(weeks=1))


# --- prompts ---

def test_univariate_prompt_text():
    block = tuple((d, {"y": float(i)}) for i, d in enumerate(WEEKS))
    text = build_prompt(PromptSpec("Adams County", date(2021, 2, 28), block))
    expected = (
        "Given the last 8 weekly observations for region Adams County:\n\n"
        + "\n".join(f"{d.isoformat()}: y={i}" for i, d in enumerate(WEEKS))
        + "\n\nPredict next week's value (week ending 2021-02-28) for the numeric series y."
        + "\n\nReturn exactly one line:\ny: <number>"
    )
    assert text == expected


def test_context_prompt_lists_all_labels_and_na():
    w = make_window()
    w.exog[3, 1] = np.nan
    text = context_prompt(w)
    assert "three numeric series: X_B, X_V, s_t" in text
    assert "Return exactly three lines:\nX_B: <number>\nX_V: <number>\ns_t: <number>" in text
    assert f"{WEEKS[3].isoformat()}: y=4, X_B=8, X_V=NA, s_t=14" in text
    assert "week ending 2021-02-28" in text


def test_prompt_never_contains_target_week_value():
    w = make_window()
    for text in (univariate_prompt(w), context_prompt(w)):
        rows = [line for line in text.splitlines() if line[:4].isdigit()]
        assert len(rows) == 8
        assert all(not line.startswith(w.target_week.isoformat()) for line in rows)


def test_prompt_validation():
    block = tuple((d, {"y": 1.0}) for d in WEEKS)
    with pytest.raises(ValueError):
        build_prompt(PromptSpec("A", date(2021, 3, 1), block[:7]))
    with pytest.raises(ValueError):
        build_prompt(PromptSpec("A", date(2021, 3, 1), tuple(reversed(block))))


@pytest.mark.parametrize("v", [0.0, 3.0, 2.5, 1 / 3, 1e-7, 123456.789])
def test_format_value_round_trips(v):
    assert float(format_value(v)) == v
    assert parse_y(f"y: {format_value(v)}").value == v


def test_format_missing():
    assert format_value(None) == "NA"
    assert format_value(float("nan")) == "NA"


# --- parsing ---

@pytest.mark.parametrize("raw,expected", Y_CASES)
def test_parse_y_corpus(raw, expected):
    assert parse_y(raw).value == expected
    assert y_is_valid(raw) is (expected is not None)


@pytest.mark.parametrize("raw,expected", CONTEXT_CASES)
def test_parse_context_corpus(raw, expected):
    parsed = parse_context(raw)
    assert (parsed.x_b, parsed.x_v, parsed.s_t) == expected
    assert parsed.complete is all(v is not None for v in expected)
    assert context_is_valid(raw) is parsed.complete


def test_render_then_parse():
    text = render_response({"X_B": 1.5, "X_V": None, "s_t": 3.0})
    parsed = parse_context(text)
    assert (parsed.x_b, parsed.x_v, parsed.s_t) == (1.5, None, 3.0)


# --- retry ---

def test_valid_first_answer_needs_one_call():
    b = ScriptedBackend(["y: 5"])
    r = query_with_retry(b, "p", y_is_valid)
    assert (r.raw, r.retried, r.calls, r.error) == ("y: 5", False, 1, None)


def test_unparseable_answer_retried_once_with_stricter_prompt():
    b = ScriptedBackend(["no idea", "y: 6"])
    r = query_with_retry(b, "p", y_is_valid)
    assert r.raw == "y: 6" and r.retried and r.calls == 2
    assert b.prompts == ["p", "p" + STRICT_SUFFIX]


def test_second_failure_gives_up_after_two_calls():
    b = ScriptedBackend(["no idea", "still no idea", "y: 7"])
    r = query_with_retry(b, "p", y_is_valid)
    assert r.calls == 2 and b.calls == 2
    assert r.error == "unparseable after retry"
    assert parse_y(r.raw).value is None


def test_transport_failure_retries_same_prompt():
    b = ScriptedBackend([None, "y: 8"])
    r = query_with_retry(b, "p", y_is_valid)
    assert r.raw == "y: 8" and r.calls == 2
    assert b.prompts == ["p", "p"]


def test_two_transport_failures_reported():
    b = ScriptedBackend([None, None])
    r = query_with_retry(b, "p", y_is_valid)
    assert r.raw is None and r.calls == 2
    assert "transport failure" in r.error


def test_forecast_llm_direct_missing_when_unparseable():
    w = make_window()
    fc, res = forecast_llm_direct(w, LLMSettings(ScriptedBackend(["?", "?"])))
    assert fc is None and res.calls == 2
    fc, _ = forecast_llm_direct(w, LLMSettings(ScriptedBackend(["y: -3"])))
    assert fc.value == 0.0 and fc.model is ModelId.LLM


# --- stubs ---

def test_persistence_backend_echoes_last_observation():
    w = make_window()
    w.exog[-1, 2] = np.nan
    b = PersistenceBackend()
    assert parse_y(b.complete(univariate_prompt(w))).value == 8.0
    ctx = parse_context(b.complete(context_prompt(w)))
    assert (ctx.x_b, ctx.x_v, ctx.s_t) == (16.0, 4.0, 17.0)


def test_oracle_backend_answers_from_panel():
    panel = synthetic_panel(2, 12)
    county = panel.counties[0]
    f = panel.county_frame(county)
    weeks = tuple(d.date() for d in f["week"][:8])
    w = Window(county, weeks, f["y"].to_numpy()[:8], f[["x_b", "x_v", "s_t"]].to_numpy()[:8], f["week"][8].date())
    b = OracleBackend(panel)
    assert parse_y(b.complete(univariate_prompt(w))).value == f["y"][8]
    ctx = parse_context(b.complete(context_prompt(w)))
    assert (ctx.x_b, ctx.x_v, ctx.s_t) == tuple(f.loc[8, ["x_b", "x_v", "s_t"]])
    assert b.complete("unrelated") == "no answer"


def test_stub_factory():
    assert isinstance(stub_backend("persistence"), PersistenceBackend)
    with pytest.raises(ValueError):
        stub_backend("oracle")
    with pytest.raises(ValueError):
        stub_backend("magic")
    with pytest.raises(BackendError):
        stub_backend("scripted").complete("x")


# --- http backend ---

def chat_transport(answer, seen=None, status=200):
    def handler(request: httpx.Request):
        body = json.loads(request.content)
        if seen is not None:
            seen.append((request, body))
        if status != 200:
            return httpx.Response(status, text="boom")
        return httpx.Response(200, json={"choices": [{"message": {"content": answer(body)}}]})
    return httpx.MockTransport(handler)


def test_http_backend_request_and_response(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sekret")
    seen = []
    cfg = BackendConfig(endpoint_url="http://llm.test/v1/chat/completions", model_name="m1", api_key_env_var="TEST_KEY")
    b = HttpBackend(cfg, transport=chat_transport(lambda body: "y: 3", seen))
    assert b.complete("hello") == "y: 3"
    request, body = seen[0]
    assert request.headers["Authorization"] == "Bearer sekret"
    assert body == {"model": "m1", "messages": [{"role": "user", "content": "hello"}]}


def test_http_backend_sends_temperature_only_when_set():
    cfg = BackendConfig(endpoint_url="http://x", temperature=0.2)
    assert HttpBackend(cfg).request_body("p")["temperature"] == 0.2
    assert "temperature" not in HttpBackend(BackendConfig(endpoint_url="http://x")).request_body("p")


def test_http_backend_errors():
    cfg = BackendConfig(endpoint_url="http://llm.test")
    with pytest.raises(BackendError, match="HTTP 503"):
        HttpBackend(cfg, transport=chat_transport(None, status=503)).complete("p")
    bad = httpx.MockTransport(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(BackendError, match="malformed"):
        HttpBackend(cfg, transport=bad).complete("p")

    def refuse(request):
        raise httpx.ConnectError("refused")
    with pytest.raises(BackendError):
        HttpBackend(cfg, transport=httpx.MockTransport(refuse)).complete("p")


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(timeout=0)
    with pytest.raises(ValueError):
        BackendConfig(max_concurrency=0)


# --- transcript cache ---

def test_transcript_replay_avoids_backend(tmp_path):
    path = tmp_path / "t.jsonl"
    cache = TranscriptCache(path)
    live = ScriptedBackend(["y: 11"], model_name="m")
    first = query_with_retry(live, "p", y_is_valid, run=2, cache=cache)
    assert first.calls == 1

    replay_backend = ScriptedBackend([], model_name="m")
    again = query_with_retry(replay_backend, "p", y_is_valid, run=2, cache=TranscriptCache(path))
    assert again.raw == "y: 11" and again.calls == 0 and replay_backend.calls == 0

    # a different run id is a different cache key
    other = query_with_retry(replay_backend, "p", y_is_valid, run=3, cache=TranscriptCache(path))
    assert other.raw is None

    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"model", "prompt_sha256", "run", "response", "timestamp"}


def test_transcript_records_retry_prompts(tmp_path):
    cache = TranscriptCache(tmp_path / "t.jsonl")
    query_with_retry(ScriptedBackend(["bad", "y: 2"], "m"), "p", y_is_valid, cache=cache)
    assert len(cache) == 2
    r = query_with_retry(ScriptedBackend([], "m"), "p", y_is_valid, cache=TranscriptCache(tmp_path / "t.jsonl"))
    assert r.raw == "y: 2" and r.retried and r.calls == 0

