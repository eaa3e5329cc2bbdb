"""LLM prompting: fixed templates, labeled-number parsing, one-shot retry, backends.

A backend is anything with ``model_name``, ``max_concurrency`` and a
``complete(prompt) -> str`` method that raises :class:`BackendError` on
transport failure. :class:`HttpBackend` talks to a chat-completions style
endpoint; the stub backends answer from the prompt text (persistence), from
the panel (oracle) or from a fixed transcript (scripted), so evaluations can
run without network access.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .models import Forecast, ModelId

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-5-2025-08-07"
CONTEXT_LABELS = ("X_B", "X_V", "s_t")
LABEL_FIELDS = {"y": "y", "X_B": "x_b", "X_V": "x_v", "s_t": "s_t"}
MISSING_TOKEN = "NA"

STRICT_SUFFIX = (
    "\n\nIMPORTANT: Your previous answer could not be parsed. Reply with only the "
    "requested line(s), each in the exact form `label: number`, using plain digits "
    "and no other text."
)

_NUMBER = r"[+-]?(?:(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?(?!\d|,\d)"


def _label_pattern(label: str) -> re.Pattern:
    return re.compile(rf"^\s*{re.escape(label)}\s*:\s*({_NUMBER})", re.IGNORECASE)


_Y_RE = _label_pattern("y")
_CONTEXT_RE = {label: _label_pattern(label) for label in CONTEXT_LABELS}
_ROW_RE = re.compile(r"^(\d{4}-\d{2}-\d{2}):\s*(.*)$")
_REGION_RE = re.compile(r"observations for region (.+):\s*$", re.MULTILINE)
_DATE_RE = re.compile(r"\(week ending (\d{4}-\d{2}-\d{2})\)")


class BackendError(RuntimeError):
    """Transport-level failure talking to a completion backend."""


class PromptMode(str, enum.Enum):
    UNIVARIATE = "univariate"
    CONTEXT = "context"


@dataclass(frozen=True)
class PromptSpec:
    geography: str
    prediction_date: date
    recent_block: tuple[tuple[date, Mapping[str, float | None]], ...]
    mode: PromptMode = PromptMode.UNIVARIATE
    window_len: int = 8


@dataclass(frozen=True)
class ParsedY:
    value: float | None
    raw_text: str
    retried: bool = False


@dataclass(frozen=True)
class ParsedContext:
    x_b: float | None
    x_v: float | None
    s_t: float | None
    retried: bool = False

    @property
    def complete(self) -> bool:
        return self.x_b is not None and self.x_v is not None and self.s_t is not None


@dataclass(frozen=True)
class QueryResult:
    raw: str | None
    retried: bool
    error: str | None = None
    calls: int = 0


def format_value(v: float | None) -> str:
    """Render a number so that parsing it back yields the identical float."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return MISSING_TOKEN
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def build_prompt(spec: PromptSpec) -> str:
    if len(spec.recent_block) != spec.window_len:
        raise ValueError(f"recent_block must have exactly {spec.window_len} rows, got {len(spec.recent_block)}")
    days = [d for d, _ in spec.recent_block]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ValueError("recent_block must be in chronological order")
    labels = ("y",) if spec.mode is PromptMode.UNIVARIATE else ("y",) + CONTEXT_LABELS
    rows = []
    for d, values in spec.recent_block:
        cells = ", ".join(f"{lab}={format_value(values.get(lab))}" for lab in labels)
        rows.append(f"{d.isoformat()}: {cells}")
    head = f"Given the last {spec.window_len} weekly observations for region {spec.geography}:"
    when = spec.prediction_date.isoformat()
    if spec.mode is PromptMode.UNIVARIATE:
        ask = f"Predict next week's value (week ending {when}) for the numeric series y."
        tail = "Return exactly one line:\ny: <number>"
    else:
        ask = f"Predict next week's values (week ending {when}) for three numeric series: X_B, X_V, s_t"
        tail = "Return exactly three lines:\nX_B: <number>\nX_V: <number>\ns_t: <number>"
    return "\n\n".join([head, "\n".join(rows), ask, tail])


def _number(text: str) -> float | None:
    value = float(text.replace(",", ""))
    return value if math.isfinite(value) else None


def _first_match(pattern: re.Pattern, raw: str) -> float | None:
    for line in raw.splitlines():
        m = pattern.match(line.replace("*", "").replace("`", "").lstrip(" \t-•"))
        if m:
            value = _number(m.group(1))
            if value is not None:
                return max(0.0, value)
    return None


def parse_y(raw: str) -> ParsedY:
    return ParsedY(_first_match(_Y_RE, raw or ""), raw or "")


def parse_context(raw: str) -> ParsedContext:
    raw = raw or ""
    return ParsedContext(*(_first_match(_CONTEXT_RE[lab], raw) for lab in CONTEXT_LABELS))


def render_response(values: Mapping[str, float | None]) -> str:
    """Format an answer the way the templates request (missing labels omitted)."""
    return "\n".join(f"{k}: {format_value(v)}" for k, v in values.items() if v is not None)


class Backend(Protocol):
    model_name: str
    max_concurrency: int

    def complete(self, prompt: str) -> str: ...


@dataclass
class BackendConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = DEFAULT_MODEL
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_concurrency: int = 4
    temperature: float | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


class HttpBackend:
    """Chat-completions client; sampling parameters are sent only if configured."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.model_name = config.model_name
        self.max_concurrency = config.max_concurrency
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def request_body(self, prompt: str) -> dict:
        body = {"model": self.model_name, "messages": [{"role": "user", "content": prompt}]}
        if self.config.temperature is not None:
            body["temperature"] = self.config.temperature
        return body

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        with self._slots:
            try:
                resp = self._client.post(self.config.endpoint_url, json=self.request_body(prompt), headers=headers)
            except httpx.HTTPError as exc:
                raise BackendError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response body: {exc}") from exc
        return content if isinstance(content, str) else ""

    def close(self) -> None:
        self._client.close()


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class TranscriptCache:
    """Append-only JSON-lines record of backend responses.

    Keyed by (model, prompt hash, run) so that a rerun replays the recorded
    responses instead of calling the backend again.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str, int], str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    key = (rec["model"], rec["prompt_sha256"], int(rec["run"]))
                    self._entries.setdefault(key, rec["response"])

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, model: str, prompt: str, run: int) -> str | None:
        with self._lock:
            return self._entries.get((model, prompt_sha256(prompt), run))

    def put(self, model: str, prompt: str, run: int, response: str) -> None:
        key = (model, prompt_sha256(prompt), run)
        record = {
            "model": model,
            "prompt_sha256": key[1],
            "run": run,
            "response": response,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def query_with_retry(backend: Backend, prompt: str, validate: Callable[[str], bool], *,
                     run: int = 1, cache: TranscriptCache | None = None,
                     backoff: float = 0.0) -> QueryResult:
    """Query once; on a parse or transport failure issue exactly one retry.

    A parse failure retries with :data:`STRICT_SUFFIX` appended; a transport
    failure retries the same prompt after sleeping ``backoff`` seconds. At
    most two backend calls are made. The caller records a missing value
    when the returned text still does not validate.
    """
    calls = 0

    def attempt(text: str) -> tuple[str | None, str | None]:
        nonlocal calls
        if cache is not None:
            hit = cache.get(backend.model_name, text, run)
            if hit is not None:
                return hit, None
        calls += 1
        try:
            out = backend.complete(text)
        except BackendError as exc:
            logger.warning("backend error (run %d): %s", run, exc)
            return None, str(exc)
        if cache is not None:
            cache.put(backend.model_name, text, run, out)
        return out, None

    first, err = attempt(prompt)
    if first is not None and validate(first):
        return QueryResult(first, False, None, calls)
    if err is not None:
        if backoff > 0:
            time.sleep(backoff)
        second, err2 = attempt(prompt)
    else:
        second, err2 = attempt(prompt + STRICT_SUFFIX)
    if second is None:
        note = f"transport failure: {err2}" if err is None else f"transport failure twice: {err2}"
        return QueryResult(first, True, note, calls)
    return QueryResult(second, True, None if validate(second) else "unparseable after retry", calls)


def y_is_valid(raw: str) -> bool:
    return parse_y(raw).value is not None


def context_is_valid(raw: str) -> bool:
    return parse_context(raw).complete


# --- deterministic stub backends -------------------------------------------------

def _prompt_mode(prompt: str) -> PromptMode:
    return PromptMode.CONTEXT if "Return exactly three lines" in prompt else PromptMode.UNIVARIATE


def _recent_rows(prompt: str) -> list[dict[str, float | None]]:
    rows = []
    for line in prompt.splitlines():
        m = _ROW_RE.match(line.strip())
        if not m:
            continue
        values: dict[str, float | None] = {}
        for cell in m.group(2).split(","):
            if "=" not in cell:
                continue
            key, _, val = cell.partition("=")
            val = val.strip()
            values[key.strip()] = None if val == MISSING_TOKEN else float(val)
        rows.append(values)
    return rows


class PersistenceBackend:
    """Answers with the last observed value of each requested label."""

    model_name = "stub-persistence"
    max_concurrency = 4

    def complete(self, prompt: str) -> str:
        rows = _recent_rows(prompt)
        labels = CONTEXT_LABELS if _prompt_mode(prompt) is PromptMode.CONTEXT else ("y",)
        answer: dict[str, float | None] = {}
        for lab in labels:
            observed = [r[lab] for r in rows if r.get(lab) is not None]
            answer[lab] = observed[-1] if observed else None
        return render_response(answer)


class OracleBackend:
    """Answers with the true panel values for the requested week (test double)."""

    model_name = "stub-oracle"
    max_concurrency = 4

    def __init__(self, panel):
        f = panel.frame
        self._values: dict[tuple[str, date], dict[str, float | None]] = {}
        for rec in f[["county", "week", "y", "x_b", "x_v", "s_t"]].itertuples(index=False):
            self._values[(rec.county, rec.week.date())] = {
                lab: (None if np.isnan(getattr(rec, fld)) else float(getattr(rec, fld)))
                for lab, fld in LABEL_FIELDS.items()
            }

    def complete(self, prompt: str) -> str:
        region = _REGION_RE.search(prompt)
        when = _DATE_RE.search(prompt)
        if not region or not when:
            return "no answer"
        row = self._values.get((region.group(1), date.fromisoformat(when.group(1))))
        if row is None:
            return "no data for the requested week"
        labels = CONTEXT_LABELS if _prompt_mode(prompt) is PromptMode.CONTEXT else ("y",)
        return render_response({lab: row[lab] for lab in labels})


class ScriptedBackend:
    """Replays a fixed list of responses in order; ``None`` simulates a transport error."""

    max_concurrency = 1

    def __init__(self, responses: Sequence[str | None], model_name: str = "stub-scripted"):
        self.model_name = model_name
        self._responses = list(responses)
        self._pos = 0
        self._lock = threading.Lock()
        self.prompts: list[str] = []

    @property
    def calls(self) -> int:
        return self._pos

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.prompts.append(prompt)
            if self._pos >= len(self._responses):
                self._pos += 1
                raise BackendError("scripted transcript exhausted")
            item = self._responses[self._pos]
            self._pos += 1
        if item is None:
            raise BackendError("scripted transport failure")
        return item


def stub_backend(kind: str, panel=None, script: Sequence[str | None] | None = None):
    kind = kind.lower()
    if kind == "persistence":
        return PersistenceBackend()
    if kind == "oracle":
        if panel is None:
            raise ValueError("oracle backend needs a panel")
        return OracleBackend(panel)
    if kind == "scripted":
        return ScriptedBackend(script or [])
    raise ValueError(f"unknown stub backend {kind!r}")


@dataclass
class LLMSettings:
    """Everything the LLM-backed models need besides the window itself."""

    backend: Backend
    cache: TranscriptCache | None = None
    backoff: float = 0.0


def _window_block(window, labels: Sequence[str]) -> tuple[tuple[date, dict], ...]:
    rows = []
    for i, week in enumerate(window.weeks):
        values = {"y": float(window.y[i])}
        for j, lab in enumerate(CONTEXT_LABELS):
            v = window.exog[i, j]
            values[lab] = None if np.isnan(v) else float(v)
        rows.append((week, {k: values[k] for k in labels}))
    return tuple(rows)


def univariate_prompt(window) -> str:
    spec = PromptSpec(window.county, window.target_week, _window_block(window, ("y",)),
                      PromptMode.UNIVARIATE, len(window.weeks))
    return build_prompt(spec)


def context_prompt(window) -> str:
    spec = PromptSpec(window.county, window.target_week, _window_block(window, ("y",) + CONTEXT_LABELS),
                      PromptMode.CONTEXT, len(window.weeks))
    return build_prompt(spec)


def forecast_llm_direct(window, settings: LLMSettings, run: int = 1) -> tuple[Forecast | None, QueryResult]:
    """Prompt-only forecast of next week's y; None when the answer stays unparseable."""
    result = query_with_retry(settings.backend, univariate_prompt(window), y_is_valid,
                              run=run, cache=settings.cache, backoff=settings.backoff)
    value = parse_y(result.raw).value if result.raw is not None else None
    if value is None:
        return None, result
    return Forecast(value, ModelId.LLM), result
