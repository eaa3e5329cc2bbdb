"""Two-stage hybrid forecaster.

Stage 1 asks the context backend for next week's (x_b, x_v, s_t). Stage 2
feeds exactly those three numbers, and nothing else from week t+1, into the
ARX or linear-regression fit over the historical window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .context import (
    LLMSettings,
    ParsedContext,
    context_is_valid,
    context_prompt,
    parse_context,
    query_with_retry,
)
from .models import (
    ExogNext,
    Forecast,
    ModelId,
    Window,
    fit_forecast_arx,
    fit_forecast_linreg,
    persistence_next,
)

_DOWNSTREAM = {
    ModelId.ARX: (ModelId.HYBRID_ARX, fit_forecast_arx),
    ModelId.LINREG: (ModelId.HYBRID_LINREG, fit_forecast_linreg),
}


@dataclass
class HybridConfig:
    downstream: ModelId
    llm: LLMSettings
    run_id: int = 1
    # strict: any missing label discards the whole predicted triple
    strict: bool = True

    def __post_init__(self):
        self.downstream = ModelId(self.downstream)
        if self.downstream not in _DOWNSTREAM:
            raise ValueError(f"downstream must be ARX or LinReg, got {self.downstream}")
        if self.run_id < 1:
            raise ValueError("run_id must be positive")


@dataclass(frozen=True)
class Stage1Flags:
    """Which predicted components were replaced by persistence values."""

    x_b: bool
    x_v: bool
    s_t: bool
    retried: bool
    error: str | None = None

    @property
    def any_fallback(self) -> bool:
        return self.x_b or self.x_v or self.s_t

    def to_dict(self) -> dict:
        return asdict(self)


def stage1_context(window: Window, cfg: HybridConfig) -> tuple[ExogNext, Stage1Flags]:
    result = query_with_retry(cfg.llm.backend, context_prompt(window), context_is_valid,
                              run=cfg.run_id, cache=cfg.llm.cache, backoff=cfg.llm.backoff)
    parsed = parse_context(result.raw) if result.raw is not None else ParsedContext(None, None, None)
    predicted = [parsed.x_b, parsed.x_v, parsed.s_t]
    if cfg.strict and not parsed.complete:
        predicted = [None, None, None]
    fallback = persistence_next(window.exog).as_array()
    values = [float(fb) if p is None else p for p, fb in zip(predicted, fallback)]
    flags = Stage1Flags(*(p is None for p in predicted), retried=result.retried, error=result.error)
    return ExogNext(*values), flags


def hybrid_forecast(window: Window, cfg: HybridConfig) -> tuple[Forecast, ExogNext, Stage1Flags]:
    model, fit = _DOWNSTREAM[cfg.downstream]
    exog_next, flags = stage1_context(window, cfg)
    forecast, _ = fit(window.y, window.exog, exog_next)
    return Forecast(forecast.value, model, forecast.fallback_used), exog_next, flags
