"""Rolling-origin evaluation, point metrics, lead-lag alignment and tertile summaries.

Percent errors use a floored denominator, ``100 * (y_hat - y) / max(y, 1)``.
Per-county values are computed per run, averaged across runs, and then
summarized across counties as mean and SD within each intensity tertile.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._stats import mean_sd, pearson
from .context import LLMSettings, forecast_llm_direct
from .hybrid import HybridConfig, hybrid_forecast
from .models import (
    ModelId,
    Window,
    fit_forecast_ar1,
    fit_forecast_arx,
    fit_forecast_holt,
    fit_forecast_linreg,
    forecast_lag1,
    persistence_next,
)
from .panel import EXOG_FIELDS, Panel

logger = logging.getLogger(__name__)

CLASSICAL_MODELS = (ModelId.LAG1, ModelId.AR1, ModelId.HOLT, ModelId.ARX, ModelId.LINREG)
LLM_MODELS = (ModelId.LLM, ModelId.HYBRID_ARX, ModelId.HYBRID_LINREG)
MIN_PROFILE_POINTS = 3
OVERALL = "Overall"


class Metric(str, enum.Enum):
    MAPE = "MAPE"
    MPE = "MPE"
    ELL_STAR = "EllStar"
    RHO_STAR = "RhoStar"


LEAD_LAG_METRICS = (Metric.ELL_STAR, Metric.RHO_STAR)


@dataclass
class EvalConfig:
    window_len: int = 8
    n_runs: int = 3
    lag_max: int = 4
    eval_period: tuple[date | None, date | None] = (None, None)
    models: tuple[ModelId, ...] = (ModelId.LAG1, ModelId.AR1, ModelId.HOLT, ModelId.ARX)
    # SD over a county's evaluation weeks, and SD across counties in a summary.
    county_sd_ddof: int = 0
    summary_sd_ddof: int = 1
    strict_context: bool = True

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.lag_max < 1:
            raise ValueError("lag_max must be >= 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        self.models = tuple(ModelId(m) for m in self.models)


def pct_error(y_hat: float, y_true: float) -> float:
    return 100.0 * (y_hat - y_true) / max(y_true, 1.0)


@dataclass(frozen=True)
class ForecastRecord:
    county: str
    week: date
    model: ModelId
    run: int
    y_hat: float
    y_true: float
    pct_error: float
    fallback_used: bool = False
    exog_next: dict | None = None
    stage1: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "county": self.county,
            "week": self.week.isoformat(),
            "model": self.model.value,
            "run": self.run,
            "y_hat": self.y_hat,
            "y_true": self.y_true,
            "pct_error": self.pct_error,
            "fallback_used": self.fallback_used,
        }
        if self.exog_next is not None:
            out["exog_next"] = self.exog_next
        if self.stage1 is not None:
            out["stage1"] = self.stage1
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForecastRecord":
        return cls(
            county=d["county"],
            week=date.fromisoformat(d["week"]),
            model=ModelId(d["model"]),
            run=int(d["run"]),
            y_hat=float(d["y_hat"]),
            y_true=float(d["y_true"]),
            pct_error=float(d["pct_error"]),
            fallback_used=bool(d.get("fallback_used", False)),
            exog_next=d.get("exog_next"),
            stage1=d.get("stage1"),
        )


def write_records(records: Iterable[ForecastRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[ForecastRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ForecastRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class Target:
    window: Window
    y_true: float


@dataclass
class SkipLog:
    """Windows and forecasts that produced no record, with reasons."""

    entries: list[tuple[str, date | None, str]] = field(default_factory=list)

    def add(self, county: str, week: date | None, reason: str) -> None:
        self.entries.append((county, week, reason))

    def __len__(self) -> int:
        return len(self.entries)


def build_targets(panel: Panel, cfg: EvalConfig, skipped: SkipLog | None = None) -> list[Target]:
    """All evaluable (window, y_true) pairs, ordered by county then target week.

    A target week needs an observed y and L fully observed preceding weeks.
    Windows are copies of data dated at or before the origin only.
    """
    L = cfg.window_len
    lo, hi = cfg.eval_period
    out = []
    for county in panel.counties:
        sub = panel.county_frame(county)
        weeks = [w.date() for w in sub["week"]]
        y = sub["y"].to_numpy(dtype=float)
        exog = sub[list(EXOG_FIELDS)].to_numpy(dtype=float)
        n_before = len(out)
        for t in range(L - 1, len(weeks) - 1):
            target = weeks[t + 1]
            if (lo is not None and target < lo) or (hi is not None and target > hi):
                continue
            hist = y[t - L + 1:t + 1]
            if not np.all(np.isfinite(hist)):
                if skipped is not None:
                    skipped.add(county, target, "missing y in lookback window")
                continue
            if not math.isfinite(y[t + 1]):
                if skipped is not None:
                    skipped.add(county, target, "missing y at target week")
                continue
            window = Window(
                county=county,
                weeks=tuple(weeks[t - L + 1:t + 1]),
                y=hist.copy(),
                exog=exog[t - L + 1:t + 1].copy(),
                target_week=target,
            )
            out.append(Target(window, float(y[t + 1])))
        if len(out) == n_before:
            logger.warning("%s: no valid evaluation windows", county)
            if skipped is not None:
                skipped.add(county, None, "no valid evaluation windows")
    return out


def classical_forecast(model: ModelId, window: Window):
    """Forecast from a non-LLM model. Exogenous next-week values are persisted from the window."""
    if model is ModelId.LAG1:
        return forecast_lag1(window.y)
    if model is ModelId.AR1:
        return fit_forecast_ar1(window.y)[0]
    if model is ModelId.HOLT:
        return fit_forecast_holt(window.y)
    if model is ModelId.ARX:
        return fit_forecast_arx(window.y, window.exog, persistence_next(window.exog))[0]
    if model is ModelId.LINREG:
        return fit_forecast_linreg(window.y, window.exog, persistence_next(window.exog))[0]
    raise ValueError(f"{model} is not a classical model")


def _record(target: Target, forecast, run: int, **extra) -> ForecastRecord:
    w = target.window
    return ForecastRecord(
        county=w.county,
        week=w.target_week,
        model=forecast.model,
        run=run,
        y_hat=forecast.value,
        y_true=target.y_true,
        pct_error=pct_error(forecast.value, target.y_true),
        fallback_used=forecast.fallback_used,
        **extra,
    )


def _llm_record(model: ModelId, target: Target, run: int, llm: LLMSettings, strict: bool,
                skipped: SkipLog | None) -> ForecastRecord | None:
    w = target.window
    if model is ModelId.LLM:
        forecast, result = forecast_llm_direct(w, llm, run)
        if forecast is None:
            reason = result.error or "unparseable response"
            logger.warning("%s %s run %d: LLM forecast missing (%s)", w.county, w.target_week, run, reason)
            if skipped is not None:
                skipped.add(w.county, w.target_week, f"{model.value} run {run}: {reason}")
            return None
        return _record(target, forecast, run)
    downstream = ModelId.ARX if model is ModelId.HYBRID_ARX else ModelId.LINREG
    cfg = HybridConfig(downstream, llm, run_id=run, strict=strict)
    forecast, exog_next, flags = hybrid_forecast(w, cfg)
    if flags.any_fallback and skipped is not None:
        skipped.add(w.county, w.target_week, f"{model.value} run {run}: stage-1 persistence fallback")
    return _record(
        target, forecast, run,
        exog_next={"x_b": exog_next.x_b, "x_v": exog_next.x_v, "s_t": exog_next.s_t},
        stage1=flags.to_dict(),
    )


def rolling_origin(panel: Panel, model: ModelId | str, cfg: EvalConfig, llm: LLMSettings | None = None,
                   skipped: SkipLog | None = None, targets: Sequence[Target] | None = None) -> list[ForecastRecord]:
    """One-step-ahead forecasts for every evaluable county-week and run.

    Deterministic models are fitted once per window and the record repeated
    for each run. LLM-backed models query the backend once per run, with
    up to ``backend.max_concurrency`` requests in flight.
    """
    model = ModelId(model)
    if targets is None:
        targets = build_targets(panel, cfg, skipped)
    runs = range(1, cfg.n_runs + 1)
    if model in CLASSICAL_MODELS:
        out = []
        for target in targets:
            forecast = classical_forecast(model, target.window)
            out.extend(_record(target, forecast, run) for run in runs)
        return out
    if llm is None:
        raise ValueError(f"model {model.value} needs an LLM backend")
    jobs = [(target, run) for target in targets for run in runs]
    workers = max(1, int(getattr(llm.backend, "max_concurrency", 1)))

    def work(job):
        return _llm_record(model, job[0], job[1], llm, cfg.strict_context, skipped)

    if workers == 1:
        results = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    return [r for r in results if r is not None]


def evaluate_models(panel: Panel, cfg: EvalConfig, llm: LLMSettings | None = None,
                    skipped: SkipLog | None = None) -> list[ForecastRecord]:
    targets = build_targets(panel, cfg, skipped)
    records = []
    for model in cfg.models:
        records.extend(rolling_origin(panel, model, cfg, llm, skipped, targets))
    return records


# --- point metrics ---------------------------------------------------------------

def _points(records: Sequence[ForecastRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("need at least one record")
    y_hat = np.array([r.y_hat for r in records], dtype=float)
    y = np.array([r.y_true for r in records], dtype=float)
    return y_hat, y


def mape(records: Sequence[ForecastRecord], ddof: int = 0) -> tuple[float, float]:
    y_hat, y = _points(records)
    return mean_sd(100.0 * np.abs(y_hat - y) / np.maximum(y, 1.0), ddof)


def mpe(records: Sequence[ForecastRecord], ddof: int = 0) -> tuple[float, float]:
    y_hat, y = _points(records)
    return mean_sd(100.0 * (y_hat - y) / np.maximum(y, 1.0), ddof)


@dataclass(frozen=True)
class CountyMetrics:
    county: str
    model: ModelId
    mape_mean: float
    mape_sd: float
    mpe_mean: float
    mpe_sd: float
    n_weeks: int
    run: int | None = None


# --- lead-lag --------------------------------------------------------------------

@dataclass(frozen=True)
class LeadLagResult:
    profile: dict[int, float]
    ell_star: int
    rho_star: float
    county: str = ""
    model: str = ""
    run: int | None = None


def lead_lag(pred, actual, lag_max: int = 4, county: str = "", model: str = "") -> LeadLagResult | None:
    """Lagged correlation between differenced forecast and actual series.

    ``pred`` and ``actual`` are aligned on consecutive weeks, NaN marking
    gaps. For each offset l in [-lag_max, lag_max], rho(l) correlates
    diff(pred)[t - l] with diff(actual)[t] over all weeks where both exist.
    The argmax breaks ties toward l = 0, then toward negative l. Returns None
    when a difference series is constant or no offset has 3 or more pairs.
    """
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.ndim != 1:
        raise ValueError("pred and actual must be 1-D and aligned")
    dp = np.diff(pred)
    dy = np.diff(actual)
    both = np.isfinite(dp) & np.isfinite(dy)
    if int(both.sum()) < lag_max + MIN_PROFILE_POINTS:
        raise ValueError(f"need at least {lag_max + MIN_PROFILE_POINTS} overlapping difference points")
    if np.ptp(dp[np.isfinite(dp)]) == 0 or np.ptp(dy[np.isfinite(dy)]) == 0:
        logger.info("lead_lag %s %s: constant difference series", county, model)
        return None
    n = dp.size
    profile: dict[int, float] = {}
    for ell in range(-lag_max, lag_max + 1):
        # pairs (dp[i - ell], dy[i])
        i = np.arange(max(0, ell), min(n, n + ell))
        a, b = dp[i - ell], dy[i]
        ok = np.isfinite(a) & np.isfinite(b)
        if ok.sum() < MIN_PROFILE_POINTS:
            continue
        r = pearson(a[ok], b[ok])
        if r is not None:
            profile[ell] = r
    if not profile:
        return None
    ell_star = min(profile, key=lambda k: (-profile[k], abs(k), k))
    return LeadLagResult(profile, ell_star, profile[ell_star], county, model)


def _series_on_grid(records: Sequence[ForecastRecord]) -> tuple[np.ndarray, np.ndarray]:
    recs = sorted(records, key=lambda r: r.week)
    start = recs[0].week
    n = (recs[-1].week - start).days // 7 + 1
    pred = np.full(n, np.nan)
    actual = np.full(n, np.nan)
    for r in recs:
        k = (r.week - start).days // 7
        pred[k] = r.y_hat
        actual[k] = r.y_true
    return pred, actual


# --- per-county and cross-county summaries ---------------------------------------

def _group(records: Iterable[ForecastRecord]) -> dict[tuple[str, ModelId, int], list[ForecastRecord]]:
    groups: dict[tuple[str, ModelId, int], list[ForecastRecord]] = defaultdict(list)
    for r in records:
        groups[(r.county, r.model, r.run)].append(r)
    return groups


def run_level_metrics(records: Iterable[ForecastRecord], ddof: int = 0) -> list[CountyMetrics]:
    out = []
    for (county, model, run), recs in sorted(_group(records).items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])):
        m, s = mape(recs, ddof)
        b, bs = mpe(recs, ddof)
        out.append(CountyMetrics(county, model, m, s, b, bs, len(recs), run))
    return out


def run_level_lead_lag(records: Iterable[ForecastRecord], lag_max: int) -> list[LeadLagResult]:
    out = []
    for (county, model, run), recs in sorted(_group(records).items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])):
        if model is ModelId.LAG1:
            continue
        pred, actual = _series_on_grid(recs)
        try:
            res = lead_lag(pred, actual, lag_max, county, model.value)
        except ValueError as exc:
            logger.warning("%s %s run %d: lead-lag skipped (%s)", county, model.value, run, exc)
            continue
        if res is not None:
            out.append(LeadLagResult(res.profile, res.ell_star, res.rho_star, county, model.value, run))
    return out


def average_runs(metrics: Sequence[CountyMetrics]) -> list[CountyMetrics]:
    """Collapse run-level county metrics into one row per (county, model)."""
    groups: dict[tuple[str, ModelId], list[CountyMetrics]] = defaultdict(list)
    for m in metrics:
        groups[(m.county, m.model)].append(m)
    out = []
    for (county, model), ms in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        out.append(CountyMetrics(
            county, model,
            float(np.mean([m.mape_mean for m in ms])),
            float(np.mean([m.mape_sd for m in ms])),
            float(np.mean([m.mpe_mean for m in ms])),
            float(np.mean([m.mpe_sd for m in ms])),
            int(round(np.mean([m.n_weeks for m in ms]))),
        ))
    return out


def average_lead_lag(results: Sequence[LeadLagResult]) -> dict[tuple[str, str], tuple[float, float]]:
    """Per (county, model): run-averaged (ell_star, rho_star)."""
    groups: dict[tuple[str, str], list[LeadLagResult]] = defaultdict(list)
    for r in results:
        groups[(r.county, r.model)].append(r)
    return {
        k: (float(np.mean([r.ell_star for r in rs])), float(np.mean([r.rho_star for r in rs])))
        for k, rs in sorted(groups.items())
    }


@dataclass(frozen=True)
class TertileSummary:
    tertile: str
    model: ModelId
    metric: Metric
    mean: float
    sd: float
    n_counties: int


def aggregate(values: Mapping[str, float], tertiles: Mapping[str, object], model: ModelId | str,
              metric: Metric | str, ddof: int = 1) -> list[TertileSummary]:
    """Mean and SD of per-county values within each tertile, plus an Overall row.

    ``tertiles`` maps county to a tertile name (or an object with a
    ``tertile`` attribute). Lag-1 never gets lead-lag rows, since persistence
    aligns perfectly at l = -1 by construction.
    """
    model = ModelId(model)
    metric = Metric(metric)
    if model is ModelId.LAG1 and metric in LEAD_LAG_METRICS:
        return []
    by_tertile: dict[str, list[float]] = defaultdict(list)
    overall = []
    for county, value in sorted(values.items()):
        if value is None or not math.isfinite(value):
            continue
        t = tertiles.get(county)
        if t is None:
            logger.warning("%s has no tertile; left out of tertile rows", county)
        else:
            t = getattr(t, "tertile", t)
            by_tertile[getattr(t, "value", t)].append(value)
        overall.append(value)
    out = []
    for name in ("Low", "Mid", "High"):
        vals = by_tertile.get(name)
        if not vals:
            logger.warning("tertile %s has no counties for %s/%s", name, model.value, metric.value)
            continue
        m, s = mean_sd(vals, ddof)
        out.append(TertileSummary(name, model, metric, m, s, len(vals)))
    if overall:
        m, s = mean_sd(overall, ddof)
        out.append(TertileSummary(OVERALL, model, metric, m, s, len(overall)))
    return out


@dataclass
class Summary:
    run_metrics: list[CountyMetrics]
    county_metrics: list[CountyMetrics]
    run_lead_lag: list[LeadLagResult]
    county_lead_lag: dict[tuple[str, str], tuple[float, float]]
    tertile_rows: list[TertileSummary]
    models: tuple[ModelId, ...]


def summarize(records: Sequence[ForecastRecord], tertiles: Mapping[str, object], cfg: EvalConfig) -> Summary:
    run_metrics = run_level_metrics(records, cfg.county_sd_ddof)
    county_metrics = average_runs(run_metrics)
    run_ll = run_level_lead_lag(records, cfg.lag_max)
    county_ll = average_lead_lag(run_ll)
    present = {r.model for r in records}
    models = tuple(m for m in ModelId if m in present)
    rows: list[TertileSummary] = []
    for model in models:
        cm = [c for c in county_metrics if c.model is model]
        rows += aggregate({c.county: c.mape_mean for c in cm}, tertiles, model, Metric.MAPE, cfg.summary_sd_ddof)
        rows += aggregate({c.county: c.mpe_mean for c in cm}, tertiles, model, Metric.MPE, cfg.summary_sd_ddof)
        ll = {county: v for (county, m), v in county_ll.items() if m == model.value}
        rows += aggregate({c: v[0] for c, v in ll.items()}, tertiles, model, Metric.ELL_STAR, cfg.summary_sd_ddof)
        rows += aggregate({c: v[1] for c, v in ll.items()}, tertiles, model, Metric.RHO_STAR, cfg.summary_sd_ddof)
    return Summary(run_metrics, county_metrics, run_ll, county_ll, rows, models)


def iter_weeks(start: date, stop: date) -> Iterable[date]:
    d = start
    while d <= stop:
        yield d
        d += timedelta(days=7)
