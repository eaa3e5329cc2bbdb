"""Weekly county panel: ingestion, alignment, state fallback, tertiles, indicator ranking.

The panel is a long-format ``pandas.DataFrame`` with one row per county-week.
Core columns are ``county``, ``state_level``, ``week``, ``gap``, the target
``y`` and the three exogenous series ``x_b`` (adult ICU beds), ``x_v``
(patients on ventilators) and ``s_t`` (anosmia/ageusia search volume).
Extra candidate indicators live in ``indicator:<name>`` columns. Missing
weeks are materialized as explicit rows with ``gap=True`` so rolling windows
always advance by calendar weeks.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from ._stats import pearson

logger = logging.getLogger(__name__)

EXCLUDED_COUNTIES = ("Forest", "Juniata", "Perry", "Pike", "Snyder", "Cameron", "Sullivan")
EXOG_FIELDS = ("x_b", "x_v", "s_t")
CORE_FIELDS = ("y",) + EXOG_FIELDS
INDICATOR_PREFIX = "indicator:"
# x_b / x_v are weekly means, s_t a weekly sum; other signals are summed.
DEFAULT_AGGREGATION = {"y": "mean", "x_b": "mean", "x_v": "mean", "s_t": "sum"}
DEFAULT_TERTILE_WINDOW = (date(2020, 3, 1), date(2022, 1, 31))
MIN_CORRELATION_PAIRS = 3

WEEKDAYS = {
    "monday": 0, "tuesday": 1, "wednesday": 2, "thursday": 3,
    "friday": 4, "saturday": 5, "sunday": 6,
}


class SchemaError(ValueError):
    """Fatal problem with the ingestion configuration or CSV headers."""


class Tertile(str, enum.Enum):
    LOW = "Low"
    MID = "Mid"
    HIGH = "High"


@dataclass(frozen=True)
class CountyId:
    name: str
    state_level: bool = False


@dataclass(frozen=True)
class CountyMeta:
    county: CountyId
    population: int | None
    mean_weekly_y: float
    tertile: Tertile


@dataclass(frozen=True)
class IndicatorCorrelation:
    indicator: str
    r: float
    n_obs: int


@dataclass
class SourceSpec:
    """One CSV snapshot and how its columns map onto panel roles."""

    path: Path
    columns: dict[str, str]
    aggregate: dict[str, str] = field(default_factory=dict)

    def role_columns(self) -> dict[str, str]:
        return {role: col for col, role in self.columns.items()}


@dataclass
class SchemaConfig:
    sources: list[SourceSpec]
    week_ending: int = 6
    state_label: str | None = "Pennsylvania"
    exclude: tuple[str, ...] = EXCLUDED_COUNTIES
    county_suffix: str | None = " County"
    population: SourceSpec | None = None

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: str | Path = ".") -> "SchemaConfig":
        base = Path(base_dir)

        def _source(entry: Mapping) -> SourceSpec:
            if "path" not in entry or "columns" not in entry:
                raise SchemaError("each source needs 'path' and 'columns'")
            path = Path(entry["path"])
            if not path.is_absolute():
                path = base / path
            aggregate = {str(k): str(v).lower() for k, v in (entry.get("aggregate") or {}).items()}
            for col, mode in aggregate.items():
                if mode not in ("sum", "mean"):
                    raise SchemaError(f"aggregation mode for '{col}' must be sum or mean, got {mode!r}")
            return SourceSpec(path, {str(k): str(v) for k, v in entry["columns"].items()}, aggregate)

        sources = [_source(s) for s in raw.get("sources") or []]
        if not sources:
            raise SchemaError("schema config lists no sources")
        week_ending = raw.get("week_ending", "sunday")
        if isinstance(week_ending, str):
            if week_ending.lower() not in WEEKDAYS:
                raise SchemaError(f"unknown week_ending day {week_ending!r}")
            week_ending = WEEKDAYS[week_ending.lower()]
        exclude = raw.get("exclude_counties", EXCLUDED_COUNTIES)
        pop = raw.get("population")
        return cls(
            sources=sources,
            week_ending=int(week_ending),
            state_label=raw.get("state_label", "Pennsylvania"),
            exclude=tuple(exclude or ()),
            county_suffix=raw.get("county_suffix", " County"),
            population=_source(pop) if pop else None,
        )


@dataclass(frozen=True)
class Panel:
    frame: pd.DataFrame
    indicators: tuple[str, ...] = ()
    errors: tuple[str, ...] = ()
    excluded: tuple[str, ...] = ()
    population: Mapping[str, int] = field(default_factory=dict)

    @property
    def counties(self) -> tuple[str, ...]:
        f = self.frame
        return tuple(sorted(f.loc[~f["state_level"], "county"].unique()))

    @property
    def state_counties(self) -> tuple[str, ...]:
        f = self.frame
        return tuple(sorted(f.loc[f["state_level"], "county"].unique()))

    @property
    def week_range(self) -> tuple[date, date] | None:
        if self.frame.empty:
            return None
        return self.frame["week"].min().date(), self.frame["week"].max().date()

    @property
    def indicator_columns(self) -> list[str]:
        return [INDICATOR_PREFIX + name for name in self.indicators]

    def county_frame(self, county: str) -> pd.DataFrame:
        f = self.frame
        return f[f["county"] == county].reset_index(drop=True)

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")

    def to_csv_text(self) -> str:
        out = self.frame.copy()
        out["week"] = out["week"].dt.strftime("%Y-%m-%d")
        if self.population:
            out["population"] = out["county"].map(self.population).astype("Int64")
        buf = io.StringIO()
        out.to_csv(buf, index=False, lineterminator="\n", float_format="%.17g")
        return buf.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode("utf-8")).hexdigest()

    @classmethod
    def read_csv(cls, path: str | Path) -> "Panel":
        frame = pd.read_csv(path, float_precision="round_trip")
        frame["week"] = pd.to_datetime(frame["week"])
        for col in ["state_level", "gap"] + [c for c in frame.columns if c.endswith("_state_filled")]:
            frame[col] = frame[col].astype(bool)
        population = {}
        if "population" in frame.columns:
            pop = frame.dropna(subset=["population"]).drop_duplicates("county")
            population = {c: int(p) for c, p in zip(pop["county"], pop["population"])}
            frame = frame.drop(columns="population")
        indicators = tuple(
            c[len(INDICATOR_PREFIX):] for c in frame.columns
            if c.startswith(INDICATOR_PREFIX) and not c.endswith("_state_filled")
        )
        return cls(frame=frame, indicators=indicators, population=population)


def week_ending_for(d: date, week_ending: int = 6) -> date:
    """Week-ending date of the calendar week containing ``d``."""
    return d + timedelta(days=(week_ending - d.weekday()) % 7)


def _snap(dates: pd.Series, week_ending: int) -> pd.Series:
    offset = (week_ending - dates.dt.weekday) % 7
    return dates + pd.to_timedelta(offset, unit="D")


def _weekly(frame: pd.DataFrame, keys: list[str], modes: Mapping[str, str]) -> pd.DataFrame:
    """Aggregate value columns per key group; all-missing groups stay missing."""
    grouped = frame.groupby(keys, sort=True)
    parts = []
    for col, mode in modes.items():
        if mode == "sum":
            parts.append(grouped[col].sum(min_count=1))
        else:
            parts.append(grouped[col].mean())
    if not parts:
        return frame[keys].drop_duplicates().reset_index(drop=True)
    return pd.concat(parts, axis=1).reset_index()


def aggregate_daily_to_weekly(daily: Iterable[tuple[date, float]], mode: str = "sum",
                              week_ending: int = 6) -> list[tuple[date, float]]:
    """Collapse a daily series to one value per calendar week.

    Each date maps to the week ending on ``week_ending`` (default Sunday).
    ``mode`` is ``"sum"`` or ``"mean"`` over the observed days of the week;
    weeks without observations are absent from the output.
    """
    mode = mode.lower()
    if mode not in ("sum", "mean"):
        raise ValueError(f"mode must be 'sum' or 'mean', got {mode!r}")
    pairs = [(d, v) for d, v in daily]
    if not pairs:
        return []
    days = [d for d, _ in pairs]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ValueError("daily dates must be strictly increasing")
    frame = pd.DataFrame({
        "date": pd.to_datetime(days),
        "value": [np.nan if v is None else float(v) for _, v in pairs],
    })
    frame["week"] = _snap(frame["date"], week_ending)
    out = _weekly(frame, ["week"], {"value": mode}).dropna(subset=["value"])
    return [(w.date(), float(v)) for w, v in zip(out["week"], out["value"])]


def _canonical_name(raw: str, config: SchemaConfig) -> str:
    name = " ".join(raw.split())
    if config.state_label and name.lower() == config.state_label.lower():
        return config.state_label
    if config.county_suffix and not name.lower().endswith(config.county_suffix.strip().lower()):
        name = name + config.county_suffix
    return name


def _base_name(name: str, suffix: str | None) -> str:
    if suffix and name.lower().endswith(suffix.strip().lower()):
        return name[: -len(suffix.strip())].strip()
    return name


def _read_source(source: SourceSpec, config: SchemaConfig, errors: list[str]) -> pd.DataFrame:
    if not source.path.exists():
        raise SchemaError(f"source file not found: {source.path}")
    raw = pd.read_csv(source.path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [col for col in source.columns if col not in raw.columns]
    if missing:
        roles = ", ".join(f"'{c}' (role {source.columns[c]})" for c in missing)
        raise SchemaError(f"{source.path.name}: missing required column {roles}")
    by_role = source.role_columns()
    for required in ("county", "date"):
        if required not in by_role:
            raise SchemaError(f"{source.path.name}: no column mapped to role '{required}'")
    for role in by_role:
        if role not in ("county", "date") + CORE_FIELDS and not role.startswith(INDICATOR_PREFIX):
            raise SchemaError(f"{source.path.name}: unknown role {role!r}")

    name = source.path.name
    out = pd.DataFrame()
    county_raw = raw[by_role["county"]].str.strip()
    out["county"] = [_canonical_name(c, config) if c else "" for c in county_raw]
    dates = pd.to_datetime(raw[by_role["date"]].str.strip(), errors="coerce")
    keep = (out["county"] != "") & dates.notna()
    for idx in np.flatnonzero(~keep.to_numpy()):
        errors.append(f"{name} row {idx + 2}: missing county or unparseable date; row dropped")
    out["date"] = dates

    value_roles = [r for r in by_role if r not in ("county", "date")]
    for role in value_roles:
        col = by_role[role]
        text = raw[col].str.strip().str.replace(",", "", regex=False)
        values = pd.to_numeric(text, errors="coerce").astype(float)
        bad = (text != "") & values.isna() & ~text.str.upper().isin(["NA", "NAN", "NULL", "NONE"])
        for idx in np.flatnonzero(bad.to_numpy()):
            errors.append(f"{name} row {idx + 2}: unparseable value {raw[col].iloc[idx]!r} in '{col}'; treated as missing")
        nonfinite = ~np.isfinite(values.to_numpy()) & values.notna().to_numpy()
        for idx in np.flatnonzero(nonfinite):
            errors.append(f"{name} row {idx + 2}: non-finite value in '{col}'; treated as missing")
        values[nonfinite] = np.nan
        if role in CORE_FIELDS:
            negative = (values < 0).to_numpy()
            for idx in np.flatnonzero(negative):
                errors.append(f"{name} row {idx + 2}: negative value in '{col}'; treated as missing")
            values[negative] = np.nan
        out[role] = values

    out = out[keep.to_numpy()].copy()
    out["week"] = _snap(out["date"], config.week_ending)
    modes = {}
    for role in value_roles:
        mode = source.aggregate.get(by_role[role]) or source.aggregate.get(role)
        modes[role] = mode or DEFAULT_AGGREGATION.get(role, "sum")
    return _weekly(out, ["county", "week"], modes)


def _materialize_grid(frame: pd.DataFrame) -> pd.DataFrame:
    pieces = []
    for county, sub in frame.groupby("county", sort=True):
        grid = pd.date_range(sub["week"].min(), sub["week"].max(), freq="7D")
        full = sub.set_index("week").reindex(grid)
        full.index.name = "week"
        full["gap"] = ~full.index.isin(sub["week"])
        full["county"] = county
        pieces.append(full.reset_index())
    if not pieces:
        return frame.assign(gap=pd.Series(dtype=bool))
    return pd.concat(pieces, ignore_index=True)


def load_panel(config: SchemaConfig) -> Panel:
    """Read CSV snapshots into a validated, grid-aligned weekly panel.

    Raises SchemaError for configuration or header problems. Row-level data
    problems are collected in ``Panel.errors`` and the offending cells are
    treated as missing.
    """
    errors: list[str] = []
    merged: pd.DataFrame | None = None
    seen_roles: set[str] = set()
    for source in config.sources:
        part = _read_source(source, config, errors)
        roles = set(part.columns) - {"county", "week"}
        clash = roles & seen_roles
        if clash:
            raise SchemaError(f"role(s) {sorted(clash)} provided by more than one source")
        seen_roles |= roles
        merged = part if merged is None else merged.merge(part, on=["county", "week"], how="outer")
    if "y" not in seen_roles:
        raise SchemaError("no source column mapped to required role 'y'")
    assert merged is not None

    excluded_found = []
    exclude = {e.lower() for e in config.exclude}
    base = merged["county"].map(lambda c: _base_name(c, config.county_suffix).lower())
    drop = base.isin(exclude)
    if drop.any():
        excluded_found = sorted(merged.loc[drop, "county"].unique())
        for c in excluded_found:
            logger.info("excluding county %s", c)
    merged = merged[~drop]

    for col in CORE_FIELDS:
        if col not in merged.columns:
            merged[col] = np.nan
    frame = _materialize_grid(merged.sort_values(["county", "week"]))
    frame["state_level"] = (frame["county"] == config.state_label) if config.state_label else False
    indicators = sorted(c for c in frame.columns if c.startswith(INDICATOR_PREFIX))
    ordered = ["county", "state_level", "week", "gap", *CORE_FIELDS, *indicators]
    frame = frame[ordered].sort_values(["county", "week"]).reset_index(drop=True)
    frame["gap"] = frame["gap"].astype(bool)
    for c in frame.loc[frame["gap"], "county"].unique():
        weeks = frame.loc[frame["gap"] & (frame["county"] == c), "week"].dt.strftime("%Y-%m-%d")
        errors.append(f"{c}: inserted missing week(s) {', '.join(weeks)}")

    population: dict[str, int] = {}
    if config.population is not None:
        population = _read_population(config.population, config)
    for msg in errors:
        logger.warning(msg)
    return Panel(
        frame=frame,
        indicators=tuple(c[len(INDICATOR_PREFIX):] for c in indicators),
        errors=tuple(errors),
        excluded=tuple(excluded_found),
        population=population,
    )


def _read_population(source: SourceSpec, config: SchemaConfig) -> dict[str, int]:
    raw = pd.read_csv(source.path, dtype=str, keep_default_na=False)
    by_role = source.role_columns()
    if "county" not in by_role or "population" not in by_role:
        raise SchemaError("population source needs 'county' and 'population' roles")
    for col in (by_role["county"], by_role["population"]):
        if col not in raw.columns:
            raise SchemaError(f"{source.path.name}: missing required column '{col}'")
    out = {}
    for name, pop in zip(raw[by_role["county"]], raw[by_role["population"]]):
        value = pd.to_numeric(pop.replace(",", ""), errors="coerce")
        if name.strip() and not pd.isna(value):
            out[_canonical_name(name.strip(), config)] = int(value)
    return out


def _resolve_column(panel: Panel, indicator: str) -> str:
    cols = panel.frame.columns
    if indicator in cols:
        return indicator
    if INDICATOR_PREFIX + indicator in cols:
        return INDICATOR_PREFIX + indicator
    raise KeyError(f"panel has no indicator {indicator!r}")


def apply_state_fallback(panel: Panel, indicator: str) -> Panel:
    """Fill missing county values of ``indicator`` with the state-level series.

    Substituted cells are marked in ``<column>_state_filled``. Observed county
    values are never overwritten.
    """
    col = _resolve_column(panel, indicator)
    f = panel.frame.copy()
    flag = f"{col}_state_filled"
    if flag not in f.columns:
        f[flag] = False
    state = f[f["state_level"]]
    if state.empty:
        logger.warning("no state-level series present; %s left unchanged", col)
        return panel
    state_values = state.dropna(subset=[col]).groupby("week")[col].first()
    fill = f[col].isna() & ~f["state_level"]
    candidate = f["week"].map(state_values)
    fill &= candidate.notna()
    f.loc[fill, col] = candidate[fill]
    f.loc[fill, flag] = True
    return replace(panel, frame=f)


def assign_tertiles(panel: Panel, window: tuple[date, date] = DEFAULT_TERTILE_WINDOW) -> dict[str, CountyMeta]:
    """Split counties into Low/Mid/High thirds by mean weekly y within ``window``.

    Counties are ordered by mean ascending, ties broken by name. When the
    count is not divisible by three the extra counties go to Low first, then
    Mid, so sizes never differ by more than one.
    """
    f = panel.frame
    lo, hi = pd.Timestamp(window[0]), pd.Timestamp(window[1])
    sel = f[~f["state_level"] & (f["week"] >= lo) & (f["week"] <= hi)]
    means = sel.groupby("county")["y"].mean()
    ranked = []
    for county in panel.counties:
        m = means.get(county, np.nan)
        if pd.isna(m):
            logger.warning("%s has no observed y in the stratification window; not stratified", county)
            continue
        ranked.append((float(m), county))
    ranked.sort()
    n = len(ranked)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    out: dict[str, CountyMeta] = {}
    pos = 0
    for tertile, size in zip(Tertile, sizes):
        for mean, county in ranked[pos:pos + size]:
            out[county] = CountyMeta(CountyId(county), panel.population.get(county), mean, tertile)
        pos += size
    return out


def rank_indicators(panel: Panel) -> list[IndicatorCorrelation]:
    """Pearson correlation of each indicator with y, pooled over county-weeks.

    Only weeks where both values are observed contribute. Indicators with
    fewer than three pairs or a constant series are omitted.
    """
    f = panel.frame[~panel.frame["state_level"]]
    y = f["y"].to_numpy(dtype=float)
    out = []
    for col in list(EXOG_FIELDS) + panel.indicator_columns:
        if col not in f.columns:
            continue
        x = f[col].to_numpy(dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        n = int(ok.sum())
        if n < MIN_CORRELATION_PAIRS:
            logger.info("indicator %s: only %d complete pairs; omitted", col, n)
            continue
        r = pearson(x[ok], y[ok])
        if r is None:
            logger.info("indicator %s: constant series; omitted", col)
            continue
        name = col[len(INDICATOR_PREFIX):] if col.startswith(INDICATOR_PREFIX) else col
        out.append(IndicatorCorrelation(name, r, n))
    out.sort(key=lambda c: (-abs(c.r), c.indicator))
    return out


def write_correlations_csv(rows: list[IndicatorCorrelation], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["indicator", "r", "n_obs"])
        for c in rows:
            writer.writerow([c.indicator, f"{c.r:.17g}", c.n_obs])
