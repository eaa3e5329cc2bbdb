"""Command-line entry point: ``hospcast {ingest,correlate,evaluate,report} CONFIG``.

Configuration problems exit with status 2. Data-quality problems (dropped
rows, unreachable LLM backends, unparseable answers) only produce warnings,
so long batch runs survive a flaky backend.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .context import BackendConfig, HttpBackend, LLMSettings, TranscriptCache, stub_backend
from .evaluate import EvalConfig, SkipLog, evaluate_models, read_records, summarize, write_records
from .models import ModelId
from .panel import (
    DEFAULT_TERTILE_WINDOW,
    EXOG_FIELDS,
    INDICATOR_PREFIX,
    Panel,
    SchemaConfig,
    SchemaError,
    apply_state_fallback,
    assign_tertiles,
    load_panel,
    rank_indicators,
    write_correlations_csv,
)
from .report import write_report

logger = logging.getLogger("hospcast")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

LLM_MODEL_IDS = {ModelId.LLM, ModelId.HYBRID_ARX, ModelId.HYBRID_LINREG}
BACKEND_KINDS = ("none", "http", "persistence", "oracle", "scripted")


class ConfigError(ValueError):
    pass


def _date(v) -> date | None:
    if v is None or isinstance(v, date):
        return v
    try:
        return date.fromisoformat(str(v))
    except ValueError as exc:
        raise ConfigError(f"bad date {v!r}") from exc


@dataclass
class RunConfig:
    """Parsed configuration file with paths resolved against its directory."""

    path: Path
    raw: dict
    schema: dict
    panel_path: Path
    output_dir: Path
    state_fallback: tuple[str, ...] = ()
    tertile_window: tuple[date, date] = DEFAULT_TERTILE_WINDOW
    evaluation: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    hybrid_strict: bool = True
    seed: int = 0

    @property
    def base(self) -> Path:
        return self.path.parent

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        if "data" not in raw:
            raise ConfigError("config has no 'data' section")
        base = path.parent
        out = Path(raw.get("output_dir", "out"))
        out = out if out.is_absolute() else base / out
        panel_path = Path(raw.get("panel_path", out / "panel.csv"))
        panel_path = panel_path if panel_path.is_absolute() else base / panel_path
        tw = raw.get("tertile_window")
        window = DEFAULT_TERTILE_WINDOW if tw is None else (_date(tw[0]), _date(tw[1]))
        hybrid = raw.get("hybrid") or {}
        return cls(
            path=path, raw=raw, schema=raw["data"], panel_path=panel_path, output_dir=out,
            state_fallback=tuple(raw.get("state_fallback") or ()),
            tertile_window=window,
            evaluation=dict(raw.get("evaluation") or {}),
            backend=dict(raw.get("backend") or {"kind": "none"}),
            hybrid_strict=bool(hybrid.get("strict", True)),
            seed=int(raw.get("seed", 0)),
        )

    def eval_config(self, models=None, runs=None, lag_max=None) -> EvalConfig:
        e = self.evaluation
        period = e.get("eval_period") or [None, None]
        try:
            return EvalConfig(
                window_len=int(e.get("window_len", 8)),
                n_runs=int(runs if runs is not None else e.get("n_runs", 3)),
                lag_max=int(lag_max if lag_max is not None else e.get("lag_max", 4)),
                eval_period=(_date(period[0]), _date(period[1])),
                models=tuple(models or e.get("models") or ("lag1", "ar1", "es", "arx")),
                county_sd_ddof=int(e.get("county_sd_ddof", 0)),
                summary_sd_ddof=int(e.get("summary_sd_ddof", 1)),
                strict_context=self.hybrid_strict,
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"evaluation settings: {exc}") from exc


def config_hash(cfg: RunConfig, overrides: dict) -> str:
    payload = json.dumps({"config": cfg.raw, "overrides": overrides}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- ingest ----------------------------------------------------------------------

def build_panel(cfg: RunConfig) -> tuple[Panel, dict]:
    schema = SchemaConfig.from_dict(cfg.schema, cfg.base)
    panel = load_panel(schema)
    substitutions = {}
    for indicator in cfg.state_fallback:
        try:
            panel = apply_state_fallback(panel, indicator)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        flags = [f"{indicator}_state_filled", f"{INDICATOR_PREFIX}{indicator}_state_filled"]
        flag = next((c for c in flags if c in panel.frame.columns), None)
        substitutions[indicator] = int(panel.frame[flag].sum()) if flag else 0
    f = panel.frame[~panel.frame["state_level"]]
    coverage = {}
    for col in ("y",) + EXOG_FIELDS + tuple(panel.indicator_columns):
        if col in f.columns:
            coverage[col] = round(float(f[col].notna().mean()), 6) if len(f) else 0.0
    report = {
        "counties": len(panel.counties),
        "state_series": list(panel.state_counties),
        "weeks": [d.isoformat() for d in panel.week_range] if panel.week_range else None,
        "excluded_counties": list(panel.excluded),
        "n_excluded": len(panel.excluded),
        "row_issues": list(panel.errors),
        "state_fallback_substitutions": substitutions,
        "coverage": coverage,
    }
    return panel, report


def cmd_ingest(cfg: RunConfig, args) -> int:
    panel, report = build_panel(cfg)
    cfg.panel_path.parent.mkdir(parents=True, exist_ok=True)
    panel.to_csv(cfg.panel_path)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report_path = cfg.output_dir / "ingest_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"panel: {cfg.panel_path} ({report['counties']} counties, "
          f"{report['n_excluded']} excluded, {len(report['row_issues'])} row issues)")
    return EXIT_OK


def _load_ingested(cfg: RunConfig) -> Panel:
    if not cfg.panel_path.exists():
        raise ConfigError(f"no ingested panel at {cfg.panel_path}; run 'ingest' first")
    return Panel.read_csv(cfg.panel_path)


# --- correlate -------------------------------------------------------------------

def cmd_correlate(cfg: RunConfig, args) -> int:
    panel = _load_ingested(cfg)
    rows = rank_indicators(panel)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "indicator_correlations.csv"
    write_correlations_csv(rows, path)
    for r in rows:
        print(f"{r.indicator:30s} r={r.r:+.3f} n={r.n_obs}")
    return EXIT_OK


# --- evaluate --------------------------------------------------------------------

def make_llm(cfg: RunConfig, kind: str, panel: Panel) -> LLMSettings | None:
    b = cfg.backend
    if kind == "none":
        return None
    if kind == "http":
        if not b.get("endpoint_url"):
            raise ConfigError("http backend needs backend.endpoint_url")
        bc = BackendConfig(
            endpoint_url=b["endpoint_url"],
            model_name=b.get("model_name", BackendConfig.model_name),
            api_key_env_var=b.get("api_key_env_var", "OPENAI_API_KEY"),
            timeout=float(b.get("timeout", 60)),
            max_concurrency=int(b.get("max_concurrency", 4)),
            temperature=b.get("temperature"),
        )
        backend = HttpBackend(bc)
    elif kind == "scripted":
        script_path = b.get("script")
        if not script_path:
            raise ConfigError("scripted backend needs backend.script (JSON list of responses)")
        script = json.loads(cfg.resolve(script_path).read_text(encoding="utf-8"))
        backend = stub_backend("scripted", script=script)
    else:
        backend = stub_backend(kind, panel=panel)
    transcript = b.get("transcript")
    cache = TranscriptCache(cfg.resolve(transcript)) if transcript else None
    return LLMSettings(backend, cache=cache, backoff=float(b.get("backoff", 1.0 if kind == "http" else 0.0)))


def cmd_evaluate(cfg: RunConfig, args) -> int:
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    models = [m.strip() for m in args.models.split(",")] if args.models else None
    try:
        ecfg = cfg.eval_config(models, args.runs, args.lag_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    kind = (args.backend or cfg.backend.get("kind", "none")).lower()
    if kind not in BACKEND_KINDS:
        raise ConfigError(f"unknown backend {kind!r}")
    needs_llm = [m.value for m in ecfg.models if m in LLM_MODEL_IDS]
    if needs_llm and kind == "none":
        raise ConfigError(f"models {needs_llm} need a backend; pass --backend")
    seed = args.seed if args.seed is not None else cfg.seed
    panel = _load_ingested(cfg)
    llm = make_llm(cfg, kind, panel) if needs_llm else None

    skipped = SkipLog()
    records = evaluate_models(panel, ecfg, llm, skipped)
    tertiles = assign_tertiles(panel, cfg.tertile_window)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "records.jsonl"
    write_records(records, records_path)
    write_report(summarize(records, tertiles, ecfg), tertiles, out)
    _write_tertiles(tertiles, out / "tertiles.csv")

    llm_warnings = [e for e in skipped.entries if "run " in e[2]]
    overrides = {"models": [m.value for m in ecfg.models], "runs": ecfg.n_runs,
                 "lag_max": ecfg.lag_max, "backend": kind, "seed": seed}
    manifest = {
        "config_hash": config_hash(cfg, overrides),
        "panel_fingerprint": panel.fingerprint(),
        "models": [m.value for m in ecfg.models],
        "n_runs": ecfg.n_runs,
        "lag_max": ecfg.lag_max,
        "backend": kind,
        "seed": seed,
        "transcript": str(llm.cache.path) if llm and llm.cache else None,
        "records": records_path.name,
        "n_records": len(records),
        "n_warnings": len(llm_warnings),
        "version": __version__,
        "timestamps": {
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if llm is not None and hasattr(llm.backend, "close"):
        llm.backend.close()
    print(f"records: {records_path} ({len(records)} records)")
    if llm_warnings:
        print(f"warning: {len(llm_warnings)} LLM cell(s) missing or filled by persistence", file=sys.stderr)
    return EXIT_OK


def _write_tertiles(tertiles, path: Path) -> None:
    lines = ["county,tertile,mean_weekly_y"]
    for county, meta in sorted(tertiles.items()):
        lines.append(f"{county},{meta.tertile.value},{meta.mean_weekly_y:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- report ----------------------------------------------------------------------

def cmd_report(cfg: RunConfig, args) -> int:
    records_path = Path(args.records) if args.records else cfg.output_dir / "records.jsonl"
    if not records_path.exists():
        print(f"error: records file not found: {records_path}", file=sys.stderr)
        return EXIT_FAILURE
    records = read_records(records_path)
    if not records:
        print(f"error: {records_path} contains no records", file=sys.stderr)
        return EXIT_FAILURE
    panel = _load_ingested(cfg)
    ecfg = cfg.eval_config(models=sorted({r.model.value for r in records}),
                           runs=max(r.run for r in records), lag_max=args.lag_max)
    tertiles = assign_tertiles(panel, cfg.tertile_window)
    out = Path(args.out) if args.out else cfg.output_dir
    paths = write_report(summarize(records, tertiles, ecfg), tertiles, out)
    corr = out / "indicator_correlations.csv"
    write_correlations_csv(rank_indicators(panel), corr)
    paths.append(corr)
    for p in paths:
        print(p)
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hospcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load CSV snapshots into a validated weekly panel")
    p.add_argument("config")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("correlate", help="rank indicators by correlation with hospitalizations")
    p.add_argument("config")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("evaluate", help="run rolling-origin evaluation")
    p.add_argument("config")
    p.add_argument("--models", help="comma-separated model ids, e.g. lag1,ar1,es,arx")
    p.add_argument("--backend", choices=BACKEND_KINDS)
    p.add_argument("--runs", type=int)
    p.add_argument("--lag-max", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render summary tables from a records file")
    p.add_argument("config")
    p.add_argument("--records")
    p.add_argument("--out")
    p.add_argument("--lag-max", type=int)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return args.func(cfg, args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
