"""CSV renderings of evaluation summaries.

Main tables have one row per model with mean and SD in separate columns.
Per-county tables are split by tertile, one row per county and one column
pair per model.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping, Sequence

from .evaluate import OVERALL, Metric, Summary, TertileSummary
from .models import ModelId

logger = logging.getLogger(__name__)

TERTILES = ("Low", "Mid", "High")


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.10g}"


def _write(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _index(rows: Sequence[TertileSummary]) -> dict[tuple[ModelId, Metric, str], TertileSummary]:
    return {(r.model, r.metric, r.tertile): r for r in rows}


def _cells(idx, model, metric, tertiles) -> list[str]:
    out = []
    for t in tertiles:
        r = idx.get((model, metric, t))
        out += [_fmt(r.mean), _fmt(r.sd)] if r else ["", ""]
    return out


def write_main_tables(summary: Summary, out_dir: Path) -> list[Path]:
    idx = _index(summary.tertile_rows)
    mape_rows, mpe_rows, ll_rows = [], [], []
    for model in summary.models:
        mape_rows.append([model.value, model.label, *_cells(idx, model, Metric.MAPE, TERTILES)])
        mpe_rows.append([model.value, model.label, *_cells(idx, model, Metric.MPE, (OVERALL,) + TERTILES)])
        if model is ModelId.LAG1:
            continue
        ell = idx.get((model, Metric.ELL_STAR, OVERALL))
        rho = idx.get((model, Metric.RHO_STAR, OVERALL))
        if ell is None or rho is None:
            continue
        ll_rows.append([model.value, model.label, _fmt(ell.mean), _fmt(ell.sd),
                        _fmt(rho.mean), _fmt(rho.sd), ell.n_counties])

    def pairs(names):
        return [f"{n}_{s}" for n in names for s in ("mean", "sd")]

    return [
        _write(out_dir / "table_mape.csv", ["model", "label", *pairs(TERTILES)], mape_rows),
        _write(out_dir / "table_mpe.csv", ["model", "label", *pairs((OVERALL,) + TERTILES)], mpe_rows),
        _write(out_dir / "table_leadlag.csv",
               ["model", "label", "ell_star_mean", "ell_star_sd", "rho_star_mean", "rho_star_sd", "n_counties"],
               ll_rows),
    ]


def write_county_tables(summary: Summary, tertiles: Mapping[str, object], out_dir: Path) -> list[Path]:
    """Per-county MAPE, MPE and lead-lag tables, one file per tertile and metric family."""
    by_county = {(c.county, c.model): c for c in summary.county_metrics}
    counties = sorted({c.county for c in summary.county_metrics})
    models = list(summary.models)
    ll_models = [m for m in models if m is not ModelId.LAG1]

    def tertile_of(county):
        t = tertiles.get(county)
        t = getattr(t, "tertile", t)
        return getattr(t, "value", t)

    paths = []
    for tertile in TERTILES:
        members = [c for c in counties if tertile_of(c) == tertile]
        if not members:
            continue
        for metric, attr in ((Metric.MAPE, "mape"), (Metric.MPE, "mpe")):
            rows = []
            for county in members:
                row = [county]
                for m in models:
                    cm = by_county.get((county, m))
                    row += [_fmt(getattr(cm, f"{attr}_mean")), _fmt(getattr(cm, f"{attr}_sd"))] if cm else ["", ""]
                rows.append(row)
            header = ["county"] + [f"{m.value}_{s}" for m in models for s in ("mean", "sd")]
            paths.append(_write(out_dir / f"county_{metric.value.lower()}_{tertile.lower()}.csv", header, rows))
        rows = []
        for county in members:
            row = [county]
            for m in ll_models:
                v = summary.county_lead_lag.get((county, m.value))
                row += [_fmt(v[0]), _fmt(v[1])] if v else ["", ""]
            rows.append(row)
        header = ["county"] + [f"{m.value}_{s}" for m in ll_models for s in ("ell_star", "rho_star")]
        paths.append(_write(out_dir / f"county_leadlag_{tertile.lower()}.csv", header, rows))
    return paths


def write_run_level(summary: Summary, out_dir: Path) -> list[Path]:
    ll = {(r.county, r.model, r.run): r for r in summary.run_lead_lag}
    rows = []
    for m in summary.run_metrics:
        r = ll.get((m.county, m.model.value, m.run))
        rows.append([
            m.county, m.model.value, m.run, m.n_weeks,
            _fmt(m.mape_mean), _fmt(m.mape_sd), _fmt(m.mpe_mean), _fmt(m.mpe_sd),
            "" if r is None else r.ell_star, "" if r is None else _fmt(r.rho_star),
        ])
    header = ["county", "model", "run", "n_weeks", "mape_mean", "mape_sd", "mpe_mean", "mpe_sd",
              "ell_star", "rho_star"]
    return [_write(out_dir / "run_level.csv", header, rows)]


def write_tertile_summary(summary: Summary, out_dir: Path) -> list[Path]:
    """Long-format dump of every aggregated row, including the Overall rows."""
    rows = [[r.model.value, r.metric.value, r.tertile, _fmt(r.mean), _fmt(r.sd), r.n_counties]
            for r in summary.tertile_rows]
    return [_write(out_dir / "tertile_summary.csv", ["model", "metric", "tertile", "mean", "sd", "n_counties"], rows)]


def write_report(summary: Summary, tertiles: Mapping[str, object], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = write_main_tables(summary, out)
    paths += write_county_tables(summary, tertiles, out)
    paths += write_run_level(summary, out)
    paths += write_tertile_summary(summary, out)
    for p in paths:
        logger.info("wrote %s", p)
    return paths

