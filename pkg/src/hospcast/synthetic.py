"""Deterministic synthetic county panels for tests and benchmarks."""
from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pandas as pd

from .panel import CORE_FIELDS, Panel


def synthetic_panel(n_counties: int = 5, n_weeks: int = 40, seed: int = 0,
                    start: date = date(2020, 3, 1), missing_exog: float = 0.0,
                    state_label: str | None = None) -> Panel:
    """Epidemic-like weekly waves with correlated exogenous signals.

    Counties differ in scale so that tertiles are well separated. With
    ``missing_exog > 0`` that fraction of exogenous cells is blanked.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_weeks)
    weeks = pd.to_datetime([start + timedelta(weeks=int(k)) for k in t])
    rows = []
    for i in range(n_counties):
        scale = 3.0 * 20.0 ** (i / max(n_counties - 1, 1))
        phase = rng.uniform(0, 2 * np.pi)
        wave = 1.2 + np.sin(2 * np.pi * t / 26.0 + phase)
        y = np.maximum(0.0, scale * wave + rng.normal(0, 0.1 * scale, n_weeks))
        x_b = 3.0 * scale + 0.4 * y + rng.normal(0, 0.05 * scale, n_weeks)
        x_v = np.maximum(0.0, 0.15 * y + rng.normal(0, 0.02 * scale, n_weeks))
        s_t = np.maximum(0.0, 50 + 30 * np.roll(wave, -2) + rng.normal(0, 3, n_weeks))
        exog = np.column_stack([x_b, np.round(x_v, 3), s_t])
        if missing_exog > 0:
            exog[rng.random(exog.shape) < missing_exog] = np.nan
        rows.append(pd.DataFrame({
            "county": f"County{i:02d} County",
            "state_level": False,
            "week": weeks,
            "gap": False,
            "y": y,
            "x_b": exog[:, 0],
            "x_v": exog[:, 1],
            "s_t": exog[:, 2],
        }))
    frame = pd.concat(rows, ignore_index=True)
    if state_label:
        state = frame.groupby("week", as_index=False)[list(CORE_FIELDS)].sum(min_count=1)
        state.insert(0, "county", state_label)
        state.insert(1, "state_level", True)
        state.insert(3, "gap", False)
        frame = pd.concat([frame, state], ignore_index=True)
    frame = frame.sort_values(["county", "week"]).reset_index(drop=True)
    return Panel(frame=frame)
