"""Classical one-step-ahead forecasters fitted on a short rolling window.

All functions take the window as plain arrays: ``y`` is the length-L target
history (oldest first) and ``exog`` an ``(L, 3)`` array of the exogenous
columns ``(x_b, x_v, s_t)`` with NaN marking missing cells. Every returned
forecast is clipped to be non-negative; fitted coefficients never are.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

MIN_AR1 = 3
MIN_HOLT = 4
MIN_LINREG = 5
MIN_ARX = 6

# Singular values below RCOND * largest are treated as zero (minimal-norm solve).
RCOND = 1e-12

HOLT_GRID = np.round(np.arange(0.01, 0.99 + 1e-9, 0.02), 10)
HOLT_REFINE_STEP = 0.002
HOLT_REFINE_HALF_WIDTH = 0.02


class ModelId(str, enum.Enum):
    LAG1 = "lag1"
    AR1 = "ar1"
    HOLT = "es"
    ARX = "arx"
    LINREG = "linreg"
    LLM = "llm"
    HYBRID_ARX = "hybrid_arx"
    HYBRID_LINREG = "hybrid_linreg"

    @property
    def label(self) -> str:
        return MODEL_LABELS[self]


MODEL_LABELS = {
    ModelId.LAG1: "Lag-1",
    ModelId.AR1: "AR(1)",
    ModelId.HOLT: "Exp. Smoothing",
    ModelId.ARX: "ARX",
    ModelId.LINREG: "Linear Reg.",
    ModelId.LLM: "LLM (Prompt-Only)",
    ModelId.HYBRID_ARX: "Hybrid ARX",
    ModelId.HYBRID_LINREG: "Hybrid Linear Reg.",
}


@dataclass(frozen=True)
class ExogNext:
    """Next-week exogenous values, observed or predicted."""

    x_b: float
    x_v: float
    s_t: float

    def __post_init__(self):
        for name in ("x_b", "x_v", "s_t"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"ExogNext.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_b, self.x_v, self.s_t], dtype=float)


@dataclass(frozen=True)
class Forecast:
    value: float
    model: ModelId
    fallback_used: bool = False


@dataclass(frozen=True)
class FitDiagnostics:
    coefficients: tuple[float, ...]
    residual_sse: float
    rank_deficient: bool

    def to_dict(self) -> dict:
        return asdict(self) | {"coefficients": list(self.coefficients)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class HoltFit:
    alpha: float
    beta: float
    level: float
    trend: float
    sse: float

    @property
    def forecast(self) -> float:
        return self.level + self.trend


def _clip(value: float) -> float:
    return max(0.0, float(value))


def _as_history(y, minimum: int, what: str) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.size < minimum:
        raise ValueError(f"{what} needs at least {minimum} observations, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{what}: history contains missing or non-finite values")
    return y


def least_squares(X: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Minimal-norm least squares. Returns (coefficients, residual SSE, rank_deficient)."""
    beta, _, rank, _ = np.linalg.lstsq(X, target, rcond=RCOND)
    resid = target - X @ beta
    return beta, float(resid @ resid), bool(rank < X.shape[1])


def forecast_lag1(y) -> Forecast:
    y = _as_history(y, 1, "Lag-1")
    return Forecast(_clip(y[-1]), ModelId.LAG1)


def fit_forecast_ar1(y) -> tuple[Forecast, FitDiagnostics]:
    """AR(1) with intercept fitted by OLS over the window's lagged pairs.

    A rank-deficient design (constant lagged values) falls back to Lag-1.
    """
    y = _as_history(y, MIN_AR1, "AR(1)")
    X = np.column_stack([np.ones(y.size - 1), y[:-1]])
    beta, sse, deficient = least_squares(X, y[1:])
    diag = FitDiagnostics(tuple(float(b) for b in beta), sse, deficient)
    value = beta[0] + beta[1] * y[-1]
    if deficient or not math.isfinite(value):
        return Forecast(_clip(y[-1]), ModelId.AR1, fallback_used=True), diag
    return Forecast(_clip(value), ModelId.AR1), diag


def _holt_grid(y: np.ndarray, alphas: np.ndarray, betas: np.ndarray):
    a, b = (g.ravel() for g in np.meshgrid(alphas, betas, indexing="ij"))
    level = np.full(a.shape, y[0])
    trend = np.full(a.shape, (y[-1] - y[0]) / (y.size - 1))
    sse = np.zeros(a.shape)
    for obs in y[1:]:
        pred = level + trend
        err = obs - pred
        sse += err * err
        new_level = a * obs + (1.0 - a) * pred
        trend = b * (new_level - level) + (1.0 - b) * trend
        level = new_level
    return a, b, level, trend, sse


def holt_fit(y) -> HoltFit:
    """Holt's additive linear trend with (alpha, beta) minimizing one-step SSE.

    Initial level is the first observation and initial trend the mean first
    difference. The search is a 0.02-step grid over [0.01, 0.99]^2 followed by
    a 0.002-step pass within +/-0.02 of the best grid point.
    """
    y = _as_history(y, 2, "Holt")
    a, b, level, trend, sse = _holt_grid(y, HOLT_GRID, HOLT_GRID)
    i = int(np.argmin(sse))
    offsets = np.round(np.arange(-HOLT_REFINE_HALF_WIDTH, HOLT_REFINE_HALF_WIDTH + 1e-9, HOLT_REFINE_STEP), 10)
    fine_a = np.unique(np.clip(np.round(a[i] + offsets, 10), 0.01, 0.99))
    fine_b = np.unique(np.clip(np.round(b[i] + offsets, 10), 0.01, 0.99))
    a, b, level, trend, sse = _holt_grid(y, fine_a, fine_b)
    j = int(np.argmin(sse))
    return HoltFit(float(a[j]), float(b[j]), float(level[j]), float(trend[j]), float(sse[j]))


def fit_forecast_holt(y) -> Forecast:
    y = np.asarray(y, dtype=float).ravel()
    if y.size < MIN_HOLT:
        return Forecast(forecast_lag1(y).value, ModelId.HOLT, fallback_used=True)
    fit = holt_fit(y)
    if not math.isfinite(fit.forecast):
        return Forecast(_clip(y[-1]), ModelId.HOLT, fallback_used=True)
    return Forecast(_clip(fit.forecast), ModelId.HOLT)


def impute_window(exog) -> np.ndarray:
    """Column-wise mean imputation; columns with no observations become zero."""
    w = np.array(exog, dtype=float, copy=True)
    if w.ndim == 1:
        w = w[:, None]
    for j in range(w.shape[1]):
        col = w[:, j]
        missing = ~np.isfinite(col)
        if missing.all():
            col[:] = 0.0
        elif missing.any():
            col[missing] = col[~missing].mean()
    return w


def persistence_next(exog) -> ExogNext:
    """Last observed value of each exogenous column (zero if never observed)."""
    w = np.asarray(exog, dtype=float)
    values = []
    for j in range(3):
        observed = w[np.isfinite(w[:, j]), j]
        values.append(float(observed[-1]) if observed.size else 0.0)
    return ExogNext(*values)


def _check_exog(y: np.ndarray, exog) -> np.ndarray:
    w = np.asarray(exog, dtype=float)
    if w.shape != (y.size, 3):
        raise ValueError(f"exogenous window must have shape ({y.size}, 3), got {w.shape}")
    return w


def fit_forecast_arx(y, exog, next_exog: ExogNext) -> tuple[Forecast, FitDiagnostics]:
    """AR(1) plus contemporaneous exogenous regressors, fitted by OLS.

    Regresses y_t on [1, y_{t-1}, x_b,t, x_v,t, s_t,t] over the window after
    mean-imputing the exogenous columns, then predicts with ``next_exog``.
    Rank deficiency is resolved by the minimal-norm solution.
    """
    y = _as_history(y, MIN_ARX, "ARX")
    w = impute_window(_check_exog(y, exog))
    X = np.column_stack([np.ones(y.size - 1), y[:-1], w[1:]])
    beta, sse, deficient = least_squares(X, y[1:])
    diag = FitDiagnostics(tuple(float(b) for b in beta), sse, deficient)
    value = float(beta @ np.concatenate([[1.0, y[-1]], next_exog.as_array()]))
    if not math.isfinite(value):
        ar1, _ = fit_forecast_ar1(y)
        return Forecast(ar1.value, ModelId.ARX, fallback_used=True), diag
    return Forecast(_clip(value), ModelId.ARX), diag


def fit_forecast_linreg(y, exog, next_exog: ExogNext) -> tuple[Forecast, FitDiagnostics]:
    """OLS of y_t on [1, x_b,t, x_v,t, s_t,t] with no lag term."""
    y = _as_history(y, MIN_LINREG, "LinReg")
    w = impute_window(_check_exog(y, exog))
    X = np.column_stack([np.ones(y.size), w])
    beta, sse, deficient = least_squares(X, y)
    diag = FitDiagnostics(tuple(float(b) for b in beta), sse, deficient)
    value = float(beta @ np.concatenate([[1.0], next_exog.as_array()]))
    if not math.isfinite(value):
        ar1, _ = fit_forecast_ar1(y)
        return Forecast(ar1.value, ModelId.LINREG, fallback_used=True), diag
    return Forecast(_clip(value), ModelId.LINREG), diag


@dataclass(frozen=True)
class Window:
    """The L most recent weeks available at a forecast origin.

    ``y`` has no missing values; ``exog`` is ``(L, 3)`` with NaN for missing
    cells. ``target_week`` is the week being forecast (origin + 7 days).
    """

    county: str
    weeks: tuple
    y: np.ndarray
    exog: np.ndarray
    target_week: object
