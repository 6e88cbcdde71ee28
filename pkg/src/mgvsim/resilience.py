"""Resilience measures over run outputs.

Functionality series from paired runs, area-under-curve loss, the
malware/bonware functionality model

    dF/dt = (F_N - F) B(t) - F M(t),   M = M0 on [tm, tstar),  B = B0 after tstar,

with its closed-form solution and a least-squares fit, and the
time-normalised and multi-objective resilience scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import kernels

MODES = ("compensatory", "noncompensatory")
INTERVALS = ("full", "deviation")
DEFAULT_WINDOW_S = 72.0


class AnalysisError(ValueError):
    pass


@dataclass
class TimeSeries:
    t: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.t.ndim != 1 or self.t.shape != self.v.shape:
            raise AnalysisError("t and v must be 1-D arrays of equal length")
        if len(self.t) >= 2:
            d = np.diff(self.t)
            if np.any(d <= 0):
                raise AnalysisError("time grid must be strictly ascending")
            if not np.allclose(d, d[0], rtol=1e-9, atol=1e-9):
                raise AnalysisError("time grid must be uniform")

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 1.0

    def __len__(self):
        return len(self.t)

    def aligned_with(self, other: "TimeSeries") -> bool:
        return self.t.shape == other.t.shape and np.allclose(self.t, other.t, atol=1e-9)


@dataclass
class FunctionalitySeries(TimeSeries):
    mode: str = "noncompensatory"
    F_N: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.mode not in MODES:
            raise AnalysisError(f"mode must be one of {MODES}")
        if not self.F_N > 0:
            raise AnalysisError("F_N must be > 0")

    def mission_accomplishment(self) -> TimeSeries:
        """MA(t) = integral of F from the first sample (trapezoid)."""
        ma = np.concatenate([[0.0], np.cumsum(0.5 * (self.v[1:] + self.v[:-1]) * np.diff(self.t))])
        return TimeSeries(self.t, ma)


@dataclass(frozen=True)
class ModelParams:
    M0: float
    B0: float
    tm: float
    tstar: float

    def __post_init__(self):
        if self.M0 < 0 or self.B0 < 0:
            raise AnalysisError("M0 and B0 must be >= 0")
        if not self.tm < self.tstar:
            raise AnalysisError("tm must be before tstar")


@dataclass
class FitResult:
    params: ModelParams | None
    rmse: float
    sse: float
    residuals: np.ndarray
    fitted: TimeSeries
    degenerate: bool = False

    def as_dict(self) -> dict:
        p = self.params
        fit = (
            {"M0": 0.0, "B0": 0.0, "tm": None, "tstar": None}
            if p is None
            else {"M0": p.M0, "B0": p.B0, "tm": p.tm, "tstar": p.tstar}
        )
        return {"fit": fit, "rmse": self.rmse, "degenerate": self.degenerate}


@dataclass
class ResilienceScore:
    R_vec: np.ndarray
    R: float
    R_norm: float
    t0: float | None = None
    T: float | None = None


# -- smoothing and functionality ------------------------------------------------


def moving_average(series: TimeSeries, window_s: float) -> TimeSeries:
    """Centred moving mean on an odd number of samples.

    The window spans ``round(window_s / step)`` samples rounded down to the
    nearest odd count; near the ends it shrinks symmetrically so every
    output stays centred on its own sample.
    """
    step = series.step
    if window_s < step - 1e-12:
        raise AnalysisError(f"window {window_s} s is shorter than the step {step} s")
    half = int(round(window_s / step)) // 2
    v = series.v
    n = len(v)
    idx = np.arange(n)
    h = np.minimum(np.minimum(idx, n - 1 - idx), half)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    out = (csum[idx + h + 1] - csum[idx - h]) / (2 * h + 1)
    return TimeSeries(series.t.copy(), out)


def _check_pair(a: TimeSeries, b: TimeSeries) -> None:
    if not a.aligned_with(b):
        raise AnalysisError(
            f"series are not on the same time grid ({len(a)} vs {len(b)} samples)"
        )


def functionality(attack: TimeSeries, baseline: TimeSeries, mode: str = "noncompensatory",
                  smooth_window: float | None = DEFAULT_WINDOW_S, F_N: float = 1.0) -> FunctionalitySeries:
    """Ratio of attacked to baseline performance after smoothing both.

    ``noncompensatory`` divides by the larger of the two so F never exceeds
    1; ``compensatory`` divides by the baseline and may exceed 1.
    """
    if mode not in MODES:
        raise AnalysisError(f"mode must be one of {MODES}")
    _check_pair(attack, baseline)
    if smooth_window:
        attack = moving_average(attack, smooth_window)
        baseline = moving_average(baseline, smooth_window)
    bad = np.flatnonzero(baseline.v <= 0)
    if bad.size:
        raise AnalysisError(f"baseline is zero or negative at t={baseline.t[bad[0]]:g} s")
    a, b = attack.v, baseline.v
    ratio = a / np.maximum(a, b) if mode == "noncompensatory" else a / b
    return FunctionalitySeries(attack.t.copy(), F_N * ratio, mode=mode, F_N=F_N)


def _trapz(v: np.ndarray, t: np.ndarray) -> float:
    if len(t) < 2:
        return 0.0
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(t)))


def deviation_interval(baseline: np.ndarray, attack: np.ndarray, tol: float = 0.005) -> tuple[int, int] | None:
    """Inclusive index range of the contiguous run where the curves differ
    by more than ``tol`` times the baseline level, around the largest gap."""
    diff = np.abs(attack - baseline)
    off = diff > tol * np.abs(baseline)
    if not off.any():
        return None
    k = int(np.argmax(np.where(off, diff, -1.0)))
    lo = k
    while lo > 0 and off[lo - 1]:
        lo -= 1
    hi = k
    while hi < len(off) - 1 and off[hi + 1]:
        hi += 1
    return lo, hi


def auc_loss(baseline: TimeSeries, attack: TimeSeries, mode: str = "noncompensatory",
             interval: str = "deviation", smooth_window: float | None = DEFAULT_WINDOW_S,
             tol: float = 0.005) -> float:
    """Fractional loss of area under the attacked curve relative to baseline.

    Noncompensatory replaces the attacked curve by the pointwise minimum of
    the two.  ``interval="deviation"`` integrates only over the contiguous
    stretch where the (effective) curves differ by more than ``tol`` of the
    baseline; identical curves give 0.
    """
    if mode not in MODES:
        raise AnalysisError(f"mode must be one of {MODES}")
    if interval not in INTERVALS:
        raise AnalysisError(f"interval must be one of {INTERVALS}")
    _check_pair(attack, baseline)
    if smooth_window:
        baseline = moving_average(baseline, smooth_window)
        attack = moving_average(attack, smooth_window)
    t, b = baseline.t, baseline.v
    a = np.minimum(attack.v, b) if mode == "noncompensatory" else attack.v
    if interval == "deviation":
        span = deviation_interval(b, a, tol)
        if span is None:
            return 0.0
        lo, hi = span
        if hi == lo:
            return float((b[lo] - a[lo]) / b[lo]) if b[lo] else 0.0
        t, b, a = t[lo : hi + 1], b[lo : hi + 1], a[lo : hi + 1]
    area_b = _trapz(b, t)
    if area_b == 0:
        raise AnalysisError("baseline integral is zero")
    return (area_b - _trapz(a, t)) / area_b


# -- functionality model -------------------------------------------------------


def simulate_model(params: ModelParams, F_N: float = 1.0, grid=None) -> TimeSeries:
    """Closed-form solution of the model on ``grid`` (default 0..800 s at 1 s)."""
    t = np.arange(0.0, 801.0) if grid is None else np.asarray(grid, dtype=float)
    return TimeSeries(t, model_values(params.M0, params.B0, params.tm, params.tstar, F_N, t))


def model_values(M0, B0, tm, tstar, F_N, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    f_switch = F_N * math.exp(-M0 * (tstar - tm))
    decay = F_N * np.exp(-M0 * np.clip(t - tm, 0.0, None))
    recover = F_N - (F_N - f_switch) * np.exp(-B0 * np.clip(t - tstar, 0.0, None))
    return np.where(t < tm, F_N, np.where(t < tstar, decay, recover))


def model_rhs(t: float, F: float, params: ModelParams, F_N: float = 1.0) -> float:
    """Right-hand side of the model ODE with boxcar M(t) and step B(t)."""
    m = params.M0 if params.tm <= t < params.tstar else 0.0
    b = params.B0 if t >= params.tstar else 0.0
    return (F_N - F) * b - F * m


_RATE_HI = 1.0
_COARSE_CELLS = 80


def _profile(f, h, fn, cells, iters, rounds):
    ii = np.ascontiguousarray([c[0] for c in cells], dtype=np.int64)
    jj = np.ascontiguousarray([c[1] for c in cells], dtype=np.int64)
    return kernels.profile_cells(f, h, fn, ii, jj, _RATE_HI, iters, rounds)


def fit_model(F: FunctionalitySeries | TimeSeries, F_N: float | None = None,
              flat_tol: float = 1e-3, polish: bool = True) -> FitResult:
    """Least-squares fit of (M0, B0, tm, tstar) to a functionality series.

    Onset and switch times are searched on the sample grid, coarse first
    and then at full resolution around the best coarse cells; for each
    (tm, tstar) cell the rates come from alternating golden-section line
    searches.  A Nelder-Mead pass over all four parameters then polishes
    the best cell, kept only if it lowers the squared error.
    """
    if F_N is None:
        F_N = getattr(F, "F_N", 1.0)
    t, f = F.t, np.ascontiguousarray(F.v, dtype=float)
    n = len(t)
    if n < 4:
        raise AnalysisError("need at least 4 samples to fit")
    h = F.step
    if np.max(np.abs(f - F_N)) <= flat_tol:
        resid = f - F_N
        sse = float(resid @ resid)
        return FitResult(None, math.sqrt(sse / n), sse, resid, TimeSeries(t, np.full(n, F_N)), True)

    stride = max(1, n // _COARSE_CELLS)
    coarse = [(i, j) for i in range(0, n - 1, stride) for j in range(i + stride, n, stride)]
    m0, b0, sse = _profile(f, h, F_N, coarse, 22, 1)
    order = np.lexsort((np.arange(len(sse)), sse))
    seeds = [coarse[k] for k in order[:4]]

    # refine: neighbourhood of +-span around each seed at a finer stride
    span = stride
    while True:
        stride = max(1, span // 3)
        cells = set()
        for i0, j0 in seeds:
            for i in range(max(0, i0 - span), min(n - 2, i0 + span) + 1, stride):
                for j in range(max(i + 1, j0 - span), min(n - 1, j0 + span) + 1, stride):
                    cells.add((i, j))
            cells.add((i0, j0))
        cells = sorted(cells)
        final = stride == 1
        m0, b0, sse = _profile(f, h, F_N, cells, 45 if final else 25, 3 if final else 2)
        order = np.lexsort((np.arange(len(sse)), sse))
        k = order[0]
        best = (cells[k], float(m0[k]), float(b0[k]), float(sse[k]))
        if final:
            break
        span = stride
        seeds = [cells[k] for k in order[:3]]

    (i, j), M0, B0, best_sse = best
    tm, tstar = float(t[i]), float(t[j])

    if polish:
        def objective(x):
            m, b, a, s = x
            if m < 0 or b < 0 or not a < s:
                return np.inf
            r = f - model_values(m, b, a, s, F_N, t)
            return float(r @ r)

        x0 = np.array([M0, B0, tm, tstar])
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 2000})
        if res.fun < best_sse * (1 - 1e-12) and np.all(np.isfinite(res.x)):
            M0, B0, tm, tstar = (float(v) for v in res.x)
            best_sse = float(res.fun)

    params = ModelParams(M0, B0, tm, tstar)
    fitted = model_values(M0, B0, tm, tstar, F_N, t)
    resid = f - fitted
    sse = float(resid @ resid)
    return FitResult(params, math.sqrt(sse / n), sse, resid, TimeSeries(t, fitted), False)


# -- scores ----------------------------------------------------------------------


def resilience_score(F: TimeSeries, t0: float | None = None, T: float | None = None) -> float:
    """Time-normalised resilience: mean of F over [t0, T] (trapezoid)."""
    t, v = F.t, F.v
    if len(t) == 0:
        raise AnalysisError("empty series")
    t0 = float(t[0]) if t0 is None else float(t0)
    T = float(t[-1]) if T is None else float(T)
    if not T > t0:
        raise AnalysisError("need T > t0")
    if t0 < t[0] - 1e-9 or T > t[-1] + 1e-9:
        raise AnalysisError("interval extends beyond the series")
    inner = (t > t0) & (t < T)
    tt = np.concatenate([[t0], t[inner], [T]])
    vv = np.concatenate([[np.interp(t0, t, v)], v[inner], [np.interp(T, t, v)]])
    return _trapz(vv, tt) / (T - t0)


def multi_objective(R_vec, F_N_vec) -> ResilienceScore:
    """Root-sum-square resilience over objectives and its normalised form.

    Each R_j is capped at its nominal F_N_j first so the normalised score
    stays within [0, 1] even when an objective ran above nominal.
    """
    r = np.asarray(R_vec, dtype=float).ravel()
    fn = np.asarray(F_N_vec, dtype=float).ravel()
    if r.size == 0:
        raise AnalysisError("empty objective vector")
    if r.shape != fn.shape:
        raise AnalysisError("R_vec and F_N_vec must have equal length")
    if np.any(~np.isfinite(r)) or np.any(~np.isfinite(fn)):
        raise AnalysisError("non-finite input")
    if np.any(fn <= 0):
        raise AnalysisError("every F_N must be > 0")
    if np.any(r < 0):
        raise AnalysisError("resilience values must be >= 0")
    r = np.minimum(r, fn)
    R = float(np.sqrt(np.sum(r * r)))
    norm = float(np.sqrt(np.sum(fn * fn)))
    return ResilienceScore(r, R, min(1.0, R / norm))


# -- pipeline ----------------------------------------------------------------------


def series_from_table(table: dict, column: str = "fuel_eff_km_per_L") -> TimeSeries:
    if column not in table:
        raise AnalysisError(f"column {column!r} not in table")
    return TimeSeries(table["t"], table[column])


def analyze(baseline: TimeSeries, attack: TimeSeries, mode: str = "noncompensatory",
            interval: str = "deviation", smooth_window: float = DEFAULT_WINDOW_S):
    """AUC loss, model fit and resilience scores for one baseline/attack pair.

    Returns ``(report, F, fit)``: the JSON-ready report dict, the
    functionality series and the :class:`FitResult`.
    """
    if len(baseline) != len(attack) or not baseline.aligned_with(attack):
        raise AnalysisError(
            f"baseline and attack runs differ in length or grid ({len(baseline)} vs {len(attack)} samples)"
        )
    loss = auc_loss(baseline, attack, mode, interval, smooth_window)
    F = functionality(attack, baseline, mode, smooth_window)
    fit = fit_model(F)
    R = resilience_score(F)
    score = multi_objective([R], [F.F_N])
    out = {"auc_loss": loss, "mode": mode, "interval": interval}
    out.update(fit.as_dict())
    out["R"] = R
    out["R_normalized"] = score.R_norm
    return out, F, fit
