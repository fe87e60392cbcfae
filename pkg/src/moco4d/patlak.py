"""Voxel-wise graphical fitting of irreversible-tracer kinetics.

After a start time t*, tissue activity is modeled as
    C_T(t) = Ki * integral_0^t C_P + Vb * C_P(t)
and fitted by weighted least squares per voxel. The normalized weighted mean
fitting error (NFE) uses the degrees-of-freedom denominator (n - 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .series import FrameSeries

F18_HALF_LIFE_MIN = 109.77


@dataclass
class InputFunction:
    """Plasma activity samples, dense enough for trapezoidal integration."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise DimensionError("input function needs matching 1-D times/values")
        if not np.all(np.diff(self.times) > 0):
            raise DimensionError("input-function times must be strictly increasing")
        if np.any(self.values < 0):
            raise ConfigurationError("plasma activity must be nonnegative")
        self._cum = np.concatenate([
            [0.0],
            np.cumsum(0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.times)),
        ])

    def at(self, t):
        return np.interp(t, self.times, self.values)


@dataclass
class TimeActivityCurve:
    mid_times: np.ndarray
    activities: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.mid_times = np.asarray(self.mid_times, dtype=np.float64)
        self.activities = np.asarray(self.activities, dtype=np.float64)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        if not np.all(np.diff(self.mid_times) > 0):
            raise DimensionError("TAC times must be increasing")


@dataclass
class FitWeights:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w <= 0):
            raise ConfigurationError("fit weights must be positive")


@dataclass
class PatlakFit:
    ki: float
    vb: float
    degenerate: bool = False


@dataclass
class ParametricMaps:
    """Voxel-wise Ki (1/min), Vb (unitless), NFE (unitless), degenerate mask."""

    ki: np.ndarray
    vb: np.ndarray
    nfe: np.ndarray
    degenerate: np.ndarray


def decay_weights(mid_times, durations, half_life=F18_HALF_LIFE_MIN) -> FitWeights:
    """Frame weights: duration times the physical-decay factor at mid-time."""
    lam = np.log(2.0) / half_life
    return FitWeights(np.asarray(durations) * np.exp(-lam * np.asarray(mid_times)))


def cumulative_input(ifn: InputFunction, t):
    """Trapezoidal integral of the input function from 0 to t (exact on the
    piecewise-linear sample interpolant)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < ifn.times[0]) or np.any(t_arr > ifn.times[-1]):
        raise ConfigurationError(f"t outside input-function range "
                                 f"[{ifn.times[0]}, {ifn.times[-1]}]")
    idx = np.searchsorted(ifn.times, t_arr, side="right") - 1
    idx = np.minimum(idx, len(ifn.times) - 2)
    t0 = ifn.times[idx]
    base = ifn._cum[idx]
    partial = 0.5 * (ifn.at(t_arr) + ifn.values[idx]) * (t_arr - t0)
    out = base + partial
    return float(out) if np.isscalar(t) else out


def _design(ifn, mid_times, t_star):
    sel = mid_times >= t_star
    if sel.sum() < 2:
        raise ConfigurationError(f"need >= 2 frames past t*={t_star}")
    x1 = cumulative_input(ifn, mid_times[sel])
    x2 = ifn.at(mid_times[sel])
    if np.any(x2 <= 0):
        raise ConfigurationError("input function must be positive at fitted frames")
    return sel, x1, x2


def patlak_fit(tac: TimeActivityCurve, ifn: InputFunction, t_star, w: FitWeights) -> PatlakFit:
    """Weighted least squares of C_T = Ki * cumulative(C_P) + Vb * C_P over the
    frames past t*; singular systems fall back to the pure-vascular ratio."""
    sel, x1, x2 = _design(ifn, tac.mid_times, t_star)
    y = tac.activities[sel]
    wv = w.w if len(w.w) == sel.sum() else w.w[sel]
    a11 = np.sum(wv * x1 * x1)
    a12 = np.sum(wv * x1 * x2)
    a22 = np.sum(wv * x2 * x2)
    b1 = np.sum(wv * x1 * y)
    b2 = np.sum(wv * x2 * y)
    det = a11 * a22 - a12 * a12
    if abs(det) <= 1e-12 * max(a11 * a22, 1e-300):
        vb = b2 / a22 if a22 > 0 else 0.0
        return PatlakFit(0.0, float(vb), degenerate=True)
    ki = (b1 * a22 - b2 * a12) / det
    vb = (a11 * b2 - a12 * b1) / det
    return PatlakFit(float(ki), float(vb))


def nfe(tac: TimeActivityCurve, fitted: PatlakFit, ifn: InputFunction, w: FitWeights,
        t_star) -> float:
    """Normalized weighted mean fitting error; NaN when all activities vanish."""
    sel, x1, x2 = _design(ifn, tac.mid_times, t_star)
    y = tac.activities[sel]
    wv = w.w if len(w.w) == sel.sum() else w.w[sel]
    n = sel.sum()
    y_hat = fitted.ki * x1 + fitted.vb * x2
    num = np.sum(wv * (y_hat - y) ** 2)
    den = (n - 2) * np.sum((wv * y / n) ** 2)
    if den == 0.0:
        return float("nan")
    return float(num / den)


def parametric_maps(series: FrameSeries, ifn: InputFunction, t_star,
                    weights: FitWeights | None = None,
                    activity_floor=1e-6) -> ParametricMaps:
    """Per-voxel fit + NFE over a series; degenerate voxels (air/background or
    singular fits) are flagged, never aborting the volume.

    The fit is vectorized: the design matrix is shared by all voxels, only the
    right-hand side varies."""
    sel = series.mid_times >= t_star
    if sel.sum() < 3:
        raise ConfigurationError(f"need >= 3 frames past t*={t_star} for NFE")
    if weights is None:
        weights = decay_weights(series.mid_times[sel], series.durations[sel])
    _sel2, x1, x2 = _design(ifn, series.mid_times, t_star)
    wv = weights.w if len(weights.w) == sel.sum() else weights.w[sel]

    grid = series.grid
    y = series.data[sel].reshape(sel.sum(), -1).astype(np.float64)  # [n, V]
    n = sel.sum()

    a11 = np.sum(wv * x1 * x1)
    a12 = np.sum(wv * x1 * x2)
    a22 = np.sum(wv * x2 * x2)
    b1 = (wv * x1) @ y
    b2 = (wv * x2) @ y
    det = a11 * a22 - a12 * a12

    mean_act = y.mean(axis=0)
    degenerate = mean_act <= activity_floor * max(float(series.data.max()), 1e-300)
    if abs(det) <= 1e-12 * max(a11 * a22, 1e-300):
        degenerate[:] = True
        ki = np.zeros_like(mean_act)
        vb = b2 / a22 if a22 > 0 else np.zeros_like(mean_act)
    else:
        ki = (b1 * a22 - b2 * a12) / det
        vb = (a11 * b2 - a12 * b1) / det
    ki[degenerate] = 0.0
    vb[degenerate] = 0.0

    y_hat = np.outer(x1, ki) + np.outer(x2, vb)
    num = wv @ (y_hat - y) ** 2
    den = (n - 2) * np.sum((wv[:, None] * y / n) ** 2, axis=0)
    bad = den == 0.0
    nfe_map = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    degenerate = degenerate | bad
    nfe_map[degenerate] = 0.0

    return ParametricMaps(ki.reshape(grid), vb.reshape(grid),
                          nfe_map.reshape(grid), degenerate.reshape(grid))
