"""Synthetic dynamic series with known kinetics and injectable inter-frame motion.

The phantom paints ellipsoid/box regions (one tagged as the tumor) inside a
body ellipsoid over an air background, generates frames from the graphical
kinetic model driven by an analytic input function, and corrupts frames with
seeded smooth displacement fields (local shifts plus radial expansion or
contraction) while keeping the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .metrics import global_ncc, nmi, roi_stats
from .patlak import InputFunction, cumulative_input, parametric_maps
from .series import FrameSeries
from .warping import DisplacementField, warp

# analytic plasma curve: bolus peak plus slow biexponential washout
IFN_PEAK_AMPLITUDE = 20.0   # SUV/min
IFN_PEAK_TAU = 0.8          # min
IFN_WASHOUT_AMPLITUDE = 2.5
IFN_WASHOUT_TAU = 80.0      # min
IFN_RISE_TAU = 1.2          # min


def analytic_input_function(t):
    """Fixed positive plasma curve: zero at t=0, early peak, then monotone decay."""
    t = np.asarray(t, dtype=np.float64)
    peak = IFN_PEAK_AMPLITUDE * t * np.exp(-t / IFN_PEAK_TAU)
    washout = IFN_WASHOUT_AMPLITUDE * (np.exp(-t / IFN_WASHOUT_TAU)
                                       - np.exp(-t / IFN_RISE_TAU))
    out = peak + washout
    return float(out) if out.ndim == 0 else out


def sample_input_function(t_max=70.0, dt=0.05) -> InputFunction:
    """Dense sampling of the analytic curve for trapezoidal integration."""
    times = np.arange(0.0, t_max + dt / 2, dt)
    return InputFunction(times, analytic_input_function(times))


@dataclass
class Region:
    kind: str                 # "ellipsoid" or "box"
    center: tuple
    radii: tuple
    ki: float                 # region mean
    vb: float                 # region mean
    tag: str = ""
    peak: float = 1.0         # center-to-rim contrast of the radial profile

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "box"):
            raise ConfigurationError(f"unknown region kind {self.kind!r}")
        if self.ki < 0 or self.vb < 0:
            raise ConfigurationError("region kinetics must be nonnegative")
        if self.peak < 1.0:
            raise ConfigurationError("profile peak must be >= 1")

    def _rho2(self, grid):
        zz, yy, xx = np.meshgrid(*[np.arange(n) for n in grid], indexing="ij")
        dz = (zz - self.center[0]) / self.radii[0]
        dy = (yy - self.center[1]) / self.radii[1]
        dx = (xx - self.center[2]) / self.radii[2]
        return dz * dz + dy * dy + dx * dx

    def mask(self, grid):
        rho2 = self._rho2(grid)
        if self.kind == "ellipsoid":
            return rho2 <= 1.0
        zz, yy, xx = np.meshgrid(*[np.arange(n) for n in grid], indexing="ij")
        return ((np.abs(zz - self.center[0]) <= self.radii[0])
                & (np.abs(yy - self.center[1]) <= self.radii[1])
                & (np.abs(xx - self.center[2]) <= self.radii[2]))

    def profile(self, grid):
        """Radial profile over the region mask, normalized to mean 1, so the
        region mean of ki/vb stays at the configured value."""
        m = self.mask(grid)
        if self.peak == 1.0:
            return m.astype(np.float64), m
        shape = 1.0 + (self.peak - 1.0) * np.exp(-4.0 * self._rho2(grid))
        shape = shape * m
        mean = shape[m].mean()
        return shape / mean, m


@dataclass
class PhantomSpec:
    grid: tuple = (16, 16, 32)
    voxel_size_mm: tuple = (8.0, 8.0, 8.0)
    body: Region = None
    regions: list = field(default_factory=list)
    background_ki: float = 0.002
    background_vb: float = 0.05
    tumor_tag: str = "tumor"

    def __post_init__(self):
        if self.body is None:
            c = tuple((n - 1) / 2.0 for n in self.grid)
            r = tuple(0.42 * n for n in self.grid)
            self.body = Region("ellipsoid", c, r, self.background_ki,
                               self.background_vb, tag="body")
        if not self.regions:
            c = tuple((n - 1) / 2.0 for n in self.grid)
            # hot-core tumor: region-mean Ki at the motion-free reference
            # scale, with elevated blood volume in the same place
            self.regions = [Region("ellipsoid", (c[0], c[1], c[2] - 4), (3.0, 3.0, 3.2),
                                   0.0146, 0.09, tag=self.tumor_tag, peak=3.0)]
        for r in self.regions:
            for c, radius, n in zip(r.center, r.radii, self.grid):
                if not (0 <= c < n):
                    raise ConfigurationError(f"region center {r.center} outside grid")

    def kinetic_maps(self):
        """True (Ki, Vb, body mask) volumes; region centers decide membership."""
        ki = np.zeros(self.grid)
        vb = np.zeros(self.grid)
        body = self.body.mask(self.grid)
        ki[body] = self.background_ki
        vb[body] = self.background_vb
        for region in self.regions:
            shape, m = region.profile(self.grid)
            ki[m] = (region.ki * shape)[m]
            vb[m] = (region.vb * shape)[m]
        return ki, vb, body

    def region_mask(self, tag):
        for region in self.regions:
            if region.tag == tag:
                return region.mask(self.grid)
        raise ConfigurationError(f"no region tagged {tag!r}")


def default_frame_times(n_frames=8, start_mid=22.5, spacing=5.0):
    """Mid-times and durations of consecutive late frames (all past t*=20)."""
    mids = start_mid + spacing * np.arange(n_frames)
    durations = np.full(n_frames, spacing)
    return mids, durations


def simulate_frames(spec: PhantomSpec, ifn: InputFunction, mid_times, durations,
                    noise_sigma=0.0, rng=None) -> FrameSeries:
    """Noise-free kinetics per voxel, plus optional Gaussian noise."""
    mid_times = np.asarray(mid_times, dtype=np.float64)
    if not np.all(np.diff(mid_times) > 0):
        raise DimensionError("frame times must be increasing")
    ki, vb, _body = spec.kinetic_maps()
    frames = []
    for t in mid_times:
        frame = ki * cumulative_input(ifn, t) + vb * ifn.at(t)
        if noise_sigma > 0:
            rng = rng or np.random.default_rng(0)
            frame = frame + rng.normal(0.0, noise_sigma, spec.grid)
        frames.append(frame.astype(np.float32))
    return FrameSeries(np.stack(frames), mid_times, np.asarray(durations, dtype=np.float64),
                       spec.voxel_size_mm)


@dataclass
class MotionSpec:
    """Per-frame pseudo local shift plus radial expansion/contraction.

    The radial factor is drawn from [expansion_low, expansion_high] in
    pull-warp convention: negative values sample toward the center, which
    enlarges objects. The default range is biased toward enlargement so the
    corrupted series overestimates hot-region uptake, the direction the
    reference simulation reports."""

    max_shift_voxels: float = 2.0
    rigid_voxels: float = 0.8           # whole-volume translation jitter
    expansion_low: float = -0.30
    expansion_high: float = -0.05
    expansion_center: tuple = None      # defaults to the volume center
    shift_window_voxels: float = 4.0    # Gaussian extent of the local shift
    shift_avoid_center: tuple = None    # keep shift sites out of this ball
    shift_avoid_radius: float = 0.0
    seed: int = 0
    reference_index: int = 0

    def __post_init__(self):
        if self.max_shift_voxels < 0:
            raise ConfigurationError("shift magnitude must be nonnegative")
        if self.expansion_low > self.expansion_high:
            raise ConfigurationError("expansion range is inverted")

    @property
    def expansion_bound(self):
        return max(abs(self.expansion_low), abs(self.expansion_high))


def _motion_field(grid, rng, motion: MotionSpec):
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid],
                             indexing="ij")
    center = motion.expansion_center or tuple((n - 1) / 2.0 for n in grid)
    # local shift: random vector scaled by a Gaussian window at a random site,
    # resampled out of the exclusion ball when one is configured
    for _ in range(64):
        site = [rng.uniform(0.25 * n, 0.75 * n) for n in grid]
        if motion.shift_avoid_center is None:
            break
        d2 = sum((s - c) ** 2 for s, c in zip(site, motion.shift_avoid_center))
        if d2 > motion.shift_avoid_radius ** 2:
            break
    u = rng.uniform(-motion.max_shift_voxels, motion.max_shift_voxels, size=3)
    g = np.exp(-((zz - site[0]) ** 2 + (yy - site[1]) ** 2 + (xx - site[2]) ** 2)
               / (2.0 * motion.shift_window_voxels ** 2))
    field = np.stack([u[0] * g, u[1] * g, u[2] * g])
    # rigid whole-volume translation
    rigid = rng.uniform(-motion.rigid_voxels, motion.rigid_voxels, size=3)
    for a in range(3):
        field[a] += rigid[a]
    # radial expansion/contraction about the configured center
    alpha = rng.uniform(motion.expansion_low, motion.expansion_high)
    field[0] += alpha * (zz - center[0])
    field[1] += alpha * (yy - center[1])
    field[2] += alpha * (xx - center[2])
    return field


def inject_motion(series: FrameSeries, motion: MotionSpec):
    """Warp every frame but the reference by a seeded smooth field.

    Returns (corrupted series, list of true corrupting DisplacementField, one
    per frame; the reference frame's field is zero)."""
    rng = np.random.default_rng(motion.seed)
    grid = series.grid
    bound = (motion.max_shift_voxels + motion.rigid_voxels
             + motion.expansion_bound * max(grid))
    corrupted = np.array(series.data, copy=True)
    true_fields = []
    for t in range(series.frames):
        if t == motion.reference_index:
            true_fields.append(DisplacementField(np.zeros((3, *grid), dtype=np.float32),
                                                 series.voxel_size_mm))
            continue
        fld = _motion_field(grid, rng, motion)
        if np.abs(fld).max() > bound + 1e-9:
            raise ConfigurationError("motion field exceeds its magnitude bound")
        corrupted[t] = warp(series.data[t], fld).astype(series.data.dtype)
        true_fields.append(DisplacementField(fld.astype(np.float32),
                                             series.voxel_size_mm))
    return series.with_data(corrupted), true_fields


def endpoint_error(est_fields, true_fields):
    """Mean composition residual |est(v) + true(v + est(v))| in voxels.

    Zero for a perfect correction; equals mean |true| when est is zero."""
    total = 0.0
    count = 0
    for est, true in zip(est_fields, true_fields):
        resid = np.zeros((3, *true.grid))
        for a in range(3):
            # sample the true field at the correction's landing points
            resid[a] = est.data[a] + warp(true.data[a].astype(np.float64),
                                          est.data.astype(np.float64))
        mag = np.sqrt(np.sum(resid ** 2, axis=0))
        total += float(mag.sum())
        count += mag.size
    return total / max(count, 1)


def _condition_metrics(series, ifn, t_star, body, tumor_mask):
    maps = parametric_maps(series, ifn, t_star)
    ok = body & ~maps.degenerate
    nfe_vals = maps.nfe[ok]
    ki_mean, ki_max, _ = roi_stats(maps.ki, tumor_mask)
    return {
        "nfe_mean": float(nfe_vals.mean()) if nfe_vals.size else float("nan"),
        "nfe_max": float(nfe_vals.max()) if nfe_vals.size else float("nan"),
        "ki_mean": ki_mean,
        "ki_max": ki_max,
        "ki_vb_nmi": nmi(maps.ki[body], maps.vb[body]),
        "ki_vb_ncc": global_ncc(maps.ki[body], maps.vb[body]),
    }, maps


def evaluate_correction(corrected: FrameSeries, truth: FrameSeries, true_fields,
                        est_fields, spec: PhantomSpec, ifn: InputFunction,
                        t_star=20.0):
    """Fit all three conditions (motion-free truth, motion, corrected) and
    report kinetic statistics, alignment metrics, and field endpoint error."""
    if corrected.grid != truth.grid:
        raise DimensionError("corrected/truth grids differ")
    _ki, _vb, body = spec.kinetic_maps()
    tumor = spec.region_mask(spec.tumor_tag)

    motion = truth.with_data(np.stack([
        warp(truth.data[t], true_fields[t].data) if true_fields[t].data.any()
        else truth.data[t].copy()
        for t in range(truth.frames)]))

    report = {}
    for name, series in (("motion_free", truth), ("motion", motion),
                         ("corrected", corrected)):
        report[name], _maps = _condition_metrics(series, ifn, t_star, body, tumor)
    report["endpoint_error_voxels"] = endpoint_error(est_fields, true_fields)
    report["endpoint_error_no_correction"] = endpoint_error(
        [DisplacementField(np.zeros_like(f.data), f.spacing_mm) for f in true_fields],
        true_fields)
    return report
