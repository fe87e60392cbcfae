"""Preprocessing, window construction, the optimization loop, and model
application to full series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as net
from .errors import ConfigurationError, DimensionError, NumericError
from .losses import LossConfig, loss_terms
from .network import DOWN_FACTOR, FramePairSequence, NetVariant
from .series import FrameSeries
from .warping import DisplacementField, resample_field, warp


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1            # one window per optimizer step
    epochs: int = 1
    lam: float = 1.0
    seed: int = 0
    downsample_factor: int = 4
    cutoff: float = 2.5            # SUV
    noise_sigma: float = 0.01
    window_length: int = 5
    reference_index: int = 0
    ncc_window: int = 9
    ncc_epsilon: float = 1e-5

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigurationError("batch size is fixed at 1")
        if self.learning_rate <= 0 or self.downsample_factor < 1 or self.cutoff <= 0:
            raise ConfigurationError("learning_rate, downsample_factor, cutoff must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise sigma must be nonnegative")
        if self.window_length < 1:
            raise ConfigurationError("window_length must be >= 1")
        if self.epochs < 0 or self.reference_index < 0:
            raise ConfigurationError("epochs and reference_index must be nonnegative")

    def loss_config(self):
        return LossConfig(lam=self.lam, ncc_window=self.ncc_window,
                          ncc_epsilon=self.ncc_epsilon)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """One Adam update over named parameter tensors (in place)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.data.dtype)


# -- frame conditioning ------------------------------------------------------------

def preprocess(frame, cfg: TrainConfig, rng):
    """Intensity cutoff with Gaussian noise on the thresholded voxels.

    Applied only to the frames used for displacement estimation, never to the
    frames that are finally warped. Voxels at or below the cutoff pass through
    untouched.
    """
    if cfg.noise_sigma < 0:
        raise ConfigurationError("noise sigma must be nonnegative")
    out = np.array(frame, copy=True)
    mask = out > cfg.cutoff
    n = int(mask.sum())
    if n:
        out[mask] = (cfg.cutoff + rng.normal(0.0, cfg.noise_sigma, n)).astype(out.dtype)
    return out


def mean_pool(vol, factor):
    """Anti-aliased downsampling: mean over factor^3 blocks."""
    if factor == 1:
        return np.array(vol, copy=True)
    d, h, w = vol.shape
    if d % factor or h % factor or w % factor:
        raise DimensionError(f"extents {vol.shape} not divisible by {factor}")
    blocks = vol.reshape(d // factor, factor, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3, 5), dtype=np.float64).astype(vol.dtype)


def pad_to_multiple(vol, multiple=DOWN_FACTOR):
    """Zero-pad the far side of each axis up to the next multiple; returns the
    padded volume and the original extents (for cropping back)."""
    shape = vol.shape
    target = tuple(-(-s // multiple) * multiple for s in shape)
    if target == shape:
        return np.array(vol, copy=True), shape
    pads = tuple((0, t - s) for s, t in zip(shape, target))
    return np.pad(vol, pads), shape


def crop_to(vol, shape):
    return vol[tuple(slice(0, s) for s in shape)]


def make_windows(series: FrameSeries, cfg: TrainConfig, frames=None):
    """All consecutive windows of `window_length` over the correctable frames,
    each paired with the fixed reference frame.

    `frames` restricts the correctable range (defaults to every frame); the
    reference frame may itself appear as a moving frame.
    """
    idx = list(frames) if frames is not None else list(range(series.frames))
    if cfg.reference_index >= series.frames:
        raise ConfigurationError(f"reference index {cfg.reference_index} out of range")
    if len(idx) < cfg.window_length:
        raise ConfigurationError(
            f"{len(idx)} correctable frames < window length {cfg.window_length}")
    ref = series.data[cfg.reference_index]
    windows = []
    for start in range(len(idx) - cfg.window_length + 1):
        members = idx[start:start + cfg.window_length]
        windows.append(FramePairSequence(ref, [series.data[i] for i in members]))
    return windows


def _working_series(series: FrameSeries, cfg: TrainConfig, rng):
    """Downsample, pad to the network granularity, and preprocess each frame.

    Returns (net_frames [T,...], working_shape_before_pad)."""
    worked = []
    shape = None
    for t in range(series.frames):
        vol = mean_pool(series.data[t], cfg.downsample_factor)
        vol, shape = pad_to_multiple(vol)
        worked.append(preprocess(vol, cfg, rng))
    return np.stack(worked), shape


def train(model: net.NetParams, variant, series_list, cfg: TrainConfig,
          frames=None, callback=None):
    """Adam at batch size 1 over shuffled windows; returns (model, trace).

    The trace holds one row per epoch: (epoch, mean_loss, similarity_term,
    smoothness_term). Deterministic under a fixed config."""
    variant = NetVariant(variant)
    if variant != model.variant:
        raise ConfigurationError(f"model is {model.variant.value}, requested {variant.value}")
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss_config()

    window_len = 1 if variant == NetVariant.PAIRWISE else cfg.window_length
    eff_cfg = cfg if window_len == cfg.window_length else _with_window(cfg, window_len)

    all_windows = []
    for series in series_list:
        net_frames, _shape = _working_series(series, cfg, rng)
        worked = FrameSeries(net_frames, series.mid_times, series.durations,
                             series.voxel_size_mm)
        all_windows.extend(make_windows(worked, eff_cfg, frames))

    params = model.named()
    adam = AdamState()
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(all_windows))
        tot_loss = tot_sim = tot_smooth = 0.0
        for wi in order:
            seq = all_windows[wi]
            with ad.Tape() as tape:
                fields = net.forward_fields(model, seq)
                warped = [warp(ad.constant(np.asarray(m)), f)
                          for m, f in zip(seq.moving, fields)]
                loss, sim, smooth = loss_terms(ad.constant(np.asarray(seq.reference)),
                                               warped, fields, loss_cfg)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at step {step} (similarity={sim}, smoothness={smooth})")
            grads = ad.backward(tape, loss)
            adam_step(params, grads, adam, cfg.learning_rate)
            tot_loss += float(loss.data)
            tot_sim += sim
            tot_smooth += smooth
            step += 1
        n = max(len(all_windows), 1)
        row = (epoch, tot_loss / n, tot_sim / n, tot_smooth / n)
        trace.append(row)
        if callback is not None:
            callback(*row)
    return model, trace


def _with_window(cfg, window_len):
    from dataclasses import replace
    return replace(cfg, window_length=window_len)


def apply(model: net.NetParams, series: FrameSeries, cfg: TrainConfig, frames=None):
    """Estimate at working resolution, upsample the fields, warp the original
    frames; the reference frame passes through unmodified.

    Returns (corrected FrameSeries, list of full-resolution DisplacementField,
    one per frame; the reference frame's field is zero)."""
    rng = np.random.default_rng(cfg.seed)
    net_frames, work_shape = _working_series(series, cfg, rng)
    idx = list(frames) if frames is not None else list(range(series.frames))

    window_len = 1 if model.variant == NetVariant.PAIRWISE else cfg.window_length
    chunks = []
    start = 0
    while start < len(idx):
        chunk = idx[start:start + window_len]
        if len(chunk) < window_len and chunks:
            chunk = idx[-window_len:]                  # tail overlap
        chunks.append(chunk)
        start += window_len

    full_grid = series.grid
    zero_field = DisplacementField(
        np.zeros((3, *full_grid), dtype=series.data.dtype),
        series.voxel_size_mm)
    fields = {i: zero_field for i in range(series.frames)}
    ref = net_frames[cfg.reference_index]
    assigned = set()
    for chunk in chunks:
        seq = FramePairSequence(ref, [net_frames[i] for i in chunk])
        est = net.estimate_displacements(model, model.variant, seq)
        for i, fld in zip(chunk, est):
            if i in assigned:
                continue
            assigned.add(i)
            work = crop_to(fld, (3,) + tuple(work_shape))
            df = DisplacementField(work, tuple(np.asarray(series.voxel_size_mm)
                                               * cfg.downsample_factor))
            if cfg.downsample_factor > 1:
                df = resample_field(df, cfg.downsample_factor, "up")
            fields[i] = df

    corrected = np.array(series.data, copy=True)
    for i in idx:
        if i == cfg.reference_index:
            fields[i] = zero_field
            continue
        corrected[i] = warp(series.data[i], fields[i].data)
    out = series.with_data(corrected)
    return out, [fields[i] for i in range(series.frames)]
