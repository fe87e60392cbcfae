"""Displacement-estimation network: a 4-level 3-D U-Net over (moving, reference)
frame pairs, with optional recurrent blocks.

Layout (channels):

    enc0   conv 2->16, stride 1          full resolution
    down1  conv 16->32, stride 2         1/2
    down2  conv 32->32, stride 2         1/4
    down3  conv 32->32, stride 2         1/8
    down4  conv 32->32, stride 2         1/16 (bottleneck)
    dec1..dec3  upsample x2 + skip concat + conv 64->32
    dec4        upsample x2 + skip concat(16) + conv 48->32
    head1  conv 32->16
    head2  conv 16->16
    flow   conv ->3 (small-normal init so training starts near identity)

Upsampling is parameter-free trilinear interpolation. Variants differ at the
bottleneck (recurrent cell over the frame window, or a flattened dense LSTM
with a 1->32 channel-restore conv) or serially before the flow head
(conv 16->16 + ConvLSTM 16->32, with a 32->3 flow conv).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import convlstm as cl
from .errors import ConfigurationError, DimensionError

LEVELS = 4
DOWN_FACTOR = 2 ** LEVELS
PAPER_EXTENTS = (128, 128, 256)

_ENCODER = [
    ("enc0", 2, 16, 1),
    ("down1", 16, 32, 2),
    ("down2", 32, 32, 2),
    ("down3", 32, 32, 2),
    ("down4", 32, 32, 2),
]
_DECODER = [
    ("dec1", 64, 32),
    ("dec2", 64, 32),
    ("dec3", 64, 32),
    ("dec4", 48, 32),
    ("head1", 32, 16),
    ("head2", 16, 16),
]


class NetVariant(str, Enum):
    PAIRWISE = "pairwise"
    MULTI_FRAME = "multi_frame"
    B_LSTM = "b_lstm"
    S_CONVLSTM = "s_convlstm"
    B_CONVLSTM = "b_convlstm"


RECURRENT_VARIANTS = (NetVariant.B_LSTM, NetVariant.S_CONVLSTM, NetVariant.B_CONVLSTM)


@dataclass
class FramePairSequence:
    """A reference volume plus the moving frames registered against it."""

    reference: np.ndarray
    moving: list

    def __post_init__(self):
        shape = self.reference.shape
        for m in self.moving:
            if m.shape != shape:
                raise DimensionError(f"frame shape {m.shape} != reference {shape}")

    def __len__(self):
        return len(self.moving)


@dataclass
class NetParams:
    variant: NetVariant
    convs: dict            # name -> (kernels Tensor, bias Tensor)
    cell: object = None    # ConvLstmParams / DenseLstmParams for recurrent variants
    restore: tuple = None  # B-LSTM channel-restore conv (kernels, bias)
    leaky_slope: float = 0.2
    bottleneck_spatial: tuple = None  # fixed for B-LSTM only

    def named(self):
        out = {}
        for k, b in self.convs.values():
            out[k.name] = k
            out[b.name] = b
        if self.cell is not None:
            out.update(self.cell.named())
        if self.restore is not None:
            out[self.restore[0].name] = self.restore[0]
            out[self.restore[1].name] = self.restore[1]
        return out


def _conv_param(rng, name, cin, cout, dtype, std=None):
    # He-style fan-in scaling keeps activation variance roughly constant
    # through the leaky-relu stack
    fan_in = cin * 27
    if std is None:
        lim = float(np.sqrt(6.0 / fan_in))
        k = rng.uniform(-lim, lim, (cout, cin, 3, 3, 3)).astype(dtype)
    else:
        k = (rng.normal(0.0, std, (cout, cin, 3, 3, 3))).astype(dtype)
    return (ad.param(f"{name}.k", k),
            ad.param(f"{name}.b", np.zeros(cout, dtype=dtype)))


def init_net_params(variant, rng, extents=None, dtype=np.float32,
                    leaky_slope=0.2, flow_std=1e-5) -> NetParams:
    """Build a parameter set; `extents` is required only for the dense-LSTM
    variant (the flattened feature length depends on the working grid)."""
    variant = NetVariant(variant)
    convs = {}
    for name, cin, cout, _stride in _ENCODER:
        convs[name] = _conv_param(rng, name, cin, cout, dtype)
    for name, cin, cout in _DECODER:
        convs[name] = _conv_param(rng, name, cin, cout, dtype)

    cell = None
    restore = None
    bottleneck_spatial = None
    if variant == NetVariant.B_CONVLSTM:
        cell = cl.init_convlstm_params(rng, 32, 32, dtype=dtype, prefix="bcell")
    elif variant == NetVariant.S_CONVLSTM:
        convs["sconv"] = _conv_param(rng, "sconv", 16, 16, dtype)
        cell = cl.init_convlstm_params(rng, 16, 32, dtype=dtype, prefix="scell")
    elif variant == NetVariant.B_LSTM:
        if extents is None:
            raise ConfigurationError("dense-LSTM variant needs fixed input extents")
        _check_extents(extents)
        bottleneck_spatial = tuple(e // DOWN_FACTOR for e in extents)
        s = int(np.prod(bottleneck_spatial))
        cell = cl.init_dense_lstm_params(rng, 32 * s, s, dtype=dtype, prefix="blstm")
        restore = _conv_param(rng, "restore", 1, 32, dtype)

    flow_in = 32 if variant == NetVariant.S_CONVLSTM else 16
    convs["flow"] = _conv_param(rng, "flow", flow_in, 3, dtype, std=flow_std)
    return NetParams(variant, convs, cell, restore, leaky_slope, bottleneck_spatial)


def count_params(params: NetParams) -> int:
    """Exact number of scalar learnables in a constructed model."""
    return int(sum(t.size for t in params.named().values()))


def expected_param_count(variant, extents=PAPER_EXTENTS) -> int:
    """Closed-form parameter count (no allocation); used to sanity-check
    construction and to size the dense-LSTM variant without building it."""
    variant = NetVariant(variant)

    def conv(cin, cout, k=3):
        return cout * (cin * k ** 3 + 1)

    total = sum(conv(cin, cout) for _, cin, cout, _s in _ENCODER)
    total += sum(conv(cin, cout) for _, cin, cout in _DECODER)
    if variant == NetVariant.B_CONVLSTM:
        total += 4 * (32 * 32 * 27 * 2 + 32)
    elif variant == NetVariant.S_CONVLSTM:
        total += conv(16, 16)                       # serial conv
        total += 4 * (32 * 16 * 27 + 32 * 32 * 27 + 32)
    elif variant == NetVariant.B_LSTM:
        s = int(np.prod([e // DOWN_FACTOR for e in extents]))
        total += 4 * (s * (32 * s) + s * s + s)
        total += conv(1, 32)                        # channel restore
    total += conv(32 if variant == NetVariant.S_CONVLSTM else 16, 3)
    return total


def _check_extents(extents):
    if any(e % DOWN_FACTOR for e in extents):
        raise DimensionError(
            f"input extents {tuple(extents)} must be divisible by {DOWN_FACTOR}")


def _conv_block(params, name, x, stride):
    k, b = params.convs[name]
    y = ad.conv3d(x, k, b, stride=stride, padding=1)
    return ad.leaky_relu(y, params.leaky_slope)


def _encode(params, x):
    skips = []
    for name, _cin, _cout, stride in _ENCODER:
        x = _conv_block(params, name, x, stride)
        skips.append(x)
    return skips[:-1], skips[-1]


def _decode(params, skips, x):
    for i, (name, _cin, _cout) in enumerate(_DECODER[:4]):
        skip = skips[-(i + 1)]
        x = ad.interp_resize(x, skip.shape[-3:])
        x = ad.concat_channels([x, skip])
        x = _conv_block(params, name, x, stride=1)
    x = _conv_block(params, "head1", x, stride=1)
    x = _conv_block(params, "head2", x, stride=1)
    return x


def _flow(params, x):
    k, b = params.convs["flow"]
    return ad.conv3d(x, k, b, stride=1, padding=1)


def forward_fields(params: NetParams, seq: FramePairSequence):
    """Graph-building forward pass; returns one 3-channel field tensor per
    moving frame, at the input grid.

    Frames travel the convolutional path batched along a leading axis; the
    recurrent bottleneck (when present) serializes per frame."""
    variant = params.variant
    shape = seq.reference.shape
    _check_extents(shape)
    if params.variant == NetVariant.B_LSTM and params.bottleneck_spatial is not None:
        want = tuple(e // DOWN_FACTOR for e in shape)
        if want != tuple(params.bottleneck_spatial):
            raise ConfigurationError(
                f"dense-LSTM params were built for bottleneck {params.bottleneck_spatial}, "
                f"input gives {want}")

    dtype = params.convs["enc0"][0].dtype
    ref = np.asarray(seq.reference)
    frames = len(seq)
    pairs = np.stack(
        [np.stack([np.asarray(m), ref]) for m in seq.moving]).astype(dtype, copy=False)
    skips, bottom = _encode(params, ad.constant(pairs))

    # temporal context enters at the bottleneck for the B-variants
    if variant == NetVariant.B_CONVLSTM:
        spatial = bottom.shape[2:]
        state = cl.zero_state(32, spatial, dtype=dtype)
        hs = cl.convlstm_unroll(params.cell,
                                [ad.select_frame(bottom, t) for t in range(frames)], state)
        bottom = ad.stack_frames(hs)
    elif variant == NetVariant.B_LSTM:
        spatial = bottom.shape[2:]
        s = int(np.prod(spatial))
        state = cl.ConvLstmState(ad.constant(np.zeros(s, dtype=dtype)),
                                 ad.constant(np.zeros(s, dtype=dtype)))
        maps = []
        for t in range(frames):
            flat = ad.reshape(ad.select_frame(bottom, t), (32 * s,))
            state = cl.dense_lstm_step(params.cell, flat, state)
            maps.append(ad.reshape(state.h, (1, *spatial)))
        rk, rb = params.restore
        bottom = ad.leaky_relu(ad.conv3d(ad.stack_frames(maps), rk, rb, 1, 1),
                               params.leaky_slope)

    feat = _decode(params, skips, bottom)

    if variant == NetVariant.S_CONVLSTM:
        feat = _conv_block(params, "sconv", feat, stride=1)
        spatial = feat.shape[2:]
        state = cl.zero_state(32, spatial, dtype=dtype)
        hs = cl.convlstm_unroll(params.cell,
                                [ad.select_frame(feat, t) for t in range(frames)], state)
        feat = ad.stack_frames(hs)

    fields = _flow(params, feat)
    return [ad.select_frame(fields, t) for t in range(frames)]


def estimate_displacements(params: NetParams, variant, seq: FramePairSequence):
    """Inference entry point: one displacement array [3,D,H,W] per moving
    frame, displacements in voxels of the input grid."""
    variant = NetVariant(variant)
    if variant != params.variant:
        raise ConfigurationError(
            f"params built for {params.variant.value}, requested {variant.value}")
    if variant == NetVariant.PAIRWISE and len(seq) != 1:
        raise ConfigurationError("pairwise registration takes one moving frame at a time")
    fields = forward_fields(params, seq)
    return [f.data for f in fields]
