"""Convolutional and fully connected LSTM cells.

Gate algebra (per time step, with zero-padded 3-D convolutions):

    i = sigmoid(W_i * x + U_i * h_prev + b_i)
    f = sigmoid(W_f * x + U_f * h_prev + b_f)
    c_hat = tanh(W_c * x + U_c * h_prev + b_c)
    c = i . c_hat + f . c_prev
    o = sigmoid(W_o * x + U_o * h_prev + b_o)
    h = o . tanh(c)

No peephole terms. The dense cell replaces convolutions with matrix-vector
products over a flattened feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

GATES = ("i", "f", "c", "o")


@dataclass
class ConvLstmParams:
    """Input-to-state (W) and state-to-state (U) kernels plus per-gate biases."""

    w: dict  # gate -> Tensor [hidden, in_channels, k, k, k]
    u: dict  # gate -> Tensor [hidden, hidden, k, k, k]
    b: dict  # gate -> Tensor [hidden]

    @property
    def hidden(self):
        return self.w["i"].shape[0]

    @property
    def in_channels(self):
        return self.w["i"].shape[1]

    def named(self):
        out = {}
        for g in GATES:
            out[self.w[g].name] = self.w[g]
            out[self.u[g].name] = self.u[g]
            out[self.b[g].name] = self.b[g]
        return out

    def count(self):
        return sum(t.size for t in self.named().values())


@dataclass
class ConvLstmState:
    h: ad.Tensor
    c: ad.Tensor


@dataclass
class DenseLstmParams:
    """Fully connected gate transitions over a flattened bottleneck vector."""

    w: dict  # gate -> Tensor [hidden, features]
    u: dict  # gate -> Tensor [hidden, hidden]
    b: dict  # gate -> Tensor [hidden]

    @property
    def hidden(self):
        return self.w["i"].shape[0]

    @property
    def features(self):
        return self.w["i"].shape[1]

    def named(self):
        out = {}
        for g in GATES:
            out[self.w[g].name] = self.w[g]
            out[self.u[g].name] = self.u[g]
            out[self.b[g].name] = self.b[g]
        return out

    def count(self):
        return sum(t.size for t in self.named().values())


def init_convlstm_params(rng, in_channels, hidden, kernel=3, forget_bias=1.0,
                         dtype=np.float32, prefix="convlstm"):
    """Uniform +-sqrt(1/fan_in) kernels; forget-gate bias starts at `forget_bias`."""
    w, u, b = {}, {}, {}
    for g in GATES:
        lim_w = float(np.sqrt(1.0 / (in_channels * kernel ** 3)))
        lim_u = float(np.sqrt(1.0 / (hidden * kernel ** 3)))
        w[g] = ad.param(f"{prefix}.w_{g}",
                        rng.uniform(-lim_w, lim_w,
                                    (hidden, in_channels, kernel, kernel, kernel)).astype(dtype))
        u[g] = ad.param(f"{prefix}.u_{g}",
                        rng.uniform(-lim_u, lim_u,
                                    (hidden, hidden, kernel, kernel, kernel)).astype(dtype))
        init_b = np.full(hidden, forget_bias if g == "f" else 0.0, dtype=dtype)
        b[g] = ad.param(f"{prefix}.b_{g}", init_b)
    return ConvLstmParams(w, u, b)


def init_dense_lstm_params(rng, features, hidden, forget_bias=1.0,
                           dtype=np.float32, prefix="blstm"):
    w, u, b = {}, {}, {}
    lim_w = float(np.sqrt(1.0 / features))
    lim_u = float(np.sqrt(1.0 / hidden))
    for g in GATES:
        w[g] = ad.param(f"{prefix}.w_{g}",
                        rng.uniform(-lim_w, lim_w, (hidden, features)).astype(dtype))
        u[g] = ad.param(f"{prefix}.u_{g}",
                        rng.uniform(-lim_u, lim_u, (hidden, hidden)).astype(dtype))
        init_b = np.full(hidden, forget_bias if g == "f" else 0.0, dtype=dtype)
        b[g] = ad.param(f"{prefix}.b_{g}", init_b)
    return DenseLstmParams(w, u, b)


def zero_state(hidden, spatial, dtype=np.float32):
    shape = (hidden, *spatial)
    return ConvLstmState(ad.constant(np.zeros(shape, dtype=dtype)),
                         ad.constant(np.zeros(shape, dtype=dtype)))


def _gate_pre(p, g, x_t, h_prev):
    wx = ad.conv3d(x_t, p.w[g], p.b[g], stride=1, padding=(p.w[g].shape[2] // 2))
    uh = ad.conv3d(h_prev, p.u[g], ad.constant(np.zeros(p.hidden, dtype=h_prev.dtype)),
                   stride=1, padding=(p.u[g].shape[2] // 2))
    return ad.add(wx, uh)


def convlstm_step(p: ConvLstmParams, x_t, prev: ConvLstmState) -> ConvLstmState:
    """One recurrent update on feature maps [C, D, H, W]."""
    if x_t.shape[0] != p.in_channels:
        raise DimensionError(f"convlstm_step: {x_t.shape[0]} input channels, "
                             f"params expect {p.in_channels}")
    if prev.h.shape != (p.hidden, *x_t.shape[1:]):
        raise DimensionError(f"convlstm_step: state shape {prev.h.shape} does not match "
                             f"hidden {p.hidden} over {x_t.shape[1:]}")
    i = ad.sigmoid(_gate_pre(p, "i", x_t, prev.h))
    f = ad.sigmoid(_gate_pre(p, "f", x_t, prev.h))
    c_hat = ad.tanh(_gate_pre(p, "c", x_t, prev.h))
    c = ad.add(ad.mul(i, c_hat), ad.mul(f, prev.c))
    o = ad.sigmoid(_gate_pre(p, "o", x_t, prev.h))
    h = ad.mul(o, ad.tanh(c))
    return ConvLstmState(h, c)


def convlstm_unroll(p: ConvLstmParams, x_seq, init: ConvLstmState):
    """Sequential application over a nonempty list of feature maps; returns all h_t."""
    if not x_seq:
        raise DimensionError("convlstm_unroll: empty sequence")
    hs = []
    state = init
    for x_t in x_seq:
        state = convlstm_step(p, x_t, state)
        hs.append(state.h)
    return hs


def dense_lstm_step(p: DenseLstmParams, x_t, prev: ConvLstmState) -> ConvLstmState:
    """Gate algebra with matrix-vector transitions on 1-D vectors."""
    if x_t.shape != (p.features,):
        raise DimensionError(f"dense_lstm_step: input {x_t.shape}, expected ({p.features},)")
    if prev.h.shape != (p.hidden,):
        raise DimensionError(f"dense_lstm_step: state {prev.h.shape}, expected ({p.hidden},)")

    def pre(g):
        return ad.add(ad.add(ad.matvec(p.w[g], x_t), ad.matvec(p.u[g], prev.h)), p.b[g])

    i = ad.sigmoid(pre("i"))
    f = ad.sigmoid(pre("f"))
    c_hat = ad.tanh(pre("c"))
    c = ad.add(ad.mul(i, c_hat), ad.mul(f, prev.c))
    o = ad.sigmoid(pre("o"))
    h = ad.mul(o, ad.tanh(c))
    return ConvLstmState(h, c)
