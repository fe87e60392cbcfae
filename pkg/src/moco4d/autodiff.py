"""Reverse-mode automatic differentiation over dense numpy arrays.

Primitives are recorded on an explicit tape (execution order is a valid
topological order), and `backward` walks the tape in reverse accumulating
vector-Jacobian products. Volumes may be stored in float32; gradient checks
should build float64 graphs. Reductions accumulate in float64 regardless of
storage dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, TapeReplayError

_TAPES: list["Tape"] = []


def _finite(arr) -> bool:
    # min/max propagate NaN and catch +-Inf without allocating a bool mask
    if arr.size == 0:
        return True
    return bool(np.isfinite(arr.min()) and np.isfinite(arr.max()))


class Tape:
    """Ordered record of primitive applications for one scalar computation."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def replay(self):
        """Re-run every recorded primitive and verify bit-identical outputs."""
        for node in self.nodes:
            if node.fwd is None:
                continue
            redo = node.fwd()
            if redo.shape != node.data.shape or not np.array_equal(redo, node.data):
                raise TapeReplayError(f"tape replay mismatch at node {node.op!r}")


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode accumulation."""

    __slots__ = ("data", "parents", "vjp", "name", "requires_grad", "fwd", "op")

    def __init__(self, data, parents=(), vjp=None, name=None, requires_grad=False,
                 fwd=None, op=None):
        self.data = np.asarray(data)
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.fwd = fwd
        self.op = op
        tape = _active_tape()
        if tape is not None and parents:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def check_finite(self):
        """Explicit NaN/Inf detection; raises NumericError on non-finite values."""
        if not _finite(self.data):
            raise NumericError(f"non-finite values in tensor {self.name or self.op or '?'}")
        return self

    def __repr__(self):
        tag = self.name or self.op or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def param(name, data, requires_grad=True):
    """A named leaf tensor; gradients are reported per parameter name."""
    return Tensor(np.asarray(data), name=name, requires_grad=requires_grad)


def constant(data):
    return Tensor(np.asarray(data))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, vjp, fwd, op):
    return Tensor(data, parents=tuple(parents), vjp=vjp, fwd=fwd, op=op)


# -- arithmetic primitives -----------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _node(a.data + c, [a], lambda g: (g,), lambda: a.data + c, "add_scalar")
    a = _as_tensor(a)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _node(a.data + b.data, [a, b], lambda g: (g, g),
                 lambda: a.data + b.data, "add")


def mul(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _node(a.data * c, [a], lambda g: (g * c,), lambda: a.data * c, "mul_scalar")
    a = _as_tensor(a)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _node(a.data * b.data, [a, b],
                 lambda g: (g * b.data, g * a.data),
                 lambda: a.data * b.data, "mul")


def div(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if a.data.shape != b.data.shape:
        raise DimensionError(f"div: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = a.data / b.data

    def vjp(g):
        return g / b.data, -g * out / b.data

    return _node(out, [a, b], vjp, lambda: a.data / b.data, "div")


def square(a):
    a = _as_tensor(a)
    return _node(a.data * a.data, [a], lambda g: (2.0 * g * a.data,),
                 lambda: a.data * a.data, "square")


def sum_all(a):
    """Sum of all entries, accumulated in float64."""
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64))

    def vjp(g):
        return (np.full(a.data.shape, float(g), dtype=a.data.dtype),)

    return _node(out, [a], vjp, lambda: np.asarray(a.data.sum(dtype=np.float64)), "sum")


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n)

    def vjp(g):
        return (np.full(a.data.shape, float(g) / n, dtype=a.data.dtype),)

    return _node(out, [a], vjp,
                 lambda: np.asarray(a.data.sum(dtype=np.float64) / n), "mean")


# -- activations ----------------------------------------------------------------

def sigmoid(x):
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, [x], vjp, lambda: 1.0 / (1.0 + np.exp(-x.data)), "sigmoid")


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, [x], vjp, lambda: np.tanh(x.data), "tanh")


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)

    def vjp(g):
        return (g * np.where(x.data > 0, 1.0, slope).astype(g.dtype),)

    return _node(out, [x], vjp,
                 lambda: np.where(x.data > 0, x.data, slope * x.data), "leaky_relu")


# -- shape ops -------------------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(shape)
    in_shape = x.data.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _node(x.data.reshape(shape), [x], vjp,
                 lambda: x.data.reshape(shape), "reshape")


def concat_channels(parts):
    """Concatenate along the channel axis (axis -4: [C,D,H,W] or [B,C,D,H,W])."""
    parts = [_as_tensor(p) for p in parts]
    axis = parts[0].data.ndim - 4
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)
    idx = (slice(None),) * axis

    def vjp(g):
        return tuple(g[idx + (slice(offs[i], offs[i + 1]),)] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, vjp,
                 lambda: np.concatenate([p.data for p in parts], axis=axis), "concat")


def stack_frames(parts):
    """Stack same-shape tensors along a new leading (frame/batch) axis."""
    parts = [_as_tensor(p) for p in parts]

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return _node(np.stack([p.data for p in parts], axis=0), parts, vjp,
                 lambda: np.stack([p.data for p in parts], axis=0), "stack")


def select_frame(x, i):
    """Slice one entry off the leading axis."""
    x = _as_tensor(x)
    i = int(i)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _node(x.data[i], [x], vjp, lambda: x.data[i], "select")


def matvec(m, x):
    """y = M @ x for a 2-D weight matrix and 1-D vector."""
    m = _as_tensor(m)
    x = _as_tensor(x)
    if m.data.ndim != 2 or x.data.ndim != 1 or m.data.shape[1] != x.data.shape[0]:
        raise DimensionError(f"matvec: {m.data.shape} @ {x.data.shape}")

    def vjp(g):
        return np.outer(g, x.data), m.data.T @ g

    return _node(m.data @ x.data, [m, x], vjp, lambda: m.data @ x.data, "matvec")


def forward_diff(x, axis):
    """Forward difference along `axis`, zero at the far boundary."""
    x = _as_tensor(x)

    def fwd():
        d = np.zeros_like(x.data)
        sl_hi = [slice(None)] * x.data.ndim
        sl_lo = [slice(None)] * x.data.ndim
        sl_out = [slice(None)] * x.data.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        sl_out[axis] = slice(None, -1)
        d[tuple(sl_out)] = x.data[tuple(sl_hi)] - x.data[tuple(sl_lo)]
        return d

    def vjp(g):
        gx = np.zeros_like(g)
        sl_hi = [slice(None)] * g.ndim
        sl_lo = [slice(None)] * g.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        gx[tuple(sl_hi)] += g[tuple(sl_lo)]
        gx[tuple(sl_lo)] -= g[tuple(sl_lo)]
        return (gx,)

    return _node(fwd(), [x], vjp, fwd, "forward_diff")


# -- 3-D convolution --------------------------------------------------------------

def _pad_spatial(x, p):
    if p == 0:
        return x
    pads = ((0, 0),) * (x.ndim - 3) + ((p, p), (p, p), (p, p))
    return np.pad(x, pads)


def _tap_slices(start, douts, stride):
    i, j, l = start
    return (slice(i, i + (douts[0] - 1) * stride + 1, stride),
            slice(j, j + (douts[1] - 1) * stride + 1, stride),
            slice(l, l + (douts[2] - 1) * stride + 1, stride))


_SMALL_CONV_VOXELS = 1024


def _windows(xp, ks, outs, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (ks, ks, ks), axis=(2, 3, 4))
    if stride > 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    return win  # [B, C, d', h', w', ks, ks, ks]


def _conv3d_fwd(x, k, stride, padding):
    """Correlation over the 3 trailing axes; x is [C,D,H,W] or [B,C,D,H,W].

    Accumulates channels-last (one large GEMM per tap via tensordot) and
    transposes once at the end; small outputs take a single windowed call.
    """
    batched = x.ndim == 5
    xb = x if batched else x[None]
    nb = xb.shape[0]
    cout, ks = k.shape[0], k.shape[2]
    xp = _pad_spatial(xb, padding)
    outs = [(xb.shape[2 + a] + 2 * padding - ks) // stride + 1 for a in range(3)]
    if outs[0] * outs[1] * outs[2] <= _SMALL_CONV_VOXELS:
        win = _windows(xp, ks, outs, stride)
        y = np.tensordot(win, k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    else:
        y = np.zeros((nb, *outs, cout), dtype=x.dtype)
        for i in range(ks):
            for j in range(ks):
                for l in range(ks):
                    sl = _tap_slices((i, j, l), outs, stride)
                    xv = xp[(slice(None), slice(None)) + sl]
                    y += np.tensordot(xv, k[:, :, i, j, l], axes=(1, 1))
    y = np.moveaxis(y, -1, 1)
    return y if batched else y[0]


def _conv3d_input_grad(gy, k, stride, padding, spatial):
    """Adjoint of `_conv3d_fwd` in its input argument."""
    batched = gy.ndim == 5
    gyb = gy if batched else gy[None]
    nb = gyb.shape[0]
    cin, ks = k.shape[1], k.shape[2]
    douts = gyb.shape[2:]
    gxp = np.zeros((nb,
                    spatial[0] + 2 * padding,
                    spatial[1] + 2 * padding,
                    spatial[2] + 2 * padding, cin), dtype=gy.dtype)
    if douts[0] * douts[1] * douts[2] <= _SMALL_CONV_VOXELS:
        big = np.tensordot(gyb, k, axes=(1, 0))  # [B,d',h',w',cin,ks,ks,ks]
        for i in range(ks):
            for j in range(ks):
                for l in range(ks):
                    sl = _tap_slices((i, j, l), douts, stride)
                    gxp[(slice(None),) + sl + (slice(None),)] += big[..., i, j, l]
    else:
        for i in range(ks):
            for j in range(ks):
                for l in range(ks):
                    contrib = np.tensordot(gyb, k[:, :, i, j, l], axes=(1, 0))
                    sl = _tap_slices((i, j, l), douts, stride)
                    gxp[(slice(None),) + sl + (slice(None),)] += contrib
    gx = np.moveaxis(gxp, -1, 1)
    if padding:
        gx = gx[:, :, padding:padding + spatial[0],
                padding:padding + spatial[1],
                padding:padding + spatial[2]]
    return np.ascontiguousarray(gx) if batched else np.ascontiguousarray(gx[0])


def _conv3d_kernel_grad(x, gy, stride, padding, ks):
    batched = x.ndim == 5
    xb = x if batched else x[None]
    gyb = gy if batched else gy[None]
    cout, cin = gyb.shape[1], xb.shape[1]
    xp = _pad_spatial(xb, padding)
    douts = gyb.shape[2:]
    if douts[0] * douts[1] * douts[2] <= _SMALL_CONV_VOXELS:
        win = _windows(xp, ks, douts, stride)
        return np.tensordot(gyb, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gk = np.empty((cout, cin, ks, ks, ks), dtype=gy.dtype)
    for i in range(ks):
        for j in range(ks):
            for l in range(ks):
                sl = _tap_slices((i, j, l), douts, stride)
                xv = xp[(slice(None), slice(None)) + sl]
                gk[:, :, i, j, l] = np.tensordot(gyb, xv, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gk


def conv3d(x, kernels, bias, stride=1, padding=1):
    """Direct (correlation) 3-D convolution: [C_in,D,H,W] -> [C_out,D',H',W'].

    A leading batch axis is accepted ([B,C_in,D,H,W]). Kernel spatial extent
    must be 1 or 3, stride 1 or 2, padding 0 or 1.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    k = kernels.data
    if x.data.ndim not in (4, 5) or k.ndim != 5:
        raise DimensionError(f"conv3d: input ndim {x.data.ndim}, kernel ndim {k.ndim}")
    if k.shape[2] not in (1, 3) or k.shape[2:] != (k.shape[2],) * 3:
        raise DimensionError(f"conv3d: unsupported kernel extent {k.shape[2:]}")
    if k.shape[1] != x.data.shape[-4]:
        raise DimensionError(f"conv3d: {k.shape[1]} kernel channels vs {x.data.shape[-4]} input")
    if bias.data.shape != (k.shape[0],):
        raise DimensionError(f"conv3d: bias shape {bias.data.shape} vs {k.shape[0]} kernels")
    if stride not in (1, 2) or padding not in (0, 1):
        raise DimensionError(f"conv3d: stride {stride}, padding {padding} unsupported")
    if not _finite(x.data):
        raise NumericError("conv3d: non-finite input")
    ks = k.shape[2]
    spatial = x.data.shape[-3:]
    bshape = (-1, 1, 1, 1) if x.data.ndim == 4 else (1, -1, 1, 1, 1)
    spatial_axes = (1, 2, 3) if x.data.ndim == 4 else (0, 2, 3, 4)

    def fwd():
        return _conv3d_fwd(x.data, kernels.data, stride, padding) \
            + bias.data.reshape(bshape)

    def vjp(g):
        gx = _conv3d_input_grad(g, kernels.data, stride, padding, spatial)
        gk = _conv3d_kernel_grad(x.data, g, stride, padding, ks)
        gb = g.sum(axis=spatial_axes, dtype=np.float64).astype(g.dtype)
        return gx, gk, gb

    return _node(fwd(), [x, kernels, bias], vjp, fwd, "conv3d")


def conv3d_transpose(x, kernels, bias, stride=2):
    """Adjoint of stride-2 `conv3d` (plus bias): doubles each spatial extent.

    `kernels` has the same [C_out, C_in, k, k, k] layout as the matching
    forward convolution, so x carries C_out channels and the result C_in.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    k = kernels.data
    if stride != 2:
        raise DimensionError("conv3d_transpose: only stride 2 is supported")
    if x.data.ndim != 4 or k.ndim != 5:
        raise DimensionError("conv3d_transpose: bad ranks")
    if k.shape[0] != x.data.shape[0]:
        raise DimensionError(f"conv3d_transpose: {k.shape[0]} vs {x.data.shape[0]} channels")
    if bias.data.shape != (k.shape[1],):
        raise DimensionError("conv3d_transpose: bias shape mismatch")
    if not _finite(x.data):
        raise NumericError("conv3d_transpose: non-finite input")
    ks = k.shape[2]
    out_spatial = tuple(2 * s for s in x.data.shape[1:])

    def fwd():
        return _conv3d_input_grad(x.data, kernels.data, 2, 1, out_spatial) \
            + bias.data[:, None, None, None]

    def vjp(g):
        gx = _conv3d_fwd(g, kernels.data, 2, 1)
        gk = _conv3d_kernel_grad(g, x.data, 2, 1, ks)
        gb = g.sum(axis=(1, 2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gk, gb

    return _node(fwd(), [x, kernels, bias], vjp, fwd, "conv3d_transpose")


# -- sliding window sums (for windowed NCC) ---------------------------------------

def _box_sum_axis(x, w, axis):
    hw = w // 2
    n = x.shape[axis]
    cs = np.cumsum(x, axis=axis, dtype=np.float64)
    zero = np.zeros_like(cs.take([0], axis=axis))
    cs = np.concatenate([zero, cs], axis=axis)
    hi = np.minimum(np.arange(n) + hw + 1, n)
    lo = np.maximum(np.arange(n) - hw, 0)
    return cs.take(hi, axis=axis) - cs.take(lo, axis=axis)


def _box_sum(x, w):
    out = x
    for axis in range(x.ndim):
        out = _box_sum_axis(out, w, axis)
    return out.astype(x.dtype, copy=False)


def box_sum(x, window):
    """Sum over a centered cubic window (zero padding); self-adjoint."""
    x = _as_tensor(x)
    if window % 2 != 1 or window < 1:
        raise DimensionError(f"box_sum: window must be odd positive, got {window}")
    if any(window > s for s in x.data.shape):
        raise DimensionError(f"box_sum: window {window} exceeds extents {x.data.shape}")

    def vjp(g):
        return (_box_sum(g, window),)

    return _node(_box_sum(x.data, window), [x], vjp,
                 lambda: _box_sum(x.data, window), "box_sum")


# -- trilinear resize ---------------------------------------------------------------

def _resize_coords(n_out, n_in):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1.0)
    i0 = np.floor(x).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    f = x - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, f


def _resize_axis(x, n_out, axis):
    i0, i1, f = _resize_coords(n_out, x.shape[axis])
    shape = [1] * x.ndim
    shape[axis] = n_out
    f = f.reshape(shape).astype(x.dtype)
    return x.take(i0, axis=axis) * (1.0 - f) + x.take(i1, axis=axis) * f


def _resize_axis_adjoint(g, n_in, axis):
    i0, i1, f = _resize_coords(g.shape[axis], n_in)
    g0 = np.moveaxis(g, axis, 0)
    out = np.zeros((n_in,) + g0.shape[1:], dtype=g.dtype)
    fb = f.reshape((-1,) + (1,) * (g0.ndim - 1)).astype(g.dtype)
    np.add.at(out, i0, g0 * (1.0 - fb))
    np.add.at(out, i1, g0 * fb)
    return np.moveaxis(out, 0, axis)


def _resize_spatial(x, out_spatial):
    # channel-first layout: spatial axes are the trailing three
    out = x
    for a, n in enumerate(out_spatial):
        axis = x.ndim - 3 + a
        if out.shape[axis] != n:
            out = _resize_axis(out, n, axis)
    return out


def interp_resize(x, out_spatial):
    """Separable trilinear resize of the three trailing (spatial) axes.

    Sample points are pixel centers; edge samples clamp to the boundary value,
    so constants are preserved exactly and interior values are exact on
    linear ramps.
    """
    x = _as_tensor(x)
    out_spatial = tuple(int(n) for n in out_spatial)
    in_spatial = x.data.shape[-3:]

    def vjp(g):
        out = g
        for a in range(3):
            axis = g.ndim - 3 + a
            if out.shape[axis] != in_spatial[a]:
                out = _resize_axis_adjoint(out, in_spatial[a], axis)
        return (out,)

    return _node(_resize_spatial(x.data, out_spatial), [x], vjp,
                 lambda: _resize_spatial(x.data, out_spatial), "interp_resize")


# -- warp (backward/pull trilinear resampling) ---------------------------------------

_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def _warp_terms(vol, field):
    D, H, W = vol.shape
    gz, gy, gx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    pz = gz + field[0]
    py = gy + field[1]
    px = gx + field[2]
    z0 = np.floor(pz).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fz, fy, fx = pz - z0, py - y0, px - x0
    terms = []
    for a, b, c in _CORNERS:
        iz, iy, ix = z0 + a, y0 + b, x0 + c
        m = ((iz >= 0) & (iz < D) & (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W))
        izc = np.clip(iz, 0, D - 1)
        iyc = np.clip(iy, 0, H - 1)
        ixc = np.clip(ix, 0, W - 1)
        wz = fz if a else 1.0 - fz
        wy = fy if b else 1.0 - fy
        wx = fx if c else 1.0 - fx
        terms.append((izc, iyc, ixc, m, wz, wy, wx, a, b, c))
    return terms, (fz, fy, fx)


def _warp_fwd(vol, field):
    terms, _ = _warp_terms(vol, field)
    out = np.zeros(vol.shape, dtype=vol.dtype)
    for izc, iyc, ixc, m, wz, wy, wx, _, _, _ in terms:
        out += (wz * wy * wx * m * vol[izc, iyc, ixc]).astype(vol.dtype, copy=False)
    return out


def warp(volume, field):
    """Trilinear pull-warp: out(v) = volume(v + field(v)); outside reads 0.

    Differentiable in both the volume and the 3-channel displacement field
    (displacements in voxels of the volume's own grid).
    """
    volume, field = _as_tensor(volume), _as_tensor(field)
    if volume.data.ndim != 3:
        raise DimensionError(f"warp: volume must be 3-D, got {volume.data.shape}")
    if field.data.shape != (3,) + volume.data.shape:
        raise DimensionError(
            f"warp: field shape {field.data.shape} does not match volume {volume.data.shape}")

    def vjp(g):
        vol, fld = volume.data, field.data
        terms, _ = _warp_terms(vol, fld)
        gvol = np.zeros_like(vol)
        gfield = np.zeros_like(fld)
        for izc, iyc, ixc, m, wz, wy, wx, a, b, c in terms:
            vals = vol[izc, iyc, ixc] * m
            np.add.at(gvol, (izc, iyc, ixc), (g * wz * wy * wx * m).astype(vol.dtype))
            gv = g * vals
            gfield[0] += ((1.0 if a else -1.0) * gv * wy * wx).astype(fld.dtype)
            gfield[1] += ((1.0 if b else -1.0) * gv * wz * wx).astype(fld.dtype)
            gfield[2] += ((1.0 if c else -1.0) * gv * wz * wy).astype(fld.dtype)
        return gvol, gfield

    return _node(_warp_fwd(volume.data, field.data), [volume, field], vjp,
                 lambda: _warp_fwd(volume.data, field.data), "warp")


# -- backward pass --------------------------------------------------------------------

def backward(tape, loss):
    """Accumulate gradients of a scalar loss over the tape.

    Returns a dict mapping parameter name -> gradient array for every named
    leaf tensor with requires_grad that the loss depends on.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_name: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            continue
        pgrads = node.vjp(g)
        for parent, pg in zip(node.parents, pgrads):
            if not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise TapeReplayError(
                    f"gradient shape {pg.shape} != parameter shape {parent.data.shape}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
            if parent.vjp is None and parent.name is not None:
                by_name[parent.name] = grads[id(parent)]
    return by_name


def grad_check(f, params, h=1e-4, samples=200, rng=None, min_grad=0.0,
               refine=False, tol=1e-4, return_stats=False):
    """Max relative error between analytic gradients and central differences.

    `f(params) -> Tensor` must build a scalar under the active tape;
    `params` is a dict name -> Tensor (float64 recommended). Up to `samples`
    coordinates are drawn across all parameters. The relative error is
    |analytic - numeric| / max(|analytic|, 1e-8).

    With `min_grad` > 0, sampling stratifies across parameter tensors and
    prefers coordinates whose analytic magnitude is at least `min_grad`
    (falling back to each tensor's largest-magnitude entries), so the
    relative-error metric is applied where an h-step stencil can resolve it.

    With `refine`, a coordinate whose plain stencil misses `tol` is re-measured
    at h/2. If the two stencils agree (numeric-only test), the Richardson
    combination (4*n2 - n1)/3 cancels the h^2 truncation term and becomes the
    oracle; if they disagree, the loss is not smooth enough there for a
    finite-difference oracle at this h (activation or interpolation kink) and
    the coordinate is replaced by another from the same tensor.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f(params)
    if not _finite(loss.data):
        raise NumericError("grad_check: non-finite loss")
    grads = backward(tape, loss)

    names = sorted(grads)
    queues = {}
    if min_grad > 0.0:
        per = int(np.ceil(samples / len(names)))
        for name in names:
            mags = np.abs(grads[name].ravel())
            big = np.flatnonzero(mags >= min_grad)
            if big.size >= per:
                order = rng.permutation(big)
            else:
                order = np.argsort(mags)[::-1]
            queues[name] = [int(i) for i in order]
        coords = []
        for name in names:
            coords.extend((name, i) for i in queues[name][:per])
            queues[name] = queues[name][per:]
    else:
        flat_coords = []
        for name in names:
            flat_coords.extend((name, i) for i in range(params[name].data.size))
        if len(flat_coords) > samples:
            idx = rng.choice(len(flat_coords), size=samples, replace=False)
            flat_coords = [flat_coords[i] for i in sorted(idx)]
        coords = flat_coords
        queues = {name: [] for name in names}

    def central(name, flat, step):
        p = params[name].data
        orig = p.flat[flat]
        p.flat[flat] = orig + step
        f_hi = float(f(params).data)
        p.flat[flat] = orig - step
        f_lo = float(f(params).data)
        p.flat[flat] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError("grad_check: non-finite function value")
        return (f_hi - f_lo) / (2.0 * step)

    max_rel = 0.0
    stats = {"checked": 0, "refined": 0, "resampled": 0}
    pending = list(coords)
    while pending:
        name, flat = pending.pop(0)
        analytic = float(grads[name].flat[flat])
        n1 = central(name, flat, h)
        rel = abs(analytic - n1) / max(abs(analytic), 1e-8)
        if refine and rel > tol:
            n2 = central(name, flat, h / 2.0)
            agree = abs(n2 - n1) <= 0.05 * max(abs(n1), abs(n2), 1e-8)
            if agree:
                n_r = (4.0 * n2 - n1) / 3.0
                rel = abs(analytic - n_r) / max(abs(analytic), 1e-8)
                stats["refined"] += 1
            elif queues.get(name):
                # stencil disagreement: a kink sits inside the step; this
                # coordinate has no finite-difference oracle at this h
                pending.append((name, queues[name].pop(0)))
                stats["resampled"] += 1
                continue
            else:
                stats["refined"] += 1
        max_rel = max(max_rel, rel)
        stats["checked"] += 1
    if return_stats:
        return max_rel, stats
    return max_rel
