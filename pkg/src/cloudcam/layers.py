"""Differentiable layers for the CAM network.

All layers take ``[C, H, W]`` or batched ``[N, C, H, W]`` tensors; an
unbatched input yields an unbatched output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_node

# Upper bound on im2col buffer elements per chunk (~64 MB of float64).
_COL_BUDGET = 8_000_000


@dataclass
class Conv2dParams:
    weight: Tensor  # [out_ch, in_ch, k, k]
    bias: Tensor  # [out_ch]
    stride: int = 1
    pad: int = 0

    @classmethod
    def same(cls, weight, bias):
        k = weight.shape[-1]
        if k % 2 == 0:
            raise ConfigError(f"same padding needs an odd kernel, got k={k}")
        return cls(weight, bias, stride=1, pad=(k - 1) // 2)


@dataclass
class ChannelAttentionParams:
    w0: Tensor  # [C/r, C]
    b0: Tensor  # [C/r]
    w1: Tensor  # [C, C/r]
    b1: Tensor  # [C]
    reduction: int

    @property
    def channels(self):
        return self.w0.shape[1]

    def __post_init__(self):
        c, hidden = self.w0.shape[1], self.w0.shape[0]
        if self.reduction < 1 or c % self.reduction or hidden != c // self.reduction:
            raise ConfigError(
                f"channel attention: C={c} with hidden width {hidden} is inconsistent with reduction {self.reduction}")
        if self.w1.shape != (c, hidden) or self.b0.shape != (hidden,) or self.b1.shape != (c,):
            raise ConfigError("channel attention: parameter shapes do not agree")


def _batched(x):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def _unbatch(y, squeeze):
    return T.reshape(y, y.shape[1:]) if squeeze else y


# -- convolution ---------------------------------------------------------

def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


def _taps(k, stride, ho, wo):
    return [(i, j, slice(i, i + (ho - 1) * stride + 1, stride), slice(j, j + (wo - 1) * stride + 1, stride))
            for i in range(k) for j in range(k)]


def _cols(xp_nhwc, taps):
    """im2col in channels-last layout: [n, Ho, Wo, k*k*C] with (i, j, c) ordering."""
    return np.concatenate([xp_nhwc[:, si, sj, :] for _, _, si, sj in taps], axis=-1)


def _conv_geometry(x_shape, w_shape, stride, pad):
    n, c, h, wd = x_shape
    o, _, k, _ = w_shape
    return n, c, o, k, (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1


def conv2d(x, p):
    """Cross-correlation of ``x`` with ``p.weight`` (no kernel flip)."""
    x, squeeze = _batched(x)
    w, b = p.weight, p.bias
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be [out, in, k, k], got {w.shape}")
    k = w.shape[-1]
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if p.stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if x.shape[2] + 2 * p.pad < k or x.shape[3] + 2 * p.pad < k:
        raise ShapeError(f"conv2d: input {x.shape[2:]} smaller than kernel {k}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} output channels")

    stride, pad = p.stride, p.pad
    n, c, o, k, ho, wo = _conv_geometry(x.shape, w.shape, stride, pad)
    taps = _taps(k, stride, ho, wo)
    xp = x.data.transpose(0, 2, 3, 1)
    if pad:
        xp = np.pad(xp, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wd = w.data
    wmat = wd.transpose(2, 3, 1, 0).reshape(k * k * c, o)  # rows ordered (i, j, c)
    out = np.empty((n, ho, wo, o))
    per_item = ho * wo * c * k * k
    for lo, hi in _chunks(n, per_item):
        out[lo:hi] = _cols(xp[lo:hi], taps) @ wmat
    if b is not None:
        out += b.data
    out = out.transpose(0, 3, 1, 2)

    def bw(g):
        gn = g.transpose(0, 2, 3, 1)
        gw = np.zeros((k * k * c, o))
        gxp = np.zeros(xp.shape)
        for lo, hi in _chunks(n, per_item):
            gm = gn[lo:hi]
            gw += _cols(xp[lo:hi], taps).reshape(-1, k * k * c).T @ gm.reshape(-1, o)
            gcols = gm @ wmat.T
            tgt = gxp[lo:hi]
            for t, (_, _, si, sj) in enumerate(taps):
                tgt[:, si, sj, :] += gcols[..., t * c:(t + 1) * c]
        if pad:
            gxp = gxp[:, pad:-pad, pad:-pad, :]
        grads = [gxp.transpose(0, 3, 1, 2), gw.reshape(k, k, c, o).transpose(3, 2, 0, 1)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _unbatch(make_node(out, parents, bw, "conv2d"), squeeze)


# -- pooling / upsampling ------------------------------------------------

def maxpool2(x):
    """2x2 max pool, stride 2; ties resolve to the first element in row-major order."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    T.note_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _unbatch(make_node(out, (x,), bw, "maxpool2"), squeeze)


def transposed_conv2(x, weight, bias=None):
    """Stride-2, 2x2 transposed convolution; ``weight`` is [C_in, C_out, 2, 2]."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2: weight {weight.shape} incompatible with {c} input channels")
    o = weight.shape[1]
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"transposed_conv2: bias shape {bias.shape}, expected ({o},)")
    xd, wd = x.data, weight.data
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = wd.reshape(c, o * 4)
    out = (xmat @ wmat).reshape(n, h, w, o, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, o * 4)
        gx = (gm @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gm).reshape(wd.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(make_node(out, parents, bw, "tconv2"), squeeze)


# -- dense / attention / concat -----------------------------------------

def dense(x, w, b=None):
    """``w @ x + b`` for ``x`` of shape [C] or [N, C]; ``w`` is [D, C]."""
    single = x.ndim == 1
    xb = T.reshape(x, (1, x.shape[0])) if single else x
    if w.ndim != 2 or xb.ndim != 2 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not conform to weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match output width {w.shape[0]}")
    wt = w.data
    y = make_node(xb.data @ wt.T, (xb, w), lambda g: (g @ wt, g.T @ xb.data), "dense")
    if b is not None:
        y = T.add(y, b)
    return T.reshape(y, (w.shape[0],)) if single else y


def _shared_mlp(v, p):
    return dense(T.relu(dense(v, p.w0, p.b0)), p.w1, p.b1)


def attention_weights(f, p):
    """Per-channel scale in (0, 1), shape [N, C]."""
    avg = T.mean(f, axis=(2, 3))
    mx = T.amax(f, axis=(2, 3))
    return T.sigmoid(T.add(_shared_mlp(avg, p), _shared_mlp(mx, p)))


def channel_attention(f, p):
    """Re-weight channels of ``f`` by a sigmoid gate computed from avg- and max-pooled statistics."""
    f, squeeze = _batched(f)
    if f.shape[1] != p.channels:
        raise ShapeError(f"channel_attention: input has {f.shape[1]} channels, module built for {p.channels}")
    s = attention_weights(f, p)
    s = T.reshape(s, s.shape + (1, 1))
    return _unbatch(T.mul(f, s), squeeze)


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    return T.concat([a, b], axis=a.ndim - 3)
