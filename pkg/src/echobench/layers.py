"""Differentiable layer primitives and a minimal module system.

Tensors are channels-last: video batches are ``N x T x H x W x C``, frame
batches ``N x H x W x C``. Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (ShapeError, Tensor, add, concat, conv_output_extent, make_op, matmul, mean,
                     mul, relu, same_padding, sigmoid, stack, sub, take, tanh)

IM2COL_LIMIT_BYTES = 256 * 2**20


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents, got {v}")
    return v


def _resolve_padding(padding, spatial: Sequence[int], kernel: Sequence[int],
                     stride: Sequence[int]) -> list[tuple[int, int]]:
    if padding == "valid":
        return [(0, 0)] * len(spatial)
    if padding == "same":
        return [same_padding(i, k, s) for i, k, s in zip(spatial, kernel, stride)]
    pads = [tuple(p) if not isinstance(p, int) else (p, p) for p in padding]
    if len(pads) != len(spatial):
        raise ValueError(f"padding {padding!r} does not match {len(spatial)} axes")
    return pads


def _output_extents(spatial, kernel, stride, pads) -> tuple[int, ...]:
    try:
        return tuple(conv_output_extent(i, k, p0, p1, s)
                     for i, k, (p0, p1), s in zip(spatial, kernel, pads, stride))
    except ValueError as exc:
        raise ShapeError(f"invalid geometry: input {tuple(spatial)}, window {tuple(kernel)}, "
                         f"padding {pads}: {exc}") from None


def _window_slices(offset: Sequence[int], out: Sequence[int], stride: Sequence[int]):
    return (slice(None),) + tuple(slice(o, o + (n - 1) * s + 1, s)
                                  for o, n, s in zip(offset, out, stride))


# ---------------------------------------------------------------------------
# convolution

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1,
           padding="same") -> Tensor:
    """3-D cross-correlation of ``N x T x H x W x C`` input with a
    ``kT x kH x kW x C x K`` kernel, plus optional bias of length ``K``."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be N x T x H x W x C, got {x.shape}")
    kt, kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} has {x.shape[-1]} channels, "
                         f"kernel {weight.shape} expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    kernel = (kt, kh, kw)
    stride = _triple(stride)
    pads = _resolve_padding(padding, x.shape[1:4], kernel, stride)
    out_sp = _output_extents(x.shape[1:4], kernel, stride, pads)
    n = x.shape[0]
    xp = np.pad(x.data, [(0, 0)] + pads + [(0, 0)]) if any(p != (0, 0) for p in pads) else x.data
    w = weight.data
    m = n * int(np.prod(out_sp))
    use_cols = m * kt * kh * kw * cin * xp.itemsize <= IM2COL_LIMIT_BYTES

    if use_cols:
        win = sliding_window_view(xp, kernel, axis=(1, 2, 3))[:, ::stride[0], ::stride[1], ::stride[2]]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(m, -1)
        out = (cols @ w.reshape(-1, cout)).reshape((n,) + out_sp + (cout,))
    else:
        out = np.zeros((n,) + out_sp + (cout,), dtype=np.result_type(xp, w))
        for off in product(range(kt), range(kh), range(kw)):
            out += xp[_window_slices(off, out_sp, stride)] @ w[off]
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(m, cout)
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for off in product(range(kt), range(kh), range(kw)):
            sl = _window_slices(off, out_sp, stride)
            patch = xp[sl]
            dw[off] = patch.reshape(m, cin).T @ g2
            dxp[sl] += g @ w[off].T
        crop = (slice(None),) + tuple(slice(p0, p0 + s) for (p0, _), s in zip(pads, x.shape[1:4]))
        dx = dxp[crop]
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, backward, "conv3d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1,
           padding="same") -> Tensor:
    """2-D cross-correlation of ``N x H x W x C`` input with a ``kH x kW x C x K`` kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N x H x W x C, got {x.shape}")
    s = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if padding not in ("same", "valid"):
        padding = [(0, 0)] + list(padding)
    x5 = x.reshape((x.shape[0], 1) + x.shape[1:])
    w5 = weight.reshape((1,) + weight.shape)
    out = conv3d(x5, w5, bias, stride=(1,) + s, padding=padding)
    return out.reshape((out.shape[0],) + out.shape[2:])


# ---------------------------------------------------------------------------
# pooling

def pool3d(x: Tensor, window, stride=None, kind: str = "max", padding="valid") -> Tensor:
    """Max or average pooling over the T, H, W axes of a 5-D tensor.

    Max-pool adjoints go to the first maximal element of each window in scan
    order. ``kind="global_avg"`` reduces all spatiotemporal axes (see
    :func:`global_avg_pool`). Padding is only supported for max pooling.
    """
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 5:
        raise ShapeError(f"pool3d input must be N x T x H x W x C, got {x.shape}")
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    pads = _resolve_padding(padding, x.shape[1:4], window, stride)
    if kind == "avg" and any(p != (0, 0) for p in pads):
        raise ValueError("average pooling supports valid padding only")
    out_sp = _output_extents(x.shape[1:4], window, stride, pads)
    xp = x.data
    if any(p != (0, 0) for p in pads):
        xp = np.pad(xp, [(0, 0)] + pads + [(0, 0)], constant_values=-np.inf)
    win = sliding_window_view(xp, window, axis=(1, 2, 3))[:, ::stride[0], ::stride[1], ::stride[2]]
    win = win[:, :out_sp[0], :out_sp[1], :out_sp[2]]
    flat = win.reshape(win.shape[:5] + (-1,))
    offsets = list(product(*(range(w) for w in window)))
    crop = (slice(None),) + tuple(slice(p0, p0 + s) for (p0, _), s in zip(pads, x.shape[1:4]))

    if kind == "max":
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for k, off in enumerate(offsets):
                dxp[_window_slices(off, out_sp, stride)] += np.where(arg == k, g, 0)
            return (dxp[crop],)
    else:
        count = len(offsets)
        out = flat.mean(axis=-1)

        def backward(g):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            share = g / count
            for off in offsets:
                dxp[_window_slices(off, out_sp, stride)] += share
            return (dxp,)

    return make_op(np.ascontiguousarray(out), (x,), backward, f"{kind}_pool3d")


def pool2d(x: Tensor, window, stride=None, kind: str = "max", padding="valid") -> Tensor:
    if kind == "global_avg":
        return global_avg_pool(x)
    if x.ndim != 4:
        raise ShapeError(f"pool2d input must be N x H x W x C, got {x.shape}")
    window = (window, window) if isinstance(window, int) else tuple(window)
    stride = window if stride is None else ((stride, stride) if isinstance(stride, int) else tuple(stride))
    if padding not in ("same", "valid"):
        padding = [(0, 0)] + list(padding)
    x5 = x.reshape((x.shape[0], 1) + x.shape[1:])
    out = pool3d(x5, (1,) + window, (1,) + stride, kind, padding)
    return out.reshape((out.shape[0],) + out.shape[2:])


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis between batch and channel: ``N x ... x C -> N x C``."""
    if x.ndim < 3:
        raise ShapeError(f"global average pooling needs spatial axes, got {x.shape}")
    return mean(x, axis=tuple(range(1, x.ndim - 1)))


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormSpec:
    kind: str = "batch"
    features: int = 1
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("batch", "layer"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class RunningStats:
    """Running mean and (population) variance of a batch-norm layer."""

    def __init__(self, features: int, dtype=np.float64):
        self.mean = np.zeros(features, dtype=dtype)
        self.var = np.ones(features, dtype=dtype)

    def update(self, batch_mean, batch_var, momentum: float):
        self.mean = momentum * self.mean + (1.0 - momentum) * batch_mean
        self.var = momentum * self.var + (1.0 - momentum) * batch_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               epsilon: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-feature normalization over the batch and all spatial axes (last axis = features)."""
    feats = x.shape[-1]
    if gamma.shape != (feats,) or beta.shape != (feats,):
        raise ShapeError(f"norm parameters {gamma.shape}/{beta.shape} do not match features {feats}")
    axes = tuple(range(x.ndim - 1))
    if training:
        m = int(np.prod(x.shape[:-1]))
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = centered * inv_std
        stats.update(mu, var, momentum)

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data
            dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, dgamma, dbeta
    else:
        inv_std = 1.0 / np.sqrt(stats.var + epsilon)
        xhat = (x.data - stats.mean) * inv_std

        def backward(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)
    return make_op(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Per-sample normalization over all non-batch axes; affine per last-axis feature."""
    feats = x.shape[-1]
    if gamma.shape != (feats,) or beta.shape != (feats,):
        raise ShapeError(f"norm parameters {gamma.shape}/{beta.shape} do not match features {feats}")
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    m = flat.shape[1]
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (centered * inv_std).reshape(x.shape)
    axes = tuple(range(x.ndim - 1))
    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = (g * gamma.data).reshape(n, -1)
        xh = xhat.reshape(n, -1)
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=1, keepdims=True)
                              - xh * (dxhat * xh).sum(axis=1, keepdims=True))
        return dx.reshape(x.shape), dgamma, dbeta

    return make_op(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# dense, dropout

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``N x D`` input; bias broadcasts over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weights {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data
    return make_op(out, (x, weight, bias),
                   lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)), "linear")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None, activation: str = "linear") -> Tensor:
    out = linear(x, weight, bias)
    if activation == "relu":
        return relu(out)
    if activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return out


@dataclass
class DropoutSpec:
    rate: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "inference"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")


def dropout(x: Tensor, spec: DropoutSpec, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in inference mode or at rate 0."""
    if spec.mode == "inference" or spec.rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = 1.0 - spec.rate
    mask = (rng.random(x.shape) >= spec.rate).astype(x.dtype) / x.dtype.type(keep)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# recurrent cells

@dataclass
class RecurrentState:
    x: Tensor | None
    h: Tensor
    c: Tensor | None = None
    y: Tensor | None = None


@dataclass
class RecurrentParams:
    """Input weights ``D x G*H``, recurrent weights ``H x G*H``, bias ``G*H``.

    Gate blocks are ordered (input, forget, candidate, output) for LSTM and
    (update, reset, candidate) for GRU.
    """
    W: Tensor
    U: Tensor
    b: Tensor


GATES = {"lstm": 4, "gru": 3}


def _cols(t: Tensor, start: int, stop: int) -> Tensor:
    return take(t, (slice(None), slice(start, stop)))


def recurrent_step(cell: str, state: RecurrentState, params: RecurrentParams) -> RecurrentState:
    cell = cell.lower()
    if cell not in GATES:
        raise ValueError(f"unknown recurrent cell {cell!r}")
    x, h = state.x, state.h
    hidden = h.shape[1]
    gates = GATES[cell]
    if params.U.shape != (hidden, gates * hidden) or params.b.shape != (gates * hidden,):
        raise ShapeError(f"{cell} parameters {params.U.shape}/{params.b.shape} do not match hidden {hidden}")
    if x.shape[1] != params.W.shape[0] or params.W.shape[1] != gates * hidden:
        raise ShapeError(f"{cell} input {x.shape} does not match input weights {params.W.shape}")
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"batch mismatch between input {x.shape} and state {h.shape}")
    H = hidden
    xz = linear(x, params.W, params.b)
    if cell == "lstm":
        if state.c is None or state.c.shape != h.shape:
            raise ShapeError("LSTM step needs a cell state shaped like the hidden state")
        z = add(xz, matmul(h, params.U))
        i = sigmoid(_cols(z, 0, H))
        f = sigmoid(_cols(z, H, 2 * H))
        g = tanh(_cols(z, 2 * H, 3 * H))
        o = sigmoid(_cols(z, 3 * H, 4 * H))
        c = add(mul(f, state.c), mul(i, g))
        h_new = mul(o, tanh(c))
        return RecurrentState(x, h_new, c, h_new)
    hz = matmul(h, _cols(params.U, 0, 2 * H))
    upd = sigmoid(add(_cols(xz, 0, H), _cols(hz, 0, H)))
    reset = sigmoid(add(_cols(xz, H, 2 * H), _cols(hz, H, 2 * H)))
    cand = tanh(add(_cols(xz, 2 * H, 3 * H), matmul(mul(reset, h), _cols(params.U, 2 * H, 3 * H))))
    h_new = add(h, mul(upd, sub(cand, h)))
    return RecurrentState(x, h_new, None, h_new)


def apply_per_frame(frame_model: Callable[[Tensor], Tensor], clip: Tensor) -> Tensor:
    """Run ``frame_model`` on each frame of ``N x T x H x W x C`` and stack to ``N x T x D``."""
    if clip.ndim != 5:
        raise ShapeError(f"per-frame input must be N x T x H x W x C, got {clip.shape}")
    expected = getattr(frame_model, "input_shape", None)
    if expected is not None and tuple(expected) != clip.shape[2:]:
        raise ShapeError(f"frame model expects {tuple(expected)}, clip frames are {clip.shape[2:]}")
    feats = [frame_model(take(clip, (slice(None), t))) for t in range(clip.shape[1])]
    for f in feats:
        if f.ndim != 2:
            raise ShapeError(f"frame model must return N x D features, got {f.shape}")
    return stack(feats, axis=1)


# ---------------------------------------------------------------------------
# module system

class Context:
    """Forward-pass mode plus the rng used by dropout."""

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.training = training
        self.rng = rng


class Module:
    """Base class: parameters and child modules are registered by attribute order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad and value.is_leaf():
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "", seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if seen is None else seen
        for name, p in self._params.items():
            if id(p) not in seen:
                seen.add(id(p))
                yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "", seen: set | None = None) -> Iterator[tuple[str, RunningStats]]:
        seen = set() if seen is None else seen
        stats = getattr(self, "stats", None)
        if isinstance(stats, RunningStats) and id(stats) not in seen:
            seen.add(id(stats))
            yield prefix + "stats", stats
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.", seen)

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def __call__(self, x, ctx: Context | None = None):
        return self.forward(x, ctx if ctx is not None else Context())


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 2.0) -> Tensor:
    std = math.sqrt(gain / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv(Module):
    """Convolution over 3 (video) or 2 (frame) spatial axes with same/valid padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Sequence[int], rng, dtype=np.float64,
                 stride=1, padding: str = "same", bias: bool = True):
        super().__init__()
        self.kernel = tuple(int(k) for k in kernel)
        self.dims = len(self.kernel)
        if self.dims not in (2, 3):
            raise ValueError(f"kernel must have 2 or 3 extents, got {kernel}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.stride = (stride,) * self.dims if isinstance(stride, int) else tuple(stride)
        self.padding = padding
        fan_in = int(np.prod(self.kernel)) * in_channels
        self.weight = he_normal(rng, self.kernel + (in_channels, out_channels), fan_in, dtype)
        self.bias = zeros_param((out_channels,), dtype) if bias else None

    def forward(self, x, ctx):
        fn = conv3d if self.dims == 3 else conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, shape):
        pads = _resolve_padding(self.padding, shape[:-1], self.kernel, self.stride)
        return _output_extents(shape[:-1], self.kernel, self.stride, pads) + (self.out_channels,)


class Norm(Module):
    def __init__(self, spec: NormSpec, dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.gamma = Tensor(np.ones(spec.features, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((spec.features,), dtype)
        if spec.kind == "batch":
            self.stats = RunningStats(spec.features, dtype)

    def forward(self, x, ctx):
        if self.spec.kind == "batch":
            return batch_norm(x, self.gamma, self.beta, self.stats, ctx.training,
                              self.spec.epsilon, self.spec.momentum)
        return layer_norm(x, self.gamma, self.beta, self.spec.epsilon)

    def out_shape(self, shape):
        return shape


class ReLU(Module):
    def forward(self, x, ctx):
        return relu(x)

    def out_shape(self, shape):
        return shape


class ConvBlock(Module):
    """Convolution followed by normalization and ReLU."""

    def __init__(self, in_channels, out_channels, kernel, norm_kind, rng, dtype=np.float64, stride=1,
                 padding="same"):
        super().__init__()
        self.conv = Conv(in_channels, out_channels, kernel, rng, dtype, stride, padding)
        self.norm = Norm(NormSpec(norm_kind, out_channels), dtype)

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x, ctx):
        return relu(self.norm(self.conv(x, ctx), ctx))

    def out_shape(self, shape):
        return self.conv.out_shape(shape)


class Pool(Module):
    def __init__(self, window: Sequence[int], stride=None, kind: str = "max", padding="valid"):
        super().__init__()
        self.window = tuple(window)
        self.stride = self.window if stride is None else tuple(stride)
        self.kind = kind
        self.padding = padding

    def forward(self, x, ctx):
        fn = pool3d if len(self.window) == 3 else pool2d
        return fn(x, self.window, self.stride, self.kind, self.padding)

    def out_shape(self, shape):
        pads = _resolve_padding(self.padding, shape[:-1], self.window, self.stride)
        return _output_extents(shape[:-1], self.window, self.stride, pads) + (shape[-1],)


class GlobalAvgPool(Module):
    def forward(self, x, ctx):
        return global_avg_pool(x)

    def out_shape(self, shape):
        return (shape[-1],)


class Flatten(Module):
    def forward(self, x, ctx):
        return x.reshape((x.shape[0], -1))

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float64,
                 activation: str = "linear"):
        super().__init__()
        self.activation = activation
        gain = 2.0 if activation == "relu" else 1.0
        self.weight = he_normal(rng, (in_features, out_features), in_features, dtype, gain)
        self.bias = zeros_param((out_features,), dtype)

    def forward(self, x, ctx):
        return dense(x, self.weight, self.bias, self.activation)

    def out_shape(self, shape):
        if shape != (self.weight.shape[0],):
            raise ShapeError(f"dense expects ({self.weight.shape[0]},), got {shape}")
        return (self.weight.shape[1],)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        DropoutSpec(rate)
        self.rate = rate

    def forward(self, x, ctx):
        spec = DropoutSpec(self.rate, "train" if ctx.training else "inference")
        return dropout(x, spec, ctx.rng)

    def out_shape(self, shape):
        return shape


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape


class Recurrent(Module):
    """Single recurrent layer over an ``N x T x D`` sequence; returns the last hidden state.

    With ``hidden_norm`` each hidden state is layer-normalized before the next step.
    """

    def __init__(self, cell: str, input_size: int, hidden_size: int, rng, dtype=np.float64,
                 hidden_norm: bool = False):
        super().__init__()
        self.cell = cell.lower()
        gates = GATES[self.cell]
        self.hidden_size = hidden_size
        self.W = he_normal(rng, (input_size, gates * hidden_size), input_size, dtype, 1.0)
        self.U = he_normal(rng, (hidden_size, gates * hidden_size), hidden_size, dtype, 1.0)
        b = np.zeros(gates * hidden_size, dtype=dtype)
        if self.cell == "lstm":
            b[hidden_size:2 * hidden_size] = 1.0
        self.b = Tensor(b, requires_grad=True)
        if hidden_norm:
            self.hidden_norm = Norm(NormSpec("layer", hidden_size), dtype)
        else:
            self.hidden_norm = None

    @property
    def params(self) -> RecurrentParams:
        return RecurrentParams(self.W, self.U, self.b)

    def forward(self, seq, ctx):
        if seq.ndim != 3:
            raise ShapeError(f"recurrent input must be N x T x D, got {seq.shape}")
        n = seq.shape[0]
        zeros = np.zeros((n, self.hidden_size), dtype=seq.dtype)
        state = RecurrentState(None, Tensor(zeros), Tensor(zeros) if self.cell == "lstm" else None)
        params = self.params
        for t in range(seq.shape[1]):
            state.x = take(seq, (slice(None), t))
            state = recurrent_step(self.cell, state, params)
            if self.hidden_norm is not None:
                state.h = self.hidden_norm(state.h, ctx)
        return state.h

    def out_shape(self, shape):
        return (self.hidden_size,)


class PerFrame(Module):
    """Apply a frame model (``H x W x C -> D``) to every frame with shared parameters."""

    def __init__(self, frame_model: Module, frame_shape: tuple[int, ...]):
        super().__init__()
        self.frame_model = frame_model
        self.input_shape = tuple(frame_shape)

    def forward(self, x, ctx):
        if x.ndim != 5 or x.shape[2:] != self.input_shape:
            raise ShapeError(f"frame model expects frames {self.input_shape}, got clip {x.shape}")
        return apply_per_frame(lambda f: self.frame_model(f, ctx), x)

    def out_shape(self, shape):
        return (shape[0],) + self.frame_model.out_shape(shape[1:])


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels after cropping every leading axis to the common minimum."""
    ndim = tensors[0].ndim
    common = [min(t.shape[ax] for t in tensors) for ax in range(1, ndim - 1)]
    cropped = []
    for t in tensors:
        if list(t.shape[1:-1]) != common:
            t = take(t, (slice(None),) + tuple(slice(0, c) for c in common))
        cropped.append(t)
    return concat(cropped, axis=-1)
