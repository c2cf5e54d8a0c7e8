"""Differentiable layer primitives with explicit forward/backward passes.

Each layer owns its learned ``params``, matching ``grads`` slots, optional
``buffers`` (batch-norm running statistics) and the forward cache needed by
``backward``. Layers also answer static questions about themselves
(``output_shape``, ``flops``) so a graph can be costed without running it.

Convention for ``backward``: it receives the gradient of a scalar loss with
respect to the layer output and returns a tuple with one gradient per
forward input. Parameter gradients are written into ``self.grads``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PRELU_INIT = 0.25


def _shape_error(what, a, b):
    return ValueError(f"{what}: shape mismatch {tuple(a)} vs {tuple(b)}")


class Layer:
    """Base class; parameter-free layers only override the compute methods."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.cache = None

    def _add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def _need_cache(self):
        if self.cache is None:
            raise RuntimeError("backward before forward")
        return self.cache

    def forward(self, *inputs, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, param_grads=True):
        raise NotImplementedError

    def output_shape(self, *shapes):
        return tuple(shapes[0])

    def flops(self, *shapes):
        return 0

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def describe(self):
        return self.kind


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding_mode: str = "same"
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel dims must be >= 1")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.padding_mode not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


def _pad_amounts(size, k, stride, dilation, mode):
    """(pad_before, pad_after, out_size) along one spatial axis.

    Same padding follows the ``ceil(size / stride)`` output rule; an odd
    total pad puts the extra row/column at the bottom/right.
    """
    eff = dilation * (k - 1) + 1
    if mode == "valid":
        if eff > size:
            raise ValueError(f"kernel exceeds input: effective kernel {eff} > {size}")
        return 0, 0, (size - eff) // stride + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2, out


def _pad_nhwc(x, top, bottom, left, right):
    """Zero-pad the two spatial axes of a channels-last array (into a fresh buffer)."""
    B, H, W, C = x.shape
    out = np.zeros((B, H + top + bottom, W + left + right, C), dtype=x.dtype)
    out[:, top:top + H, left:left + W, :] = x
    return out


def _patches(xp, kh, kw, stride, dilation, Ho, Wo):
    """im2col on a padded channels-last array: ``(B*Ho*Wo, kh*kw*C)``."""
    B, _, _, C = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, shape=(B, Ho, Wo, kh, kw, C),
                      strides=(s0, s1 * stride, s2 * stride, s1 * dilation, s2 * dilation, s3),
                      writeable=False)
    return view.reshape(B * Ho * Wo, kh * kw * C)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, spec: ConvSpec, rng=None):
        super().__init__()
        self.spec = spec
        s = spec
        shape = (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)
        if rng is None:
            w = np.zeros(shape)
        else:
            fan_in = s.in_channels * s.kernel_h * s.kernel_w
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        self._add_param("weight", w)
        if s.has_bias:
            self._add_param("bias", np.zeros(s.out_channels))

    def _geometry(self, H, W):
        s = self.spec
        pt, pb, Ho = _pad_amounts(H, s.kernel_h, s.stride, s.dilation, s.padding_mode)
        pl, pr, Wo = _pad_amounts(W, s.kernel_w, s.stride, s.dilation, s.padding_mode)
        return (pt, pb, pl, pr), Ho, Wo

    def output_shape(self, shape):
        B, C, H, W = shape
        if C != self.spec.in_channels:
            raise ValueError(f"conv expects {self.spec.in_channels} input channels, got {C}")
        _, Ho, Wo = self._geometry(H, W)
        return (B, self.spec.out_channels, Ho, Wo)

    def flops(self, shape):
        B, _, Ho, Wo = self.output_shape(shape)
        s = self.spec
        return 2 * B * Ho * Wo * s.out_channels * s.in_channels * s.kernel_h * s.kernel_w

    def _pointwise(self):
        s = self.spec
        return s.kernel_h == s.kernel_w == 1 and s.stride == 1

    def forward(self, x, train=False, rng=None):
        B, C, H, W = x.shape
        if C != self.spec.in_channels:
            raise ValueError(f"conv expects {self.spec.in_channels} input channels, got {C}")
        s = self.spec
        (pt, pb, pl, pr), Ho, Wo = self._geometry(H, W)
        w = self.params["weight"]
        O = s.out_channels
        # channels-last patches (N, kh*kw*C) make one well-shaped GEMM over the batch
        if self._pointwise():
            cols = x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
        else:
            xp = _pad_nhwc(x.transpose(0, 2, 3, 1), pt, pb, pl, pr)
            cols = _patches(xp, s.kernel_h, s.kernel_w, s.stride, s.dilation, Ho, Wo)
        wk = w.transpose(0, 2, 3, 1).reshape(O, -1)
        out = cols @ wk.T
        if s.has_bias:
            out += self.params["bias"]
        self.cache = (cols, x.shape, (pt, pb, pl, pr), Ho, Wo)
        return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(self, grad, param_grads=True):
        cols, in_shape, (pt, pb, pl, pr), Ho, Wo = self._need_cache()
        s = self.spec
        B, C, H, W = in_shape
        O, kh, kw, d = s.out_channels, s.kernel_h, s.kernel_w, s.dilation
        w = self.params["weight"]
        g = grad.transpose(0, 2, 3, 1)                          # (B, Ho, Wo, O)
        g2 = g.reshape(B * Ho * Wo, O)
        if param_grads:
            gw = (cols.T @ g2).T                                # (O, kh*kw*C)
            self.grads["weight"] = np.ascontiguousarray(
                gw.reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
            if s.has_bias:
                self.grads["bias"] = g2.sum(axis=0)
        if self._pointwise():
            gx = g2 @ w.reshape(O, C)
            return (gx.reshape(B, H, W, C).transpose(0, 3, 1, 2),)
        if s.stride == 1:
            # input gradient = correlation of the output gradient with the flipped kernel
            ft, fl = (kh - 1) * d - pt, (kw - 1) * d - pl
            gp = _pad_nhwc(g, ft, H + (kh - 1) * d - Ho - ft, fl, W + (kw - 1) * d - Wo - fl)
            gcols = _patches(gp, kh, kw, 1, d, H, W)
            wf = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
            gx = gcols @ wf
            return (gx.reshape(B, H, W, C).transpose(0, 3, 1, 2),)
        gcols = (g2 @ w.transpose(0, 2, 3, 1).reshape(O, -1)).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros((B, H + pt + pb, W + pl + pr, C), dtype=gcols.dtype)
        ys, xs = s.stride * (Ho - 1) + 1, s.stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                y0, x0 = i * d, j * d
                gxp[:, y0:y0 + ys:s.stride, x0:x0 + xs:s.stride, :] += gcols[:, :, :, i, j, :]
        return (gxp[:, pt:pt + H, pl:pl + W, :].transpose(0, 3, 1, 2),)

    def describe(self):
        s = self.spec
        return (f"conv {s.kernel_h}x{s.kernel_w} {s.in_channels}->{s.out_channels}"
                f" s{s.stride} d{s.dilation} {s.padding_mode}")


# --------------------------------------------------------------------------
# pooling


class MaxPool(Layer):
    """Max pooling that records the in-plane flat index (``y * W + x``) of each maximum.

    Ties go to the lowest flat index. The recorded ``indices`` and the input
    shape are kept on the layer so a paired :class:`MaxUnpool` can read them.
    """

    kind = "maxpool"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = int(window)
        self.stride = int(stride or window)
        self.indices = None
        self.in_shape = None

    def output_shape(self, shape):
        B, C, H, W = shape
        if H < self.window or W < self.window:
            raise ValueError(f"pool window {self.window} exceeds input {H}x{W}")
        return (B, C, (H - self.window) // self.stride + 1, (W - self.window) // self.stride + 1)

    def forward(self, x, train=False, rng=None):
        pooled, idx = maxpool_with_indices(x, self.window, self.stride)
        self.indices = idx
        self.in_shape = x.shape
        self.cache = (x.shape, idx)
        return pooled

    def backward(self, grad, param_grads=True):
        in_shape, idx = self._need_cache()
        B, C, H, W = in_shape
        gx = np.zeros((B, C, H * W), dtype=grad.dtype)
        g = grad.reshape(B, C, -1)
        flat = idx.reshape(B, C, -1)
        if self.stride >= self.window:
            np.put_along_axis(gx, flat, g, axis=2)
        else:
            bb, cc = np.indices(flat.shape[:2])
            np.add.at(gx, (bb[..., None], cc[..., None], flat), g)
        return (gx.reshape(in_shape),)


def maxpool_with_indices(x, window, stride=None):
    """Return ``(pooled, indices)`` for a max pool over ``window x window`` tiles."""
    stride = stride or window
    B, C, H, W = x.shape
    if window > H or window > W:
        raise ValueError(f"pool window {window} exceeds input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    x = np.ascontiguousarray(x)
    s0, s1, s2, s3 = x.strides
    view = as_strided(x, shape=(B, C, Ho, Wo, window, window),
                      strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    tiles = view.reshape(B, C, Ho, Wo, window * window)
    local = tiles.argmax(axis=-1)
    pooled = np.take_along_axis(tiles, local[..., None], axis=-1)[..., 0]
    ky, kx = np.divmod(local, window)
    rows = np.arange(Ho)[:, None] * stride + ky
    cols = np.arange(Wo)[None, :] * stride + kx
    return pooled, rows * W + cols


def max_unpool(pooled, indices, out_shape):
    """Scatter ``pooled`` into zeros of ``out_shape`` at the recorded argmax positions."""
    B, C, H, W = out_shape
    if pooled.shape[:2] != (B, C) or indices.shape != pooled.shape:
        raise _shape_error("max_unpool", pooled.shape, out_shape)
    flat = indices.reshape(B, C, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= H * W):
        raise ValueError(f"unpool index out of range for output {H}x{W}")
    out = np.zeros((B, C, H * W), dtype=pooled.dtype)
    np.put_along_axis(out, flat, pooled.reshape(B, C, -1), axis=2)
    return out.reshape(out_shape)


class MaxUnpool(Layer):
    """Inverse of a specific :class:`MaxPool` layer, using its stored switches."""

    kind = "maxunpool"

    def __init__(self, pool: MaxPool):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=False, rng=None):
        if self.pool.indices is None:
            raise RuntimeError("unpool before its paired pool ran")
        B, _, H, W = self.pool.in_shape
        out_shape = (x.shape[0], x.shape[1], H, W)
        self.cache = (self.pool.indices, x.shape)
        return max_unpool(x, self.pool.indices, out_shape)

    def backward(self, grad, param_grads=True):
        idx, in_shape = self._need_cache()
        B, C = grad.shape[:2]
        g = np.take_along_axis(grad.reshape(B, C, -1), idx.reshape(B, C, -1), axis=2)
        return (g.reshape(in_shape),)


# --------------------------------------------------------------------------
# normalisation and activations


class BatchNorm(Layer):
    """Per-channel batch normalisation with learned scale/shift.

    Running statistics start at mean 0 / variance 1, so inference before any
    training step is well defined. The running variance tracks the biased
    batch variance.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self._add_param("gamma", np.ones(channels))
        self._add_param("beta", np.zeros(channels))
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def output_shape(self, shape):
        if shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {shape[1]}")
        return tuple(shape)

    def flops(self, shape):
        return 2 * int(np.prod(shape))

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self.cache = (xhat, inv, train)
        return gamma * xhat + beta

    def backward(self, grad, param_grads=True):
        xhat, inv, train = self._need_cache()
        if param_grads:
            self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
            self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.params["gamma"][None, :, None, None]
        if not train:
            return (gxhat * inv[None, :, None, None],)
        n = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv[None, :, None, None] / n) * (n * gxhat - s1 - xhat * s2)
        return (gx,)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self.cache = x > 0
        return np.where(self.cache, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad, param_grads=True):
        return (np.where(self._need_cache(), grad, 0.0).astype(grad.dtype, copy=False),)


class PReLU(Layer):
    kind = "prelu"

    def __init__(self, channels, init=PRELU_INIT):
        super().__init__()
        self.channels = channels
        self._add_param("slope", np.full(channels, float(init)))

    def forward(self, x, train=False, rng=None):
        a = self.params["slope"][None, :, None, None]
        pos = x > 0
        self.cache = (x, pos)
        return np.where(pos, x, a * x)

    def backward(self, grad, param_grads=True):
        x, pos = self._need_cache()
        if param_grads:
            self.grads["slope"] = np.where(pos, 0.0, grad * x).sum(axis=(0, 2, 3))
        a = self.params["slope"][None, :, None, None]
        return (np.where(pos, grad, a * grad),)


class SpatialDropout(Layer):
    """Zeroes whole channels with probability ``p`` in training; identity at inference."""

    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
        self.p = float(p)

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self.cache = 1.0
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an Rng stream")
        keep = rng.random((x.shape[0], x.shape[1], 1, 1)) >= self.p
        scale = (keep / (1.0 - self.p)).astype(x.dtype)
        self.cache = scale
        return x * scale

    def backward(self, grad, param_grads=True):
        return (grad * self._need_cache(),)


class UpsampleNearest(Layer):
    kind = "upsample"

    def __init__(self, factor=2):
        super().__init__()
        self.factor = int(factor)

    def output_shape(self, shape):
        B, C, H, W = shape
        return (B, C, H * self.factor, W * self.factor)

    def forward(self, x, train=False, rng=None):
        self.cache = x.shape
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, grad, param_grads=True):
        B, C, H, W = self._need_cache()
        f = self.factor
        return (grad.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)


class Concat(Layer):
    """Channel concatenation of any number of inputs."""

    kind = "concat"

    def output_shape(self, *shapes):
        first = shapes[0]
        for s in shapes[1:]:
            if s[0] != first[0] or s[2:] != first[2:]:
                raise _shape_error("concat", first, s)
        return (first[0], sum(s[1] for s in shapes), first[2], first[3])

    def forward(self, *xs, train=False, rng=None):
        self.output_shape(*(x.shape for x in xs))
        self.cache = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad, param_grads=True):
        splits = np.cumsum(self._need_cache())[:-1]
        return tuple(np.split(grad, splits, axis=1))


class Add(Layer):
    kind = "add"

    def output_shape(self, a, b):
        if tuple(a) != tuple(b):
            raise _shape_error("add", a, b)
        return tuple(a)

    def forward(self, a, b, train=False, rng=None):
        if a.shape != b.shape:
            raise _shape_error("add", a.shape, b.shape)
        self.cache = True
        return a + b

    def backward(self, grad, param_grads=True):
        self._need_cache()
        return (grad, grad)


class PadChannels(Layer):
    """Append zero channels up to ``channels`` (residual path of downsampling bottlenecks)."""

    kind = "padchannels"

    def __init__(self, channels):
        super().__init__()
        self.channels = channels

    def output_shape(self, shape):
        if shape[1] > self.channels:
            raise ValueError(f"cannot pad {shape[1]} channels down to {self.channels}")
        return (shape[0], self.channels, shape[2], shape[3])

    def forward(self, x, train=False, rng=None):
        self.output_shape(x.shape)
        self.cache = x.shape[1]
        extra = self.channels - x.shape[1]
        return np.pad(x, ((0, 0), (0, extra), (0, 0), (0, 0)))

    def backward(self, grad, param_grads=True):
        return (grad[:, :self._need_cache()],)


# --------------------------------------------------------------------------
# functional forms, handy outside of a graph


def conv2d_forward(x, spec: ConvSpec, layer: Conv2D | None = None):
    layer = layer if layer is not None else Conv2D(spec)
    return layer.forward(x)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
