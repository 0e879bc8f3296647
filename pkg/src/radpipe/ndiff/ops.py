"""Differentiable primitives.

Each op is a small class with ``forward`` (caches whatever backward
needs) and ``backward`` (returns one gradient per forward input, None
for non-differentiable slots).  Free functions wrap the classes and are
the public API.  Convolution is cross-correlation, matching the weight
convention of the major frameworks; it is lowered to a strided window
view plus one tensordot so the heavy lifting happens in BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, apply_op


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValidationError(f"{name} must be an int or a 3-tuple, got {v!r}")
    return t


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class Add:
    kind = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub:
    kind = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul:
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div:
    kind = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape)
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg:
    kind = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp:
    kind = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log:
    kind = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sigmoid:
    kind = "sigmoid"

    def forward(self, a):
        # stable in both tails
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Tanh:
    kind = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class PRelu:
    """x if x >= 0 else a*x, with one learned slope per channel (axis 1)."""

    kind = "prelu"

    def forward(self, x, a):
        if x.ndim < 2 or a.ndim != 1 or a.shape[0] != x.shape[1]:
            raise DimensionError(
                f"prelu slope must be per-channel: slope shape {a.shape}, input {x.shape}"
            )
        self.x, self.a = x, a
        a_b = a.reshape((1, -1) + (1,) * (x.ndim - 2))
        return np.where(x >= 0, x, a_b * x)

    def backward(self, g):
        x, a = self.x, self.a
        a_b = a.reshape((1, -1) + (1,) * (x.ndim - 2))
        gx = np.where(x >= 0, g, a_b * g)
        neg = np.where(x < 0, g * x, 0.0)
        axes = (0,) + tuple(range(2, x.ndim))
        ga = neg.sum(axis=axes)
        return gx, ga


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

class Reshape:
    kind = "reshape"

    def __init__(self, shape):
        self.target = tuple(shape)

    def forward(self, a):
        self.src = a.shape
        return a.reshape(self.target)

    def backward(self, g):
        return (g.reshape(self.src),)


class Transpose:
    kind = "transpose"

    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, a):
        return np.transpose(a, self.axes).copy()

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)).copy(),)


class Flip:
    kind = "flip"

    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, a):
        return np.flip(a, self.axes).copy()

    def backward(self, g):
        return (np.flip(g, self.axes).copy(),)


class Concat:
    kind = "concat"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *parts):
        ref = parts[0].shape
        for i, p in enumerate(parts[1:], start=1):
            for ax, (a, b) in enumerate(zip(ref, p.shape)):
                if ax != self.axis % parts[0].ndim and a != b:
                    raise DimensionError(
                        f"concat operand {i} disagrees on axis {ax}: {p.shape} vs {ref}"
                    )
        self.sizes = [p.shape[self.axis] for p in parts]
        return np.concatenate(parts, axis=self.axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.axis))


class Slice:
    kind = "slice"

    def __init__(self, key):
        self.key = key

    def forward(self, a):
        self.src = a.shape
        out = a[self.key]
        if out.ndim != a.ndim:
            raise ValidationError("slice must keep rank; use slice objects, not bare ints")
        return out.copy()

    def backward(self, g):
        out = np.zeros(self.src, dtype=g.dtype)
        out[self.key] = g
        return (out,)


class SumAxes:
    kind = "sum_axes"

    def __init__(self, axes, keepdims: bool):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        self.src = a.shape
        return a.sum(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        if not self.keepdims and self.axes is not None:
            axes = self.axes if isinstance(self.axes, tuple) else (self.axes,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, self.src).astype(g.dtype, copy=True),)


class MeanAxes:
    kind = "mean_axes"

    def __init__(self, axes, keepdims: bool):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        self.src = a.shape
        out = a.mean(axis=self.axes, keepdims=self.keepdims)
        self.count = a.size // out.size
        return out

    def backward(self, g):
        if not self.keepdims and self.axes is not None:
            axes = self.axes if isinstance(self.axes, tuple) else (self.axes,)
            g = np.expand_dims(g, axes)
        out = np.broadcast_to(g, self.src).astype(g.dtype, copy=True)
        out /= self.count
        return (out,)


class ZeroStuff:
    """Insert (stride-1) zeros between spatial elements, plus trailing padding.

    This is the input dilation step of transposed convolution; backward
    is plain strided slicing.
    """

    kind = "zero_stuff"

    def __init__(self, stride, extra):
        self.stride = stride
        self.extra = extra

    def forward(self, x):
        B, C, D, H, W = x.shape
        (sd, sh, sw), (ed, eh, ew) = self.stride, self.extra
        out = np.zeros(
            (B, C, (D - 1) * sd + 1 + ed, (H - 1) * sh + 1 + eh, (W - 1) * sw + 1 + ew),
            dtype=x.dtype,
        )
        out[:, :, : (D - 1) * sd + 1 : sd, : (H - 1) * sh + 1 : sh, : (W - 1) * sw + 1 : sw] = x
        self.src = x.shape
        return out

    def backward(self, g):
        (sd, sh, sw) = self.stride
        D, H, W = self.src[2:]
        return (
            g[:, :, : (D - 1) * sd + 1 : sd, : (H - 1) * sh + 1 : sh, : (W - 1) * sw + 1 : sw].copy(),
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_window_view(xp: np.ndarray, kshape, stride):
    B, C = xp.shape[:2]
    kd, kh, kw = kshape
    sd, sh, sw = stride
    Do = (xp.shape[2] - kd) // sd + 1
    Ho = (xp.shape[3] - kh) // sh + 1
    Wo = (xp.shape[4] - kw) // sw + 1
    s = xp.strides
    return as_strided(
        xp,
        (B, C, Do, Ho, Wo, kd, kh, kw),
        (s[0], s[1], s[2] * sd, s[3] * sh, s[4] * sw, s[2], s[3], s[4]),
        writeable=False,
    )


class Conv3d:
    """Strided 3D cross-correlation with symmetric zero padding.

    Weight layout (C_out, C_in, kd, kh, kw); optional bias (C_out,).
    Output size per axis: floor((n + 2p - k)/s) + 1.
    """

    kind = "conv3d"

    def __init__(self, stride, padding):
        self.stride = _triple(stride, "stride")
        self.padding = _triple(padding, "padding")
        if any(s < 1 for s in self.stride):
            raise ValidationError(f"conv3d stride must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ValidationError(f"conv3d padding must be >= 0, got {self.padding}")

    def forward(self, x, w, b=None):
        if x.ndim != 5:
            raise DimensionError(f"conv3d input must be rank 5, got {x.shape}")
        if w.ndim != 5:
            raise DimensionError(f"conv3d weight must be rank 5, got {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(
                f"conv3d input channels {x.shape[1]} != weight in_channels {w.shape[1]}"
            )
        kd, kh, kw = w.shape[2:]
        pd, ph, pw = self.padding
        if any(x.shape[2 + i] + 2 * self.padding[i] < w.shape[2 + i] for i in range(3)):
            raise DimensionError(
                f"conv3d kernel {w.shape[2:]} larger than padded input {x.shape[2:]}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        col = _conv_window_view(xp, (kd, kh, kw), self.stride)
        out = np.tensordot(col, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
        if b is not None:
            if b.shape != (w.shape[0],):
                raise DimensionError(f"conv3d bias shape {b.shape} != ({w.shape[0]},)")
            out += b.reshape(1, -1, 1, 1, 1)
        self.xp = xp
        self.w = w
        self.has_bias = b is not None
        self.x_shape = x.shape
        return out

    def backward(self, g):
        w = self.w
        kd, kh, kw = w.shape[2:]
        sd, sh, sw = self.stride
        pd, ph, pw = self.padding
        col = _conv_window_view(self.xp, (kd, kh, kw), self.stride)
        gw = np.tensordot(g, col, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        # g: (B,Co,Do,Ho,Wo), w: (Co,Ci,kd,kh,kw) -> gcol: (B,Do,Ho,Wo,Ci,kd,kh,kw)
        gcol = np.tensordot(g, w, axes=([1], [0]))
        gcol = np.moveaxis(gcol, 4, 1)  # (B,Ci,Do,Ho,Wo,kd,kh,kw)
        gx_pad = np.zeros_like(self.xp)
        Do, Ho, Wo = g.shape[2:]
        for a in range(kd):
            for bi in range(kh):
                for c in range(kw):
                    gx_pad[
                        :,
                        :,
                        a : a + sd * Do : sd,
                        bi : bi + sh * Ho : sh,
                        c : c + sw * Wo : sw,
                    ] += gcol[..., a, bi, c]
        D, H, W = self.x_shape[2:]
        gx = gx_pad[:, :, pd : pd + D, ph : ph + H, pw : pw + W].copy()
        if self.has_bias:
            gb = g.sum(axis=(0, 2, 3, 4))
            return gx, gw, gb
        return gx, gw


class InstanceNorm:
    """Per-(batch, channel) normalization over the spatial axes with affine."""

    kind = "instance_norm"

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x, gamma, beta):
        if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(
                f"instance_norm affine shapes {gamma.shape}/{beta.shape} != ({x.shape[1]},)"
            )
        axes = (2, 3, 4)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self.xhat, self.inv, self.gamma = xhat, inv, gamma
        return gamma.reshape(1, -1, 1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1, 1)

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        axes = (2, 3, 4)
        g_gamma = (g * xhat).sum(axis=(0, 2, 3, 4))
        g_beta = g.sum(axis=(0, 2, 3, 4))
        gh = g * self.gamma.reshape(1, -1, 1, 1, 1)
        m1 = gh.mean(axis=axes, keepdims=True)
        m2 = (gh * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        return gx, g_gamma, g_beta


class SpatialDropout:
    """Zero whole channels with probability ``rate``; kept channels scale 1/(1-rate)."""

    kind = "spatial_dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        keep = self.rng.random((x.shape[0], x.shape[1], 1, 1, 1)) >= self.rate
        self.mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


class SoftmaxChannel:
    kind = "softmax_channel"

    def forward(self, x):
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


class LogSoftmaxChannel:
    kind = "log_softmax_channel"

    def forward(self, x):
        m = x.max(axis=1, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        out = z - lse
        self.softmax = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.softmax * g.sum(axis=1, keepdims=True),)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(Add(), a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(Sub(), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(Mul(), a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(Div(), a, b)


def neg(a: Tensor) -> Tensor:
    return apply_op(Neg(), a)


def exp(a: Tensor) -> Tensor:
    return apply_op(Exp(), a)


def log(a: Tensor) -> Tensor:
    return apply_op(Log(), a)


def sigmoid(a: Tensor) -> Tensor:
    return apply_op(Sigmoid(), a)


def tanh(a: Tensor) -> Tensor:
    return apply_op(Tanh(), a)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    return apply_op(PRelu(), x, slope)


def reshape(a: Tensor, shape) -> Tensor:
    return apply_op(Reshape(shape), a)


def flatten(a: Tensor) -> Tensor:
    return apply_op(Reshape((-1,)), a)


def transpose(a: Tensor, axes) -> Tensor:
    return apply_op(Transpose(axes), a)


def flip(a: Tensor, axes) -> Tensor:
    return apply_op(Flip(axes), a)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValidationError("concat needs at least one tensor")
    return apply_op(Concat(axis), *parts)


def concat_channel(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=1)


def slice_(a: Tensor, key) -> Tensor:
    return apply_op(Slice(key), a)


def sum_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return apply_op(SumAxes(axes, keepdims), a)


def mean_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return apply_op(MeanAxes(axes, keepdims), a)


def zero_stuff(x: Tensor, stride, extra) -> Tensor:
    return apply_op(ZeroStuff(_triple(stride, "stride"), _triple(extra, "extra")), x)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    if b is None:
        return apply_op(Conv3d(stride, padding), x, w)
    return apply_op(Conv3d(stride, padding), x, w, b)


def tconv3d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=1,
    padding=0,
    output_padding=0,
) -> Tensor:
    """Transposed 3D convolution (gradient-of-conv upsampling).

    Weight layout (C_in, C_out, kd, kh, kw), torch convention.  Lowered
    to zero-stuffing plus a stride-1 convolution with the flipped,
    channel-swapped kernel, so every piece has an exact adjoint.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    output_padding = _triple(output_padding, "output_padding")
    if w.ndim != 5:
        raise DimensionError(f"tconv3d weight must be rank 5, got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"tconv3d input channels {x.shape[1]} != weight in_channels {w.shape[0]}"
        )
    k = w.shape[2:]
    if any(p > kk - 1 for p, kk in zip(padding, k)):
        raise ValidationError(f"tconv3d padding {padding} must be <= kernel-1 {k}")
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise ValidationError(
            f"tconv3d output_padding {output_padding} must be < stride {stride}"
        )
    w_conv = transpose(flip(w, (2, 3, 4)), (1, 0, 2, 3, 4))
    xs = zero_stuff(x, stride, output_padding)
    pad_eff = tuple(kk - 1 - p for kk, p in zip(k, padding))
    return conv3d(xs, w_conv, b, stride=1, padding=pad_eff)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_op(InstanceNorm(eps), x, gamma, beta)


def spatial_dropout(
    x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    """Channel dropout; identity when not training or rate is 0."""
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValidationError("spatial_dropout in training mode needs a generator")
    return apply_op(SpatialDropout(rate, rng), x)


def softmax_channel(x: Tensor) -> Tensor:
    return apply_op(SoftmaxChannel(), x)


def log_softmax_channel(x: Tensor) -> Tensor:
    return apply_op(LogSoftmaxChannel(), x)


# ---------------------------------------------------------------------------
# ConvLSTM cell
# ---------------------------------------------------------------------------

@dataclass
class ConvLSTMParams:
    """Gate parameters for one ConvLSTM layer.

    ``w_x`` maps the input slice, ``w_h`` the previous hidden state;
    both produce the stacked (i, f, o, g) gate pre-activations.  Kernels
    are 2D over (height, width), stored as (4*hidden, ch, 1, kh, kw) so
    the shared conv3d path applies them to singleton-depth slices.
    """

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden_channels(self) -> int:
        return self.w_h.shape[1]


def convlstm_cell(
    x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: ConvLSTMParams
) -> tuple[Tensor, Tensor]:
    """One ConvLSTM step on a singleton-depth slice.

    Gates: i = sig(Wxi*x + Whi*h + bi), f, o likewise, g = tanh(...);
    c_t = f.c_prev + i.g;  h_t = o.tanh(c_t).  Convolutions use
    same-padding so spatial dims are preserved.
    """
    hid = params.hidden_channels
    if x_t.shape[1] != params.w_x.shape[1]:
        raise DimensionError(
            f"convlstm input channels {x_t.shape[1]} != gate weight channels {params.w_x.shape[1]}"
        )
    if h_prev.shape[1] != hid or c_prev.shape[1] != hid:
        raise DimensionError(
            f"convlstm state channels ({h_prev.shape[1]}, {c_prev.shape[1]}) != hidden {hid}"
        )
    if x_t.shape[2] != 1:
        raise DimensionError(f"convlstm expects a singleton depth slice, got depth {x_t.shape[2]}")
    if x_t.shape[3:] != h_prev.shape[3:] or x_t.shape[3:] != c_prev.shape[3:]:
        raise DimensionError(
            f"convlstm spatial dims disagree: x {x_t.shape[3:]}, h {h_prev.shape[3:]}, "
            f"c {c_prev.shape[3:]}"
        )
    kh, kw = params.w_x.shape[3], params.w_x.shape[4]
    pad = (0, kh // 2, kw // 2)
    gates = add(
        conv3d(x_t, params.w_x, params.bias, stride=1, padding=pad),
        conv3d(h_prev, params.w_h, None, stride=1, padding=pad),
    )
    i = sigmoid(gates[:, 0 * hid : 1 * hid])
    f = sigmoid(gates[:, 1 * hid : 2 * hid])
    o = sigmoid(gates[:, 2 * hid : 3 * hid])
    g = tanh(gates[:, 3 * hid : 4 * hid])
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t
