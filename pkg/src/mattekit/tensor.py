"""Dense NCHW tensor primitives with matching analytic backward passes.

Tensors are plain numpy arrays of shape (batch, channels, height, width),
C-contiguous, float32 in production paths.  Every op also accepts float64
input and then computes in float64, which is what the finite-difference
test harness relies on.  All functions are pure: inputs are never written
to and outputs are freshly allocated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Raised when an operand's shape violates an op's contract."""


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel dims must be odd, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"invalid conv spec: stride={self.stride} "
                f"padding={self.padding} dilation={self.dilation}"
            )

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output would be empty for input {h}x{w}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + self.kernel


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Validate/convert ``x`` to a rank-4 contiguous array."""
    a = np.ascontiguousarray(x, dtype=dtype)
    if a.ndim != 4:
        raise ShapeError(f"expected rank-4 (n,c,h,w) tensor, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {a.shape}")
    return a


def _check_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (n,c,h,w), got shape {x.shape}")


def _patch_view(x_pad: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Read-only strided view (n, ic, kh, kw, oh, ow) of all conv taps."""
    n, ic = x_pad.shape[:2]
    kh, kw = spec.kernel
    sn, sc, sh, sw = x_pad.strides
    shape = (n, ic, kh, kw, oh, ow)
    strides = (sn, sc, sh * spec.dilation, sw * spec.dilation,
               sh * spec.stride, sw * spec.stride)
    return np.lib.stride_tricks.as_strided(x_pad, shape, strides, writeable=False)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
           spec: ConvSpec) -> np.ndarray:
    """Cross-correlating 2-D convolution with zero padding.

    x: (n, ic, h, w); weights: (oc, ic, kh, kw); bias: (oc,).
    Output spatial size follows the usual floor formula of ``spec``.
    """
    _check_nchw(x, "conv2d input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(
            f"conv2d: weights shape {weights.shape} != spec {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")

    n, ic, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    x_pad = _pad2d(x, spec.padding)
    cols = _patch_view(x_pad, spec, oh, ow)
    # im2col GEMM: (n*oh*ow, ic*kh*kw) @ (ic*kh*kw, oc)
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)
    out = mat @ weights.reshape(spec.out_channels, -1).T
    out += bias
    return np.ascontiguousarray(
        out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, weights: np.ndarray, spec: ConvSpec,
                    grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of conv2d w.r.t. (input, weights, bias).

    grad_out must have the forward output's shape.  Returns
    (grad_input, grad_weights, grad_bias); grad_input is None when
    ``need_input_grad`` is False.
    """
    _check_nchw(x, "conv2d_backward input")
    n, ic, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} != "
            f"{(n, spec.out_channels, oh, ow)}")

    kh, kw = spec.kernel
    x_pad = _pad2d(x, spec.padding)
    cols = _patch_view(x_pad, spec, oh, ow)
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.out_channels)

    grad_w = (g.T @ mat).reshape(spec.weight_shape)
    grad_b = g.sum(axis=0)

    grad_x = None
    if need_input_grad:
        # scatter per kernel tap: cheap for the small kernels used here
        gcols = (g @ weights.reshape(spec.out_channels, -1)).reshape(
            n, oh, ow, ic, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx_pad = np.zeros_like(x_pad)
        s, d = spec.stride, spec.dilation
        for u in range(kh):
            for v in range(kw):
                gx_pad[:, :, u * d:u * d + s * oh:s,
                       v * d:v * d + s * ow:s] += gcols[:, :, u, v]
        p = spec.padding
        grad_x = gx_pad[:, :, p:p + h, p:p + w] if p else gx_pad
        grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_w, grad_b


def maxpool2d(x: np.ndarray):
    """2x2 / stride-2 max pooling; odd sizes are padded with -inf.

    Returns (output, argmax) where argmax in {0..3} selects the winning
    position inside each window (row-major), first-wins on ties.
    """
    _check_nchw(x, "maxpool2d input")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)),
                   constant_values=-np.inf)
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(x_shape: tuple, argmax: np.ndarray,
                       grad_out: np.ndarray) -> np.ndarray:
    """Route grad_out back to each window's argmax position."""
    n, c, h, w = x_shape
    h2, w2 = grad_out.shape[2], grad_out.shape[3]
    if argmax.shape != grad_out.shape:
        raise ShapeError("maxpool2d_backward: argmax/grad_out shape mismatch")
    g6 = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g6, argmax[..., None], grad_out[..., None], axis=-1)
    gx = g6.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gx = gx.reshape(n, c, 2 * h2, 2 * w2)[:, :, :h, :w]
    return np.ascontiguousarray(gx)


@lru_cache(maxsize=64)
def _resize_rows(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) align-corners interpolation matrix, float64."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    if n_out == 1:
        a[0, 0] = 1.0  # corner convention: single output pins the first corner
        return a
    scale = (n_in - 1) / (n_out - 1)
    src = np.arange(n_out) * scale
    i0 = np.minimum(src.astype(np.int64), n_in - 2)
    t = src - i0
    a[np.arange(n_out), i0] = 1.0 - t
    a[np.arange(n_out), i0 + 1] = t
    return a


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize (corner centers map to corner centers)."""
    _check_nchw(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output dims must be >= 1")
    ah = _resize_rows(x.shape[2], out_h).astype(x.dtype)
    aw = _resize_rows(x.shape[3], out_w).astype(x.dtype)
    y = np.matmul(ah, x)          # (n, c, out_h, w)
    y = np.matmul(y, aw.T)        # (n, c, out_h, out_w)
    return np.ascontiguousarray(y)


def bilinear_resize_backward(in_h: int, in_w: int,
                             grad_out: np.ndarray) -> np.ndarray:
    """Exact transpose of the resize linear map."""
    _check_nchw(grad_out, "bilinear_resize_backward grad")
    ah = _resize_rows(in_h, grad_out.shape[2]).astype(grad_out.dtype)
    aw = _resize_rows(in_w, grad_out.shape[3]).astype(grad_out.dtype)
    g = np.matmul(ah.T, grad_out)
    g = np.matmul(g, aw)
    return np.ascontiguousarray(g)


def channel_concat(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis, in argument order."""
    if not parts:
        raise ShapeError("channel_concat: need at least one tensor")
    ref = parts[0]
    for p in parts[1:]:
        if p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"channel_concat: spatial/batch mismatch {p.shape} vs {ref.shape}")
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def channel_split(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of channel_concat for the given channel sizes."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"channel_split: sizes {sizes} != {x.shape[1]} channels")
    edges = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, edges, axis=1)]


def subsample2(x: np.ndarray) -> np.ndarray:
    """Keep every other pixel (offset 0); exact stride-2 skip path."""
    _check_nchw(x, "subsample2 input")
    return np.ascontiguousarray(x[:, :, ::2, ::2])


def subsample2_backward(x_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    gx[:, :, ::2, ::2] = grad_out
    return gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over channels, stabilized by max subtraction."""
    _check_nchw(x, "softmax_channels input")
    if x.shape[1] < 2:
        raise ShapeError("softmax_channels: need >= 2 channels")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(softmax_out: np.ndarray,
                              grad_out: np.ndarray) -> np.ndarray:
    """Backward given the forward output s: g_in = s * (g - sum(g*s))."""
    dot = (grad_out * softmax_out).sum(axis=1, keepdims=True)
    return softmax_out * (grad_out - dot)


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def clamp01_backward(pre_clamp: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient: zero wherever the pre-clamp value saturated."""
    inside = (pre_clamp > 0.0) & (pre_clamp < 1.0)
    return grad_out * inside


def box_filter(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window clipped to the image bounds.

    Runs on the last two axes of any array; cost is independent of the
    radius (integral image).  Sums accumulate in float64 and the result
    is cast back to the input dtype.
    """
    if radius < 0:
        raise ShapeError("box_filter: radius must be >= 0")
    if radius == 0:
        return x.copy()
    h, w = x.shape[-2], x.shape[-1]
    ii = np.zeros(x.shape[:-2] + (h + 1, w + 1))
    np.cumsum(x, axis=-2, out=ii[..., 1:, 1:], dtype=np.float64)
    np.cumsum(ii[..., 1:, 1:], axis=-1, out=ii[..., 1:, 1:])

    lo_h = np.maximum(np.arange(h) - radius, 0)
    hi_h = np.minimum(np.arange(h) + radius + 1, h)
    lo_w = np.maximum(np.arange(w) - radius, 0)
    hi_w = np.minimum(np.arange(w) + radius + 1, w)

    sums = (ii[..., hi_h[:, None], hi_w[None, :]]
            - ii[..., lo_h[:, None], hi_w[None, :]]
            - ii[..., hi_h[:, None], lo_w[None, :]]
            + ii[..., lo_h[:, None], lo_w[None, :]])
    counts = (hi_h - lo_h)[:, None] * (hi_w - lo_w)[None, :]
    return (sums / counts).astype(x.dtype)
