"""Feathering block: a learnt guided filter over the score maps.

Two small convs read a guided-filter-style feature stack (image, scores,
squared image, image*foreground-score) and emit per-pixel linear
coefficients (a, b, c); the matte is a*S_F + b*S_B + c, clamped to
[0, 1].  With spatially constant coefficients the construction is
exactly edge-preserving: the image gradient of alpha*image decomposes as
a*grad(I*S_F) + b*grad(I*S_B) + c*grad(I).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ModelParams, conv_layers
from .segnet import ScoreMaps


@dataclass
class CoefficientMaps:
    a: np.ndarray   # (n,1,h,w)
    b: np.ndarray
    c: np.ndarray


@dataclass
class AlphaMatte:
    alpha: np.ndarray       # (n,1,h,w), clamped to [0,1]
    pre_clamp: np.ndarray   # retained for losses/backprop


def feather_inputs(image: np.ndarray, scores: ScoreMaps) -> np.ndarray:
    """11-channel stack: I(3), S_F, S_B, I*I(3), I*S_F(3)."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise T.ShapeError(f"expected (n,3,h,w) image, got {image.shape}")
    if scores.s_f.shape[2:] != image.shape[2:]:
        raise T.ShapeError(
            f"scores {scores.s_f.shape[2:]} vs image {image.shape[2:]}")
    return T.channel_concat(
        [image, scores.s_f, scores.s_b, image * image, image * scores.s_f])


def feather_inputs_backward(image: np.ndarray, scores: ScoreMaps,
                            grad_stack: np.ndarray):
    """Map a stack gradient back onto (image, s_f, s_b)."""
    g_img = grad_stack[:, 0:3] + 2.0 * image * grad_stack[:, 5:8] \
        + scores.s_f * grad_stack[:, 8:11]
    g_sf = grad_stack[:, 3:4] + (image * grad_stack[:, 8:11]).sum(
        axis=1, keepdims=True)
    g_sb = grad_stack[:, 4:5].copy()
    return g_img, g_sf, g_sb


def _specs(params: ModelParams) -> dict:
    return {l.name: l.spec for l in conv_layers(params.config, "feather")}


def feather_forward(stack: np.ndarray, params: ModelParams) -> CoefficientMaps:
    coeffs, _ = feather_forward_cached(stack, params)
    return coeffs


def feather_forward_cached(stack: np.ndarray, params: ModelParams):
    specs = _specs(params)
    w1, b1 = params.layers["feather.conv1"]
    w2, b2 = params.layers["feather.conv2"]
    if stack.shape[1] != specs["feather.conv1"].in_channels:
        raise T.ShapeError(
            f"feathering stack has {stack.shape[1]} channels, "
            f"expected {specs['feather.conv1'].in_channels}")
    dt = stack.dtype
    h1 = T.conv2d(stack, w1.astype(dt, copy=False), b1.astype(dt, copy=False),
                  specs["feather.conv1"])
    r1 = T.relu(h1)
    out = T.conv2d(r1, w2.astype(dt, copy=False), b2.astype(dt, copy=False),
                   specs["feather.conv2"])
    a, b, c = T.channel_split(out, [1, 1, 1])
    return CoefficientMaps(a=a, b=b, c=c), (h1, r1)


def apply_linear_matte(coeffs: CoefficientMaps, scores: ScoreMaps) -> AlphaMatte:
    """alpha = a*S_F + b*S_B + c, clamped to [0,1]."""
    if coeffs.a.shape != scores.s_f.shape:
        raise T.ShapeError(
            f"coeff shape {coeffs.a.shape} vs scores {scores.s_f.shape}")
    pre = coeffs.a * scores.s_f + coeffs.b * scores.s_b + coeffs.c
    return AlphaMatte(alpha=T.clamp01(pre), pre_clamp=pre)


def smooth_coefficients(coeffs: CoefficientMaps, radius: int) -> CoefficientMaps:
    """Window-average each coefficient map (off by default, radius 0)."""
    if radius == 0:
        return coeffs
    return CoefficientMaps(a=T.box_filter(coeffs.a, radius),
                           b=T.box_filter(coeffs.b, radius),
                           c=T.box_filter(coeffs.c, radius))


def feather_backward(stack: np.ndarray, params: ModelParams,
                     scores: ScoreMaps, grad_alpha: np.ndarray):
    """Reverse of feather_forward + apply_linear_matte.

    Returns (param_grads, (grad_s_f, grad_s_b), grad_stack).  The score
    gradients cover only the direct linear-matte path; the stack path is
    reported separately so callers can route it through
    feather_inputs_backward.
    """
    if grad_alpha.shape != scores.s_f.shape:
        raise T.ShapeError(
            f"grad_alpha shape {grad_alpha.shape} != {scores.s_f.shape}")
    specs = _specs(params)
    coeffs, (h1, r1) = feather_forward_cached(stack, params)
    pre = coeffs.a * scores.s_f + coeffs.b * scores.s_b + coeffs.c

    g_pre = T.clamp01_backward(pre, grad_alpha)
    g_a = g_pre * scores.s_f
    g_b = g_pre * scores.s_b
    g_c = g_pre
    g_sf = g_pre * coeffs.a
    g_sb = g_pre * coeffs.b

    g_out = T.channel_concat([g_a, g_b, g_c])
    w2, _ = params.layers["feather.conv2"]
    g_r1, gw2, gb2 = T.conv2d_backward(
        r1, w2.astype(g_out.dtype, copy=False), specs["feather.conv2"], g_out)
    g_h1 = T.relu_backward(h1, g_r1)
    w1, _ = params.layers["feather.conv1"]
    g_stack, gw1, gb1 = T.conv2d_backward(
        stack, w1.astype(g_h1.dtype, copy=False), specs["feather.conv1"], g_h1)

    grads = {"feather.conv1": (gw1, gb1), "feather.conv2": (gw2, gb2)}
    return grads, (g_sf, g_sb), g_stack


def matte_forward(image: np.ndarray, params: ModelParams,
                  scores: ScoreMaps | None = None,
                  smooth_radius: int = 0) -> AlphaMatte:
    """Convenience: score maps -> feature stack -> coefficients -> matte."""
    if scores is None:
        from .segnet import ldn_forward
        scores = ldn_forward(image, params)
    stack = feather_inputs(image, scores)
    coeffs = feather_forward(stack, params)
    coeffs = smooth_coefficients(coeffs, smooth_radius)
    return apply_linear_matte(coeffs, scores)
