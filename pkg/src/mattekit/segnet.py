"""Segmentation network: dilated dense block over a pooled initial stage.

Produces per-pixel foreground/background score maps at the input
resolution.  Channel 0 of the logits is foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import LdnConfig, ModelParams, build_layer_table, conv_layers

DOWNSAMPLE = 4  # initial stride-2 stage, then a stride-2 first dense layer


@dataclass
class ScoreMaps:
    s_f: np.ndarray      # (n,1,h,w) foreground probability
    s_b: np.ndarray      # (n,1,h,w) background probability
    logits: np.ndarray   # (n,2,h,w) pre-softmax, full input resolution


@dataclass
class LdnCache:
    """Intermediates kept for the backward pass."""
    image: np.ndarray
    pre_acts: dict        # conv name -> pre-ReLU output
    inputs: dict          # conv name -> conv input tensor
    pool_argmax: np.ndarray
    skip: np.ndarray      # subsampled block input feeding the dense concats
    block_input: np.ndarray
    dense_outs: list      # post-ReLU outputs y1..y4
    logits_low: np.ndarray
    scores: np.ndarray    # (n,2,h,w) softmax output


def _validate_image(image: np.ndarray) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise T.ShapeError(f"expected (n,3,h,w) image, got {image.shape}")
    if image.shape[2] % DOWNSAMPLE or image.shape[3] % DOWNSAMPLE:
        raise T.ShapeError(
            f"image size {image.shape[2:]} must be divisible by {DOWNSAMPLE}")


def ldn_forward_cached(image: np.ndarray, params: ModelParams):
    """Run the network and keep every intermediate needed for backward."""
    _validate_image(image)
    cfg = params.config
    specs = {l.name: l.spec for l in conv_layers(cfg)}

    def conv(name, x):
        w, b = params.layers[name]
        return T.conv2d(x, w.astype(x.dtype, copy=False),
                        b.astype(x.dtype, copy=False), specs[name])

    pre_acts, inputs = {}, {}

    inputs["ldn.initial_conv"] = image
    a_pre = conv("ldn.initial_conv", image)
    pre_acts["ldn.initial_conv"] = a_pre
    a = T.relu(a_pre)
    pooled, pool_idx = T.maxpool2d(image)
    block_input = T.channel_concat([a, pooled])
    skip = T.subsample2(block_input)

    dense_outs = []
    feed = block_input
    for k in range(1, 5):
        name = f"ldn.dense{k}"
        inputs[name] = feed
        pre = conv(name, feed)
        pre_acts[name] = pre
        dense_outs.append(T.relu(pre))
        if k < 4:
            feed = T.channel_concat([skip] + dense_outs)

    cat4 = T.channel_concat(dense_outs)
    inputs["ldn.classifier"] = cat4
    logits_low = conv("ldn.classifier", cat4)
    logits = T.bilinear_resize(logits_low, image.shape[2], image.shape[3])
    scores = T.softmax_channels(logits)

    maps = ScoreMaps(s_f=scores[:, :1], s_b=scores[:, 1:], logits=logits)
    cache = LdnCache(image=image, pre_acts=pre_acts, inputs=inputs,
                     pool_argmax=pool_idx, skip=skip, block_input=block_input,
                     dense_outs=dense_outs, logits_low=logits_low,
                     scores=scores)
    return maps, cache


def ldn_forward(image: np.ndarray, params: ModelParams) -> ScoreMaps:
    maps, _ = ldn_forward_cached(image, params)
    return maps


def ldn_backward_from_cache(cache: LdnCache, params: ModelParams,
                            grad_logits: np.ndarray) -> dict:
    """Gradients of all LDN conv weights given d(loss)/d(full-res logits)."""
    if grad_logits.shape != cache.scores.shape:
        raise T.ShapeError(
            f"grad_logits shape {grad_logits.shape} != {cache.scores.shape}")
    cfg = params.config
    specs = {l.name: l.spec for l in conv_layers(cfg)}
    grads = {}

    g_low = T.bilinear_resize_backward(
        cache.logits_low.shape[2], cache.logits_low.shape[3], grad_logits)

    w_cls, _ = params.layers["ldn.classifier"]
    g_cat4, gw, gb = T.conv2d_backward(
        cache.inputs["ldn.classifier"], w_cls.astype(g_low.dtype, copy=False),
        specs["ldn.classifier"], g_low)
    grads["ldn.classifier"] = (gw, gb)

    g = cfg.growth_channels
    g_dense = T.channel_split(g_cat4, [g] * 4)   # grads on y1..y4
    g_dense = [x.copy() for x in g_dense]
    g_skip = None

    for k in range(4, 0, -1):
        name = f"ldn.dense{k}"
        g_pre = T.relu_backward(cache.pre_acts[name], g_dense[k - 1])
        w, _ = params.layers[name]
        g_in, gw, gb = T.conv2d_backward(
            cache.inputs[name], w.astype(g_pre.dtype, copy=False),
            specs[name], g_pre)
        grads[name] = (gw, gb)
        if k == 1:
            g_block = g_in
        else:
            pieces = T.channel_split(g_in, [cache.skip.shape[1]] + [g] * (k - 1))
            g_skip = pieces[0] if g_skip is None else g_skip + pieces[0]
            for j in range(k - 1):
                g_dense[j] = g_dense[j] + pieces[1 + j]

    if g_skip is not None:
        g_block = g_block + T.subsample2_backward(cache.block_input.shape, g_skip)

    g_conv_out = g_block[:, :cfg.initial_conv_channels]
    g_pre = T.relu_backward(cache.pre_acts["ldn.initial_conv"], g_conv_out)
    w, _ = params.layers["ldn.initial_conv"]
    _, gw, gb = T.conv2d_backward(
        cache.image, w.astype(g_pre.dtype, copy=False),
        specs["ldn.initial_conv"], g_pre, need_input_grad=False)
    grads["ldn.initial_conv"] = (gw, gb)
    # pooled branch of the block input would only feed the image gradient;
    # images are data, so it is dropped on purpose
    return grads


def ldn_backward(image: np.ndarray, params: ModelParams,
                 grad_logits: np.ndarray) -> dict:
    _, cache = ldn_forward_cached(image, params)
    return ldn_backward_from_cache(cache, params, grad_logits)


def layer_census(config: LdnConfig) -> tuple[int, int]:
    """(#convolutions, #max-pools) in the segmentation net's layer graph."""
    table = [l for l in build_layer_table(config) if l.block == "ldn"]
    return (sum(1 for l in table if l.kind == "conv"),
            sum(1 for l in table if l.kind == "pool"))


def receptive_fields(config: LdnConfig) -> list[int]:
    """Receptive-field size (input pixels) of each dense layer's output.

    Standard recursion over the conv chain: rf' = rf + (eff_k - 1) * jump
    with eff_k = dilation*(k-1)+1, jump' = jump * stride.  The initial
    block counts once (conv branch, the wider of the two)."""
    rf, jump = 1, 1
    init = next(l.spec for l in build_layer_table(config)
                if l.name == "ldn.initial_conv")
    rf += (init.kernel[0] - 1) * jump
    jump *= init.stride
    out = []
    for k in range(1, 5):
        spec = next(l.spec for l in build_layer_table(config)
                    if l.name == f"ldn.dense{k}")
        eff = spec.dilation * (spec.kernel[0] - 1) + 1
        rf += (eff - 1) * jump
        jump *= spec.stride
        out.append(rf)
    return out
