"""Losses, SGD with momentum, augmentation and the three-stage schedule.

Stage 1 trains the segmentation net alone with per-pixel cross-entropy
against the binary mask; stage 2 freezes it and trains the feathering
block with the matte + composition loss; stage 3 fine-tunes everything
end to end with a small fixed rate.  Given one seed and a single-thread
BLAS the whole run is bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .feathering import (apply_linear_matte, feather_backward,
                         feather_forward_cached, feather_inputs,
                         feather_inputs_backward)
from .metrics import gradient_error, mse
from .params import LdnConfig, ModelParams, init_params
from .segnet import ScoreMaps, ldn_backward_from_cache, ldn_forward_cached

MASK_THRESHOLD = 0.5  # alpha >= threshold counts as foreground


@dataclass
class Sample:
    """One (image, ground-truth alpha, binary mask) triple, all float32."""

    image: np.ndarray   # (3,h,w) in [0,1]
    alpha: np.ndarray   # (1,h,w) in [0,1]
    mask: np.ndarray    # (1,h,w) in {0,1}


def binarize_alpha(alpha: np.ndarray) -> np.ndarray:
    return (alpha >= MASK_THRESHOLD).astype(np.float32)


@dataclass
class TrainConfig:
    batch_size: int = 8
    input_size: tuple[int, int] = (128, 128)
    seed: int = 0
    momentum: float = 0.99
    weight_decay: float = 5e-4
    charbonnier_eps: float = 1e-3
    stage1_iters: int = 20000
    stage1_lr: float = 1e-3
    stage2_iters: int = 20000
    stage2_lr: float = 1e-6
    stage3_iters: int = 20000
    stage3_lr: float = 1e-7
    lr_drop: float = 10.0       # stages 1-2 divide the rate by this halfway
    mirror: bool = True
    resize: bool = True
    rotate: bool = True
    blur: bool = True
    scale_range: tuple[float, float] = (0.75, 1.5)
    rotate_range: tuple[float, float] = (-30.0, 30.0)
    blur_sigma_max: float = 1.5
    log_interval: int = 50
    val_subset: int = 16

    def __post_init__(self):
        for name in ("stage1_lr", "stage2_lr", "stage3_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def scaled(self, factor: float) -> "TrainConfig":
        """Shrink/grow all three stage lengths by one factor."""
        return dataclasses.replace(
            self,
            stage1_iters=int(round(self.stage1_iters * factor)),
            stage2_iters=int(round(self.stage2_iters * factor)),
            stage3_iters=int(round(self.stage3_iters * factor)),
        )


_TUPLE_FIELDS = {"input_size": int, "scale_range": float, "rotate_range": float}


def config_to_file(path, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for field in dataclasses.fields(TrainConfig):
            value = getattr(config, field.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            f.write(f"{field.name}={value}\n")


def config_from_file(path) -> TrainConfig:
    """Parse a key=value text file; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config entry {line!r}")
            if key in _TUPLE_FIELDS:
                cast = _TUPLE_FIELDS[key]
                kwargs[key] = tuple(cast(v) for v in value.split(","))
            elif fields[key].type == "bool":
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"{path}:{lineno}: bad boolean {value!r}")
                kwargs[key] = value.lower() == "true"
            elif fields[key].type == "int":
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# losses

def loss_alpha(alpha_pred: np.ndarray, alpha_gt: np.ndarray, eps: float):
    """Charbonnier matte loss: mean of sqrt((gt - pred)^2 + eps^2)."""
    if alpha_pred.shape != alpha_gt.shape:
        raise T.ShapeError(
            f"alpha shapes differ: {alpha_pred.shape} vs {alpha_gt.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    r = alpha_pred - alpha_gt
    s = np.sqrt(r * r + eps * eps)
    k = alpha_pred.size
    return float(s.mean()), r / s / k


def loss_color(alpha_pred: np.ndarray, alpha_gt: np.ndarray,
               image: np.ndarray, eps: float):
    """Composition loss over RGB: per pixel sum_j sqrt((gt*I_j - pred*I_j)^2 + eps^2)."""
    if image.shape[1] != 3:
        raise T.ShapeError(f"expected 3-channel image, got {image.shape}")
    if alpha_pred.shape[1] != 1 or alpha_pred.shape != alpha_gt.shape:
        raise T.ShapeError("alpha maps must be single-channel and same shape")
    r = (alpha_pred - alpha_gt) * image          # (n,3,h,w)
    s = np.sqrt(r * r + eps * eps)
    k = alpha_pred.size
    loss = float(s.sum(axis=1).mean() if alpha_pred.ndim == 4 else s.sum() / k)
    grad = (r / s * image).sum(axis=1, keepdims=True) / k
    return loss, grad


def cross_entropy_mask(logits: np.ndarray, mask: np.ndarray):
    """Mean per-pixel 2-class cross-entropy; channel 0 is foreground."""
    if logits.shape[1] != 2:
        raise T.ShapeError(f"expected 2-channel logits, got {logits.shape}")
    if mask.shape != (logits.shape[0], 1) + logits.shape[2:]:
        raise T.ShapeError(f"mask shape {mask.shape} does not match logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    k = mask.size
    loss = -float((mask * log_p[:, :1] + (1.0 - mask) * log_p[:, 1:]).sum()) / k
    onehot = np.concatenate([mask, 1.0 - mask], axis=1)
    grad = (np.exp(log_p) - onehot) / k
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float, weight_decay: float,
             names: list[str] | None = None) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Updates params/state in place.  ``names`` restricts the update to a
    subset of layers (used to freeze the others).
    """
    for name in (names if names is not None else params.keys()):
        for p, g, v in zip(params[name], grads[name], state[name]):
            if p.shape != g.shape:
                raise T.ShapeError(f"{name}: grad shape {g.shape} != {p.shape}")
            v *= momentum
            v += g
            if weight_decay:
                v += weight_decay * p
            p -= lr * v


# ---------------------------------------------------------------------------
# augmentation

def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n - 2
    j = np.abs(i) % period
    return np.where(j >= n, period - j, j)


def warp_bilinear(img: np.ndarray, mat: np.ndarray, out_hw: tuple[int, int],
                  fill: str = "reflect") -> np.ndarray:
    """Inverse-map affine warp of a (c,h,w) array with bilinear sampling.

    ``mat`` is 2x3, mapping output (y, x, 1) to input coordinates.
    fill='reflect' mirrors across the border; fill='zero' reads zeros.
    """
    c, h, w = img.shape
    oh, ow = out_hw
    ys, xs = np.meshgrid(np.arange(oh, dtype=np.float64),
                         np.arange(ow, dtype=np.float64), indexing="ij")
    sy = mat[0, 0] * ys + mat[0, 1] * xs + mat[0, 2]
    sx = mat[1, 0] * ys + mat[1, 1] * xs + mat[1, 2]
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    ty = (sy - y0).astype(np.float32)
    tx = (sx - x0).astype(np.float32)

    out = np.zeros((c, oh, ow), dtype=np.float32)
    for dy, dx, wgt in ((0, 0, (1 - ty) * (1 - tx)), (0, 1, (1 - ty) * tx),
                        (1, 0, ty * (1 - tx)), (1, 1, ty * tx)):
        yi, xi = y0 + dy, x0 + dx
        if fill == "reflect":
            vals = img[:, _reflect_index(yi, h), _reflect_index(xi, w)]
        else:
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            vals = vals * inside
        out += wgt * vals
    return out


def gaussian_blur5(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 5-tap gaussian blur with reflect padding, (c,h,w) input."""
    if sigma <= 1e-6:
        return img.copy()
    offs = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-offs ** 2 / (2.0 * sigma * sigma))
    k = (k / k.sum()).astype(np.float32)
    pad_h = np.pad(img, ((0, 0), (2, 2), (0, 0)), mode="reflect")
    tmp = sum(k[j] * pad_h[:, j:j + img.shape[1], :] for j in range(5))
    pad_w = np.pad(tmp, ((0, 0), (0, 0), (2, 2)), mode="reflect")
    return sum(k[j] * pad_w[:, :, j:j + img.shape[2]] for j in range(5))


def augment(sample: Sample, rng: np.random.Generator,
            config: TrainConfig) -> Sample:
    """Random mirror/resize/rotation on all maps, gaussian blur on the image.

    The same geometric transform hits image, alpha and mask (the mask is
    re-binarized from the warped alpha); the output is resampled straight
    onto the configured training grid.  Image samples reflect off the
    border, alpha reads zeros.
    """
    flip = config.mirror and bool(rng.random() < 0.5)
    scale = float(rng.uniform(*config.scale_range)) if config.resize else 1.0
    angle = float(np.deg2rad(rng.uniform(*config.rotate_range))) \
        if config.rotate else 0.0
    sigma = float(rng.uniform(0.0, config.blur_sigma_max)) if config.blur else 0.0

    ih, iw = sample.image.shape[1:]
    oh, ow = config.input_size
    # output -> input map: undo rotation, then mirror, around the centers
    cosv, sinv = np.cos(angle), np.sin(angle)
    rot = np.array([[cosv, sinv], [-sinv, cosv]]) / scale
    if flip:
        rot = rot @ np.array([[1.0, 0.0], [0.0, -1.0]])
    c_out = np.array([(oh - 1) / 2.0, (ow - 1) / 2.0])
    c_in = np.array([(ih - 1) / 2.0, (iw - 1) / 2.0])
    mat = np.zeros((2, 3))
    mat[:, :2] = rot
    mat[:, 2] = c_in - rot @ c_out

    image = warp_bilinear(sample.image, mat, (oh, ow), fill="reflect")
    alpha = warp_bilinear(sample.alpha, mat, (oh, ow), fill="zero")
    if sigma > 0.0:
        image = gaussian_blur5(image, sigma)
    alpha = np.clip(alpha, 0.0, 1.0)
    return Sample(image=np.clip(image, 0.0, 1.0), alpha=alpha,
                  mask=binarize_alpha(alpha))


# ---------------------------------------------------------------------------
# three-stage trainer

@dataclass
class HistoryRow:
    iteration: int   # global iteration index across stages
    stage: int
    loss: float
    val_grad_err: float
    val_mse: float


def _stack_batch(samples: list[Sample]):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    alphas = np.stack([s.alpha for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return images, alphas, masks


def evaluate_pipeline(samples: list[Sample], params: ModelParams,
                      batch: int = 8) -> tuple[float, float]:
    """Mean (gradient error, MSE) of the full matte pipeline on samples."""
    ge, ms = [], []
    for i in range(0, len(samples), batch):
        images, alphas, _ = _stack_batch(samples[i:i + batch])
        maps, _ = ldn_forward_cached(images, params)
        stack = feather_inputs(images, maps)
        coeffs, _ = feather_forward_cached(stack, params)
        matte = apply_linear_matte(coeffs, maps)
        for j in range(images.shape[0]):
            ge.append(gradient_error(matte.alpha[j], alphas[j]))
            ms.append(mse(matte.alpha[j], alphas[j]))
    return float(np.mean(ge)), float(np.mean(ms))


def _matte_loss_and_grad(images, alphas, maps: ScoreMaps, params, eps):
    stack = feather_inputs(images, maps)
    coeffs, _ = feather_forward_cached(stack, params)
    matte = apply_linear_matte(coeffs, maps)
    la, ga = loss_alpha(matte.alpha, alphas, eps)
    lc, gc = loss_color(matte.alpha, alphas, images, eps)
    return stack, float(la + lc), ga + gc


def train_three_stage(dataset: list[Sample], config: TrainConfig,
                      val_samples: list[Sample] | None = None):
    """Run the full schedule; returns (params, history rows).

    ``val_samples`` feeds the held-out columns of the history; without it
    a fixed training subset is monitored instead.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    model_cfg = LdnConfig(input_size=config.input_size)
    params = init_params(model_cfg, config.seed)
    state = params.zeros_like()
    monitor = val_samples if val_samples else dataset[:config.val_subset]
    monitor = monitor[:config.val_subset]
    history: list[HistoryRow] = []

    ldn_names = params.names("ldn")
    fb_names = params.names("feather")
    eps = config.charbonnier_eps

    def draw_batch():
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        return _stack_batch([augment(dataset[i], rng, config) for i in idx])

    def record(global_it, stage, it, iters, loss):
        if it % config.log_interval == 0 or it == iters:
            vg, vm = evaluate_pipeline(monitor, params)
            history.append(HistoryRow(global_it, stage, loss, vg, vm))

    def stage_lr(base, drop, it, iters):
        return base if it <= (iters + 1) // 2 else base / drop

    global_it = 0

    for it in range(1, config.stage1_iters + 1):
        global_it += 1
        images, _, masks = draw_batch()
        maps, cache = ldn_forward_cached(images, params)
        loss, g_logits = cross_entropy_mask(maps.logits, masks)
        grads = ldn_backward_from_cache(cache, params, g_logits)
        sgd_step(params.layers, grads, state,
                 stage_lr(config.stage1_lr, config.lr_drop, it, config.stage1_iters),
                 config.momentum, config.weight_decay, names=ldn_names)
        record(global_it, 1, it, config.stage1_iters, loss)

    for it in range(1, config.stage2_iters + 1):
        global_it += 1
        images, alphas, _ = draw_batch()
        maps, _ = ldn_forward_cached(images, params)
        stack, loss, g_alpha = _matte_loss_and_grad(
            images, alphas, maps, params, eps)
        fb_grads, _, _ = feather_backward(stack, params, maps, g_alpha)
        sgd_step(params.layers, fb_grads, state,
                 stage_lr(config.stage2_lr, config.lr_drop, it, config.stage2_iters),
                 config.momentum, config.weight_decay, names=fb_names)
        record(global_it, 2, it, config.stage2_iters, loss)

    for it in range(1, config.stage3_iters + 1):
        global_it += 1
        images, alphas, _ = draw_batch()
        maps, cache = ldn_forward_cached(images, params)
        stack, loss, g_alpha = _matte_loss_and_grad(
            images, alphas, maps, params, eps)
        fb_grads, (g_sf, g_sb), g_stack = feather_backward(
            stack, params, maps, g_alpha)
        _, g_sf2, g_sb2 = feather_inputs_backward(images, maps, g_stack)
        g_scores = np.concatenate([g_sf + g_sf2, g_sb + g_sb2], axis=1)
        g_logits = T.softmax_channels_backward(cache.scores, g_scores)
        grads = ldn_backward_from_cache(cache, params, g_logits)
        grads.update(fb_grads)
        sgd_step(params.layers, grads, state, config.stage3_lr,
                 config.momentum, config.weight_decay, names=None)
        record(global_it, 3, it, config.stage3_iters, loss)

    return params, history


def write_history_csv(path, history: list[HistoryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("iteration,stage,loss,val_grad_err,val_mse\n")
        for row in history:
            f.write(f"{row.iteration},{row.stage},{row.loss:.9g},"
                    f"{row.val_grad_err:.9g},{row.val_mse:.9g}\n")
