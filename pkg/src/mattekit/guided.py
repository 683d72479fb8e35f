"""Classic closed-form guided filter, the baseline mask refiner.

Per window the filter fits q ~ a*I + b by ridge-regularized least
squares and averages the per-window fits over all windows covering each
pixel.  All window statistics use boundary-clipped box means, so the
result matches an explicit per-window regression exactly.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, box_filter

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def rgb_to_luma(image: np.ndarray) -> np.ndarray:
    """(n,3,h,w) -> (n,1,h,w) Rec.601 luma."""
    if image.shape[1] != 3:
        raise ShapeError(f"expected 3-channel image, got {image.shape}")
    r, g, b = LUMA_WEIGHTS
    out = r * image[:, 0:1] + g * image[:, 1:2] + b * image[:, 2:3]
    return out.astype(image.dtype)


def guided_filter(guide: np.ndarray, p: np.ndarray, radius: int,
                  eps: float) -> np.ndarray:
    """Edge-preserving filtering of p steered by the guide image.

    guide: (n,1,h,w) or (n,3,h,w) (reduced to luma); p: (n,1,h,w).
    a_k = cov(I,p) / (var(I) + eps), b_k = mean(p) - a_k * mean(I),
    q_i = mean over windows covering i of (a_k * I_i + b_k).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if guide.shape[1] == 3:
        guide = rgb_to_luma(guide)
    if guide.shape[1] != 1 or p.shape[1] != 1:
        raise ShapeError("guided_filter expects single-channel guide and p")
    if guide.shape[2:] != p.shape[2:]:
        raise ShapeError(
            f"guide {guide.shape[2:]} vs p {p.shape[2:]} size mismatch")

    mean_i = box_filter(guide, radius)
    mean_p = box_filter(p, radius)
    corr_ip = box_filter(guide * p, radius)
    corr_ii = box_filter(guide * guide, radius)

    cov_ip = corr_ip - mean_i * mean_p
    var_i = corr_ii - mean_i * mean_i

    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i

    return box_filter(a, radius) * guide + box_filter(b, radius)
