"""Central finite-difference verification of analytic gradients.

The checker works on scalar-valued closures: callers reduce tensor
outputs to a scalar, typically through a fixed random projection, and
supply the analytic gradient for every input they want probed.  All
probing runs in float64 regardless of what the production ops use.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-6
DEFAULT_FLOOR = 1e-8


def grad_check(fn, inputs, eps: float = DEFAULT_EPS,
               floor: float = DEFAULT_FLOOR) -> float:
    """Max relative error between analytic and central-difference grads.

    ``fn(*inputs) -> (scalar, grads)`` where grads is a sequence of
    arrays shaped like the corresponding inputs.  Every element of every
    input is perturbed by +-eps (scaled to the element's magnitude) and
    the relative error |analytic - numeric| / max(|analytic|, |numeric|,
    floor) is accumulated; the max over all probes is returned.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, grads = fn(*inputs)
    if len(grads) != len(inputs):
        raise ValueError(f"fn returned {len(grads)} grads for {len(inputs)} inputs")

    worst = 0.0
    for k, x in enumerate(inputs):
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(
                f"grad {k} shape {g.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        for j in range(flat.size):
            step = eps * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + step
            f_hi, _ = fn(*inputs)
            flat[j] = orig - step
            f_lo, _ = fn(*inputs)
            flat[j] = orig
            numeric = (f_hi - f_lo) / (2.0 * step)
            analytic = g.reshape(-1)[j]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def random_projection(rng: np.random.Generator, shape) -> np.ndarray:
    """Fixed random tensor used to reduce an op output to a scalar."""
    return rng.standard_normal(shape)
