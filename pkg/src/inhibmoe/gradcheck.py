"""Central-difference gradient checking for the autodiff core."""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4,
                   positions: Optional[Sequence[int]] = None) -> np.ndarray:
    """d fn() / d param by central differences, at ``positions`` (flat) or everywhere.

    Entries not in ``positions`` are left as NaN.
    """
    param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if positions is None else positions
    with ag.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    for p in params:
        p.grad = None
    ag.reset_tape()
    loss = fn()
    ag.backward(loss)
    return {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}


def max_rel_error(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                  max_positions: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Largest |analytic - numeric| / max(1, |numeric|) over the checked entries."""
    grads = analytic_grads(fn, params)
    worst = 0.0
    for p in params:
        positions = None
        if max_positions is not None and p.size > max_positions:
            rng = rng or np.random.default_rng(0)
            positions = rng.choice(p.size, size=max_positions, replace=False)
        num = numerical_grad(fn, p, h, positions)
        ana = grads[id(p)]
        mask = ~np.isnan(num)
        err = np.abs(ana[mask] - num[mask]) / np.maximum(1.0, np.abs(num[mask]))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def random_projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights), so every output element feeds the check."""
    return (out * Tensor(weights.astype(out.dtype))).sum()
