"""Sparsely-gated mixture of experts with top-K softmax routing.

No load-balancing term and, by default, no routing noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import FEATURE_DIM, MLP, Module


class ConfigurationError(ValueError):
    pass


def topk_gate(logits: Tensor, k: int) -> Tuple[np.ndarray, Tensor]:
    """Select the K largest logits per row and softmax over just those.

    Returns integer indices [B, K] ordered by descending logit (ties go to the
    lower expert index) and the matching gate weights [B, K].
    """
    n = logits.shape[1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"top-k needs 1 <= K <= N, got K={k}, N={n}")
    # stable sort on the negated logits keeps lower indices first among equals
    order = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(logits.shape[0]), k).reshape(-1, k)
    picked = ag.index(logits, (rows, order))
    return order, ag.softmax(picked, axis=1)


@dataclass
class Routing:
    indices: np.ndarray
    weights: Tensor
    logits: Tensor


class MoELayer(Module):
    """Router MLP plus N expert MLPs; each sample runs only its K experts."""

    def __init__(self, n_experts: int, top_k: int, rng: np.random.Generator, in_features: int = FEATURE_DIM,
                 hidden: int = 128, out_features: int = 10, noise_std: float = 0.0, dtype=ag.DEFAULT_DTYPE):
        if not 1 <= top_k <= n_experts:
            raise ConfigurationError(f"top-k needs 1 <= K <= N, got K={top_k}, N={n_experts}")
        self.n_experts = n_experts
        self.top_k = top_k
        self.noise_std = noise_std
        self.out_features = out_features
        self.router = MLP(in_features, hidden, n_experts, rng, dtype)
        self.experts = [MLP(in_features, hidden, out_features, rng, dtype) for _ in range(n_experts)]
        self.last_routing: Optional[Routing] = None

    def route(self, features: Tensor, rng: Optional[np.random.Generator] = None) -> Routing:
        logits = self.router(features)
        if self.noise_std > 0 and rng is not None:
            noise = rng.standard_normal(logits.shape).astype(logits.dtype) * self.noise_std
            logits = logits + noise
        indices, weights = topk_gate(logits, self.top_k)
        return Routing(indices, weights, logits)

    def __call__(self, features: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        routing = self.route(features, rng)
        self.last_routing = routing
        return combine(features, routing, self.experts, self.out_features)


def combine(features: Tensor, routing: Routing, experts: List[MLP], out_features: int) -> Tensor:
    b = features.shape[0]
    out = None
    for e, expert in enumerate(experts):
        rows, slots = np.nonzero(routing.indices == e)
        if rows.size == 0:
            continue
        y = expert(ag.index(features, rows))
        w = ag.index(routing.weights, (rows, slots)).reshape(-1, 1)
        part = ag.scatter_add(y * w, rows, (b, out_features))
        out = part if out is None else out + part
    return out


def moe_forward(features: Tensor, layer: MoELayer) -> Tensor:
    return layer(features)


def expert_utilization(indices_batches: Iterable[np.ndarray], n_experts: int) -> np.ndarray:
    """Per-expert selection counts over routed batches of [B, K] indices."""
    counts = np.zeros(n_experts, dtype=np.int64)
    for idx in indices_batches:
        counts += np.bincount(np.asarray(idx).ravel(), minlength=n_experts)
    return counts
