"""The mixed-numbers classifier: backbone, optional inhibition, then a head.

``head="baseline"`` puts a single linear classifier on the 128 features;
``head="moe"`` routes them through a top-K-of-N mixture of experts. The
inhibition unit, when present, gates the features before the router sees
them, and the experts consume the same gated features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .inhibition import InhibitionUnit, NoGateError, canonical_mode
from .layers import FEATURE_DIM, ConvBackbone, Linear, Module
from .moe import MoELayer

N_CLASSES = 10

PRE_TAP_DIMS = {"pool1": ConvBackbone.pool1_dim, "pool2": ConvBackbone.flat_dim}


@dataclass
class ModelConfig:
    head: str = "moe"
    n_experts: int = 5
    top_k: int = 3
    inhibition: str = "none"
    dropout: float = 0.5
    pre_taps: Tuple[str, ...] = ("pool1", "pool2")
    # None selects every later-site tap the head provides
    post_taps: Optional[Tuple[str, ...]] = None
    router_noise: float = 0.0

    def __post_init__(self) -> None:
        self.inhibition = canonical_mode(self.inhibition)
        if self.head not in ("baseline", "moe"):
            raise ValueError(f"head must be 'baseline' or 'moe', got {self.head!r}")
        if self.head == "moe" and not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got top_k={self.top_k}, n_experts={self.n_experts}")
        self.pre_taps = tuple(self.pre_taps)
        if self.post_taps is None:
            self.post_taps = tuple(self.post_tap_dims_all())
        self.post_taps = tuple(self.post_taps)
        unknown = set(self.pre_taps) - set(PRE_TAP_DIMS)
        if unknown:
            raise ValueError(f"unknown pretext taps {sorted(unknown)}; available: {sorted(PRE_TAP_DIMS)}")
        unknown = set(self.post_taps) - set(self.post_tap_dims_all())
        if unknown:
            raise ValueError(f"unknown posttext taps {sorted(unknown)} for head {self.head!r}; "
                             f"available: {sorted(self.post_tap_dims_all())}")

    def post_tap_dims_all(self) -> Dict[str, int]:
        dims = {"logits": N_CLASSES}
        if self.head == "moe":
            dims["router_logits"] = self.n_experts
        return dims


class MixedNumbersNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=ag.DEFAULT_DTYPE):
        self.config = config
        self.backbone = ConvBackbone(rng, dtype=dtype)
        if config.inhibition != "none":
            all_post = config.post_tap_dims_all()
            self.inhibition = InhibitionUnit(
                config.inhibition, rng,
                pre_tap_dims={t: PRE_TAP_DIMS[t] for t in config.pre_taps},
                post_tap_dims={t: all_post[t] for t in config.post_taps},
                p=config.dropout, dtype=dtype)
        else:
            self.inhibition = None
        if config.head == "moe":
            self.moe = MoELayer(config.n_experts, config.top_k, rng, noise_std=config.router_noise, dtype=dtype)
            self.classifier = None
        else:
            self.moe = None
            self.classifier = Linear(FEATURE_DIM, N_CLASSES, rng, dtype)
        self._rng: Optional[np.random.Generator] = None

    def set_rng(self, rng: np.random.Generator) -> None:
        """Generator for dropout masks and router noise during training."""
        self._rng = rng

    @property
    def has_gate(self) -> bool:
        return self.inhibition is not None and self.inhibition.has_gate

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        logits, _ = self.forward_with_state(images, training)
        return logits

    __call__ = forward

    def forward_with_state(self, images: Tensor, training: bool = False) -> Tuple[Tensor, Dict[str, object]]:
        features, taps = self.backbone(images)
        state: Dict[str, object] = {"features": features}
        z = features
        if self.inhibition is not None:
            z = self.inhibition(features, features, taps, training=training, rng=self._rng)
            if self.inhibition.has_gate:
                state["gate"] = self.inhibition.last_gate
        later: Dict[str, Tensor] = {}
        if self.moe is not None:
            logits = self.moe(z, self._rng if training else None)
            state["routing"] = self.moe.last_routing
            later["router_logits"] = self.moe.last_routing.logits
        else:
            logits = self.classifier(z)
        later["logits"] = logits
        if training and self.inhibition is not None:
            self.inhibition.record(later)
        return logits, state

    def named_buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint round trip."""
        if self.inhibition is None or not self.inhibition.posttext_nets:
            return {}
        cache = self.inhibition.cache
        out = {f"cache.{name}": t.data for name, t in cache.items()}
        out["cache.k"] = np.asarray(cache.k, dtype=np.float32)
        return out

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        if self.inhibition is None or not self.inhibition.posttext_nets:
            return
        cache = self.inhibition.cache
        cache.clear()
        for name, arr in buffers.items():
            if name == "cache.k":
                cache.k = int(np.asarray(arr).reshape(-1)[0])
            elif name.startswith("cache."):
                cache.store(name[len("cache."):], Tensor(np.asarray(arr, dtype=np.float32)))


def record_inhibition_activations(model: MixedNumbersNet, images: Tensor) -> np.ndarray:
    """Sigmoid gate values [B, 128] in evaluation mode (the gate, not the gated features)."""
    if not model.has_gate:
        mode = model.config.inhibition
        raise NoGateError(f"inhibition mode {mode!r} has no gate to record")
    with ag.no_grad():
        features, taps = model.backbone(images)
        return model.inhibition.gate_values(features, taps).data


def features_and_gates(model: MixedNumbersNet, images: Tensor) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (pre-gate) router-input features and gate values for one batch."""
    if not model.has_gate:
        raise NoGateError(f"inhibition mode {model.config.inhibition!r} has no gate to record")
    with ag.no_grad():
        features, taps = model.backbone(images)
        gates = model.inhibition.gate_values(features, taps)
    return features.data, gates.data
