"""Mixture-of-experts routing with learned inhibition gates, built on a small numpy autodiff core."""

from .autograd import Tensor, backward, no_grad
from .inhibition import MODES, ActivationCache, InhibitionUnit
from .model import MixedNumbersNet, ModelConfig
from .moe import MoELayer, topk_gate

__all__ = [
    "ActivationCache",
    "InhibitionUnit",
    "MODES",
    "MixedNumbersNet",
    "ModelConfig",
    "MoELayer",
    "Tensor",
    "backward",
    "no_grad",
    "topk_gate",
]
