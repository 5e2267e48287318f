"""Inhibition gates on the router-input population.

Every gate-bearing mode computes ``z * sigmoid(a)`` where the gate argument
``a`` is built from up to three kinds of connection:

* ``G(x)``: a linear layer over the same population (``glu``);
* ``sum_i Pr_i(x_i)``: linear maps from earlier activations in the current
  forward pass (``pretext``);
* ``sum_j maxpool_batch(Po_j(x_j))``: linear maps from later activations of
  the *previous* training iteration, read from a detached cache and reduced
  over the batch axis so they broadcast to a batch of any size
  (``posttext``).

``global`` uses all three. ``dropout`` is the random variant and has no gate.
"""

from __future__ import annotations

import logging
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .layers import FEATURE_DIM, Linear, Module

logger = logging.getLogger(__name__)

MODES = ("none", "dropout", "glu", "pretext", "posttext", "global")
GATED_MODES = ("glu", "pretext", "posttext", "global")
MODE_ALIASES = {"random": "dropout", "one_layer": "glu", "one-layer": "glu"}


class InhibitionConfigError(ValueError):
    pass


class CacheStateError(RuntimeError):
    pass


class NoGateError(RuntimeError):
    pass


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise InhibitionConfigError(f"unknown inhibition mode {mode!r}; valid modes: {', '.join(MODES)}")
    return mode


class ActivationCache:
    """Detached activations from the previous training iteration.

    ``k`` counts completed iterations. Entries are plain arrays wrapped in
    non-differentiable tensors, so nothing read from the cache can carry
    gradient back into the step that produced it.
    """

    def __init__(self) -> None:
        self._entries: Dict[str, Tensor] = {}
        self.k = 0

    def store(self, tap_id: str, activation: Tensor) -> None:
        self._entries[tap_id] = Tensor(np.array(activation.data, copy=True), requires_grad=False)

    def read(self, tap_id: str) -> Tensor:
        return self._entries[tap_id]

    def advance(self) -> None:
        self.k += 1

    def __contains__(self, tap_id: str) -> bool:
        return tap_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def is_empty(self) -> bool:
        return not self._entries

    def items(self):
        return self._entries.items()

    def snapshot(self) -> "ActivationCache":
        other = ActivationCache()
        other._entries = {k: Tensor(v.data.copy()) for k, v in self._entries.items()}
        other.k = self.k
        return other

    def clear(self) -> None:
        self._entries.clear()
        self.k = 0


def cache_store(cache: ActivationCache, tap_id: str, activation: Tensor) -> None:
    cache.store(tap_id, activation)


def dropout_inhibit(z: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero each unit with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise InhibitionConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return z
    if rng is None:
        raise InhibitionConfigError("dropout in training mode needs a random generator")
    keep = rng.random(z.shape) >= p
    mask = (keep / (1.0 - p)).astype(z.dtype)
    return z * Tensor(mask)


def _gate(z: Tensor, argument: Tensor) -> Tensor:
    return z * ag.sigmoid(argument)


def one_layer_inhibit(z: Tensor, x: Tensor, gate: Linear) -> Tensor:
    return _gate(z, gate(x))


def pretext_term(nets: Mapping[str, Linear], taps: Mapping[str, Tensor]) -> Optional[Tensor]:
    """Sum of ``Pr_i(x_i)`` over the configured earlier-site taps."""
    total = None
    for name, net in nets.items():
        if name not in taps:
            raise DimensionError(f"pretext tap {name!r} missing from forward pass")
        x_i = taps[name]
        if x_i.ndim != 2 or x_i.shape[1] != net.in_features:
            raise DimensionError(f"pretext tap {name!r} has shape {x_i.shape}, network expects "
                                 f"[B, {net.in_features}]")
        term = net(x_i)
        total = term if total is None else total + term
    return total


def posttext_term(nets: Mapping[str, Linear], cache: ActivationCache) -> Optional[Tensor]:
    """Sum of batch-max-pooled ``Po_j`` outputs on last iteration's taps, shape [1, D].

    Returns ``None`` before the first completed iteration.
    """
    if not nets or cache.k == 0:
        return None
    total = None
    for name, net in nets.items():
        if name not in cache:
            raise CacheStateError(f"posttext tap {name!r} was never cached (iteration k={cache.k})")
        prev = cache.read(name)
        if prev.ndim != 2 or prev.shape[1] != net.in_features:
            raise DimensionError(f"cached tap {name!r} has shape {prev.shape}, network expects "
                                 f"[B, {net.in_features}]")
        pooled = ag.amax(net(prev), axis=0, keepdims=True)
        total = pooled if total is None else total + pooled
    return total


def gate_argument(x: Tensor, gate: Linear, pre_nets: Mapping[str, Linear] = None,
                  pre_taps: Mapping[str, Tensor] = None, post_nets: Mapping[str, Linear] = None,
                  cache: Optional[ActivationCache] = None) -> Tensor:
    arg = gate(x)
    if pre_nets:
        pre = pretext_term(pre_nets, pre_taps or {})
        if pre is not None:
            arg = arg + pre
    if post_nets:
        post = posttext_term(post_nets, cache)
        if post is not None:
            arg = arg + post
    return arg


def pretext_inhibit(z: Tensor, x: Tensor, gate: Linear, nets: Mapping[str, Linear],
                    taps: Mapping[str, Tensor]) -> Tensor:
    return _gate(z, gate_argument(x, gate, nets, taps))


def posttext_inhibit(z: Tensor, x: Tensor, gate: Linear, nets: Mapping[str, Linear],
                     cache: ActivationCache) -> Tensor:
    return _gate(z, gate_argument(x, gate, post_nets=nets, cache=cache))


def global_inhibit(z: Tensor, x: Tensor, gate: Linear, pre_nets: Mapping[str, Linear],
                   pre_taps: Mapping[str, Tensor], post_nets: Mapping[str, Linear],
                   cache: ActivationCache) -> Tensor:
    # the batch-pooled later-site sum sits inside the sigmoid, as for posttext
    return _gate(z, gate_argument(x, gate, pre_nets, pre_taps, post_nets, cache))


class InhibitionUnit(Module):
    """Configured inhibition applied to a ``dim``-unit population.

    Args:
        mode: one of ``MODES`` (aliases ``random`` and ``one_layer`` accepted).
        rng: generator for parameter initialisation.
        pre_tap_dims: name -> width of each earlier-site tap (pretext/global).
        post_tap_dims: name -> width of each later-site tap (posttext/global).
        p: dropout probability for ``dropout`` mode.
    """

    def __init__(self, mode: str, rng: np.random.Generator, dim: int = FEATURE_DIM,
                 pre_tap_dims: Optional[Mapping[str, int]] = None,
                 post_tap_dims: Optional[Mapping[str, int]] = None, p: float = 0.5,
                 dtype=ag.DEFAULT_DTYPE):
        self.mode = canonical_mode(mode)
        self.dim = dim
        self.p = p
        if self.mode == "dropout" and not 0.0 <= p < 1.0:
            raise InhibitionConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.gate = Linear(dim, dim, rng, dtype) if self.mode in GATED_MODES else None
        use_pre = self.mode in ("pretext", "global")
        use_post = self.mode in ("posttext", "global")
        self.pretext_nets = {n: Linear(d, dim, rng, dtype) for n, d in (pre_tap_dims or {}).items()} if use_pre else {}
        self.posttext_nets = {n: Linear(d, dim, rng, dtype) for n, d in (post_tap_dims or {}).items()} if use_post else {}
        self._cache = ActivationCache()
        self.last_gate: Optional[np.ndarray] = None

    @property
    def cache(self) -> ActivationCache:
        return self._cache

    @cache.setter
    def cache(self, value: ActivationCache) -> None:
        self._cache = value

    @property
    def has_gate(self) -> bool:
        return self.gate is not None

    @property
    def post_taps(self) -> Sequence[str]:
        return tuple(self.posttext_nets)

    def gate_values(self, x: Tensor, pre_taps: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        if not self.has_gate:
            raise NoGateError(f"inhibition mode {self.mode!r} has no gate")
        arg = gate_argument(x, self.gate, self.pretext_nets, pre_taps, self.posttext_nets, self._cache)
        return ag.sigmoid(arg)

    def __call__(self, z: Tensor, x: Tensor, pre_taps: Optional[Mapping[str, Tensor]] = None,
                 training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.mode == "none":
            return z
        if self.mode == "dropout":
            return dropout_inhibit(z, self.p, training, rng)
        g = self.gate_values(x, pre_taps)
        self.last_gate = g.data
        return z * g

    def record(self, later_taps: Mapping[str, Tensor]) -> None:
        """Cache this iteration's later-site activations and close the iteration."""
        if not self.posttext_nets:
            return
        for name in self.posttext_nets:
            self._cache.store(name, later_taps[name])
        self._cache.advance()
