"""Correlation of router-input neurons with the hidden data type.

For each of the 128 router-input neurons this measures how strongly its raw
activation tracks the digit/squares type tag (absolute Pearson
correlation), labels it "common" or "discriminative" against the population
mean, and relates that to how hard the learned gate suppresses it.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import Tensor
from .data import Samples
from .inhibition import NoGateError
from .model import MixedNumbersNet, features_and_gates

logger = logging.getLogger(__name__)

N_THRESHOLDS = 100


@dataclass(frozen=True)
class NeuronStats:
    neuron_index: int
    mean_gate_activation: float
    abs_pearson: float
    cls: str  # "common" or "discriminative"


def pearson(feature_values: Sequence[float], type_labels: Sequence[float]) -> float:
    """Pearson correlation; 0.0 (with a warning) when either series is constant."""
    f = np.asarray(feature_values, dtype=np.float64)
    t = np.asarray(type_labels, dtype=np.float64)
    if f.shape != t.shape or f.ndim != 1:
        raise ValueError(f"pearson needs two equal-length 1-D series, got {f.shape} and {t.shape}")
    if f.size < 2:
        raise ValueError("pearson needs at least two observations")
    fc = f - f.mean()
    tc = t - t.mean()
    sf = np.sqrt(np.mean(fc * fc))
    st = np.sqrt(np.mean(tc * tc))
    if sf == 0.0 or st == 0.0:
        warnings.warn("zero-variance series in pearson; correlation set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    c = float(np.mean(fc * tc) / (sf * st))
    return max(-1.0, min(1.0, c))


def classify(abs_corr: np.ndarray) -> np.ndarray:
    """True where a neuron is discriminative (|c| above the population mean)."""
    abs_corr = np.asarray(abs_corr, dtype=np.float64)
    return abs_corr > abs_corr.mean()


def collect_activations(model: MixedNumbersNet, samples: Samples, indices: Optional[np.ndarray] = None,
                        batch_size: int = 5120) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw features, gate values and type tags over the selected samples."""
    if not model.has_gate:
        raise NoGateError(f"inhibition mode {model.config.inhibition!r} has no gate; analysis needs one")
    indices = np.arange(len(samples)) if indices is None else np.asarray(indices)
    feats, gates = [], []
    for images, _ in samples.batches(batch_size, indices):
        f, g = features_and_gates(model, Tensor(images))
        feats.append(f)
        gates.append(g)
    types = samples.type_tags()[indices]
    return np.concatenate(feats), np.concatenate(gates), types


def neuron_stats(features: np.ndarray, gates: np.ndarray, types: np.ndarray) -> List[NeuronStats]:
    t = np.asarray(types, dtype=np.float64)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        abs_c = np.array([abs(pearson(features[:, i], t)) for i in range(features.shape[1])])
    dead = sum(1 for w in caught if "zero-variance" in str(w.message))
    if dead:
        logger.warning("%d neuron(s) have zero variance over the split; their correlation is 0", dead)
    disc = classify(abs_c)
    means = gates.astype(np.float64).mean(axis=0)
    return [NeuronStats(i, float(means[i]), float(abs_c[i]), "discriminative" if disc[i] else "common")
            for i in range(features.shape[1])]


def neuron_report(model: MixedNumbersNet, samples: Samples, indices: Optional[np.ndarray] = None,
                  batch_size: int = 5120) -> List[NeuronStats]:
    features, gates, types = collect_activations(model, samples, indices, batch_size)
    return neuron_stats(features, gates, types)


def default_thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """``n`` evenly spaced thresholds strictly inside (0, 1)."""
    return np.linspace(0.0, 1.0, n + 2)[1:-1]


def threshold_sweep(stats: Sequence[NeuronStats], thresholds: Optional[Sequence[float]] = None
                    ) -> List[Tuple[int, int]]:
    """Per threshold: (common, discriminative) neurons whose mean gate falls below it."""
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    act = np.array([s.mean_gate_activation for s in stats])
    disc = np.array([s.cls == "discriminative" for s in stats])
    out = []
    for th in thresholds:
        below = act < th
        out.append((int(np.sum(below & ~disc)), int(np.sum(below & disc))))
    return out


def write_figure2(path: Union[str, Path], stats: Sequence[NeuronStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron", "abs_pearson", "mean_activation"])
        for s in stats:
            w.writerow([s.neuron_index, repr(s.abs_pearson), repr(s.mean_gate_activation)])


def write_figure3(path: Union[str, Path], thresholds: Sequence[float], sweep: Sequence[Tuple[int, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "n_common", "n_discriminative"])
        for th, (nc, nd) in zip(thresholds, sweep):
            w.writerow([repr(float(th)), nc, nd])
