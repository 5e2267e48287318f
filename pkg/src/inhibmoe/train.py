"""Adam training loop, evaluation, checkpoints and run reports.

Checkpoint layout (MCKP, little-endian): ``b"MCKP", u32 version, u32
count`` then ``count`` blobs of ``u32 name_len, name bytes, u32 rank,
u32 dims[rank], f32 data``. Parameters are stored under their dotted
module paths; the post-text activation cache, when present, is stored
under ``cache.<tap>`` with its iteration counter in ``cache.k``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import DatasetSplit, Samples, balanced_subset, read_mixn, split_indices
from .model import MixedNumbersNet, ModelConfig

logger = logging.getLogger(__name__)

MCKP_MAGIC = b"MCKP"
MCKP_VERSION = 1
REPORT_COLUMNS = ("epoch", "split", "loss", "accuracy", "seed")


class TrainingError(RuntimeError):
    pass


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, from each parameter's ``.grad``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingError(f"parameter {i} with shape {p.shape} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state = adam_init(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr)


# --- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 128
    epochs: int = 35
    eval_batch: int = 5120
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    split_seed: int = 0
    subset: int = 0
    dataset: str = "mixed_numbers.mixn"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("batch_size", "epochs", "eval_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.subset < 0:
            raise ValueError(f"subset must be >= 0, got {self.subset}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")


# --- data plumbing ---------------------------------------------------------------


def prepare_data(samples: Samples, subset: int, split_seed: int) -> Tuple[Samples, DatasetSplit]:
    if subset:
        samples = balanced_subset(samples, subset, split_seed)
    return samples, split_indices(len(samples), split_seed)


def load_run_data(config: TrainConfig) -> Tuple[Samples, DatasetSplit]:
    return prepare_data(read_mixn(config.dataset), config.subset, config.split_seed)


# --- evaluation -------------------------------------------------------------------


def evaluate(model, samples: Samples, indices: Optional[np.ndarray] = None, batch_size: int = 5120) -> Dict[str, float]:
    """Accuracy and mean cross-entropy of ``model`` over the selected samples.

    ``model`` is any callable mapping an image tensor to logits; it is run in
    evaluation mode with gradient recording disabled.
    """
    indices = np.arange(len(samples)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    nll_sum = 0.0
    with ag.no_grad():
        for images, labels in samples.batches(batch_size, indices):
            logits = _eval_logits(model, images)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            nll_sum += _nll_sum(logits, labels)
    n = len(indices)
    return {"accuracy": correct / n, "mean_nll": nll_sum / n}


def _eval_logits(model, images: np.ndarray) -> np.ndarray:
    if isinstance(model, MixedNumbersNet):
        out = model.forward(Tensor(images), training=False)
    else:
        out = model(Tensor(images))
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def _nll_sum(logits: np.ndarray, labels: np.ndarray) -> float:
    v = logits.astype(np.float64)
    m = v.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(v - m).sum(axis=1))
    return float(np.sum(lse - v[np.arange(len(labels)), labels]))


def routed_indices(model: MixedNumbersNet, samples: Samples, indices: Optional[np.ndarray] = None,
                   batch_size: int = 5120) -> Iterable[np.ndarray]:
    indices = np.arange(len(samples)) if indices is None else np.asarray(indices)
    with ag.no_grad():
        for images, _ in samples.batches(batch_size, indices):
            model.forward(Tensor(images), training=False)
            yield model.moe.last_routing.indices


# --- training ---------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    history: List[Dict[str, object]]
    test_accuracy: float
    test_nll: float
    model: MixedNumbersNet


@dataclass
class RunReport:
    config: TrainConfig
    results: List[SeedResult]

    @property
    def test_accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.results])

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.test_accuracies))

    def rows(self) -> List[Dict[str, object]]:
        return [row for r in self.results for row in r.history]


def _batch_hash(images: np.ndarray) -> str:
    return hashlib.sha1(images.tobytes()).hexdigest()[:12]


def train_seed(config: TrainConfig, samples: Samples, split: DatasetSplit, seed: int,
               log_every: int = 0) -> SeedResult:
    seq = np.random.SeedSequence(seed)
    init_seq, order_seq, noise_seq = seq.spawn(3)
    model = MixedNumbersNet(config.model, np.random.default_rng(init_seq))
    model.set_rng(np.random.default_rng(noise_seq))
    order_rng = np.random.default_rng(order_seq)
    opt = Adam(model.parameters(), config.learning_rate)
    history: List[Dict[str, object]] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = split.train[order_rng.permutation(len(split.train))]
        loss_sum = 0.0
        correct = 0
        for images, labels in samples.batches(config.batch_size, order):
            ag.reset_tape()
            opt.zero_grad()
            try:
                logits = model.forward(Tensor(images), training=True)
                loss = ag.cross_entropy(logits, labels)
                ag.backward(loss)
            except FloatingPointError as err:
                raise TrainingError(f"non-finite value at seed {seed}, epoch {epoch}, iteration {step}, "
                                    f"batch {_batch_hash(images)}: {err}") from err
            # experts no sample routed to this batch have an exactly-zero gradient
            for p in opt.params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            step += 1
            loss_sum += float(loss.data) * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            if log_every and step % log_every == 0:
                logger.info("seed %d epoch %d step %d loss %.4f", seed, epoch, step, float(loss.data))
        n = len(split.train)
        history.append({"epoch": epoch, "split": "train", "loss": loss_sum / n, "accuracy": correct / n, "seed": seed})
        if len(split.val):
            val = evaluate(model, samples, split.val, config.eval_batch)
            history.append({"epoch": epoch, "split": "val", "loss": val["mean_nll"], "accuracy": val["accuracy"],
                            "seed": seed})
            logger.info("seed %d epoch %d train loss %.4f val acc %.4f", seed, epoch, loss_sum / n, val["accuracy"])
    test = evaluate(model, samples, split.test, config.eval_batch)
    history.append({"epoch": config.epochs, "split": "test", "loss": test["mean_nll"], "accuracy": test["accuracy"],
                    "seed": seed})
    return SeedResult(seed, history, test["accuracy"], test["mean_nll"], model)


def train(config: TrainConfig, samples: Optional[Samples] = None, split: Optional[DatasetSplit] = None,
          run_dir: Optional[Union[str, Path]] = None) -> RunReport:
    """Train one model per seed; optionally write report.csv and per-seed checkpoints."""
    if samples is None:
        samples, split = load_run_data(config)
    elif split is None:
        samples, split = prepare_data(samples, config.subset, config.split_seed)
    results = []
    for seed in config.seeds:
        result = train_seed(config, samples, split, seed)
        results.append(result)
        if run_dir is not None:
            save_checkpoint(Path(run_dir) / f"seed{seed}.mckp", result.model)
    report = RunReport(config, results)
    if run_dir is not None:
        write_report_csv(Path(run_dir) / "report.csv", report.rows())
    return report


def write_report_csv(path: Union[str, Path], rows: Iterable[Dict[str, object]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"], row["split"], repr(float(row["loss"])), repr(float(row["accuracy"])),
                             row["seed"]])


# --- checkpoints ------------------------------------------------------------------


def write_mckp(path: Union[str, Path], blobs: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MCKP_MAGIC + struct.pack("<II", MCKP_VERSION, len(blobs)))
        for name, arr in blobs.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)) + encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_mckp(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MCKP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != MCKP_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    off = 12
    blobs: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(raw):
                raise struct.error("payload")
            blobs[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as err:
        raise ValueError(f"{path}: truncated checkpoint at offset {off}") from err
    return blobs


def save_checkpoint(path: Union[str, Path], model: MixedNumbersNet) -> None:
    blobs = dict(model.state_dict())
    blobs.update(model.named_buffers())
    write_mckp(path, blobs)


def infer_model_config(names: Iterable[str]) -> ModelConfig:
    """Reconstruct the architecture of a checkpoint from its blob names."""
    names = set(names)
    head = "moe" if any(n.startswith("moe.") for n in names) else "baseline"
    n_experts = len({n.split(".")[2] for n in names if n.startswith("moe.experts.")}) if head == "moe" else 5
    pre = tuple(t for t in ("pool1", "pool2") if f"inhibition.pretext_nets.{t}.weight" in names)
    post = tuple(t for t in ("logits", "router_logits") if f"inhibition.posttext_nets.{t}.weight" in names)
    if "inhibition.gate.weight" in names:
        mode = {(False, False): "glu", (True, False): "pretext", (False, True): "posttext",
                (True, True): "global"}[(bool(pre), bool(post))]
    else:
        mode = "none"
    return ModelConfig(head=head, n_experts=max(n_experts, 1), top_k=min(3, max(n_experts, 1)), inhibition=mode,
                       pre_taps=pre, post_taps=post)


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> MixedNumbersNet:
    blobs = read_mckp(path)
    if config is None:
        config = infer_model_config(blobs)
    model = MixedNumbersNet(config, np.random.default_rng(0))
    params = {k: v for k, v in blobs.items() if not k.startswith("cache.")}
    model.load_state_dict(params)
    model.load_buffers({k: v for k, v in blobs.items() if k.startswith("cache.")})
    return model
