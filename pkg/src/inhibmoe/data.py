"""Mixed-numbers data: MNIST digits plus rendered counts of squares.

Binary layouts
--------------
IDX (MNIST): big-endian ``u32 magic`` (0x00000803 images, 0x00000801
labels), ``u32`` count, then for images ``u32 rows, u32 cols`` and
``count*rows*cols`` bytes; for labels ``count`` bytes.

MIXN (this package): little-endian header ``b"MIXN", u32 version, u32
count`` followed by ``count`` records of ``u8 label, u8 type, 784 u8
pixels``. Type 0 is a digit, 1 is a squares field.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SIDE = 28
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIXN_MAGIC = b"MIXN"
MIXN_VERSION = 1
MIXN_RECORD = 2 + N_PIXELS

TYPE_DIGIT = 0
TYPE_SQUARES = 1
TYPE_NAMES = {TYPE_DIGIT: "digit", TYPE_SQUARES: "squares"}

MNIST_IMAGES_FILE = "train-images-idx3-ubyte"
MNIST_LABELS_FILE = "train-labels-idx1-ubyte"

PathLike = Union[str, Path]


class DataFormatError(ValueError):
    pass


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    type_tag: str


class Samples:
    """Column store of samples: uint8 pixels, labels, and type tags.

    Model-facing iteration (:meth:`batches`) yields images and labels only;
    type tags are reached through :meth:`type_tags`, which exists for
    analysis.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, types: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
        labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        types = np.asarray(types, dtype=np.uint8).reshape(-1)
        if not (len(pixels) == len(labels) == len(types)):
            raise DatasetConfigError(f"column lengths differ: {len(pixels)}, {len(labels)}, {len(types)}")
        if labels.size and labels.max() > 9:
            raise DatasetConfigError(f"labels must lie in [0, 9], found {labels.max()}")
        self.pixels = pixels
        self.labels = labels
        self._types = types

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.pixels[i] / np.float32(255), int(self.labels[i]), TYPE_NAMES[int(self._types[i])])

    def subset(self, indices: np.ndarray) -> "Samples":
        indices = np.asarray(indices, dtype=np.int64)
        return Samples(self.pixels[indices], self.labels[indices], self._types[indices])

    def images(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Float32 images [n, 1, 28, 28] scaled to [0, 1]."""
        px = self.pixels if indices is None else self.pixels[indices]
        return (px.astype(np.float32) / np.float32(255))[:, None, :, :]

    def type_tags(self) -> np.ndarray:
        return self._types

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images(idx), self.labels[idx].astype(np.int64)

    @classmethod
    def concat(cls, *parts: "Samples") -> "Samples":
        return cls(np.concatenate([p.pixels for p in parts]), np.concatenate([p.labels for p in parts]),
                   np.concatenate([p._types for p in parts]))


# --- IDX -------------------------------------------------------------------


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, path: PathLike) -> Tuple[int, Tuple[int, ...], np.ndarray]:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)} (need 8 bytes)")
    magic, count = struct.unpack_from(">II", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)} (need {header} bytes)")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated payload at offset {len(raw)}, expected {need} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header)
    return count, tuple(dims), data


def read_idx_images(path: PathLike) -> np.ndarray:
    count, dims, data = _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, path)
    return data.reshape(count, dims[1], dims[2])


def read_idx_labels(path: PathLike) -> np.ndarray:
    count, _, data = _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, path)
    return data.copy()


def write_idx_images(path: PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_mnist_idx(images_path: PathLike, labels_path: PathLike) -> Samples:
    """Read an IDX image/label pair as digit samples.

    Raises:
        DataFormatError: wrong magic, truncated file, non-28x28 images, or
            image/label count mismatch.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise DataFormatError(f"{images_path}: images are {images.shape[1:]}, expected 28x28 (header offset 8)")
    if len(images) != len(labels):
        raise DataFormatError(f"count mismatch at offset 4: {images_path} has {len(images)} images, "
                              f"{labels_path} has {len(labels)} labels")
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{labels_path}: label {labels[bad]} > 9 at offset {8 + bad}")
    return Samples(images, labels, np.full(len(labels), TYPE_DIGIT, dtype=np.uint8))


def find_mnist_files(mnist_dir: PathLike) -> Tuple[Path, Path]:
    """Locate the training image/label files (plain or gzipped) in ``mnist_dir``."""
    mnist_dir = Path(mnist_dir)
    found = []
    for stem in (MNIST_IMAGES_FILE, MNIST_LABELS_FILE):
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (mnist_dir / name).is_file():
                found.append(mnist_dir / name)
                break
        else:
            raise FileNotFoundError(str(mnist_dir / stem))
    return found[0], found[1]


def export_sample_mnist(out_dir: PathLike) -> Tuple[Path, Path]:
    """Write the 5,000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    For offline desk-scale runs when the full MNIST training files are not
    available locally.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path, lbl_path = out_dir / MNIST_IMAGES_FILE, out_dir / MNIST_LABELS_FILE
    write_idx_images(img_path, np.asarray(X, dtype=np.uint8).reshape(-1, IMAGE_SIDE, IMAGE_SIDE))
    write_idx_labels(lbl_path, np.asarray(y, dtype=np.uint8))
    return img_path, lbl_path


# --- squares -------------------------------------------------------------------


@dataclass(frozen=True)
class SquaresSpec:
    min_side: int = 3
    max_side: int = 7
    gap: int = 1
    max_count: int = 9
    max_rejections: int = 1000


def _place_squares(n: int, rng: np.random.Generator, spec: SquaresSpec) -> Optional[list]:
    placed: list = []
    rejections = 0
    while len(placed) < n:
        side = int(rng.integers(spec.min_side, spec.max_side + 1))
        r = int(rng.integers(0, IMAGE_SIDE - side + 1))
        c = int(rng.integers(0, IMAGE_SIDE - side + 1))
        g = spec.gap
        clash = any(r < r2 + s2 + g and r2 < r + side + g and c < c2 + s2 + g and c2 < c + side + g
                    for r2, c2, s2 in placed)
        if clash:
            rejections += 1
            if rejections >= spec.max_rejections:
                return None
            continue
        placed.append((r, c, side))
    return placed


def render_squares(n: int, rng: np.random.Generator, spec: SquaresSpec = SquaresSpec()) -> np.ndarray:
    """A 28x28 uint8 field with ``n`` separated filled white squares."""
    while True:
        placed = _place_squares(n, rng, spec)
        if placed is not None:
            break
        logger.debug("placement of %d squares failed; retrying", n)
    img = np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    for r, c, side in placed:
        img[r:r + side, c:c + side] = 255
    return img


def gen_squares(count: int, seed: int, spec: SquaresSpec = SquaresSpec()) -> Samples:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.max_count + 1, size=count).astype(np.uint8)
    pixels = np.empty((count, IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    for i, n in enumerate(labels):
        pixels[i] = render_squares(int(n), rng, spec)
    return Samples(pixels, labels, np.full(count, TYPE_SQUARES, dtype=np.uint8))


# --- mixing and splits ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_indices(n: int, seed: int, ratios=(0.8, 0.1, 0.1)) -> DatasetSplit:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return DatasetSplit(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                        np.sort(perm[n_train + n_val:]), seed)


def build_mixed_dataset(mnist: Samples, squares: Samples, seed: int) -> Tuple[Samples, DatasetSplit]:
    """Shuffle digits and squares together and split 80/10/10."""
    if len(mnist) != len(squares):
        raise DatasetConfigError(f"need equal digit and squares counts, got {len(mnist)} and {len(squares)}")
    both = Samples.concat(mnist, squares)
    rng = np.random.default_rng(seed)
    mixed = both.subset(rng.permutation(len(both)))
    return mixed, split_indices(len(mixed), seed + 1)


def balanced_subset(samples: Samples, size: int, seed: int) -> Samples:
    """A fixed subset with equal numbers of each type, in shuffled order."""
    types = samples.type_tags()
    per_type = size // 2
    rng = np.random.default_rng(seed)
    picks = []
    for t in (TYPE_DIGIT, TYPE_SQUARES):
        pool = np.flatnonzero(types == t)
        if len(pool) < per_type:
            raise DatasetConfigError(f"subset of {size} needs {per_type} samples of type "
                                     f"{TYPE_NAMES[t]}, only {len(pool)} available")
        picks.append(rng.choice(pool, size=per_type, replace=False))
    idx = np.concatenate(picks)
    return samples.subset(idx[rng.permutation(len(idx))])


# --- MIXN ----------------------------------------------------------------------


def write_mixn(path: PathLike, samples: Samples) -> None:
    n = len(samples)
    records = np.empty((n, MIXN_RECORD), dtype=np.uint8)
    records[:, 0] = samples.labels
    records[:, 1] = samples.type_tags()
    records[:, 2:] = samples.pixels.reshape(n, N_PIXELS)
    with open(path, "wb") as fh:
        fh.write(MIXN_MAGIC + struct.pack("<II", MIXN_VERSION, n))
        fh.write(records.tobytes())


def read_mixn(path: PathLike) -> Samples:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    if raw[:4] != MIXN_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != MIXN_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at offset 4")
    need = 12 + n * MIXN_RECORD
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} bytes for {n} records, file has {len(raw)}")
    records = np.frombuffer(raw, dtype=np.uint8, offset=12).reshape(n, MIXN_RECORD)
    return Samples(records[:, 2:].reshape(n, IMAGE_SIDE, IMAGE_SIDE).copy(), records[:, 0].copy(),
                   records[:, 1].copy())
