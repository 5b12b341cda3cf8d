"""Dataset loading: IDX-format image files, binarisation, minibatches.

The binary task labels digits 5-9 as +1 and 0-4 as -1, with pixels scaled to
[0, 1] and images flattened to 784-vectors.  No file is ever fetched over the
network: the user drops the four canonical IDX files (optionally gzipped)
into a data directory and points SIGNAGG_DATA_DIR (or --data-dir) at it;
:func:`download_instructions` prints where to get them.

A small synthetic two-Gaussians task (inputs in [0, 1]^2, linearly separable
with a margin) backs the hermetic tests and toy configs.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

DATA_DIR_ENV = "SIGNAGG_DATA_DIR"
CANONICAL_URL = "http://yann.lecun.com/exdb/mnist/"

IMAGES_MAGIC = 2051  # 0x00000803: unsigned bytes, 3 dimensions
LABELS_MAGIC = 2049  # 0x00000801: unsigned bytes, 1 dimension

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """File is not a well-formed IDX file of the expected kind."""


class IdxMagicError(IdxFormatError):
    """Unexpected magic number."""


class IdxTruncationError(IdxFormatError):
    """File ends before the declared payload."""


@dataclass
class Dataset:
    """Flat float64 inputs with +-1 float64 labels."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(path, expected_magic: int, ndim: int):
    blob = _read_file(path)
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxTruncationError(f"{path}: only {len(blob)} bytes, header needs {header_len}")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    dims = struct.unpack(">" + "I" * ndim, blob[4:header_len])
    count = int(np.prod(dims))
    if len(blob) - header_len != count:
        raise IdxTruncationError(
            f"{path}: payload has {len(blob) - header_len} bytes, dimensions {dims} need {count}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def parse_idx_images(path) -> np.ndarray:
    """(n, rows, cols) uint8 array from an IDX3 image file (optionally .gz)."""
    return _parse_idx(path, IMAGES_MAGIC, 3)


def parse_idx_labels(path) -> np.ndarray:
    """(n,) uint8 array from an IDX1 label file (optionally .gz)."""
    return _parse_idx(path, LABELS_MAGIC, 1)


def binarize(images: np.ndarray, labels: np.ndarray, name: str = "") -> Dataset:
    """Scale pixels to [0, 1], flatten, and sign-label digits >= 5 as +1."""
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise ValueError(f"digit labels expected in 0..9, found {labels.max()}")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    signs = np.where(labels >= 5, 1.0, -1.0)
    return Dataset(inputs, signs, name)


def resolve_data_dir(explicit=None) -> str:
    """--data-dir flag, else SIGNAGG_DATA_DIR, else ./data."""
    if explicit:
        return str(explicit)
    return os.environ.get(DATA_DIR_ENV, "data")


def _find_file(data_dir, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    return None


def download_instructions(data_dir) -> str:
    names = sorted(stem for pair in SPLIT_FILES.values() for stem in pair)
    return (
        f"Place the four IDX files {names} (plain or .gz) in {data_dir!r} "
        f"(set {DATA_DIR_ENV} or pass --data-dir). They are distributed at "
        f"{CANONICAL_URL}; this tool never downloads them itself."
    )


def mnist_available(data_dir) -> bool:
    return all(
        _find_file(data_dir, stem) is not None
        for pair in SPLIT_FILES.values()
        for stem in pair
    )


def load_binary_mnist(data_dir, split: str) -> Dataset:
    """Binarised dataset for 'train' or 'test' from user-supplied IDX files."""
    if split not in SPLIT_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    image_stem, label_stem = SPLIT_FILES[split]
    image_path = _find_file(data_dir, image_stem)
    label_path = _find_file(data_dir, label_stem)
    if image_path is None or label_path is None:
        raise FileNotFoundError(download_instructions(data_dir))
    return binarize(
        parse_idx_images(image_path), parse_idx_labels(label_path), name=f"mnist-{split}"
    )


def minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    """Yield (inputs, labels) slices in a fresh random order; the final batch
    keeps the remainder, so batches partition the dataset exactly."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]


def toy_two_gaussians(n: int, rng: np.random.Generator, margin: float = 0.08) -> Dataset:
    """Synthetic 2-D task: two Gaussian blobs in [0, 1]^2 around (0.25, 0.25)
    and (0.75, 0.75), rejection-sampled to stay on the correct side of the
    line x + y = 1 by at least ``margin`` — linearly separable by design.

    Labels alternate +1/-1 so any prefix is roughly balanced.
    """
    if n < 2:
        raise ValueError(f"need at least 2 examples, got {n}")
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    centers = np.where(labels[:, None] > 0, 0.75, 0.25)
    inputs = np.empty((n, 2))
    todo = np.ones(n, dtype=bool)
    while np.any(todo):
        k = int(todo.sum())
        cand = centers[todo] + 0.1 * rng.standard_normal((k, 2))
        side = labels[todo] * (cand.sum(axis=1) - 1.0)
        ok = (
            (side >= margin)
            & (cand >= 0.0).all(axis=1)
            & (cand <= 1.0).all(axis=1)
        )
        idx = np.flatnonzero(todo)[ok]
        inputs[idx] = cand[ok]
        todo[idx] = False
    return Dataset(inputs, labels, name=f"toy-{n}")
