"""MNIST IDX ingestion: big-endian binary reading, writing, and dataset assembly.

The IDX container holds a 4-byte magic (two zero bytes, an element-type byte,
a rank byte), one big-endian 4-byte size per dimension, then the raw elements.
Only unsigned-byte payloads are handled here: images are rank 3 with magic
0x00000803, labels rank 1 with magic 0x00000801. Files ending in ``.gz`` are
decompressed transparently.

Datasets are assembled without materializing one dict per sample: every
sample's input mapping is a lazy view over a shared pixel matrix, keyed by
the blueprint's counted input names (``px:0 .. px:783`` by default).
"""

from __future__ import annotations

import gzip
import os
from pathlib import Path
from typing import IO, Iterator, Mapping

import numpy as np

from .training import Dataset

__all__ = [
    "BadMagic",
    "TruncatedFile",
    "IMAGES_MAGIC",
    "LABELS_MAGIC",
    "read_idx",
    "write_idx",
    "load_mnist_arrays",
    "load_mnist_idx",
    "dataset_from_arrays",
    "locate_mnist",
    "default_mnist_dir",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# canonical distribution filenames per split
_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

MNIST_DIR_ENV = "LIFTLAB_MNIST_DIR"


class BadMagic(ValueError):
    """The file's magic number is not the expected IDX header."""


class TruncatedFile(ValueError):
    """The file ended before the dimensions or payload were complete."""


def _open(path: str | Path) -> IO[bytes]:
    p = Path(path)
    if p.suffix == ".gz":
        return gzip.open(p, "rb")
    return open(p, "rb")


def _read_exact(fh: IO[bytes], n: int, path: Path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"{path}: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_idx(path: str | Path, expect_magic: int | None = None) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array of its stated shape.

    Raises:
        BadMagic: the magic is not ``expect_magic`` (or not an unsigned-byte
            IDX magic when no expectation is given).
        TruncatedFile: header or payload is shorter than the header promises.
    """
    p = Path(path)
    with _open(p) as fh:
        magic = int.from_bytes(_read_exact(fh, 4, p, "magic"), "big")
        if expect_magic is not None:
            if magic != expect_magic:
                raise BadMagic(
                    f"{p}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
                )
        elif magic >> 8 != 0x08 or not 1 <= (magic & 0xFF) <= 4:
            raise BadMagic(f"{p}: magic 0x{magic:08x} is not an unsigned-byte IDX header")
        rank = magic & 0xFF
        dims = [
            int.from_bytes(_read_exact(fh, 4, p, f"dimension {i}"), "big")
            for i in range(rank)
        ]
        count = int(np.prod(dims)) if dims else 0
        payload = _read_exact(fh, count, p, "payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Serialize an unsigned-byte array as IDX, inverse of :func:`read_idx`."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    p = Path(path)
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "wb") as fh:
        fh.write((0x0800 | arr.ndim).to_bytes(4, "big"))
        for d in arr.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(arr.tobytes())


def load_mnist_arrays(
    images_path: str | Path, labels_path: str | Path
) -> tuple[np.ndarray, np.ndarray]:
    """Images flattened to (n, 784) float64 in [0, 1] and labels as (n,) ints.

    Raises:
        BadMagic, TruncatedFile: malformed files.
        ValueError: image and label counts disagree.
    """
    images = read_idx(images_path, expect_magic=IMAGES_MAGIC)
    labels = read_idx(labels_path, expect_magic=LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


class _PixelRow(Mapping):
    """Read-only mapping view of one image row, keyed by input copy names."""

    __slots__ = ("_pixels", "_row", "_prefix")

    def __init__(self, pixels: np.ndarray, row: int, prefix: str):
        self._pixels = pixels
        self._row = row
        self._prefix = prefix

    def __getitem__(self, key: str) -> np.ndarray:
        head, _, idx = key.partition(":")
        if head != self._prefix or not idx.isdigit():
            raise KeyError(key)
        i = int(idx)
        if i >= self._pixels.shape[1]:
            raise KeyError(key)
        return self._pixels[self._row, i : i + 1]

    def __iter__(self) -> Iterator[str]:
        return (f"{self._prefix}:{i}" for i in range(self._pixels.shape[1]))

    def __len__(self) -> int:
        return self._pixels.shape[1]


def dataset_from_arrays(
    pixels: np.ndarray, labels: np.ndarray, prefix: str = "px", classes: int = 10
) -> Dataset:
    """Wrap flat pixel and label arrays as a dataset with one-hot targets."""
    pixels = np.asarray(pixels, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    eye = np.eye(classes)
    return Dataset(
        inputs=tuple(_PixelRow(pixels, i, prefix) for i in range(pixels.shape[0])),
        targets=tuple(eye[l] for l in labels),
    )


def load_mnist_idx(
    images_path: str | Path, labels_path: str | Path, prefix: str = "px"
) -> Dataset:
    """One dataset from an IDX image/label file pair.

    Pixels land in [0, 1] as scalar inputs named ``prefix:i`` (matching the
    bundled blueprint's counted input group); labels become one-hot vectors
    over ten classes.
    """
    pixels, labels = load_mnist_arrays(images_path, labels_path)
    return dataset_from_arrays(pixels, labels, prefix=prefix)


def default_mnist_dir() -> Path:
    """The data directory: ``$LIFTLAB_MNIST_DIR`` if set, else ``./data/mnist``."""
    env = os.environ.get(MNIST_DIR_ENV)
    return Path(env) if env else Path("data") / "mnist"


def locate_mnist(
    split: str = "train", root: str | Path | None = None
) -> tuple[Path, Path] | None:
    """Paths of one split's image/label files under ``root``, or None.

    Accepts the canonical filenames with or without a ``.gz`` suffix.
    """
    if split not in _SPLIT_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) if root is not None else default_mnist_dir()
    found = []
    for name in _SPLIT_FILES[split]:
        for cand in (base / name, base / (name + ".gz")):
            if cand.is_file():
                found.append(cand)
                break
        else:
            return None
    return found[0], found[1]
