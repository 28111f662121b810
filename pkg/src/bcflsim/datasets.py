"""Dataset ingestion: IDX files (optionally gzipped) and a seeded synthetic generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .learning import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
PACKAGED_MNIST = Path(__file__).resolve().parent / "data" / "mnist5k"


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read(path: str | Path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, expect_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into an array shaped by its header."""
    if len(data) < 4:
        raise IdxFormatError("truncated header", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expect_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated dimension list", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != count:
        raise IdxFormatError(f"dimensions {dims} need {count} payload bytes, found {len(data) - header}", header)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images = parse_idx(_read(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64))


def load_mnist_dir(directory: str | Path) -> Dataset:
    d = Path(directory)
    images = sorted(d.glob("*images*idx3*"))
    labels = sorted(d.glob("*labels*idx1*"))
    if not images or not labels:
        raise FileNotFoundError(f"no IDX image/label pair in {d}")
    return load_idx(images[0], labels[0])


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    dims: int = 784
    per_class: int = 500
    spread: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2 or self.dims < 1 or self.per_class < 1:
            raise ValueError("synthetic data needs >= 2 classes, >= 1 dim and >= 1 sample per class")
        if self.spread <= 0:
            raise ValueError("spread must be positive")


def synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters, one mean per class drawn uniformly from [0.2, 0.8]^dims,
    clipped to [0, 1]. Rows are interleaved by class."""
    rng = np.random.default_rng(spec.seed)
    means = rng.uniform(0.2, 0.8, size=(spec.classes, spec.dims))
    labels = np.tile(np.arange(spec.classes), spec.per_class)
    noise = rng.normal(0.0, spec.spread, size=(labels.size, spec.dims))
    features = np.clip(means[labels] + noise, 0.0, 1.0)
    return Dataset(features, labels.astype(np.int64))


def load_dataset(source: dict) -> Dataset:
    """`source` is {"kind": "idx", "path": dir} / {"kind": "idx", "images": .., "labels": ..}
    / {"kind": "mnist5k"} / {"kind": "synthetic", ...SyntheticSpec fields}."""
    kind = source.get("kind", "synthetic")
    if kind == "synthetic":
        return synthetic(SyntheticSpec(**{k: v for k, v in source.items() if k != "kind"}))
    if kind == "mnist5k":
        return load_mnist_dir(source.get("path", PACKAGED_MNIST))
    if kind == "idx":
        if "images" in source:
            return load_idx(source["images"], source["labels"])
        return load_mnist_dir(source["path"])
    raise ValueError(f"unknown dataset kind {kind!r}")
