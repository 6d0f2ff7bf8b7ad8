"""CIFAR-10 ingestion, augmentation and batching.

The python-pickle archive is read straight from the ``.tar.gz`` after its MD5
is checked.  Images stay ``uint8`` in memory; augmentation (pad-4 random crop,
horizontal flip) and per-channel normalization happen per batch, driven by an
explicit ``torch.Generator`` so a seed fixes the whole input stream.
"""
from __future__ import annotations

import hashlib
import io
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "CIFAR10_URL",
    "CIFAR10_MD5",
    "DATA_ENV",
    "DatasetUnavailable",
    "ChecksumError",
    "Split",
    "Dataset",
    "default_root",
    "md5sum",
    "fetch_archive",
    "load_dataset",
    "synthetic_dataset",
    "augment",
    "iterate_batches",
]

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"
ARCHIVE_NAME = "cifar-10-python.tar.gz"
DATA_ENV = "POLYMGNET_DATA"
TRAIN_MEMBERS = tuple(f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6))
TEST_MEMBER = "cifar-10-batches-py/test_batch"


class DatasetUnavailable(FileNotFoundError):
    pass


class ChecksumError(ValueError):
    pass


@dataclass
class Split:
    images: torch.Tensor  # uint8, (N, 3, 32, 32)
    labels: torch.Tensor  # int64, (N,)

    def __len__(self) -> int:
        return int(self.labels.numel())

    def subset(self, n: int | None, seed: int = 0) -> "Split":
        if n is None or n >= len(self):
            return self
        idx = torch.randperm(len(self), generator=torch.Generator().manual_seed(seed))[:n]
        idx, _ = idx.sort()
        return Split(self.images[idx], self.labels[idx])


@dataclass
class Dataset:
    train: Split
    test: Split
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    source: str = "cifar10"
    num_classes: int = 10


def default_root() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "polymgnet")).expanduser()


def md5sum(path: Path, chunk: int = 1 << 20) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def fetch_archive(root: str | Path | None = None, download: bool = False, md5: str = CIFAR10_MD5) -> Path:
    """Locate (or download) the archive and verify its checksum."""
    root = Path(root) if root is not None else default_root()
    path = root / ARCHIVE_NAME
    if not path.exists():
        if not download:
            raise DatasetUnavailable(
                f"{path} not found. Place {ARCHIVE_NAME} there (from {CIFAR10_URL}), "
                f"set ${DATA_ENV} to its directory, or enable download.")
        root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".part")
        try:
            urllib.request.urlretrieve(CIFAR10_URL, tmp)
        except OSError as exc:
            raise DatasetUnavailable(f"download of {CIFAR10_URL} failed: {exc}") from exc
        tmp.rename(path)
    digest = md5sum(path)
    if digest != md5:
        raise ChecksumError(f"{path} has MD5 {digest}, expected {md5}; refusing to use it")
    return path


def _read_batch(tar: tarfile.TarFile, name: str) -> tuple[np.ndarray, np.ndarray]:
    member = tar.extractfile(name)
    if member is None:
        raise DatasetUnavailable(f"archive member {name} missing")
    entry = pickle.load(io.BytesIO(member.read()), encoding="bytes")
    data = np.asarray(entry[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
    return data, np.asarray(entry[b"labels"], dtype=np.int64)


def _channel_stats(images: torch.Tensor) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = images.to(torch.float64) / 255.0
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3), unbiased=False)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def load_dataset(root: str | Path | None = None, download: bool = False, md5: str = CIFAR10_MD5) -> Dataset:
    """Train/test splits with normalization statistics taken from the training images."""
    path = fetch_archive(root, download, md5)
    with tarfile.open(path, "r:gz") as tar:
        parts = [_read_batch(tar, name) for name in TRAIN_MEMBERS]
        test_x, test_y = _read_batch(tar, TEST_MEMBER)
    train = Split(torch.from_numpy(np.concatenate([p[0] for p in parts])),
                  torch.from_numpy(np.concatenate([p[1] for p in parts])))
    test = Split(torch.from_numpy(test_x), torch.from_numpy(test_y))
    mean, std = _channel_stats(train.images)
    return Dataset(train, test, mean, std, "cifar10")


def synthetic_dataset(n_train: int = 2048, n_test: int = 512, seed: int = 0, num_classes: int = 10,
                      noise: float = 40.0) -> Dataset:
    """CIFAR-shaped stand-in: one smooth random template per class plus pixel noise."""
    gen = torch.Generator().manual_seed(seed)
    coarse = torch.rand(num_classes, 3, 4, 4, generator=gen)
    templates = F.interpolate(coarse, size=(32, 32), mode="bilinear", align_corners=False) * 160 + 48

    def draw(n):
        labels = torch.randint(0, num_classes, (n,), generator=gen)
        x = templates[labels] + noise * torch.randn(n, 3, 32, 32, generator=gen)
        return Split(x.round().clamp(0, 255).to(torch.uint8), labels)

    train, test = draw(n_train), draw(n_test)
    mean, std = _channel_stats(train.images)
    return Dataset(train, test, mean, std, f"synthetic(seed={seed})", num_classes)


def augment(images: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip."""
    n, c, h, w = images.shape
    padded = F.pad(images, (pad, pad, pad, pad))
    oy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    ox = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    rows = oy[:, None] + torch.arange(h)
    cols = ox[:, None] + torch.arange(w)
    cols = torch.where(flip[:, None], cols.flip(1), cols)
    return padded[torch.arange(n)[:, None, None, None], torch.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def normalize(images: torch.Tensor, mean, std, dtype=torch.float32) -> torch.Tensor:
    x = images.to(dtype) / 255.0
    m = torch.tensor(mean, dtype=dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=dtype).view(1, -1, 1, 1)
    return (x - m) / s


def iterate_batches(split: Split, batch_size: int, mean, std, *, train: bool = False,
                    generator: torch.Generator | None = None,
                    dtype=torch.float32) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Shuffled, augmented batches when ``train``; the split in order otherwise."""
    n = len(split)
    if train:
        if generator is None:
            raise ValueError("training batches need an explicit generator")
        order = torch.randperm(n, generator=generator)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = split.images[idx]
        if train:
            x = augment(x, generator)
        yield normalize(x, mean, std, dtype), split.labels[idx]
