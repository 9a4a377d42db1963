"""Datasets, labeled/unlabeled splits, augmentation and paired batches.

Binary record format (CIFAR-10 and converted SVHN): each record is 3073
bytes, one label byte followed by 3072 pixel bytes laid out as three
32x32 planes (R, G, B), each row-major. Pixels map linearly from [0, 255]
to [-1, 1].
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import derive, generator
from .schedule import sample_lambda

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
SVHN_FILES = {"train": "svhn_train.bin", "test": "svhn_test.bin"}
DATA_ROOT_ENV = "CCGAN_DATA"
AUG_STREAM = 0xA5


class DataError(Exception):
    """Dataset files are missing, truncated or malformed."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    noise: float = 0.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)) or np.abs(self.inputs).max(initial=0.0) > 1.0:
            raise DataError("inputs must be finite and within [-1, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.name, self.noise)


# --------------------------------------------------------------------------
# binary records


def read_records(path: str | os.PathLike, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Parse a file of 3073-byte records into (images in [-1, 1], labels)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing data file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        whole = raw.size // RECORD_BYTES
        raise DataError(
            f"truncated file {path}: {raw.size} bytes is not a positive multiple of {RECORD_BYTES}; "
            f"partial record starts at offset {whole * RECORD_BYTES}, expected {(whole + 1) * RECORD_BYTES} bytes"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"bad label byte {labels[i]} in record {i} (offset {i * RECORD_BYTES}) of {path}")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 127.5 - 1.0
    return images, labels


def write_records(path: str | os.PathLike, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 CHW images (N x 3 x 32 x 32) and labels as 3073-byte records."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images_u8.shape[1:] != IMAGE_SHAPE or images_u8.shape[0] != labels.shape[0]:
        raise DataError(f"expected N x {IMAGE_SHAPE} images with N labels, got {images_u8.shape}, {labels.shape}")
    rec = np.concatenate([labels[:, None], images_u8.reshape(len(labels), -1)], axis=1)
    rec.tofile(Path(path))


def _resolve_dir(root, sub_candidates: tuple[str, ...], marker: str) -> Path:
    root = Path(root)
    for cand in ("", *sub_candidates):
        d = root / cand if cand else root
        if (d / marker).is_file():
            return d
    raise DataError(f"{marker} not found under {root}")


def load_cifar10(directory, split: str = "train") -> Dataset:
    files = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    d = _resolve_dir(directory, ("cifar-10-batches-bin", "cifar10"), files[0])
    parts = [read_records(d / f) for f in files]
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10,
                   f"cifar10-{split}")


def load_svhn(directory, split: str = "train") -> Dataset:
    d = _resolve_dir(directory, ("svhn",), SVHN_FILES[split])
    images, labels = read_records(d / SVHN_FILES[split])
    return Dataset(images, labels, 10, f"svhn-{split}")


def convert_svhn(mat_path, out_path) -> int:
    """Convert an SVHN ``.mat`` container (X: 32x32x3xN, y: N with 10 for digit 0) to records."""
    from scipy.io import loadmat

    try:
        mat = loadmat(str(mat_path))
    except FileNotFoundError:
        raise DataError(f"missing SVHN file: {mat_path}") from None
    if "X" not in mat or "y" not in mat:
        raise DataError(f"{mat_path} lacks X/y arrays")
    x = np.asarray(mat["X"])
    if x.shape[:3] != (32, 32, 3):
        raise DataError(f"unexpected SVHN image array shape {x.shape}")
    images = x.transpose(3, 2, 0, 1)
    labels = np.asarray(mat["y"]).reshape(-1).astype(np.int64) % 10
    write_records(out_path, images, labels)
    return int(labels.size)


# --------------------------------------------------------------------------
# synthetic sets


def _two_moons(n, noise, rng):
    n0 = (n + 1) // 2
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n - n0)
    pts = np.concatenate([
        np.stack([np.cos(t0), np.sin(t0)], axis=1),
        np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
    ])
    pts = pts + rng.normal(0.0, noise, pts.shape)
    scale = 1.0 / (1.5 + 4.0 * noise)
    pts = (pts - np.array([0.5, 0.25])) * scale
    labels = np.concatenate([np.zeros(n0, np.int64), np.ones(n - n0, np.int64)])
    return np.clip(pts, -1.0, 1.0), labels, 2, noise * scale


def _blobs(n, noise, rng, num_classes):
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    centers = 0.6 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(n) % num_classes
    labels.sort()
    pts = centers[labels] + rng.normal(0.0, 1.0, (n, 2)) * noise
    return np.clip(pts, -1.0, 1.0), labels.astype(np.int64), num_classes, noise


def _bars(n, noise, rng):
    labels = np.arange(n) % 2
    labels.sort()
    imgs = -np.ones((n, 1, 8, 8))
    pos = rng.integers(1, 7, n)
    for i in range(n):
        if labels[i] == 0:
            imgs[i, 0, pos[i], :] = 1.0
        else:
            imgs[i, 0, :, pos[i]] = 1.0
    imgs = imgs + rng.normal(0.0, noise, imgs.shape)
    return np.clip(imgs, -1.0, 1.0), labels.astype(np.int64), 2, noise


def make_synthetic(kind: str, n: int, noise: float, seed: int, num_classes: int = 3) -> Dataset:
    """Desk-scale datasets: ``two_moons`` (2-D, K=2), ``blobs`` (2-D, K clusters), ``bars`` (1x8x8, K=2)."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "two_moons":
        x, y, k, eff = _two_moons(n, noise, rng)
    elif kind == "blobs":
        x, y, k, eff = _blobs(n, noise, rng, num_classes)
    elif kind == "bars":
        x, y, k, eff = _bars(n, noise, rng)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    return Dataset(x, y, k, kind, noise=eff)


SYNTHETIC = ("two_moons", "blobs", "bars")


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def load_dataset(name: str, split: str = "train", n: int = 1000, noise: float = 0.1, seed: int = 0,
                 num_classes: int = 3, root=None) -> Dataset:
    """Load by name; synthetic test splits come from an independent seed stream."""
    if name in SYNTHETIC:
        stream = 0 if split == "train" else 1
        s = int(np.random.default_rng([seed, stream]).integers(2**31))
        return make_synthetic(name, n, noise, s, num_classes=num_classes)
    root = data_root() if root is None else Path(root)
    if name == "cifar10":
        return load_cifar10(root, split)
    if name == "svhn":
        return load_svhn(root, split)
    raise DataError(f"unknown dataset {name!r}")


# --------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    n_labeled: int
    seed: int = 0
    stratified: bool = True


def split(ds: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (labeled indices, unlabeled indices); the unlabeled pool is the whole set."""
    n = len(ds)
    if not 0 < spec.n_labeled <= n:
        raise ValueError(f"n_labeled must be in [1, {n}], got {spec.n_labeled}")
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        k = ds.num_classes
        if spec.n_labeled % k:
            raise ValueError(f"stratified split needs n_labeled divisible by {k}, got {spec.n_labeled}")
        per = spec.n_labeled // k
        chosen = []
        for c in range(k):
            pool = np.flatnonzero(ds.labels == c)
            if pool.size < per:
                raise ValueError(f"class {c} has {pool.size} samples, {per} requested")
            chosen.append(rng.choice(pool, size=per, replace=False))
        labeled = np.sort(np.concatenate(chosen))
    else:
        labeled = np.sort(rng.choice(n, size=spec.n_labeled, replace=False))
    return labeled, np.arange(n)


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationSpec:
    """Random translation (+ optional flip) for images; Gaussian jitter for vectors."""

    max_translate_px: int = 2
    horizontal_flip: bool = False
    pad_mode: str = "reflect"
    jitter_std: float = 0.0

    def __post_init__(self):
        if self.max_translate_px < 0:
            raise ValueError("max_translate_px must be non-negative")
        if self.pad_mode not in ("reflect", "zero"):
            raise ValueError(f"pad_mode must be 'reflect' or 'zero', got {self.pad_mode!r}")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be non-negative")


def translate(img: np.ndarray, dy: int, dx: int, pad_mode: str = "reflect") -> np.ndarray:
    """Shift a C x H x W image so that ``out[:, i, j] = img[:, i - dy, j - dx]``."""
    m = max(abs(dy), abs(dx))
    if m == 0:
        return img.copy()
    mode = "reflect" if pad_mode == "reflect" else "constant"
    padded = np.pad(img, ((0, 0), (m, m), (m, m)), mode=mode)
    h, w = img.shape[1:]
    return padded[:, m - dy : m - dy + h, m - dx : m - dx + w]


def augment(x: np.ndarray, spec: AugmentationSpec, seed) -> np.ndarray:
    """Per-sample random perturbation; sample ``i`` depends only on ``(seed, i)``."""
    x = np.asarray(x, dtype=np.float64)
    rng = generator(seed, AUG_STREAM)
    if x.ndim == 4:
        m = spec.max_translate_px
        if m == 0 and not spec.horizontal_flip:
            return x.copy()
        u = rng.random((x.shape[0], 3))
        shifts = np.floor(u[:, :2] * (2 * m + 1)).astype(int) - m
        flips = (u[:, 2] < 0.5) & spec.horizontal_flip
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            img = translate(x[i], int(shifts[i, 0]), int(shifts[i, 1]), spec.pad_mode)
            out[i] = img[:, :, ::-1] if flips[i] else img
        return out
    if spec.jitter_std == 0.0:
        return x.copy()
    noise = rng.standard_normal(x.shape) * spec.jitter_std
    return np.clip(x + noise, -1.0, 1.0)


def augmentation_for(ds: Dataset, spec: AugmentationSpec | None = None) -> AugmentationSpec:
    """Default spec for a dataset: translation for images, jitter of half the noise level for vectors."""
    if spec is not None:
        return spec
    if ds.is_image:
        return AugmentationSpec(max_translate_px=2, horizontal_flip=ds.name.startswith("cifar"))
    return AugmentationSpec(max_translate_px=0, jitter_std=ds.noise / 2.0)


# --------------------------------------------------------------------------
# batching


@dataclass
class PairedBatch:
    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray
    xi: int
    xi_prime: int
    permutation: np.ndarray
    lam: float
    index: int


def num_batches(n_unlabeled: int, batch_size: int) -> int:
    return n_unlabeled // batch_size


def batches(ds: Dataset, split_idx: tuple[np.ndarray, np.ndarray], batch_size: int, epoch_seed,
            alpha: float = 0.1, labeled_batch_size: int | None = None) -> Iterator[PairedBatch]:
    """One epoch of paired batches (one pass over the unlabeled pool, last partial batch dropped).

    The labeled pool is cycled with a fresh shuffle each time it runs out, so
    pools smaller than the batch are repeated within a batch.
    """
    labeled, unlabeled = (np.asarray(a) for a in split_idx)
    if labeled.size == 0 or unlabeled.size == 0:
        raise ValueError("labeled and unlabeled pools must be non-empty")
    if batch_size <= 0 or batch_size > unlabeled.size:
        raise ValueError(f"batch_size {batch_size} must be in [1, {unlabeled.size}]")
    bl = batch_size if labeled_batch_size is None else labeled_batch_size
    n_b = num_batches(unlabeled.size, batch_size)
    u_order = unlabeled[generator(epoch_seed, 0).permutation(unlabeled.size)]
    n_cycles = -(-n_b * bl // labeled.size)
    l_order = np.concatenate([labeled[generator(epoch_seed, 1, c).permutation(labeled.size)] for c in range(n_cycles)])
    for b in range(n_b):
        li = l_order[b * bl : (b + 1) * bl]
        ui = u_order[b * batch_size : (b + 1) * batch_size]
        xi, xi_prime = (int(s) for s in generator(epoch_seed, 2, b).integers(0, 2**31 - 1, size=2))
        perm = generator(epoch_seed, 3, b).permutation(batch_size)
        lam = sample_lambda(alpha, derive(epoch_seed, 4, b))
        yield PairedBatch(ds.inputs[li], ds.labels[li], ds.inputs[ui], xi, xi_prime, perm, lam, b)
