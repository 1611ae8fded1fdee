"""Datasets: a synthetic shape-by-texture task and the CIFAR-10 binary format."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .vision import bicubic_resize

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    """Malformed dataset file."""


class ConfigError(ValueError):
    """Invalid dataset configuration."""


@dataclass
class Dataset:
    """Labelled images stored as one ``N×C×H×W`` float array."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} do not match {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def subset(self, idx) -> "Dataset":
        meta = {k: v[idx] if isinstance(v, np.ndarray) and len(v) == len(self) else v
                for k, v in self.meta.items()}
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, meta)


# ---------------------------------------------------------------------------
# synthetic scale task

SHAPES = ("disk", "square", "triangle", "cross")

# 2×2 tiles, all with mean 0.5. Any 2-periodic pattern is flattened to its
# mean by a 2× or 4× bicubic reduction, so texture survives only at full size.
TEXTURES = {
    "hstripes": np.array([[1.0, 1.0], [0.0, 0.0]]),
    "vstripes": np.array([[1.0, 0.0], [1.0, 0.0]]),
    "checks": np.array([[1.0, 0.0], [0.0, 1.0]]),
    "dots": np.array([[1.0, 1 / 3], [1 / 3, 1 / 3]]),
}


@dataclass(frozen=True)
class SyntheticSpec:
    shapes: int = 4
    textures: int = 4
    canvas: int = 64
    train_per_class: int = 200
    val_per_class: int = 50
    noise: float = 0.7
    radius: tuple[float, float] = (19.0, 24.0)
    jitter: float = 3.0
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.shapes * self.textures


def shape_mask(kind: str, canvas: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:canvas, 0:canvas] + 0.5
    dy, dx = y - cy, x - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # upright isosceles, apex at top
        top, bottom = -r, r * 0.8
        half = (dy - top) / (bottom - top) * r
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= half)
    if kind == "cross":
        arm = r * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ConfigError(f"unknown shape {kind!r}")


def texture_plane(kind: str, canvas: int, phase: tuple[int, int]) -> np.ndarray:
    reps = canvas // 2 + 2
    tile = np.tile(TEXTURES[kind], (reps, reps))
    return tile[phase[0]:phase[0] + canvas, phase[1]:phase[1] + canvas]


def render_sample(spec: SyntheticSpec, g: int, t: int, rng: np.random.Generator) -> np.ndarray:
    c = spec.canvas
    cy, cx = c / 2 + rng.uniform(-spec.jitter, spec.jitter, size=2)
    r = rng.uniform(*spec.radius)
    mask = shape_mask(SHAPES[g], c, cy, cx, r)
    tex = texture_plane(list(TEXTURES)[t], c, tuple(rng.integers(0, 2, size=2)))
    img = np.where(mask, tex, 0.0)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def _split(spec: SyntheticSpec, split: str, per_class: int) -> Dataset:
    tag = 0 if split == "train" else 1
    n_cls = spec.num_classes
    images = np.empty((n_cls * per_class, 1, spec.canvas, spec.canvas))
    labels = np.empty(n_cls * per_class, dtype=np.int64)
    gt = np.empty((n_cls * per_class, 2), dtype=np.int64)
    i = 0
    for k in range(per_class):
        for label in range(n_cls):
            g, t = divmod(label, spec.textures)
            rng = np.random.default_rng([spec.seed, tag, k, label])
            images[i] = render_sample(spec, g, t, rng)
            labels[i], gt[i] = label, (g, t)
            i += 1
    return Dataset(images, labels, n_cls, split, {"shape": gt[:, 0], "texture": gt[:, 1]})


def generate_scale_task(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Dataset, Dataset]:
    """Train/val datasets where label = shape * T + texture.

    Shapes are large silhouettes readable at low resolution; textures are
    2-pixel periodic fills that bicubic reduction erases. Each sample is
    drawn from its own seed ``(seed, split, index, label)``.
    """
    if spec.shapes < 2 or spec.textures < 2:
        raise ConfigError("need at least 2 shapes and 2 textures")
    if spec.shapes > len(SHAPES) or spec.textures > len(TEXTURES):
        raise ConfigError(f"at most {len(SHAPES)} shapes and {len(TEXTURES)} textures are available")
    return _split(spec, "train", spec.train_per_class), _split(spec, "val", spec.val_per_class)


def nearest_centroid_accuracy(train: Dataset, val: Dataset, key: str, size: int = 16) -> float:
    """Pixel-level nearest-centroid accuracy at predicting ``meta[key]``
    after bicubic reduction to ``size``×``size``."""
    xt = bicubic_resize(train.images, size, size).reshape(len(train), -1)
    xv = bicubic_resize(val.images, size, size).reshape(len(val), -1)
    yt, yv = train.meta[key], val.meta[key]
    classes = np.unique(yt)
    cents = np.stack([xt[yt == c].mean(axis=0) for c in classes])
    d = ((xv[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == yv).mean())


def separability_report(train: Dataset, val: Dataset, size: int = 16) -> dict[str, float]:
    return {key: nearest_centroid_accuracy(train, val, key, size) for key in ("shape", "texture")}


# ---------------------------------------------------------------------------
# CIFAR-10 binary

def parse_cifar10_bytes(raw: bytes, split: str = "train") -> Dataset:
    """Decode CIFAR-10 binary records: 1 label byte + 3072 plane-major RGB bytes."""
    n_full, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise FormatError(f"truncated record at byte offset {n_full * CIFAR_RECORD} "
                          f"({rest} of {CIFAR_RECORD} bytes)")
    if n_full == 0:
        raise FormatError("empty file")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n_full, CIFAR_RECORD)
    bad = np.flatnonzero(rec[:, 0] > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {rec[i, 0]} > 9 at byte offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(n_full, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), 10, split)


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    return parse_cifar10_bytes(Path(path).read_bytes(), split)


def cifar10_bytes(ds: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar10_bytes` for 3×32×32 datasets."""
    if ds.images.shape[1:] != CIFAR_SHAPE:
        raise FormatError(f"CIFAR records hold 3×32×32 images, got {ds.images.shape[1:]}")
    pix = np.rint(ds.images * 255.0).clip(0, 255).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()


def save_cifar10_binary(ds: Dataset, path):
    Path(path).write_bytes(cifar10_bytes(ds))


# ---------------------------------------------------------------------------
# batching

def batches(ds: Dataset, batch_size: int, rng: np.random.Generator,
            augment: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass over ``ds``; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if augment:
            from .train import augment as _augment
            x = np.stack([_augment(img, rng) for img in x])
        yield x, ds.labels[idx]
