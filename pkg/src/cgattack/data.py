"""Procedural image datasets and open-set splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE_STD = 0.05

# One shape family per class, cycled when there are more classes than families.
SHAPES = ("hbar", "vbar", "disk", "ring", "cross", "diag", "checker", "frame")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    num_classes: int
    class_names: tuple[str, ...] = ()
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError(f"bad dataset shapes {self.images.shape}, {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside [0, num_classes)")
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(self.num_classes))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       self.class_names, self.split if split is None else split)

    def relabel(self, classes) -> "Dataset":
        """Keep only ``classes`` and renumber them ``0..len(classes)-1`` in the given order."""
        classes = [int(c) for c in classes]
        keep = np.flatnonzero(np.isin(self.labels, classes))
        lookup = {c: i for i, c in enumerate(classes)}
        labels = np.array([lookup[int(v)] for v in self.labels[keep]], dtype=np.int64)
        names = tuple(self.class_names[c] for c in classes)
        return Dataset(self.images[keep], labels, len(classes), names, self.split)


@dataclass
class DataConfig:
    num_classes: int = 8
    n_per_class: int = 200
    H: int = 16
    W: int = 16
    C: int = 1
    seed: int = 0
    jitter: float = 0.15  # shape centre offset range, as a fraction of the side


def _render(shape: str, h: int, w: int, rng: np.random.Generator, jitter: float = 0.15) -> np.ndarray:
    """Binary-ish mask in [0, 1] of one randomly placed shape."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.5 - jitter, 0.5 + jitter) * (h - 1)
    cx = rng.uniform(0.5 - jitter, 0.5 + jitter) * (w - 1)
    size = rng.uniform(0.25, 0.4) * min(h, w)
    thick = max(1.0, size * rng.uniform(0.25, 0.4))
    dy, dx = yy - cy, xx - cx
    if shape == "hbar":
        return ((np.abs(dy) <= thick / 2) & (np.abs(dx) <= size)).astype(float)
    if shape == "vbar":
        return ((np.abs(dx) <= thick / 2) & (np.abs(dy) <= size)).astype(float)
    if shape == "disk":
        return (np.hypot(dy, dx) <= size * 0.8).astype(float)
    if shape == "ring":
        rad = np.hypot(dy, dx)
        return ((rad <= size) & (rad >= size - thick)).astype(float)
    if shape == "cross":
        box = (np.abs(dx) <= size) & (np.abs(dy) <= size)
        return (box & ((np.abs(dx) <= thick / 2) | (np.abs(dy) <= thick / 2))).astype(float)
    if shape == "diag":
        box = (np.abs(dx) <= size) & (np.abs(dy) <= size)
        return (box & ((np.abs(dx - dy) <= thick / 2) | (np.abs(dx + dy) <= thick / 2))).astype(float)
    if shape == "checker":
        cell = max(2, int(round(size / 2)))
        return (((yy + rng.integers(cell)) // cell + (xx + rng.integers(cell)) // cell) % 2).astype(float)
    if shape == "frame":
        box = (np.abs(dx) <= size) & (np.abs(dy) <= size)
        inner = (np.abs(dx) <= size - thick) & (np.abs(dy) <= size - thick)
        return (box & ~inner).astype(float)
    raise ValueError(f"unknown shape {shape!r}")


def gen_synthetic_dataset(cfg: DataConfig, split: str = "train") -> Dataset:
    """Balanced dataset of rendered shapes with Gaussian pixel noise; deterministic in ``cfg.seed``."""
    if cfg.H < 8 or cfg.W < 8:
        raise ValueError(f"images must be at least 8x8, got {cfg.H}x{cfg.W}")
    if cfg.n_per_class < 1 or cfg.num_classes < 2 or cfg.C < 1:
        raise ValueError("need n_per_class >= 1, num_classes >= 2 and C >= 1")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_classes * cfg.n_per_class
    labels = np.repeat(np.arange(cfg.num_classes), cfg.n_per_class)
    images = np.empty((n, cfg.H, cfg.W, cfg.C))
    for i, label in enumerate(labels):
        mask = _render(SHAPES[label % len(SHAPES)], cfg.H, cfg.W, rng, cfg.jitter)
        fg = rng.uniform(0.6, 1.0, size=cfg.C)
        bg = rng.uniform(0.0, 0.3, size=cfg.C)
        img = bg + mask[..., None] * (fg - bg)
        images[i] = img + NOISE_STD * rng.standard_normal(img.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    names = tuple(SHAPES[c % len(SHAPES)] + ("" if c < len(SHAPES) else str(c // len(SHAPES)))
                  for c in range(cfg.num_classes))
    return Dataset(images[order], labels[order], cfg.num_classes, names, split)


def train_test(cfg: DataConfig, n_test_per_class: int) -> tuple[Dataset, Dataset]:
    """Train and test sets rendered from independent streams of the same seed."""
    full = gen_synthetic_dataset(DataConfig(cfg.num_classes, cfg.n_per_class + n_test_per_class,
                                            cfg.H, cfg.W, cfg.C, cfg.seed, cfg.jitter))
    train_idx, test_idx = [], []
    for c in range(cfg.num_classes):
        idx = np.flatnonzero(full.labels == c)
        train_idx.extend(idx[: cfg.n_per_class])
        test_idx.extend(idx[cfg.n_per_class:])
    return full.subset(np.sort(train_idx), "train"), full.subset(np.sort(test_idx), "test")


@dataclass
class OpenSetSplit:
    case: int
    surrogate_set: Dataset
    target_set: Dataset
    surrogate_classes: tuple[int, ...]
    target_classes: tuple[int, ...]


def split_openset(full: Dataset, case: int, seed: int = 0) -> OpenSetSplit:
    """Case 1: each class's images split in half. Case 2: the classes split in half.

    In case 2 both halves keep the original class indices; use
    :meth:`Dataset.relabel` to train a classifier on one half.
    """
    rng = np.random.default_rng(seed)
    classes = np.arange(full.num_classes)
    if case == 1:
        a, b = [], []
        for c in classes:
            idx = rng.permutation(np.flatnonzero(full.labels == c))
            a.extend(idx[: len(idx) // 2])
            b.extend(idx[len(idx) // 2:])
        return OpenSetSplit(1, full.subset(np.sort(a)), full.subset(np.sort(b)),
                            tuple(classes), tuple(classes))
    if case == 2:
        if full.num_classes < 2 or full.num_classes % 2:
            raise ValueError(f"case 2 needs an even number of classes >= 2, got {full.num_classes}")
        perm = rng.permutation(classes)
        ca = tuple(sorted(int(c) for c in perm[: len(perm) // 2]))
        cb = tuple(sorted(int(c) for c in perm[len(perm) // 2:]))
        a = np.flatnonzero(np.isin(full.labels, ca))
        b = np.flatnonzero(np.isin(full.labels, cb))
        return OpenSetSplit(2, full.subset(a), full.subset(b), ca, cb)
    raise ValueError(f"case must be 1 or 2, got {case}")
