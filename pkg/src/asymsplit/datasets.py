"""Datasets: IDX ingestion and the synthetic benchmark generator.

The synthetic set places class information on both sides of the
decomposition by construction.  Class pairs are separated by smooth
low-rank templates that survive into ir_main; classes within a pair are
separated (mostly) by high-frequency square-wave textures.

The texture carrier needs care: a convolution ahead of the decomposition
phase-shifts a generic carrier wave, and the shifted quadrature spills
energy into the kept low band, where the main path can find it.  The
grid Nyquist frequency is phase-degenerate -- cos and sin alias onto the
same alternating samples -- so the 2-D checkerboard (-1)^(x+y) maps to
an exact scalar multiple of itself under *any* convolution kernel.  Its
blockwise DCT energy sits almost entirely outside the kept corner (about
0.6% inside for t=8, t'=4), and no linear front end can move it there.
The two classes of a pair carry the checkerboard with opposite signs:
invisible to the truncated main part, while sign quantization hands the
flipped bits to the residual untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import dct_matrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_MAX_CLASSES = 8


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        for name, y in (("train", self.train_y), ("val", self.val_y)):
            y = np.asarray(y)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        present = np.unique(self.train_y)
        if len(present) < self.num_classes:
            raise ValueError(
                f"train split covers {len(present)} of {self.num_classes} classes"
            )


# ---------------------------------------------------------------------------
# IDX files (big-endian magic + dims, then unsigned bytes)
# ---------------------------------------------------------------------------

def load_idx_images(path) -> np.ndarray:
    """(n, 1, rows, cols) float64 images scaled into [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ValueError(f"idx image file truncated at offset {len(raw)}: no header")
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad idx image magic 0x{magic:08x} at offset 0")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise ValueError(f"idx image file length {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16).astype(np.float64) / 255.0
    return data.reshape(n, 1, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"idx label file truncated at offset {len(raw)}: no header")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"bad idx label magic 0x{magic:08x} at offset 0")
    if len(raw) != 8 + n:
        raise ValueError(f"idx label file length {len(raw)} != expected {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx_dataset(images_path, labels_path, val_fraction: float = 0.2) -> Dataset:
    """Pair up IDX images and labels, splitting the tail off for validation."""
    xs = load_idx_images(images_path)
    ys = load_idx_labels(labels_path)
    if len(xs) != len(ys):
        raise ValueError(f"{len(xs)} images but {len(ys)} labels")
    n_val = int(round(len(xs) * val_fraction))
    n_train = len(xs) - n_val
    num_classes = int(ys.max()) + 1
    return Dataset(
        train_x=xs[:n_train], train_y=ys[:n_train],
        val_x=xs[n_train:], val_y=ys[n_train:],
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

def _smooth_map(rng, side: int, cutoff: int, basis: np.ndarray) -> np.ndarray:
    """Unit-norm random field supported on the lowest cutoff^2 frequencies."""
    coeffs = np.zeros((side, side))
    coeffs[:cutoff, :cutoff] = rng.normal(size=(cutoff, cutoff))
    field = basis.T @ coeffs @ basis
    return field / np.linalg.norm(field)


def _texture_map(side: int) -> np.ndarray:
    """The unit-amplitude Nyquist checkerboard (-1)^(x+y)."""
    signs = 1.0 - 2.0 * (np.arange(side) % 2)
    return np.outer(signs, signs)


def synthetic_dataset(
    n: int = 2000,
    num_classes: int = 4,
    rank: int = 3,
    cutoff: int = 4,
    noise: float = 0.4,
    seed: int = 0,
    side: int = 16,
    channels: int = 3,
    gamma: float = 0.1,
    texture_amp: float = 0.5,
    spread: float = 0.25,
    val_fraction: float = 0.2,
) -> Dataset:
    """Class-structured images: smooth pair templates, a gamma-scaled
    smooth within-pair offset, per-class high-frequency textures, shared
    smooth variability of the given rank, and pixel noise."""
    if num_classes < 2 or num_classes > _MAX_CLASSES:
        raise ValueError(f"num_classes must be in [2, {_MAX_CLASSES}]")
    if n < num_classes:
        raise ValueError(f"need at least one sample per class, got n={n}")
    if side % 8:
        raise ValueError(f"side must be a multiple of 8, got {side}")
    rng = np.random.default_rng(seed)
    basis = dct_matrix(side)

    num_pairs = (num_classes + 1) // 2
    pair_maps = [_smooth_map(rng, side, cutoff, basis) for _ in range(num_pairs)]
    delta_map = _smooth_map(rng, side, cutoff, basis)
    common_maps = [_smooth_map(rng, side, cutoff, basis) for _ in range(rank)]
    texture = _texture_map(side)

    def unit(v):
        v = np.asarray(v, dtype=np.float64)
        return v / np.linalg.norm(v)

    u_pair = unit([1.0] * channels)
    u_delta = unit([1.0] + [-1.0] * (channels - 1))
    u_texture = unit([1.0, 0.0, -1.0][:channels] if channels > 1 else [1.0])
    u_common = [unit(rng.normal(size=channels)) for _ in range(rank)]

    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    xs = np.empty((n, channels, side, side))
    for i in range(n):
        cls = labels[i]
        pair, flip = cls // 2, 1.0 - 2.0 * (cls % 2)
        img = np.multiply.outer(u_pair, pair_maps[pair])
        img = img + gamma * flip * np.multiply.outer(u_delta, delta_map)
        img = img + texture_amp * flip * np.multiply.outer(u_texture, texture)
        for k in range(rank):
            img = img + spread * rng.normal() * np.multiply.outer(u_common[k], common_maps[k])
        img = img + noise * rng.normal(size=img.shape)
        xs[i] = img

    n_val = int(round(n * val_fraction))
    n_train = n - n_val
    return Dataset(
        train_x=xs[:n_train], train_y=labels[:n_train],
        val_x=xs[n_train:], val_y=labels[n_train:],
        num_classes=num_classes,
    )


def class_means(data: Dataset) -> np.ndarray:
    """Per-class mean training image, stacked (L, c, h, w)."""
    out = []
    for cls in range(data.num_classes):
        out.append(data.train_x[data.train_y == cls].mean(axis=0))
    return np.stack(out)
