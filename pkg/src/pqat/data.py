"""Datasets: IDX file I/O and deterministic synthetic generators.

All generators key every random choice off an explicit seed, so a dataset is
fully reproducible from (generator, arguments). Inputs are float32; image
inputs loaded from IDX sit exactly on the 256-level grid k/255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream

__all__ = [
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "load_idx_dataset",
    "write_idx",
    "make_gaussian_blobs",
    "make_regression_wave",
    "make_digits_idx",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs plus labels with named index splits."""

    inputs: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"inputs ({len(self.inputs)}) and labels ({len(self.labels)}) differ in length"
            )
        if not self.splits:
            self.splits = {"train": np.arange(len(self.inputs))}

    def __len__(self) -> int:
        return len(self.inputs)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.inputs[idx], self.labels[idx]

    def batches(self, name: str, batch_size: int, rng: RngStream | None = None):
        """Yield (inputs, labels) batches; shuffled deterministically if rng given."""
        idx = self.splits[name]
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            yield self.inputs[sel], self.labels[sel]


def _read_be32(f, path, offset) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated header at byte offset {offset}")
    return struct.unpack(">i", raw)[0]


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into float32 [N, H, W] scaled to the k/255 grid."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_be32(f, path, 0)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        n = _read_be32(f, path, 4)
        h = _read_be32(f, path, 8)
        w = _read_be32(f, path, 12)
        raw = f.read()
    expected = n * h * w
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload holds {len(raw)} bytes at offset 16, expected {expected}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
    return (pixels.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_be32(f, path, 0)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n = _read_be32(f, path, 4)
        raw = f.read()
    if len(raw) != n:
        raise ValueError(f"{path}: payload holds {len(raw)} labels at offset 8, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(image_path, label_path, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Images + labels as a Dataset with [N, 1, H, W] inputs and a train/val split."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if len(images) != len(labels):
        raise ValueError(
            f"image count {len(images)} != label count {len(labels)} "
            f"({image_path} vs {label_path})"
        )
    inputs = images[:, None, :, :]
    n = len(inputs)
    order = RngStream(seed, 9).permutation(n)
    n_val = int(round(n * val_fraction))
    splits = {"train": np.sort(order[n_val:]), "val": np.sort(order[:n_val])}
    return Dataset(inputs, labels, splits)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX: 1-d as labels, 3-d [N,H,W] as images."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        if array.ndim == 1:
            f.write(struct.pack(">ii", IDX_LABEL_MAGIC, array.shape[0]))
        elif array.ndim == 3:
            f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *array.shape))
        else:
            raise ValueError(f"write_idx supports 1-d labels or 3-d images, got ndim={array.ndim}")
        f.write(array.tobytes())


def _split_indices(n: int, val_fraction: float, rng: RngStream) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return {"train": np.sort(order[n_val:]), "val": np.sort(order[:n_val])}


def make_gaussian_blobs(
    n: int,
    classes: int,
    dim: int,
    seed: int,
    separation: float = 4.0,
    spread: float = 1.0,
    val_fraction: float = 0.25,
) -> Dataset:
    """Gaussian class clusters, affinely squashed into [0, 1] per dataset.

    Centers sit on a seeded random sphere of radius ``separation``; samples
    add isotropic noise of scale ``spread``. The squash keeps inputs
    non-negative so unsigned activation quantizers see the full range.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    rng = RngStream(seed, 11)
    centers = rng.normal((classes, dim)).astype(np.float64)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    labels = np.arange(n) % classes
    points = centers[labels] + spread * rng.normal((n, dim)).astype(np.float64)
    lo, hi = points.min(), points.max()
    span = hi - lo if hi > lo else 1.0
    inputs = ((points - lo) / span).astype(np.float32)
    return Dataset(inputs, labels.astype(np.int64), _split_indices(n, val_fraction, rng.spawn(12)))


def make_regression_wave(n: int, seed: int, val_fraction: float = 0.25) -> Dataset:
    """1-d regression: y = sin(2 pi x) + 0.3 sin(6 pi x) on x ~ U[0, 1]."""
    rng = RngStream(seed, 13)
    x = rng.uniform((n, 1)).astype(np.float64)
    y = np.sin(2 * np.pi * x) + 0.3 * np.sin(6 * np.pi * x)
    return Dataset(
        x.astype(np.float32),
        y.astype(np.float32),
        _split_indices(n, val_fraction, rng.spawn(14)),
    )


# 10 glyphs on a 5x7 grid, one string per row, '#' = on.
_GLYPHS = {
    0: (" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "),
    1: ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    2: (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    3: (" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "),
    4: ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    5: ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    6: (" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "),
    7: ("#####", "    #", "   # ", "  #  ", "  #  ", " #   ", " #   "),
    8: (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    9: (" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[c == "#" for c in row] for row in rows], dtype=np.float32)


def make_digits_idx(
    out_dir,
    n_train: int = 2000,
    n_test: int = 400,
    seed: int = 0,
    size: int = 12,
) -> dict[str, Path]:
    """Render a synthetic digits classification set and write it as IDX files.

    Each sample pastes a 5x7 digit glyph at a random offset on a size x size
    canvas, jitters brightness, and adds pixel noise before the uint8
    quantization. Returns the four written paths keyed by
    train_images/train_labels/test_images/test_labels.
    """
    out_dir = Path(out_dir)
    rng = RngStream(seed, 17)
    paths = {}
    for split, count in (("train", n_train), ("test", n_test)):
        images = np.zeros((count, size, size), dtype=np.float32)
        labels = rng.integers(0, 10, (count,)).astype(np.uint8)
        max_dy, max_dx = size - 7, size - 5
        offsets_y = rng.integers(0, max_dy + 1, (count,))
        offsets_x = rng.integers(0, max_dx + 1, (count,))
        brightness = 0.6 + 0.4 * rng.uniform((count,))
        noise = 0.12 * rng.normal((count, size, size))
        for i in range(count):
            glyph = _glyph_array(int(labels[i])) * brightness[i]
            y0, x0 = int(offsets_y[i]), int(offsets_x[i])
            images[i, y0 : y0 + 7, x0 : x0 + 5] = glyph
        images = np.clip(images + noise, 0.0, 1.0)
        pixels = np.round(images * 255.0).astype(np.uint8)
        img_path = out_dir / f"{split}-images.idx3-ubyte"
        lbl_path = out_dir / f"{split}-labels.idx1-ubyte"
        write_idx(img_path, pixels)
        write_idx(lbl_path, labels)
        paths[f"{split}_images"] = img_path
        paths[f"{split}_labels"] = lbl_path
    return paths
