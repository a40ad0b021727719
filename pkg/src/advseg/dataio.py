"""Synthetic scene dataset: procedural generation, PNG round-trips, label encoding, splits.

Scenes are 64x64 RGB images of colored, textured shapes on a background.
Class c always appears with the same base color and texture pattern, up to
per-scene jitter, so a small segmenter can learn the mapping quickly.

Conventions used throughout the package:
  image  -- float32 array (3, H, W), values in [-1, 1]
  label  -- int64 array (H, W), values in [0, num_classes)
  onehot -- float32 array (C, H, W), exactly one 1 per pixel
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

META_NAME = "meta.json"
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the procedural scene generator."""

    num_classes: int = 5
    image_size: int = 64
    min_shapes: int = 4
    max_shapes: int = 7
    color_jitter: float = 18.0    # per-scene class color offset, 8-bit units
    texture_jitter: float = 14.0  # per-pixel texture amplitude, 8-bit units
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ValueError(
                f"need 1 <= min_shapes <= max_shapes, got ({self.min_shapes}, {self.max_shapes})"
            )
        if self.color_jitter < 0 or self.texture_jitter < 0:
            raise ValueError("jitter amplitudes must be nonnegative")


@dataclass(frozen=True)
class Dataset:
    """Immutable in-memory dataset of aligned (image, label) pairs."""

    images: np.ndarray  # (N, 3, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N, H, W) int64 in [0, num_classes)
    num_classes: int
    ids: tuple[str, ...]

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0] or len(self.ids) != self.images.shape[0]:
            raise ValueError("images, labels and ids must have matching length")
        if self.images.shape[2:] != self.labels.shape[1:]:
            raise ValueError("image and label spatial dimensions differ")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            ids=tuple(self.ids[i] for i in idx),
        )


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate the (3, H, W) in [-1, 1] image contract."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < -1.0 or image.max() > 1.0:
        raise ValueError("image values outside [-1, 1]")
    return image


def check_label(label: np.ndarray, num_classes: int) -> np.ndarray:
    """Validate the (H, W) integer label contract."""
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"expected (H, W) label map, got shape {label.shape}")
    if not np.issubdtype(label.dtype, np.integer):
        raise ValueError(f"label map must be integer, got dtype {label.dtype}")
    if label.min() < 0 or label.max() >= num_classes:
        raise ValueError(
            f"label ids must lie in [0, {num_classes}), got range "
            f"[{label.min()}, {label.max()}]"
        )
    return label


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed base color per class, shape (C, 3), 8-bit floats.

    Class 0 is a dark background; foreground classes get evenly spaced hues.
    """
    colors = [(46.0, 46.0, 56.0)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.82)
        colors.append((255.0 * r, 255.0 * g, 255.0 * b))
    return np.asarray(colors, dtype=np.float64)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random filled shape (rectangle, ellipse or triangle) as a boolean mask."""
    kind = rng.integers(0, 3)
    extent = int(rng.integers(size // 5, size // 2))
    cy = int(rng.integers(0, size))
    cx = int(rng.integers(0, size))
    yy, xx = np.ogrid[:size, :size]
    if kind == 0:  # rectangle
        h = max(2, int(extent * rng.uniform(0.5, 1.0)))
        w = max(2, int(extent * rng.uniform(0.5, 1.0)))
        return (np.abs(yy - cy) <= h // 2) & (np.abs(xx - cx) <= w // 2)
    if kind == 1:  # ellipse
        ry = max(2.0, extent * rng.uniform(0.4, 0.8))
        rx = max(2.0, extent * rng.uniform(0.4, 0.8))
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle: half-plane cut of a rectangle
    h = max(3, extent)
    w = max(3, extent)
    box = (np.abs(yy - cy) <= h // 2) & (np.abs(xx - cx) <= w // 2)
    slope = rng.uniform(0.5, 2.0) * (1 if rng.integers(0, 2) else -1)
    return box & ((yy - cy) >= slope * (xx - cx))


def _class_texture(rng: np.random.Generator, class_id: int, size: int, amplitude: float) -> np.ndarray:
    """Class-consistent texture field (H, W): fixed stripe direction per class plus noise.

    The stripe orientation/frequency depend only on class_id; phase and noise
    are per-scene. Zero amplitude yields an exactly constant field.
    """
    if amplitude == 0.0:
        # keep the rng stream aligned with the amplitude > 0 branch
        rng.uniform(0.0, 2.0 * np.pi)
        rng.standard_normal((size, size))
        return np.zeros((size, size))
    angle = 0.9 * class_id
    freq = 2.0 * np.pi * (1.5 + 0.7 * class_id) / size
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[:size, :size]
    stripes = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    noise = rng.standard_normal((size, size))
    return amplitude * (0.7 * stripes + 0.3 * noise)


def generate_scene(config: SceneConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render scene `index`: a pure function of (config.seed, index).

    Returns:
        (image, label): float32 (3, H, W) in [-1, 1] and int64 (H, W).
    """
    config.validate()
    if index < 0:
        raise ValueError(f"scene index must be nonnegative, got {index}")
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    C = config.num_classes
    palette = class_palette(C)

    label = np.zeros((size, size), dtype=np.int64)
    # first C-1 shapes cover a permutation of all foreground classes, so every
    # class appears in (almost) every scene; extras re-draw uniformly
    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    n_shapes = max(n_shapes, C - 1)
    order = list(rng.permutation(np.arange(1, C)))
    extras = list(rng.integers(1, C, size=max(0, n_shapes - (C - 1))))
    for class_id in order + extras:
        label[_shape_mask(rng, size)] = class_id

    # per-scene color jitter, one offset per class
    offsets = rng.uniform(-config.color_jitter, config.color_jitter, size=(C, 3))
    img = np.zeros((size, size, 3), dtype=np.float64)
    for c in range(C):
        texture = _class_texture(rng, c, size, config.texture_jitter)
        mask = label == c
        img[mask] = palette[c] + offsets[c] + texture[mask, None]

    u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    image = (u8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
    return image, label


def generate_dataset(config: SceneConfig, count: int, start_index: int = 0) -> Dataset:
    """Generate `count` scenes with ids scene_{index:05d}."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    images, labels, ids = [], [], []
    for i in range(start_index, start_index + count):
        image, label = generate_scene(config, i)
        images.append(image)
        labels.append(label)
        ids.append(f"scene_{i:05d}")
    return Dataset(
        images=np.stack(images),
        labels=np.stack(labels),
        num_classes=config.num_classes,
        ids=tuple(ids),
    )


def one_hot(label: np.ndarray, num_classes: int) -> np.ndarray:
    """Encode an (H, W) label map as a float32 (C, H, W) one-hot map."""
    label = check_label(label, num_classes)
    eye = np.eye(num_classes, dtype=np.float32)
    return eye[label].transpose(2, 0, 1)


def image_to_u8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] float (3, H, W) to (H, W, 3) uint8."""
    check_image(image)
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    """Map (H, W, 3) uint8 to [-1, 1] float32 (3, H, W)."""
    return (u8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_dataset(dataset: Dataset, directory) -> None:
    """Write images/{id}.png, labels/{id}.png and meta.json."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    for i, scene_id in enumerate(dataset.ids):
        Image.fromarray(image_to_u8(dataset.images[i]), mode="RGB").save(
            directory / "images" / f"{scene_id}.png"
        )
        Image.fromarray(dataset.labels[i].astype(np.uint8), mode="L").save(
            directory / "labels" / f"{scene_id}.png"
        )
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_classes": dataset.num_classes,
        "image_size": dataset.image_size,
        "ids": list(dataset.ids),
    }
    (directory / META_NAME).write_text(json.dumps(meta, indent=2))


def load_dataset(directory) -> Dataset:
    """Load a dataset saved by save_dataset; validates pairing and class range."""
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.exists():
        raise FileNotFoundError(f"no {META_NAME} in {directory}")
    meta = json.loads(meta_path.read_text())
    num_classes = int(meta["num_classes"])
    size = int(meta["image_size"])

    images, labels = [], []
    for scene_id in meta["ids"]:
        image_path = directory / "images" / f"{scene_id}.png"
        label_path = directory / "labels" / f"{scene_id}.png"
        if not image_path.exists():
            raise FileNotFoundError(f"missing image file for id {scene_id}: {image_path}")
        if not label_path.exists():
            raise FileNotFoundError(
                f"orphan image {image_path.name}: missing label file {label_path}"
            )
        u8 = np.asarray(Image.open(image_path).convert("RGB"))
        lab = np.asarray(Image.open(label_path).convert("L")).astype(np.int64)
        if u8.shape[:2] != (size, size) or lab.shape != (size, size):
            raise ValueError(
                f"{scene_id}: dimensions {u8.shape[:2]} / {lab.shape} do not match "
                f"declared image_size {size}"
            )
        check_label(lab, num_classes)
        images.append(u8_to_image(u8))
        labels.append(lab)
    return Dataset(
        images=np.stack(images),
        labels=np.stack(labels),
        num_classes=num_classes,
        ids=tuple(meta["ids"]),
    )


def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/val split."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


__all__ = [
    "SceneConfig",
    "Dataset",
    "check_image",
    "check_label",
    "class_palette",
    "generate_scene",
    "generate_dataset",
    "one_hot",
    "image_to_u8",
    "u8_to_image",
    "save_dataset",
    "load_dataset",
    "split_dataset",
]
