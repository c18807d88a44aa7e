"""Image datasets: container, synthetic desk-scale benchmark and loaders."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F


class DatasetError(ValueError):
    """Malformed or missing dataset input."""


@dataclass
class ImageDataset:
    """``images`` is ``(N, C, H, W)`` float32 in [0, 1]; ``labels`` int64."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def tensors(self):
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def validate_labels(self):
        if len(self) == 0:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"label out of range [0, {self.num_classes})")


def center_crop_multiple(images: np.ndarray, multiple: int = 4):
    """Crop ``(N, C, H, W)`` to the largest centered multiple; returns (images, crop box)."""
    h, w = images.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return images[..., top:top + nh, left:left + nw], (top, left, nh, nw)


def _smooth_field(rng: np.random.Generator, n: int, channels: int, size: int, cells: int) -> np.ndarray:
    """Random low-frequency fields: a coarse grid upsampled bilinearly."""
    coarse = torch.from_numpy(rng.standard_normal((n, channels, cells, cells)).astype(np.float32))
    return F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=True).numpy()


def _pattern_bank(rng: np.random.Generator, n: int, channels: int, size: int, texture: float) -> np.ndarray:
    """Unit-peak patterns mixing a coarse (4x4) and a fine (8x8) random field."""
    coarse = _smooth_field(rng, n, channels, size, 4)
    fine = _smooth_field(rng, n, channels, size, 8)
    pat = (1.0 - texture) * coarse + texture * fine
    return pat / np.abs(pat).reshape(n, -1).max(axis=1)[:, None, None, None]


def make_synthetic(n_per_class: int = 500, num_classes: int = 10, size: int = 16, channels: int = 3,
                   seed: int = 0, class_signal: float = 0.10, mode_signal: float = 0.20, modes: int = 20,
                   texture: float = 0.5, clutter: float = 0.15, noise: float = 0.04,
                   templates_seed: int = 1234) -> ImageDataset:
    """Procedural small-image benchmark with high intra-class variability.

    Each class owns a shared template plus ``modes`` sub-prototypes; a sample
    of class ``k`` is::

        0.5 + shift + gain * (class_signal * template_k + mode_signal * proto_{k,m})
            + clutter * smooth field + noise * white

    clipped to [0, 1], with ``m`` drawn uniformly.  ``templates_seed`` fixes the
    class definitions, so train and test splits (different ``seed``) share them.
    """
    trng = np.random.default_rng(templates_seed)
    templates = _pattern_bank(trng, num_classes, channels, size, texture)
    protos = _pattern_bank(trng, num_classes * modes, channels, size, texture).reshape(
        num_classes, modes, channels, size, size)
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    rng.shuffle(labels)
    mode = rng.integers(0, modes, size=n)
    clutter_field = _smooth_field(rng, n, channels, size, 5)
    clutter_field /= np.abs(clutter_field).reshape(n, -1).max(axis=1)[:, None, None, None]
    gain = rng.uniform(0.6, 1.4, size=(n, 1, 1, 1))
    shift = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
    signal = class_signal * templates[labels] + mode_signal * protos[labels, mode]
    x = (0.5 + shift + gain * signal + clutter * clutter_field
         + noise * rng.standard_normal((n, channels, size, size)))
    meta = {"source": "synthetic", "n_per_class": n_per_class, "size": size, "seed": seed,
            "class_signal": class_signal, "mode_signal": mode_signal, "modes": modes, "texture": texture,
            "clutter": clutter, "noise": noise, "templates_seed": templates_seed}
    return ImageDataset(np.clip(x, 0.0, 1.0), labels, num_classes, meta)


def _resize(images: np.ndarray, size: Optional[Tuple[int, int]]) -> np.ndarray:
    if size is None or tuple(images.shape[-2:]) == tuple(size):
        return images
    t = F.interpolate(torch.from_numpy(images), size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return t.clamp(0, 1).numpy()


def load_image_folder(root, size: Optional[Tuple[int, int]] = None, channels: int = 3) -> ImageDataset:
    """Directory-per-class layout: ``root/<class name>/<image file>``.

    Classes are indexed in sorted directory-name order.
    """
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")
    mode = "RGB" if channels == 3 else "L"
    images, labels = [], []
    for k, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}:
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(k)
    if not images:
        raise DatasetError(f"{root}: no images found")
    x = np.stack(images)
    return _finish(x, np.array(labels), len(class_dirs), size,
                   {"source": "folder", "root": str(root), "classes": [d.name for d in class_dirs]})


def load_cifar_binary(paths, size: Optional[Tuple[int, int]] = None, num_classes: int = 10) -> ImageDataset:
    """Binary small-image archive: records of 1 label byte + 3*32*32 pixel bytes."""
    images, labels = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        rec = 1 + 3 * 32 * 32
        if raw.size % rec:
            raise DatasetError(f"{p}: size {raw.size} is not a multiple of the record length {rec}")
        raw = raw.reshape(-1, rec)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return _finish(np.concatenate(images), np.concatenate(labels), num_classes, size,
                   {"source": "binary", "files": [str(p) for p in paths]})


def _finish(x, y, num_classes, size, meta) -> ImageDataset:
    x = _resize(x, size)
    x, box = center_crop_multiple(x, 4)
    meta["crop"] = list(box)
    return ImageDataset(x, y, num_classes, meta)


def save_dataset(ds: ImageDataset, path) -> None:
    np.savez_compressed(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes)


def load_dataset(path) -> ImageDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such dataset file")
    with np.load(path) as z:
        return ImageDataset(z["images"], z["labels"], int(z["num_classes"]))
