"""Dataset ingestion. Images are returned as float32 ``(N, C, H, W)`` in [-1, 1]."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

CIFAR_RECORD = 1 + 3 * 32 * 32
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def _to_unit_range(uint8: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(uint8.astype(np.float32) / 127.5 - 1.0)


def _resize(images: torch.Tensor, resolution: Optional[int]) -> torch.Tensor:
    if resolution is None or images.shape[-1] == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False)


def load_cifar10_binary(path, resolution: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Read CIFAR-10 binary batches (``data_batch_*.bin`` / ``test_batch.bin``).

    ``path`` is a single ``.bin`` file or a directory holding them. Each record
    is one label byte followed by 3072 bytes of channel-major 32x32 pixels.
    """
    path = Path(path)
    files = sorted(path.glob("data_batch_*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {path}")
    raw = np.concatenate([np.fromfile(f, dtype=np.uint8) for f in files])
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size is not a multiple of the {CIFAR_RECORD}-byte record")
    raw = raw.reshape(-1, CIFAR_RECORD)
    labels = torch.from_numpy(raw[:, 0].astype(np.int64))
    images = _to_unit_range(raw[:, 1:].reshape(-1, 3, 32, 32))
    return _resize(images, resolution), labels


def load_image_dir(path, resolution: Optional[int] = None, grayscale: bool = True):
    """Every image file in ``path`` (sorted by name); label is the parent directory index.

    Flat directories get label 0 for every image.
    """
    from PIL import Image

    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images under {path}")
    classes = sorted({p.parent for p in files})
    mode = "L" if grayscale else "RGB"
    arrays, labels = [], []
    for f in files:
        img = Image.open(f).convert(mode)
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        a = np.asarray(img, dtype=np.uint8)
        arrays.append(a[None] if a.ndim == 2 else a.transpose(2, 0, 1))
        labels.append(classes.index(f.parent))
    return _to_unit_range(np.stack(arrays)), torch.tensor(labels, dtype=torch.long)


def load_array_file(path, resolution: Optional[int] = None):
    """``.npz`` with ``images`` (N, C, H, W; uint8 or float in [-1, 1]) and optional ``labels``."""
    with np.load(path) as data:
        images = data["images"]
        labels = data["labels"] if "labels" in data else np.zeros(len(images), dtype=np.int64)
    if images.ndim == 3:
        images = images[:, None]
    x = _to_unit_range(images) if images.dtype == np.uint8 else torch.from_numpy(images.astype(np.float32))
    return _resize(x, resolution), torch.from_numpy(np.asarray(labels, dtype=np.int64))


def load_digits(resolution: int = 16) -> tuple[torch.Tensor, torch.Tensor]:
    """The 1797 scikit-learn 8x8 handwritten digits, upsampled to ``resolution``."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    x = torch.from_numpy(d.images.astype(np.float32) / 16.0 * 2.0 - 1.0)[:, None]
    return _resize(x, resolution).clamp(-1, 1), torch.from_numpy(d.target.astype(np.int64))


def two_point_dataset(resolution: int = 16, n_repeat: int = 64) -> torch.Tensor:
    """Two fixed images (a bright left half and a bright top half), repeated."""
    a = -torch.ones(1, resolution, resolution)
    a[:, :, : resolution // 2] = 1.0
    b = -torch.ones(1, resolution, resolution)
    b[:, : resolution // 2, :] = 1.0
    return torch.stack([a, b]).repeat(n_repeat, 1, 1, 1)


def load_dataset(name: str, path: Optional[str] = None, resolution: int = 16,
                 grayscale: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Dispatch by dataset name: ``digits``, ``cifar10``, ``imagedir``, ``array``, ``twopoint``."""
    if name == "digits":
        return load_digits(resolution)
    if name == "twopoint":
        x = two_point_dataset(resolution)
        return x, torch.arange(len(x)) % 2
    if path is None:
        raise ValueError(f"dataset {name!r} needs a path")
    if name == "cifar10":
        x, y = load_cifar10_binary(path, resolution)
        if grayscale:
            x = x.mean(dim=1, keepdim=True)
        return x, y
    if name == "imagedir":
        return load_image_dir(path, resolution, grayscale)
    if name == "array":
        return load_array_file(path, resolution)
    raise ValueError(f"unknown dataset: {name!r}")


def split_holdout(n: int, fraction: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    n_hold = max(1, int(round(n * fraction)))
    return perm[n_hold:], perm[:n_hold]
