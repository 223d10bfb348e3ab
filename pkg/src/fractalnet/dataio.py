"""Datasets: IDX files, a synthetic oriented-bar task, and augmentation.

Pixels are scaled to [0, 1] and the training split's per-channel mean is
subtracted from every split.  Images are stored as float64 ``(N, C, H, W)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_SHIFT = 4
TIERS = ("none", "plus", "plusplus")


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    """Bad magic number or header."""


class IdxLengthError(DataError):
    """Payload shorter or longer than the header promises."""


class IdxConsistencyError(DataError):
    """Image and label files disagree."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    channel_mean: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def subset(self, n: int) -> "Dataset":
        """The first ``n`` samples (splits are already shuffled)."""
        return replace(self, images=self.images[:n], labels=self.labels[:n])


def _center(images: np.ndarray, mean: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if mean is None:
        mean = images.mean(axis=(0, 2, 3))
    return images - mean[None, :, None, None], mean


# -- IDX -----------------------------------------------------------------------

def _read_idx(path: str | os.PathLike, allowed_dims: tuple[int, ...]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxLengthError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    zero, dtype_code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or dtype_code != IDX_UBYTE or ndim not in allowed_dims:
        raise IdxFormatError(f"{path}: unexpected magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxLengthError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header
    if payload != expected:
        raise IdxLengthError(f"{path}: payload has {payload} bytes, header promises {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path: str | os.PathLike) -> np.ndarray:
    """Raw ``uint8`` images as ``(N, C, H, W)``; 3-d files are single channel, 4-d are channel-last."""
    raw = _read_idx(path, (3, 4))
    return raw[:, None] if raw.ndim == 3 else raw.transpose(0, 3, 1, 2)


def read_idx_labels(path: str | os.PathLike) -> np.ndarray:
    return _read_idx(path, (1,)).astype(np.int64)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
             mean: np.ndarray | None = None, split: str = "train",
             class_count: int | None = None) -> Dataset:
    """Load an image/label IDX pair.

    Without ``mean`` the file is treated as the training split and its own
    channel mean is subtracted; pass the training mean for other splits.
    """
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise IdxConsistencyError(f"{len(raw)} images but {len(labels)} labels")
    images, mean = _center(raw.astype(np.float64) / 255.0, mean)
    k = class_count if class_count is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images, labels, k, split, mean)


def write_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
              images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``uint8`` images ``(N, H, W)`` or ``(N, H, W, C)`` and labels ``(N,)``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim not in (3, 4):
        raise DataError("images must be (N, H, W) or (N, H, W, C)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", (IDX_UBYTE << 8) | images.ndim))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- synthetic oriented bars ---------------------------------------------------

@dataclass(frozen=True)
class BarStyle:
    """Nuisance ranges of the bar generator.

    ``jitter`` is the angle jitter as a fraction of the class spacing;
    ``half_length`` is relative to the image size.
    """
    jitter: float = 0.4
    half_length: tuple[float, float] = (0.25, 0.5)
    width: tuple[float, float] = (0.8, 1.8)
    brightness: tuple[float, float] = (0.5, 1.0)


# short, dim bars with overlapping angle ranges: no longer near-separable
HARD_BARS = BarStyle(jitter=0.5, half_length=(0.1, 0.25), brightness=(0.2, 0.6))


def render_bars(labels: np.ndarray, class_count: int, size: int, rng: np.random.Generator,
                noise: float = 0.1, style: BarStyle = BarStyle()) -> np.ndarray:
    """One finite bar per image at the class angle ``k * pi / class_count``, in [0, 1].

    Nuisance factors: angle jitter, bar centre, length, width and brightness
    (ranges from ``style``), then Gaussian pixel noise of std ``noise``.
    """
    n = len(labels)
    spacing = np.pi / class_count
    theta = labels * spacing + rng.uniform(-style.jitter, style.jitter, n) * spacing
    cy, cx = rng.uniform(-size / 4, size / 4, (2, n))
    half_len = rng.uniform(*style.half_length, n) * size
    width = rng.uniform(*style.width, n)
    bright = rng.uniform(*style.brightness, n)
    coords = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    along = dx * c + dy * s
    across = -dx * s + dy * c
    overshoot = np.maximum(np.abs(along) - half_len[:, None, None], 0.0)
    img = bright[:, None, None] * np.exp(-((across / width[:, None, None]) ** 2 + overshoot ** 2))
    if noise:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)[:, None]


def synth_dataset(seed: int, n_per_class: int, class_count: int, size: int, noise: float = 0.1,
                  split: str = "train", mean: np.ndarray | None = None,
                  style: BarStyle = BarStyle()) -> Dataset:
    """Deterministic oriented-bar dataset with exactly ``n_per_class`` samples of each class."""
    code = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng([seed, code])
    labels = rng.permutation(np.repeat(np.arange(class_count), n_per_class))
    raw = render_bars(labels, class_count, size, rng, noise, style)
    images, mean = _center(raw, mean)
    return Dataset(images, labels.astype(np.int64), class_count, split, mean)


def synth_splits(seed: int, n_per_class: int, class_count: int, size: int, noise: float = 0.1,
                 test_per_class: int | None = None,
                 style: BarStyle = BarStyle()) -> tuple[Dataset, Dataset]:
    """Train and test splits; the test split defaults to half as many samples per class."""
    train = synth_dataset(seed, n_per_class, class_count, size, noise, "train", style=style)
    n_test = test_per_class if test_per_class is not None else max(1, n_per_class // 2)
    test = synth_dataset(seed, n_test, class_count, size, noise, "test", train.channel_mean, style)
    return train, test


# -- augmentation --------------------------------------------------------------

def augment(image: np.ndarray, rng: np.random.Generator | None, tier: str = "plus",
            offsets: tuple[int, int] | None = None, mirror: bool | None = None) -> np.ndarray:
    """Mirror-then-translate one ``(C, H, W)`` image.

    ``plus`` fills uncovered pixels with 0 (the mean-subtracted zero),
    ``plusplus`` reflects the image instead.  ``offsets`` is ``(dx, dy)``;
    positive ``dx`` moves content right.  Unset choices are drawn from ``rng``:
    mirror with probability 1/2, then each offset uniformly from [-4, 4].
    """
    if tier not in TIERS:
        raise ValueError(f"unknown augmentation tier {tier!r}")
    if tier == "none":
        return image
    if mirror is None:
        mirror = bool(rng.random() < 0.5)
    if offsets is None:
        dx, dy = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    else:
        dx, dy = offsets
    if max(abs(dx), abs(dy)) > MAX_SHIFT:
        raise ValueError(f"offsets must lie in [-{MAX_SHIFT}, {MAX_SHIFT}]")
    img = image[:, :, ::-1] if mirror else image
    p = MAX_SHIFT
    mode = "constant" if tier == "plus" else "reflect"
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode=mode)
    h, w = image.shape[1:]
    return padded[:, p - dy:p - dy + h, p - dx:p - dx + w].copy()


def augment_batch(images: np.ndarray, rng: np.random.Generator, tier: str) -> np.ndarray:
    if tier == "none":
        return images
    return np.stack([augment(img, rng, tier) for img in images])
