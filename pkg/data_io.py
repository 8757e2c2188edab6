"""
Dataset ingestion and preprocessing.

Bundles come from MedMNIST-style NPZ archives, from a directory holding the
same six arrays as separate NPY files, or from the seeded blob generator.
Images are stored channel-first as float32 in [0, 1]:

    2D grayscale  N x H x W      ->  N x 1 x H x W
    2D RGB        N x H x W x 3  ->  N x 3 x H x W
    3D            N x D x H x W  ->  N x 1 x D x H x W

Labels of shape (N, 1) are flattened to (N,).
"""

import logging
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, Optional, Tuple

import numpy as np

from nn_core import Rng
from npz_reader import MissingMemberError, read_npy, read_npz, write_npz, encode_npy

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MEMBER_KEYS = tuple(f"{split}_{part}" for split in SPLITS for part in ("images", "labels"))
SYNTHETIC_KINDS = ("blobs2d", "blobs3d")
SYNTHETIC_SIZE = 28
SYNTHETIC_NOISE = 0.1
BLOB_SIGMA = 3.0
MAX_SYNTHETIC_CLASSES = 8
MIN_SYNTHETIC_PER_CLASS = 5
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

# Blob centres (pixel coordinates) per class.
_CENTRES_2D = [(7, 7), (7, 20), (20, 7), (20, 20), (14, 4), (14, 23), (4, 14), (23, 14)]
_CENTRES_3D = list(product((8, 19), repeat=3))


class DatasetError(ValueError):
    """A bundle violates its invariants or a request cannot be satisfied."""


@dataclass(frozen=True)
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class DatasetBundle:
    splits: Dict[str, DatasetSplit]
    n_classes: int
    source: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def task(self) -> str:
        return "binary" if self.n_classes == 2 else "multiclass"

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.splits["train"].images.shape[1:])

    @property
    def is_3d(self) -> bool:
        return len(self.image_shape) == 4

    @property
    def train(self) -> DatasetSplit:
        return self.splits["train"]

    @property
    def val(self) -> DatasetSplit:
        return self.splits["val"]

    @property
    def test(self) -> DatasetSplit:
        return self.splits["test"]

    def validate(self) -> None:
        missing = [s for s in SPLITS if s not in self.splits]
        if missing:
            raise DatasetError(f"Bundle is missing splits {missing}")
        if self.n_classes < 2:
            raise DatasetError(f"A classification bundle needs at least 2 classes, got {self.n_classes}")
        for name in ("train", "test"):
            if len(self.splits[name]) == 0:
                raise DatasetError(f"The {name} split is empty")
        shape = None
        for name in SPLITS:
            split = self.splits[name]
            if split.images.shape[0] != split.labels.shape[0]:
                raise DatasetError(f"{name}: {split.images.shape[0]} images but {split.labels.shape[0]} labels")
            if len(split) == 0:
                continue
            if shape is None:
                shape = split.images.shape[1:]
            elif split.images.shape[1:] != shape:
                raise DatasetError(f"{name} images have shape {split.images.shape[1:]}, expected {shape}")
            if split.labels.min() < 0 or split.labels.max() >= self.n_classes:
                raise DatasetError(f"{name} labels must lie in [0, {self.n_classes}), got "
                                   f"[{split.labels.min()}, {split.labels.max()}]")
            if split.images.min() < 0.0 or split.images.max() > 1.0:
                raise DatasetError(f"{name} images must lie in [0, 1]")

    def map_images(self, fn) -> "DatasetBundle":
        splits = {name: DatasetSplit(np.ascontiguousarray(fn(s.images), dtype=np.float32), s.labels)
                  for name, s in self.splits.items()}
        return DatasetBundle(splits, self.n_classes, self.source, dict(self.extra))

    def summary(self) -> Dict[str, object]:
        return {"source": self.source, "n_classes": self.n_classes, "task": self.task,
                "image_shape": list(self.image_shape),
                "sizes": {name: len(split) for name, split in self.splits.items()}}


# ---- conversion helpers ----

def to_channel_first(images: np.ndarray, volumetric: Optional[bool] = None) -> np.ndarray:
    """Give raw MedMNIST image arrays an explicit leading channel axis."""
    if images.ndim == 3:
        return images[:, None]
    if images.ndim == 4:
        rgb = images.shape[-1] == 3 if volumetric is None else not volumetric
        if rgb and images.shape[-1] == 3:
            return np.moveaxis(images, -1, 1)
        return images[:, None]
    if images.ndim == 5 and images.shape[-1] in (1, 3):
        return np.moveaxis(images, -1, 1)
    raise DatasetError(f"Cannot interpret image array of shape {images.shape}")


def scale_images(images: np.ndarray, name: str) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / np.float32(255.0)
    if images.dtype in (np.float32, np.float64):
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"{name}: floating-point images must already lie in [0, 1]")
        return images.astype(np.float32)
    raise DatasetError(f"{name}: images must be uint8 or float, got {images.dtype}")


def flatten_labels(labels: np.ndarray, name: str) -> np.ndarray:
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.ndim != 1:
        raise DatasetError(f"{name}: expected labels of shape (N,) or (N, 1), got {labels.shape}; "
                           f"multi-label tasks are not supported")
    if labels.dtype.kind not in "iu":
        raise DatasetError(f"{name}: labels must be integers, got {labels.dtype}")
    return labels.astype(np.int64)


def bundle_from_arrays(arrays: Dict[str, np.ndarray], source: str,
                       volumetric: Optional[bool] = None,
                       n_classes: Optional[int] = None) -> DatasetBundle:
    for key in MEMBER_KEYS:
        if key not in arrays:
            raise MissingMemberError(f"{source}: missing member '{key}'")
    splits = {}
    for split in SPLITS:
        images = to_channel_first(scale_images(arrays[f"{split}_images"], f"{split}_images"), volumetric)
        labels = flatten_labels(arrays[f"{split}_labels"], f"{split}_labels")
        splits[split] = DatasetSplit(np.ascontiguousarray(images), labels)
    if n_classes is None:
        seen = [int(s.labels.max()) + 1 for s in splits.values() if len(s)]
        if not seen:
            raise DatasetError(f"{source}: every split is empty")
        n_classes = max(max(seen), 2)
    bundle = DatasetBundle(splits, n_classes, source)
    logger.info(f"Loaded {source}: {bundle.summary()['sizes']}, image shape {bundle.image_shape}, "
                f"{n_classes} classes")
    return bundle


# ---- loaders ----

def load_npz(path: str, volumetric: Optional[bool] = None, n_classes: Optional[int] = None) -> DatasetBundle:
    return bundle_from_arrays(read_npz(path), path, volumetric, n_classes)


def load_array_dir(path: str, volumetric: Optional[bool] = None,
                   n_classes: Optional[int] = None) -> DatasetBundle:
    """Load ``<path>/{train,val,test}_{images,labels}.npy``."""
    if not os.path.isdir(path):
        raise DatasetError(f"{path} is not a directory")
    arrays = {}
    for key in MEMBER_KEYS:
        file_path = os.path.join(path, f"{key}.npy")
        if not os.path.exists(file_path):
            raise MissingMemberError(f"{path}: missing file '{key}.npy'")
        arrays[key] = read_npy(file_path)
    return bundle_from_arrays(arrays, path, volumetric, n_classes)


# ---- synthetic data ----

def gen_synthetic(kind: str, n_per_class: int, n_classes: int, seed: int) -> DatasetBundle:
    """
    Gaussian blobs at a fixed class-specific centre, jittered by up to one
    pixel, plus Normal(0, 0.1) noise, clipped to [0, 1]. Each class is split
    70/10/20 into train/val/test and every split is shuffled.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"Unknown synthetic kind '{kind}'. Valid: {', '.join(SYNTHETIC_KINDS)}")
    if not 2 <= n_classes <= MAX_SYNTHETIC_CLASSES:
        raise DatasetError(f"n_classes must lie in [2, {MAX_SYNTHETIC_CLASSES}], got {n_classes}")
    if n_per_class < MIN_SYNTHETIC_PER_CLASS:
        raise DatasetError(f"n_per_class must be at least {MIN_SYNTHETIC_PER_CLASS} to fill every split, "
                           f"got {n_per_class}")

    rank = 2 if kind == "blobs2d" else 3
    centres = np.array(_CENTRES_2D if rank == 2 else _CENTRES_3D, dtype=np.float64)[:n_classes]
    rng = Rng(seed)
    total = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    jitter = rng.uniform(total * rank).reshape(total, rank) * 2.0 - 1.0
    points = centres[labels] + jitter

    axis = np.arange(SYNTHETIC_SIZE, dtype=np.float64)
    grids = np.meshgrid(*([axis] * rank), indexing="ij")
    images = np.empty((total,) + (SYNTHETIC_SIZE,) * rank, dtype=np.float32)
    voxels = SYNTHETIC_SIZE ** rank
    for i in range(total):
        dist2 = sum((g - c) ** 2 for g, c in zip(grids, points[i]))
        blob = np.exp(-dist2 / (2.0 * BLOB_SIGMA ** 2))
        noise = rng.normal(voxels, SYNTHETIC_NOISE).reshape(blob.shape)
        images[i] = np.clip(blob + noise, 0.0, 1.0)

    # half-up rounding, at least one example per class in val and test
    n_val = max(1, int(SPLIT_FRACTIONS[1] * n_per_class + 0.5))
    n_test = max(1, int(SPLIT_FRACTIONS[2] * n_per_class + 0.5))
    n_train = n_per_class - n_val - n_test
    parts: Dict[str, list] = {s: [] for s in SPLITS}
    for k in range(n_classes):
        idx = np.arange(k * n_per_class, (k + 1) * n_per_class)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])

    splits = {}
    for split in SPLITS:
        idx = np.concatenate(parts[split])
        idx = idx[rng.permutation(len(idx))]
        splits[split] = DatasetSplit(np.ascontiguousarray(images[idx][:, None]), labels[idx])
    bundle = DatasetBundle(splits, n_classes, f"synthetic:{kind}:seed={seed}")
    logger.info(f"Generated {kind}: {n_classes} classes x {n_per_class}, seed {seed}")
    return bundle


# ---- preprocessing ----

def _resize_axis(images: np.ndarray, axis: int, size: int) -> np.ndarray:
    """Linear resampling along one axis, half-pixel centres, edges clamped."""
    old = images.shape[axis]
    src = (np.arange(size, dtype=np.float64) + 0.5) * (old / size) - 0.5
    src = np.clip(src, 0.0, old - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, old - 1)
    frac = src - lo
    shape = [1] * images.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(images, lo, axis=axis) * (1.0 - frac) + np.take(images, hi, axis=axis) * frac


def resize_bilinear_2d(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the two trailing axes of ``images`` (align_corners=False convention)."""
    if height < 1 or width < 1:
        raise DatasetError(f"Target size must be at least 1x1, got {height}x{width}")
    if images.shape[-2:] == (height, width):
        return images.copy()
    out = _resize_axis(images.astype(np.float64), images.ndim - 2, height)
    out = _resize_axis(out, images.ndim - 1, width)
    return out.astype(images.dtype if images.dtype.kind == "f" else np.float32)


def repeat_channels(images: np.ndarray, channels: int) -> np.ndarray:
    """Tile single-channel images to ``channels`` identical channels."""
    have = images.shape[1]
    if have == channels:
        return images
    if have != 1:
        raise DatasetError(f"Cannot turn {have}-channel images into {channels} channels")
    return np.repeat(images, channels, axis=1)


def prepare_bundle(bundle: DatasetBundle, channels: Optional[int] = None,
                   resize: Optional[int] = None) -> DatasetBundle:
    """Apply the optional resize and channel repeat from a run config."""
    if resize is not None:
        if bundle.is_3d:
            raise DatasetError("data.resize only applies to 2D images")
        bundle = bundle.map_images(lambda x: np.clip(resize_bilinear_2d(x, resize, resize), 0.0, 1.0))
    if channels is not None:
        bundle = bundle.map_images(lambda x: repeat_channels(x, channels))
    return bundle


# ---- fixture writer ----

def to_medmnist_arrays(bundle: DatasetBundle) -> Dict[str, np.ndarray]:
    """Quantise a bundle back to the uint8 layout MedMNIST distributes."""
    arrays = {}
    for split in SPLITS:
        s = bundle.splits[split]
        images = np.rint(s.images * 255.0).astype(np.uint8)
        images = images[:, 0] if images.shape[1] == 1 else np.moveaxis(images, 1, -1)
        arrays[f"{split}_images"] = np.ascontiguousarray(images)
        arrays[f"{split}_labels"] = s.labels.astype(np.uint8).reshape(-1, 1)
    return arrays


def write_fixture(bundle: DatasetBundle, out_dir: str, name: str, compress: bool = True) -> Dict[str, str]:
    """Write ``<out_dir>/<name>.npz`` and the equivalent ``<out_dir>/<name>/`` NPY directory."""
    arrays = to_medmnist_arrays(bundle)
    array_dir = os.path.join(out_dir, name)
    os.makedirs(array_dir, exist_ok=True)
    npz_path = write_npz(os.path.join(out_dir, f"{name}.npz"), arrays, compress)
    for key, array in arrays.items():
        with open(os.path.join(array_dir, f"{key}.npy"), "wb") as f:
            f.write(encode_npy(array))
    logger.info(f"Wrote fixture {npz_path} and {array_dir}/")
    return {"npz": npz_path, "dir": array_dir}
