"""Dataset ingestion, synthetic data, and training-time augmentation.

The binary image format parsed here stores fixed 3073-byte records: one
label byte followed by 3072 pixel bytes in channel-planar order (red
plane, green plane, blue plane, each 32x32 row-major).  Pixels are
scaled to [0, 1] and then standardized per channel with statistics
computed from the training split only.

Synthetic data draws one Gaussian prototype per class and adds noise
scaled by a difficulty knob, which keeps the task Bayes-separable when
difficulty is low.  Train and test splits share prototypes through the
seed and differ only in their noise streams.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import named_stream

__all__ = [
    "LabeledDataset",
    "AugmentFlags",
    "MalformedRecord",
    "LabelOutOfRange",
    "RECORD_BYTES",
    "load_cifar10",
    "make_synthetic",
    "normalize_pair",
    "augment",
    "record_bytes",
    "dataset_to_csv",
]

RECORD_BYTES = 3073
_IMAGE_SHAPE = (3, 32, 32)


class MalformedRecord(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images [n, channels, height, width] with integer labels.

    channel_mean / channel_std record the standardization applied to
    ``images``; both are None while the data is still raw.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-D, got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} images")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        bad = (self.labels < 0) | (self.labels >= self.class_count)
        if np.any(bad):
            raise LabelOutOfRange(
                f"label {int(self.labels[np.argmax(bad)])} outside [0, {self.class_count})"
            )

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = False
    cutout: bool = False
    normalize: bool = False
    cutout_size: int = 8
    force_flip: bool = False


def _parse_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    count, leftover = divmod(raw.size, RECORD_BYTES)
    if leftover:
        raise MalformedRecord(
            f"{path}: {raw.size} bytes is not a multiple of {RECORD_BYTES}; "
            f"trailing fragment starts at offset {count * RECORD_BYTES}"
        )
    if count == 0:
        raise MalformedRecord(f"{path}: file holds no records")
    records = raw.reshape(count, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        idx = int(np.argmax(labels > 9))
        raise LabelOutOfRange(
            f"{path}: record {idx} has label byte {int(labels[idx])}, expected 0..9"
        )
    images = records[:, 1:].reshape(count, *_IMAGE_SHAPE).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(dir_path) -> tuple[LabeledDataset, LabeledDataset]:
    """Parse the standard binary batches under ``dir_path``.

    Returns standardized (train, test); statistics come from train only.
    """
    base = Path(dir_path)
    train_parts = [_parse_batch_file(base / f"data_batch_{i}.bin") for i in range(1, 6)]
    test_images, test_labels = _parse_batch_file(base / "test_batch.bin")
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    train = LabeledDataset(train_images, train_labels, 10, "train")
    test = LabeledDataset(test_images, test_labels, 10, "test")
    return normalize_pair(train, test)


def make_synthetic(n, class_count, input_shape, difficulty, seed, split="train") -> LabeledDataset:
    """Gaussian class prototypes plus difficulty-scaled noise.

    Balanced by construction: each class gets n // class_count samples,
    remainders assigned to the lowest class indices.  The prototype
    stream depends only on the seed, so train/test splits built with the
    same seed share class geometry.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if class_count < 2:
        raise ValueError("need at least two classes")
    if difficulty < 0:
        raise ValueError("difficulty must be >= 0")
    shape = tuple(input_shape)
    protos = named_stream(seed, "prototypes").normal(size=(class_count,) + shape)
    noise_rng = named_stream(seed, "noise:" + split)
    base, extra = divmod(n, class_count)
    counts = [base + (1 if k < extra else 0) for k in range(class_count)]
    labels = np.repeat(np.arange(class_count), counts)
    order = noise_rng.permutation(n)
    labels = labels[order]
    images = protos[labels] + difficulty * noise_rng.normal(size=(n,) + shape)
    return LabeledDataset(images, labels, class_count, split)


def normalize_pair(train: LabeledDataset, test: LabeledDataset):
    """Standardize both splits with the training split's channel stats."""
    axes = (0, 2, 3)
    mean = train.images.mean(axis=axes)
    std = train.images.std(axis=axes)
    std = np.where(std == 0.0, 1.0, std)
    mb = mean.reshape(1, -1, 1, 1)
    sb = std.reshape(1, -1, 1, 1)
    out = []
    for ds in (train, test):
        out.append(replace(ds, images=(ds.images - mb) / sb,
                           channel_mean=mean, channel_std=std))
    return tuple(out)


def augment(batch: np.ndarray, flags: AugmentFlags, seed: int, batch_index: int = 0) -> np.ndarray:
    """Apply the configured augmentations to one [n, c, h, w] batch.

    Pure function: randomness comes only from (seed, batch_index).  The
    cutout square is filled with each image's own per-channel mean taken
    before masking.
    """
    x = np.array(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected [n, c, h, w] batch, got {x.shape}")
    n, _, h, w = x.shape
    rng = named_stream(seed, "augment", batch_index)
    if flags.flip or flags.force_flip:
        chosen = np.ones(n, dtype=bool) if flags.force_flip else rng.random(n) < 0.5
        x[chosen] = x[chosen, :, :, ::-1]
    if flags.cutout:
        side = min(flags.cutout_size, h, w)
        tops = rng.integers(0, h - side + 1, size=n)
        lefts = rng.integers(0, w - side + 1, size=n)
        fill = x.mean(axis=(2, 3))
        for i in range(n):
            r, c0 = tops[i], lefts[i]
            x[i, :, r:r + side, c0:c0 + side] = fill[i][:, None, None]
    if flags.normalize:
        mean = x.mean(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        std = x.std(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        std = np.where(std == 0.0, 1.0, std)
        x = (x - mean) / std
    return x


def record_bytes(ds: LabeledDataset, index: int) -> bytes:
    """Reconstruct the original 3073-byte record for one sample."""
    img = ds.images[index]
    if ds.channel_mean is not None:
        img = img * ds.channel_std.reshape(-1, 1, 1) + ds.channel_mean.reshape(-1, 1, 1)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return bytes([int(ds.labels[index])]) + pixels.tobytes()


def dataset_to_csv(ds: LabeledDataset) -> str:
    """Plain text export: one row per sample, label then flat pixels."""
    lines = ["label," + ",".join(f"p{i}" for i in range(int(np.prod(ds.images.shape[1:]))))]
    for i in range(len(ds)):
        flat = ds.images[i].ravel()
        lines.append(str(int(ds.labels[i])) + "," + ",".join(repr(float(v)) for v in flat))
    return "\n".join(lines) + "\n"
