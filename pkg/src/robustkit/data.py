"""Dataset loading, synthetic data generation, and per-class indexing.

Two on-disk formats are supported. The binary image-batch format stores
3073-byte records (one label byte, then 3072 pixel bytes as three 32x32
channel planes). The synthetic-spec format is a small key = value text
file describing a generated dataset, so experiments on synthetic data are
reproducible from a checked-in file.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .validation import InvalidInputError, check_images, check_labels

_RECORD_BYTES = 3073
_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_TEST_FILES = ["test_batch.bin"]


class CorruptDataError(ValueError):
    """Raised when an on-disk dataset fails structural validation."""


@dataclass
class Dataset:
    """An in-memory labeled image set with pixels in [0, 1].

    Attributes:
        images: float32 tensor of shape (N, C, H, W).
        labels: int64 tensor of shape (N,).
        num_classes: number of valid label values.
        name: short identifier used in reports.
        split: "train" or "test".
    """

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        check_images(self.images, name=f"{self.name} images")
        self.labels = check_labels(self.labels, self.num_classes,
                                   name=f"{self.name} labels")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidInputError(
                f"{self.name}: {self.images.shape[0]} images but "
                f"{self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return Dataset(images=self.images[idx], labels=self.labels[idx],
                       num_classes=self.num_classes,
                       name=f"{self.name}[{len(idx)}]", split=self.split)


def _read_binary_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise CorruptDataError(f"{path}: empty file")
    if raw.size % _RECORD_BYTES != 0:
        raise CorruptDataError(
            f"{path}: size {raw.size} is not a multiple of the "
            f"{_RECORD_BYTES}-byte record length "
            f"(trailing {raw.size % _RECORD_BYTES} bytes)")
    records = raw.reshape(-1, _RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise CorruptDataError(
            f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])}, "
            f"valid range is 0..9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10_binary(path: str, split: str = "train") -> Dataset:
    """Load the binary batch format from a directory or a single file.

    A directory must contain the five train files or the test file for the
    requested split; a nested ``cifar-10-batches-bin`` directory is also
    accepted.
    """
    if split not in ("train", "test"):
        raise InvalidInputError(f"split must be 'train' or 'test', got {split!r}")
    if os.path.isfile(path):
        files = [path]
    else:
        root = path
        nested = os.path.join(path, "cifar-10-batches-bin")
        if os.path.isdir(nested):
            root = nested
        names = _TRAIN_FILES if split == "train" else _TEST_FILES
        files = [os.path.join(root, n) for n in names]
        missing = [f for f in files if not os.path.isfile(f)]
        if missing:
            raise FileNotFoundError(
                f"missing {split} batch files under {root}: "
                f"{[os.path.basename(m) for m in missing]}")
    pixel_parts, label_parts = [], []
    for f in files:
        px, lb = _read_binary_file(f)
        pixel_parts.append(px)
        label_parts.append(lb)
    pixels = np.concatenate(pixel_parts)
    labels = np.concatenate(label_parts)
    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return Dataset(images=images, labels=torch.from_numpy(labels.astype(np.int64)),
                   num_classes=10, name="cifar10", split=split)


_SYNTH_REQUIRED = ("C", "N", "H", "seed", "margin")
_SYNTH_OPTIONAL = {"noise": 0.06, "fragile": 0.028, "split": "train"}


def parse_synthetic_spec(text: str) -> dict:
    """Parse a ``key = value`` synthetic dataset description.

    Required keys: C (classes), N (samples), H (image size), seed, margin.
    Optional keys: noise, fragile, split. Unknown keys and malformed lines
    are hard errors so a typo cannot silently change an experiment.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise CorruptDataError(
                f"synthetic spec line {lineno}: expected 'key = value', "
                f"got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in ("C", "N", "H", "seed"):
            values[key] = int(raw)
        elif key in ("margin", "noise", "fragile"):
            values[key] = float(raw)
        elif key == "split":
            values[key] = raw
        else:
            raise CorruptDataError(
                f"synthetic spec line {lineno}: unknown key {key!r}")
    missing = [k for k in _SYNTH_REQUIRED if k not in values]
    if missing:
        raise CorruptDataError(f"synthetic spec missing keys: {missing}")
    for key, default in _SYNTH_OPTIONAL.items():
        values.setdefault(key, default)
    return values


def make_synthetic(num_classes: int, num_samples: int, image_size: int,
                   seed: int, margin: float, noise: float = 0.06,
                   fragile: float = 0.028, split: str = "train") -> Dataset:
    """Generate a class-blob dataset with one deliberately brittle cue.

    Each class has a wide-margin sign pattern over most of the image,
    observed under per-pixel noise, plus a low-amplitude, nearly noise-free
    pattern in the first pixel row. The brittle row is easier for plain
    training to exploit but sits within reach of small perturbations, so
    undefended models trained here lose it under attack while robust
    training must fall back to the wide-margin pattern.

    Class patterns depend only on ``seed``; sample noise additionally
    depends on ``split``, so train and test share patterns but not draws.
    The ``noise`` and ``fragile`` defaults are tuned for ``margin`` near
    0.12 under an 8/255 perturbation budget.
    """
    if num_classes < 2:
        raise InvalidInputError(f"need at least 2 classes, got {num_classes}")
    if split not in ("train", "test"):
        raise InvalidInputError(f"split must be 'train' or 'test', got {split!r}")
    if image_size < 2:
        raise InvalidInputError(f"image_size must be at least 2, got {image_size}")
    pattern_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 0])))
    split_code = 1 if split == "train" else 2
    sample_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, split_code])))

    shape = (num_classes, 3, image_size, image_size)
    robust_sign = pattern_rng.choice([-1.0, 1.0], size=shape)
    fragile_sign = pattern_rng.choice([-1.0, 1.0], size=shape)

    counts = [num_samples // num_classes] * num_classes
    for c in range(num_samples % num_classes):
        counts[c] += 1
    labels = np.concatenate([np.full(n, c, dtype=np.int64)
                             for c, n in enumerate(counts)])
    sample_rng.shuffle(labels)

    base = 0.5 + 0.5 * margin * robust_sign[labels]
    x = base + noise * sample_rng.standard_normal(base.shape)
    # Row 0 carries the brittle cue: tiny margin, tiny noise.
    frag = 0.5 + fragile * fragile_sign[labels][:, :, 0, :]
    frag = frag + (fragile / 10.0) * sample_rng.standard_normal(frag.shape)
    x[:, :, 0, :] = frag
    x = np.clip(x, 0.0, 1.0).astype(np.float32)

    return Dataset(images=torch.from_numpy(x),
                   labels=torch.from_numpy(labels),
                   num_classes=num_classes,
                   name=f"synthetic-c{num_classes}-h{image_size}-s{seed}",
                   split=split)


def load_synthetic_spec(path: str, split: str | None = None) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        values = parse_synthetic_spec(fh.read())
    if split is not None:
        values["split"] = split
    return make_synthetic(
        num_classes=values["C"], num_samples=values["N"],
        image_size=values["H"], seed=values["seed"], margin=values["margin"],
        noise=values["noise"], fragile=values["fragile"], split=values["split"])


def load_dataset(path: str, fmt: str, split: str | None = None) -> Dataset:
    """Load a dataset by format name: 'cifar10-binary' or 'synthetic-spec'."""
    if fmt == "cifar10-binary":
        return load_cifar10_binary(path, split or "train")
    if fmt == "synthetic-spec":
        return load_synthetic_spec(path, split)
    raise InvalidInputError(
        f"unknown dataset format {fmt!r}; known: cifar10-binary, synthetic-spec")


@dataclass
class ClassIndex:
    """Per-class sample positions for constant-time class-conditional draws."""

    indices: list = field(default_factory=list)
    empty_classes: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.indices)


def build_class_index(dataset: Dataset) -> ClassIndex:
    labels = dataset.labels.numpy()
    per_class = [np.nonzero(labels == c)[0] for c in range(dataset.num_classes)]
    empty = [c for c, idx in enumerate(per_class) if idx.size == 0]
    if empty:
        warnings.warn(
            f"{dataset.name}: classes {empty} have no samples; "
            f"class-conditional draws from them will fail", stacklevel=2)
    return ClassIndex(indices=per_class, empty_classes=empty)


def sample_from_class(index: ClassIndex, class_id: int,
                      rng: np.random.Generator) -> int:
    """Draw one sample position from a class, uniformly at random."""
    if not 0 <= class_id < index.num_classes:
        raise InvalidInputError(
            f"class_id {class_id} out of range [0, {index.num_classes})")
    bucket = index.indices[class_id]
    if len(bucket) == 0:
        raise LookupError(f"class {class_id} has no samples to draw from")
    return int(bucket[rng.integers(len(bucket))])


def augment_batch(x: torch.Tensor, rng: np.random.Generator,
                  pad: int = 4, flip: bool = True) -> torch.Tensor:
    """Random shifted crops (zero padding) and horizontal flips, per sample."""
    b, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    dx = rng.integers(0, 2 * pad + 1, size=b)
    dy = rng.integers(0, 2 * pad + 1, size=b)
    do_flip = rng.random(b) < 0.5 if flip else np.zeros(b, dtype=bool)
    out = torch.empty_like(x)
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = torch.flip(crop, dims=[2]) if do_flip[i] else crop
    return out
