"""Input validation helpers shared across the toolkit.

All user-facing entry points funnel tensor/array checks through these
functions so error messages consistently name expected vs actual values.
"""

from __future__ import annotations

import numpy as np
import torch


class InvalidInputError(ValueError):
    """Raised when an input violates a documented shape/range contract."""


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Convert array-likes to a torch tensor without copying when possible."""
    if isinstance(x, torch.Tensor):
        t = x
    elif isinstance(x, np.ndarray):
        t = torch.from_numpy(x)
    else:
        t = torch.as_tensor(x)
    if dtype is not None:
        t = t.to(dtype)
    return t


def check_images(x: torch.Tensor, *, channels: int | None = None,
                 size: int | None = None, name: str = "images") -> torch.Tensor:
    """Validate a B×C×H×W image batch with pixel values in [0, 1]."""
    if x.dim() != 4:
        raise InvalidInputError(
            f"{name}: expected 4-d batch (B, C, H, W), got {x.dim()}-d "
            f"shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise InvalidInputError(
            f"{name}: expected {channels} channels, got {x.shape[1]} "
            f"(shape {tuple(x.shape)})")
    if size is not None and (x.shape[2] != size or x.shape[3] != size):
        raise InvalidInputError(
            f"{name}: expected spatial size {size}x{size}, got "
            f"{x.shape[2]}x{x.shape[3]}")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise InvalidInputError(
            f"{name}: pixel values must lie in [0, 1], got range "
            f"[{lo:.6g}, {hi:.6g}]")
    return x


def check_labels(y: torch.Tensor, num_classes: int,
                 name: str = "labels") -> torch.Tensor:
    """Validate an integer label vector with values in [0, num_classes)."""
    if y.dim() != 1:
        raise InvalidInputError(
            f"{name}: expected 1-d label vector, got shape {tuple(y.shape)}")
    if y.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
        raise InvalidInputError(f"{name}: expected integer dtype, got {y.dtype}")
    if y.numel() > 0:
        lo, hi = int(y.min()), int(y.max())
        if lo < 0 or hi >= num_classes:
            raise InvalidInputError(
                f"{name}: values must lie in [0, {num_classes}), got range "
                f"[{lo}, {hi}]")
    return y.long()


def check_same_shape(a: torch.Tensor, b: torch.Tensor,
                     name_a: str = "a", name_b: str = "b") -> None:
    if a.shape != b.shape:
        raise InvalidInputError(
            f"shape mismatch: {name_a} has {tuple(a.shape)}, "
            f"{name_b} has {tuple(b.shape)}")


def check_fraction(value: float, name: str, *, allow_zero: bool = True) -> float:
    value = float(value)
    low_ok = value >= 0.0 if allow_zero else value > 0.0
    if not low_ok:
        bound = "non-negative" if allow_zero else "positive"
        raise InvalidInputError(f"{name} must be {bound}, got {value}")
    return value
