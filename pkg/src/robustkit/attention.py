"""Spatial attention maps, the distillation loss on them, and map export.

The attention map used for distillation is class-irrelevant: it averages the
last convolutional feature map over channels and keeps the spatial layout.
Gradient-weighted class activation maps are provided separately for
class-conditional inspection; they are diagnostic only and never feed the
training loss.
"""

from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .validation import InvalidInputError


def attention_map(feature_map: torch.Tensor) -> torch.Tensor:
    """Collapse a convolutional feature map to a single-channel spatial map.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` and returns ``(1, H, W)`` or
    ``(B, 1, H, W)``: the mean over channels at each spatial position.
    """
    if feature_map.dim() == 3:
        return feature_map.mean(dim=0, keepdim=True)
    if feature_map.dim() == 4:
        return feature_map.mean(dim=1, keepdim=True)
    raise InvalidInputError(
        f"feature_map must be 3-d or 4-d, got shape {tuple(feature_map.shape)}")


def kd_loss(teacher_map: torch.Tensor, student_map: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two attention maps.

    The difference is averaged over every element, so batched inputs yield
    the batch mean of per-sample spatial means.
    """
    if teacher_map.shape != student_map.shape:
        raise InvalidInputError(
            f"attention map shape mismatch: teacher {tuple(teacher_map.shape)} "
            f"vs student {tuple(student_map.shape)}")
    return (teacher_map - student_map).abs().mean()


def grad_cam(model, x: torch.Tensor, class_id: int) -> torch.Tensor:
    """Gradient-weighted class activation map for one class.

    Channel weights are the spatial means of the class logit's gradient with
    respect to the last convolutional feature map; the weighted channel sum
    is passed through a ReLU. Returns ``(B, 1, H, W)``.
    """
    x = x.detach().requires_grad_(True)
    outputs = model.features(x)
    fmap = outputs.feature_map
    if not fmap.requires_grad:
        raise InvalidInputError(
            "grad_cam requires a model whose feature map participates in "
            "autograd; call with gradients enabled")
    logit = outputs.logits[:, class_id].sum()
    grads = torch.autograd.grad(logit, fmap)[0]
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * fmap).sum(dim=1, keepdim=True))
    return cam.detach()


def save_attention_map(amap: torch.Tensor, path: str) -> tuple[str, str]:
    """Write one attention map as a grayscale PNG plus a float sidecar.

    The PNG is min-max normalized for viewing. The ``.npy`` sidecar next to
    it keeps the raw float32 values for exact comparisons. Returns the two
    paths written.
    """
    amap = amap.detach().cpu()
    if amap.dim() == 4:
        if amap.shape[0] != 1:
            raise InvalidInputError(
                f"save_attention_map takes a single map, got batch of "
                f"{amap.shape[0]}")
        amap = amap[0]
    if amap.dim() != 3 or amap.shape[0] != 1:
        raise InvalidInputError(
            f"expected attention map of shape (1, H, W), got {tuple(amap.shape)}")
    raw = amap[0].numpy().astype(np.float32)

    root, ext = os.path.splitext(path)
    png_path = path if ext.lower() == ".png" else path + ".png"
    npy_path = root + ".npy" if ext.lower() == ".png" else path + ".npy"

    span = float(raw.max() - raw.min())
    if span <= 0:
        norm = np.zeros_like(raw)
    else:
        norm = (raw - raw.min()) / span
    img = Image.fromarray((norm * 255.0).round().astype(np.uint8), mode="L")
    os.makedirs(os.path.dirname(os.path.abspath(png_path)), exist_ok=True)
    img.save(png_path)
    np.save(npy_path, raw)
    return png_path, npy_path
