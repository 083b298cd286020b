"""Shared test utilities: hand-built models and independent oracles.

The oracles here recompute quantities by a separate route from the library
(straight-line formulas, finite differences, brute-force loops) so tests
compare two genuinely different derivations.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from robustkit.models import ArchDescriptor, LinearClassifier


def make_linear(weight, bias=None, in_channels=1, image_size=2,
                dtype=torch.float64) -> LinearClassifier:
    """Linear model with exact, hand-chosen parameters."""
    weight = torch.as_tensor(weight, dtype=dtype)
    num_classes = weight.shape[0]
    desc = ArchDescriptor(arch="linear", num_classes=num_classes,
                          in_channels=in_channels, image_size=image_size)
    model = LinearClassifier(desc).to(dtype)
    with torch.no_grad():
        model.head.weight.copy_(weight)
        if bias is None:
            model.head.bias.zero_()
        else:
            model.head.bias.copy_(torch.as_tensor(bias, dtype=dtype))
    model.eval()
    return model


def manual_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def manual_ce(logits: np.ndarray, label: int, smoothing: float = 0.0) -> float:
    """Cross entropy with a smoothed target, written out longhand."""
    z = np.asarray(logits, dtype=np.float64)
    c = z.shape[0]
    log_probs = z - (z.max() + math.log(np.exp(z - z.max()).sum()))
    target = np.full(c, smoothing / c)
    target[label] += 1.0 - smoothing
    return float(-(target * log_probs).sum())


def manual_margin(logits: np.ndarray, label: int, kappa: float = 0.0) -> float:
    z = np.asarray(logits, dtype=np.float64)
    other = max(z[j] for j in range(len(z)) if j != label)
    return float(min(other - z[label], kappa))


def batch_objective(model, x: torch.Tensor, labels, kind: str,
                    smoothing: float = 0.0, kappa: float = 0.0) -> float:
    """Summed objective over a batch, via the manual formulas."""
    with torch.no_grad():
        logits = model.features(x).logits.double().numpy()
    labels = np.asarray(labels)
    total = 0.0
    for i in range(logits.shape[0]):
        if kind == "cross-entropy":
            total += manual_ce(logits[i], int(labels[i]), smoothing)
        else:
            total += manual_margin(logits[i], int(labels[i]), kappa)
    return total


def fd_gradient_at(model, x: torch.Tensor, labels, coord: tuple, kind: str,
                   h: float = 1e-4, smoothing: float = 0.0,
                   kappa: float = 0.0) -> float:
    """Central-difference derivative of the summed objective at one pixel."""
    xp = x.clone()
    xm = x.clone()
    xp[coord] += h
    xm[coord] -= h
    fp = batch_objective(model, xp, labels, kind, smoothing, kappa)
    fm = batch_objective(model, xm, labels, kind, smoothing, kappa)
    return (fp - fm) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def manual_angular(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = abs(float(a @ b)) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)
    return max(1.0 - cos, 0.0)
