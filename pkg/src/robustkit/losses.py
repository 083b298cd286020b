"""Loss terms for attention-distilled bidirectional metric training.

The full objective combines a smoothed cross entropy on adversarial
examples, an attention distillation term against a frozen teacher, and a
bidirectional triplet term on embeddings, plus a small embedding-norm
regularizer:

    total = ce + kd + lambda_triplet * triplet + lambda_norm * norm

Every term reduces by a plain mean over the batch, so the batched loss
equals the mean of per-sample losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attention import attention_map, kd_loss
from .validation import InvalidInputError, check_fraction


@dataclass
class LossWeights:
    """Weights and margins of the composite training objective.

    Attributes:
        margin: triplet hinge margin.
        lambda_triplet: weight on the triplet term.
        lambda_norm: weight on the embedding-norm regularizer.
        smoothing: label smoothing used by the cross-entropy term.
    """

    margin: float = 0.03
    lambda_triplet: float = 2.0
    lambda_norm: float = 0.001
    smoothing: float = 0.5

    def __post_init__(self):
        check_fraction(self.margin, "margin")
        check_fraction(self.lambda_triplet, "lambda_triplet")
        check_fraction(self.lambda_norm, "lambda_norm")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidInputError(
                f"smoothing must lie in [0, 1), got {self.smoothing}")


@dataclass
class LossBreakdown:
    """Per-term loss values; ``total`` is the exact sum of the terms."""

    ce: torch.Tensor
    kd: torch.Tensor
    triplet: torch.Tensor
    norm: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {
            "ce": float(self.ce.detach()),
            "kd": float(self.kd.detach()),
            "triplet": float(self.triplet.detach()),
            "norm": float(self.norm.detach()),
            "total": float(self.total.detach()),
        }


def _combine(ce, kd, triplet, norm, weights: LossWeights) -> LossBreakdown:
    total = ce + kd + weights.lambda_triplet * triplet + weights.lambda_norm * norm
    return LossBreakdown(ce=ce, kd=kd, triplet=triplet, norm=norm, total=total)


def angular_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Angular distance ``1 - |cos(a, b)|`` in ``[0, 1]``.

    Accepts single vectors ``(D,)`` or batches ``(B, D)``. Sign-flipped and
    rescaled vectors are at distance zero; orthogonal vectors at one. Exact
    zero vectors have no direction and raise ``InvalidInputError``.
    """
    if a.shape != b.shape:
        raise InvalidInputError(
            f"angular_distance: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 1
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 2:
        raise InvalidInputError(
            f"angular_distance expects (D,) or (B, D), got {tuple(a.shape)}")
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if (na == 0).any() or (nb == 0).any():
        raise InvalidInputError("angular_distance is undefined for zero vectors")
    cos = (a * b).sum(dim=1) / (na * nb + 1e-12)
    dist = (1.0 - cos.abs()).clamp(min=0.0)
    return dist[0] if single else dist


def _triplet_per_sample(anchor, positive, negative, margin) -> torch.Tensor:
    gap = angular_distance(anchor, positive) - angular_distance(anchor, negative)
    return F.relu(gap + margin)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor,
                 negative: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinged angular triplet loss, averaged over the batch.

    Pulls the anchor embedding toward the positive and pushes it from the
    negative until the distance gap exceeds ``margin``.
    """
    single = anchor.dim() == 1
    if single:
        anchor = anchor.unsqueeze(0)
        positive = positive.unsqueeze(0)
        negative = negative.unsqueeze(0)
    return _triplet_per_sample(anchor, positive, negative, margin).mean()


def bml_loss(anchor: torch.Tensor, positive: torch.Tensor,
             negative: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted triplet term plus the embedding-norm regularizer."""
    if anchor.dim() == 1:
        anchor = anchor.unsqueeze(0)
        positive = positive.unsqueeze(0)
        negative = negative.unsqueeze(0)
    trip = _triplet_per_sample(anchor, positive, negative, weights.margin).mean()
    norms = anchor.norm(dim=1) + positive.norm(dim=1) + negative.norm(dim=1)
    return weights.lambda_triplet * trip + weights.lambda_norm * norms.mean()


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                           smoothing: float = 0.0) -> torch.Tensor:
    """Cross entropy against label-smoothed targets, averaged over the batch.

    The target distribution puts ``1 - smoothing`` extra mass on the true
    class on top of a uniform ``smoothing / C`` floor. ``smoothing=0``
    recovers the standard cross entropy.
    """
    if not 0.0 <= smoothing < 1.0:
        raise InvalidInputError(f"smoothing must lie in [0, 1), got {smoothing}")
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = labels.reshape(1)
    return F.cross_entropy(logits, labels, label_smoothing=smoothing)


def agkd_loss(teacher, student, pair) -> torch.Tensor:
    """Attention distillation over both directions of an adversarial pair.

    The teacher sees the clean source image of each direction; the student
    sees the corresponding adversarial example. Rows without a backward
    example (empty candidate class) contribute only their forward term.
    """
    with torch.no_grad():
        t_fwd = attention_map(teacher.features(pair.clean).feature_map)
    s_fwd = attention_map(student.features(pair.forward_ae).feature_map)
    fwd = kd_loss(t_fwd, s_fwd)

    valid = pair.has_backward
    if not bool(valid.any()):
        return fwd
    with torch.no_grad():
        t_bwd = attention_map(teacher.features(pair.backward_src[valid]).feature_map)
    s_bwd = attention_map(student.features(pair.backward_ae[valid]).feature_map)
    return fwd + kd_loss(t_bwd, s_bwd)


def total_loss(student, teacher, pair, weights: LossWeights, *,
               include_kd: bool = True, include_metric: bool = True,
               ce_samples: str = "both") -> LossBreakdown:
    """Full training objective on one adversarial pair batch.

    ``ce_samples`` selects which adversarial examples feed the cross
    entropy: ``"both"`` averages the forward term (true label) with the
    backward term (confusing label); ``"forward"`` uses the forward term
    alone. ``include_kd`` and ``include_metric`` gate the distillation and
    metric terms so reduced training modes share this code path.
    """
    if ce_samples not in ("both", "forward"):
        raise InvalidInputError(
            f"ce_samples must be 'both' or 'forward', got {ce_samples!r}")
    zero = torch.zeros((), dtype=pair.clean.dtype, device=pair.clean.device)

    out_fwd = student.features(pair.forward_ae)
    ce = smoothed_cross_entropy(out_fwd.logits, pair.labels, weights.smoothing)

    valid = pair.has_backward
    any_backward = bool(valid.any())
    out_bwd = student.features(pair.backward_ae[valid]) if any_backward else None
    if ce_samples == "both" and any_backward:
        ce_bwd = smoothed_cross_entropy(
            out_bwd.logits, pair.mc_labels[valid], weights.smoothing)
        ce = 0.5 * (ce + ce_bwd)

    kd = zero
    if include_kd:
        if teacher is None:
            raise InvalidInputError("distillation requires a teacher model")
        with torch.no_grad():
            t_fwd = attention_map(teacher.features(pair.clean).feature_map)
        kd = kd_loss(t_fwd, attention_map(out_fwd.feature_map))
        if any_backward:
            with torch.no_grad():
                t_bwd = attention_map(
                    teacher.features(pair.backward_src[valid]).feature_map)
            kd = kd + kd_loss(t_bwd, attention_map(out_bwd.feature_map))

    triplet = zero
    norm = zero
    if include_metric:
        out_clean = student.features(pair.clean)
        anchor = out_fwd.embedding
        positive = out_clean.embedding
        norms = anchor.norm(dim=1) + positive.norm(dim=1)
        if any_backward:
            negative = out_bwd.embedding
            triplet = _triplet_per_sample(
                anchor[valid], positive[valid], negative, weights.margin).mean()
            norms = norms.clone()
            norms[valid] = norms[valid] + negative.norm(dim=1)
        norm = norms.mean()

    return _combine(ce, kd, triplet, norm, weights)


def ce_only_breakdown(ce: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    """Breakdown for modes whose objective is a cross entropy alone."""
    zero = torch.zeros_like(ce)
    return _combine(ce, zero, zero, zero, weights)
