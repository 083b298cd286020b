"""Model zoo with a shared three-output contract.

Every architecture exposes ``features(x)`` returning logits, the last
convolutional feature map, and the penultimate embedding in one pass. The
logits are always computed from that embedding by the final linear layer,
so the three outputs are consistent by construction.

Also home to input-gradient computation for the attack suite, parameter
hashing, freezing, and checkpoint serialization.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import InvalidInputError


class ModelOutputs(NamedTuple):
    logits: torch.Tensor
    feature_map: torch.Tensor
    embedding: torch.Tensor


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be loaded into the requested model."""


@dataclass
class ArchDescriptor:
    """Serializable identity of a network: family plus shape parameters.

    Two checkpoints are interchangeable exactly when their descriptors are
    equal; loaders reject anything else.
    """

    arch: str
    num_classes: int
    in_channels: int = 3
    image_size: int = 32
    width: int = 32
    depth: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidInputError(
                f"num_classes must be at least 2, got {self.num_classes}")
        for field in ("in_channels", "image_size", "width", "depth"):
            if getattr(self, field) < 1:
                raise InvalidInputError(
                    f"{field} must be positive, got {getattr(self, field)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**d)


class ImageClassifier(nn.Module):
    """Base class: a classifier with the three-output feature contract."""

    def __init__(self, descriptor: ArchDescriptor):
        super().__init__()
        self.descriptor = descriptor
        self.frozen = False

    def features(self, x: torch.Tensor) -> ModelOutputs:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).logits

    def train(self, mode: bool = True):
        # Frozen models must never leave eval mode: batch-norm statistics
        # would silently drift otherwise.
        if getattr(self, "frozen", False) and mode:
            return self
        return super().train(mode)


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=False)


class SmallCNN(ImageClassifier):
    """Compact convolutional net: three conv stages, global average pool.

    Channel widths are ``width``, ``2 * width``, ``4 * width``; the
    embedding dimension equals ``4 * width``. Spatial size must be
    divisible by 4.
    """

    def __init__(self, descriptor: ArchDescriptor):
        super().__init__(descriptor)
        w = descriptor.width
        cin = descriptor.in_channels
        self.stage1 = nn.Sequential(
            _conv3(cin, w), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            _conv3(w, w), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            nn.MaxPool2d(2))
        self.stage2 = nn.Sequential(
            _conv3(w, 2 * w), nn.BatchNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.MaxPool2d(2))
        self.stage3 = nn.Sequential(
            _conv3(2 * w, 4 * w), nn.BatchNorm2d(4 * w), nn.ReLU(inplace=True))
        self.head = nn.Linear(4 * w, descriptor.num_classes)

    def features(self, x: torch.Tensor) -> ModelOutputs:
        fmap = self.stage3(self.stage2(self.stage1(x)))
        embedding = fmap.mean(dim=(2, 3))
        logits = self.head(embedding)
        return ModelOutputs(logits=logits, feature_map=fmap, embedding=embedding)


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3(cout, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(out)
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


class WideResNetLite(ImageClassifier):
    """Pre-activation residual net with three stages of ``depth`` blocks.

    Stage widths are ``width``, ``2 * width``, ``4 * width``; the embedding
    dimension equals ``4 * width``.
    """

    def __init__(self, descriptor: ArchDescriptor):
        super().__init__(descriptor)
        w = descriptor.width
        self.stem = _conv3(descriptor.in_channels, w)
        stages = []
        cin = w
        for i, cout in enumerate((w, 2 * w, 4 * w)):
            for j in range(descriptor.depth):
                stride = 2 if i > 0 and j == 0 else 1
                stages.append(_BasicBlock(cin, cout, stride))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.bn_out = nn.BatchNorm2d(4 * w)
        self.head = nn.Linear(4 * w, descriptor.num_classes)

    def features(self, x: torch.Tensor) -> ModelOutputs:
        fmap = F.relu(self.bn_out(self.stages(self.stem(x))))
        embedding = fmap.mean(dim=(2, 3))
        logits = self.head(embedding)
        return ModelOutputs(logits=logits, feature_map=fmap, embedding=embedding)


class LinearClassifier(ImageClassifier):
    """Single linear layer on flattened pixels.

    The feature map is the input itself and the embedding is its flattened
    view, which makes gradients and attention maps analytically checkable.
    """

    def __init__(self, descriptor: ArchDescriptor):
        super().__init__(descriptor)
        dim = descriptor.in_channels * descriptor.image_size ** 2
        self.head = nn.Linear(dim, descriptor.num_classes)

    def features(self, x: torch.Tensor) -> ModelOutputs:
        embedding = x.reshape(x.shape[0], -1)
        logits = self.head(embedding)
        return ModelOutputs(logits=logits, feature_map=x, embedding=embedding)


_REGISTRY = {
    "small-cnn": SmallCNN,
    "wrn-lite": WideResNetLite,
    "linear": LinearClassifier,
}


def build_model(descriptor: ArchDescriptor, seed: Optional[int] = None) -> ImageClassifier:
    """Construct a model from its descriptor, optionally with seeded init."""
    if descriptor.arch not in _REGISTRY:
        raise InvalidInputError(
            f"unknown architecture {descriptor.arch!r}; known: "
            f"{sorted(_REGISTRY)}")
    cls = _REGISTRY[descriptor.arch]
    if seed is None:
        return cls(descriptor)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return cls(descriptor)


def freeze(model: ImageClassifier) -> ImageClassifier:
    """Deep-copy a model into a permanently eval-mode, gradient-free twin."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.frozen = True
    frozen.eval()
    return frozen


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, stable across processes."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        if isinstance(t, torch.Tensor):
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


@dataclass
class LossSpec:
    """Which scalar objective an attack differentiates.

    ``target`` is set only by targeted attacks; when present it replaces
    the provided labels. ``kappa`` caps the margin objective and
    ``smoothing`` applies to the cross-entropy kind.
    """

    kind: str = "cross-entropy"
    target: Optional[int] = None
    smoothing: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cross-entropy", "cw-margin"):
            raise InvalidInputError(
                f"loss kind must be 'cross-entropy' or 'cw-margin', "
                f"got {self.kind!r}")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidInputError(
                f"smoothing must lie in [0, 1), got {self.smoothing}")


def margin_objective(logits: torch.Tensor, labels: torch.Tensor,
                     kappa: float = 0.0) -> torch.Tensor:
    """Per-sample margin ``min(max_other_logit - true_logit, kappa)``.

    Positive values mean the label class has already lost the argmax race;
    the cap at ``kappa`` stops rewarding further separation. Requires at
    least two classes.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = labels.reshape(1)
    if logits.shape[1] < 2:
        raise InvalidInputError(
            f"margin objective needs at least 2 classes, got {logits.shape[1]}")
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    other = masked.max(dim=1).values
    return (other - true).clamp(max=kappa)


def _objective_sum(logits: torch.Tensor, labels: torch.Tensor,
                   spec: LossSpec) -> torch.Tensor:
    if spec.kind == "cross-entropy":
        return F.cross_entropy(logits, labels, label_smoothing=spec.smoothing,
                               reduction="sum")
    return margin_objective(logits, labels, spec.kappa).sum()


def input_gradient(model: ImageClassifier, x: torch.Tensor, spec: LossSpec,
                   labels: torch.Tensor) -> torch.Tensor:
    """Gradient of the specified loss with respect to the input batch.

    The model is evaluated in eval mode (restored afterwards) and its
    parameters are left untouched. The loss is summed over the batch, so
    each row of the result is that sample's own gradient.
    """
    if spec.target is not None:
        labels = torch.full_like(labels, spec.target)
    leaf = x.detach().clone().requires_grad_(True)
    was_training = model.training
    model.eval()
    try:
        logits = model.features(leaf).logits
        loss = _objective_sum(logits, labels, spec)
        grad = torch.autograd.grad(loss, leaf)[0]
    finally:
        if was_training:
            model.train()
    return grad.detach()


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path: str, model: ImageClassifier, *,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    epoch: Optional[int] = None,
                    config_digest: Optional[str] = None,
                    seed: Optional[int] = None) -> str:
    """Write model weights plus enough context to resume or verify a run."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "descriptor": model.descriptor.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "epoch": epoch,
        "config_digest": config_digest,
        "seed": seed,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str, *,
                    expected: Optional[ArchDescriptor] = None) -> dict:
    """Load a checkpoint, rebuild its model, and verify identity.

    Passing ``expected`` asserts the stored architecture descriptor matches;
    a mismatch raises ``CheckpointError`` naming both descriptors.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    descriptor = ArchDescriptor.from_dict(payload["descriptor"])
    if expected is not None and descriptor != expected:
        raise CheckpointError(
            f"{path}: architecture mismatch: checkpoint holds "
            f"{descriptor.to_dict()}, caller expected {expected.to_dict()}")
    model = build_model(descriptor)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    payload["model"] = model
    payload["descriptor"] = descriptor
    return payload
