"""Gradient-based attacks under an l-infinity pixel budget.

All attacks share one configuration type and one projection: iterates stay
within ``eps`` of the original image and inside the valid pixel range
``[0, 1]``. Budgets are expressed in 1/255 pixel units everywhere a config
is written or read; the math converts to fractions internally.

The bidirectional pair builder turns a clean batch into matched forward
and backward targeted adversarial examples around each sample's most
confusing class, which is the unit the metric-learning losses consume.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import ClassIndex, Dataset, sample_from_class
from .models import ImageClassifier, LossSpec, input_gradient, margin_objective
from .validation import InvalidInputError, check_images, check_labels


@dataclass
class AttackConfig:
    """Parameters of one attack; ``eps`` and ``step_size`` are in 1/255 units.

    ``step_size=None`` picks the default at run time: the full budget for
    single-step attacks, 2/255 for iterative ones. ``momentum > 0`` turns
    the iteration into its momentum variant. ``kappa`` only affects the
    margin loss kind.
    """

    eps: float = 8.0
    steps: int = 20
    step_size: Optional[float] = None
    random_start: bool = True
    targeted: bool = False
    loss_kind: str = "cross-entropy"
    momentum: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise InvalidInputError(f"eps must be non-negative, got {self.eps}")
        if self.steps < 0:
            raise InvalidInputError(f"steps must be non-negative, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidInputError(
                f"step_size must be positive, got {self.step_size}")
        if self.momentum < 0:
            raise InvalidInputError(
                f"momentum must be non-negative, got {self.momentum}")
        if self.loss_kind not in ("cross-entropy", "cw-margin"):
            raise InvalidInputError(
                f"loss_kind must be 'cross-entropy' or 'cw-margin', "
                f"got {self.loss_kind!r}")

    @property
    def eps_frac(self) -> float:
        return self.eps / 255.0

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return float(self.eps) if self.steps <= 1 else 2.0

    @property
    def step_frac(self) -> float:
        return self.resolved_step_size() / 255.0

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def project_linf(x_adv: torch.Tensor, x: torch.Tensor,
                 eps_frac: float) -> torch.Tensor:
    """Clamp iterates into the intersection of the eps-ball and [0, 1]."""
    lower = (x - eps_frac).clamp(min=0.0)
    upper = (x + eps_frac).clamp(max=1.0)
    return torch.min(torch.max(x_adv, lower), upper)


def cw_margin(logits: torch.Tensor, labels: torch.Tensor,
              kappa: float = 0.0) -> torch.Tensor:
    """Per-sample margin loss ``min(max_other - true, kappa)``.

    Ascending this drives the true logit below the best competitor; the cap
    stops the push once the gap reaches ``kappa``.
    """
    return margin_objective(logits, labels, kappa)


def _uniform_noise(shape, eps_frac: float, rng: np.random.Generator,
                   dtype: torch.dtype) -> torch.Tensor:
    noise = rng.uniform(-eps_frac, eps_frac, size=tuple(shape))
    return torch.from_numpy(noise).to(dtype)


def _init_iterate(x: torch.Tensor, cfg: AttackConfig,
                  rng: Optional[np.random.Generator]) -> torch.Tensor:
    if not cfg.random_start:
        return x.clone()
    if rng is None:
        raise InvalidInputError(
            "random_start attacks need an explicit numpy Generator so runs "
            "stay reproducible")
    return project_linf(x + _uniform_noise(x.shape, cfg.eps_frac, rng, x.dtype),
                        x, cfg.eps_frac)


def _validate_attack_batch(x, labels):
    check_images(x, name="attack input")
    labels = check_labels(labels, num_classes=2 ** 31 - 1, name="attack labels")
    if x.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"attack: {x.shape[0]} images but {labels.shape[0]} labels")
    return labels


def _plain_loop(model, x, labels, cfg, rng):
    spec = LossSpec(kind=cfg.loss_kind, smoothing=0.0, kappa=cfg.kappa)
    direction = -1.0 if cfg.targeted else 1.0
    alpha = cfg.step_frac
    x_adv = _init_iterate(x, cfg, rng)
    for _ in range(cfg.steps):
        grad = input_gradient(model, x_adv, spec, labels)
        x_adv = project_linf(x_adv + direction * alpha * torch.sign(grad),
                             x, cfg.eps_frac)
    return x_adv.detach()


def _momentum_loop(model, x, labels, cfg, rng):
    spec = LossSpec(kind=cfg.loss_kind, smoothing=0.0, kappa=cfg.kappa)
    direction = -1.0 if cfg.targeted else 1.0
    alpha = cfg.step_frac
    x_adv = _init_iterate(x, cfg, rng)
    velocity = torch.zeros_like(x)
    for _ in range(cfg.steps):
        grad = input_gradient(model, x_adv, spec, labels)
        # Per-sample l1 normalization; an all-zero gradient contributes 0.
        flat = grad.abs().flatten(1).sum(dim=1)
        safe = torch.where(flat > 0, flat, torch.ones_like(flat))
        normalized = grad / safe.view(-1, 1, 1, 1)
        velocity = cfg.momentum * velocity + normalized
        x_adv = project_linf(x_adv + direction * alpha * torch.sign(velocity),
                             x, cfg.eps_frac)
    return x_adv.detach()


def run_attack(model: ImageClassifier, x: torch.Tensor, labels: torch.Tensor,
               cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """Run the attack described by ``cfg`` on a batch.

    ``labels`` are the true labels for non-targeted attacks and the target
    labels for targeted ones. Returns a detached adversarial batch inside
    the budget; ``eps=0`` returns the input values unchanged.
    """
    labels = _validate_attack_batch(x, labels)
    if cfg.eps == 0:
        return x.clone()
    loop = _momentum_loop if cfg.momentum > 0 else _plain_loop
    return loop(model, x, labels, cfg, rng)


def fgsm(model: ImageClassifier, x: torch.Tensor, labels: torch.Tensor,
         eps_255: float, targeted: bool = False,
         loss_kind: str = "cross-entropy") -> torch.Tensor:
    """Single sign step of the full budget; no random start."""
    cfg = AttackConfig(eps=eps_255, steps=1, step_size=eps_255,
                       random_start=False, targeted=targeted,
                       loss_kind=loss_kind)
    return run_attack(model, x, labels, cfg)


def pgd(model: ImageClassifier, x: torch.Tensor, labels: torch.Tensor,
        cfg: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """Iterated sign steps with projection; any momentum setting is ignored."""
    labels = _validate_attack_batch(x, labels)
    if cfg.eps == 0:
        return x.clone()
    return _plain_loop(model, x, labels, cfg, rng)


def mim(model: ImageClassifier, x: torch.Tensor, labels: torch.Tensor,
        cfg: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """Momentum-accumulated iterated sign steps.

    Gradients are l1-normalized per sample before entering the running
    accumulator. With decay 0 the accumulator holds exactly the normalized
    current gradient, so the trajectory matches the plain iteration.
    """
    labels = _validate_attack_batch(x, labels)
    if cfg.eps == 0:
        return x.clone()
    return _momentum_loop(model, x, labels, cfg, rng)


@torch.no_grad()
def most_confusing_class(model: ImageClassifier, x: torch.Tensor,
                         labels: torch.Tensor) -> torch.Tensor:
    """Most confusing wrong class per sample: the top non-true logit.

    Equivalent to minimizing cross entropy over all wrong labels. Ties
    resolve to the lowest class id.
    """
    was_training = model.training
    model.eval()
    try:
        logits = model(x)
    finally:
        if was_training:
            model.train()
    if logits.shape[1] < 2:
        raise InvalidInputError("most_confusing_class needs at least 2 classes")
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    return masked.argmax(dim=1)


@dataclass
class AdversarialPair:
    """Matched forward/backward targeted examples around one clean batch.

    ``forward_ae`` attacks each clean image toward its most confusing
    class; ``backward_ae`` attacks a drawn sample of that class back toward
    the true label. Rows whose confusing class had no samples to draw keep
    placeholder copies and are masked out via ``has_backward``.
    """

    clean: torch.Tensor
    labels: torch.Tensor
    mc_labels: torch.Tensor
    forward_ae: torch.Tensor
    backward_src: torch.Tensor
    backward_ae: torch.Tensor
    has_backward: torch.Tensor
    backward_indices: list = field(default_factory=list)


def bidirectional_pair(model: ImageClassifier, x: torch.Tensor,
                       labels: torch.Tensor, dataset: Dataset,
                       index: ClassIndex, cfg: AttackConfig,
                       rng: Optional[np.random.Generator] = None, *,
                       noise_rng: Optional[np.random.Generator] = None,
                       sample_rng: Optional[np.random.Generator] = None,
                       backward_noise_rng: Optional[np.random.Generator] = None,
                       ) -> AdversarialPair:
    """Build the forward and backward adversarial examples for a batch.

    A single ``rng`` serves all three random purposes in order (forward
    start noise, class draws, backward start noise); passing the dedicated
    generators instead keeps the streams independent.
    """
    noise_rng = noise_rng or rng
    sample_rng = sample_rng or rng
    backward_noise_rng = backward_noise_rng or rng
    if sample_rng is None:
        raise InvalidInputError(
            "bidirectional_pair needs a numpy Generator for class draws")
    tcfg = cfg.replace(targeted=True)

    mc = most_confusing_class(model, x, labels)
    forward_ae = run_attack(model, x, mc, tcfg, noise_rng)

    b = x.shape[0]
    backward_src = x.clone()
    has_backward = torch.zeros(b, dtype=torch.bool)
    drawn = []
    for i in range(b):
        try:
            j = sample_from_class(index, int(mc[i]), sample_rng)
        except LookupError:
            drawn.append(-1)
            continue
        drawn.append(j)
        backward_src[i] = dataset.images[j]
        has_backward[i] = True

    backward_ae = forward_ae.clone()
    if bool(has_backward.any()):
        sel = has_backward.nonzero(as_tuple=True)[0]
        backward_ae[sel] = run_attack(model, backward_src[sel], labels[sel],
                                      tcfg, backward_noise_rng)

    return AdversarialPair(clean=x, labels=labels, mc_labels=mc,
                           forward_ae=forward_ae, backward_src=backward_src,
                           backward_ae=backward_ae, has_backward=has_backward,
                           backward_indices=drawn)


def named_attack(name: str, eps_255: float = 8.0) -> AttackConfig:
    """Build a preset config from a compact name like ``pgd-20``.

    Known families: fgsm, bim-K, pgd-K, cw-K, mim-K. Iterative presets use
    2/255 steps; the momentum preset uses decay 1.0.
    """
    base, _, steps_part = name.partition("-")
    base = base.lower()
    if base == "fgsm":
        if steps_part:
            raise InvalidInputError("fgsm takes no step count")
        return AttackConfig(eps=eps_255, steps=1, step_size=eps_255,
                            random_start=False)
    if base not in ("bim", "pgd", "cw", "mim"):
        raise InvalidInputError(
            f"unknown attack name {name!r}; known: fgsm, bim-K, pgd-K, "
            f"cw-K, mim-K")
    if not steps_part.isdigit():
        raise InvalidInputError(f"attack {name!r} needs a step count suffix")
    steps = int(steps_part)
    if base == "bim":
        return AttackConfig(eps=eps_255, steps=steps, step_size=2.0,
                            random_start=False)
    if base == "pgd":
        return AttackConfig(eps=eps_255, steps=steps, step_size=2.0,
                            random_start=True)
    if base == "cw":
        return AttackConfig(eps=eps_255, steps=steps, step_size=2.0,
                            random_start=True, loss_kind="cw-margin",
                            kappa=0.0)
    return AttackConfig(eps=eps_255, steps=steps, step_size=2.0,
                        random_start=False, momentum=1.0)


TABLE1_NAMES = ("fgsm", "bim-7", "pgd-20", "pgd-100", "cw-20", "cw-100",
                "mim-40")


def table1_suite(eps_255: float = 8.0) -> list[tuple[str, AttackConfig]]:
    """The standard benchmark suite in report order."""
    return [(name, named_attack(name, eps_255)) for name in TABLE1_NAMES]
