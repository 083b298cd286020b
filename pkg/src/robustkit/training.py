"""Training loop for the defense modes and their baselines.

Five modes share one loop and differ only in how a batch becomes a loss:

    standard   smoothed cross entropy on clean images
    at         smoothed cross entropy on non-targeted adversarial examples
    bml        adversarial pairs + cross entropy + metric terms
    agkd       adversarial pairs + cross entropy + attention distillation
    agkd-bml   adversarial pairs + all terms

Distillation modes require a frozen clean-trained teacher. Attack
generation always runs the model in eval mode; the loss forward runs in
train mode. One optimizer update is taken per minibatch on the mean
per-sample loss.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from .attacks import AttackConfig, bidirectional_pair, run_attack
from .data import Dataset, augment_batch, build_class_index
from .losses import (LossWeights, ce_only_breakdown, smoothed_cross_entropy,
                     total_loss)
from .models import (ArchDescriptor, ImageClassifier, build_model, freeze,
                     load_checkpoint, save_checkpoint)
from .seeding import derive_seed, seed_stream
from .validation import InvalidInputError

MODES = ("standard", "at", "bml", "agkd", "agkd-bml")
_PAIR_MODES = ("bml", "agkd", "agkd-bml")
_KD_MODES = ("agkd", "agkd-bml")
_METRIC_MODES = ("bml", "agkd-bml")
_SPOT_CHECK_EVERY = 100


@dataclass
class TrainConfig:
    """Everything a training run depends on, serializable to JSON.

    ``eps`` and ``attack_step_size`` are in 1/255 units. A missing
    ``attack_step_size`` resolves to ``1.25 * eps / attack_steps`` capped
    at ``eps``, so a short inner attack can still traverse the ball.
    """

    mode: str = "agkd-bml"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    decay_epochs: tuple = (100, 150)
    decay_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    eps: float = 8.0
    attack_steps: int = 2
    attack_step_size: Optional[float] = None
    attack_random_start: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    arch: str = "small-cnn"
    width: int = 32
    depth: int = 1
    augment: bool = False
    ce_samples: str = "both"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(
                f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if self.eps < 0:
            raise InvalidInputError(f"eps must not be negative, got {self.eps}")
        if self.ce_samples not in ("both", "forward"):
            raise InvalidInputError(
                f"ce_samples must be 'both' or 'forward', got "
                f"{self.ce_samples!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def resolved_attack_step(self) -> float:
        if self.attack_step_size is not None:
            return self.attack_step_size
        return min(1.25 * self.eps / max(self.attack_steps, 1), float(self.eps))

    def attack_config(self, targeted: bool = False) -> AttackConfig:
        return AttackConfig(eps=self.eps, steps=self.attack_steps,
                            step_size=self.resolved_attack_step(),
                            random_start=self.attack_random_start,
                            targeted=targeted)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for an epoch; decays apply from their epoch onwards."""
    drops = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.lr * cfg.decay_factor ** drops


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    mode: str
    ce: float
    kd: float
    triplet: float
    norm: float
    total: float
    valid_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: ImageClassifier
    log: list
    checkpoints: list
    final_checkpoint: Optional[str]
    descriptor: ArchDescriptor
    config_digest: str


def _spot_check(x_adv: torch.Tensor, x: torch.Tensor, eps_frac: float) -> None:
    tol = 1e-6
    gap = float((x_adv - x).abs().max())
    if gap > eps_frac + tol:
        raise InvalidInputError(
            f"adversarial batch left the budget: max deviation {gap:.6g} "
            f"exceeds eps {eps_frac:.6g}")
    lo, hi = float(x_adv.min()), float(x_adv.max())
    if lo < -tol or hi > 1 + tol:
        raise InvalidInputError(
            f"adversarial batch left pixel range: [{lo:.6g}, {hi:.6g}]")


def make_descriptor(cfg: TrainConfig, dataset: Dataset) -> ArchDescriptor:
    return ArchDescriptor(arch=cfg.arch, num_classes=dataset.num_classes,
                          in_channels=dataset.images.shape[1],
                          image_size=dataset.images.shape[2],
                          width=cfg.width, depth=cfg.depth)


def train(cfg: TrainConfig, dataset: Dataset,
          teacher: Optional[ImageClassifier] = None, *,
          out_dir: Optional[str] = None,
          resume: Optional[str] = None) -> TrainResult:
    """Run one training job and return the model plus its step log.

    ``out_dir`` enables JSONL step logging and checkpoint files. ``resume``
    restarts from a checkpoint written by the same config (verified via the
    config digest); the result is identical to the uninterrupted run
    because all per-epoch random streams derive from (seed, epoch).
    """
    digest = cfg.digest()
    descriptor = make_descriptor(cfg, dataset)
    needs_kd = cfg.mode in _KD_MODES
    if needs_kd:
        if teacher is None:
            raise InvalidInputError(
                f"mode {cfg.mode!r} distills attention and needs a teacher")
        if not getattr(teacher, "frozen", False):
            teacher = freeze(teacher)

    start_epoch = 0
    optimizer_state = None
    if resume is not None:
        payload = load_checkpoint(resume, expected=descriptor)
        if payload["config_digest"] != digest:
            raise InvalidInputError(
                f"resume checkpoint was written by config "
                f"{payload['config_digest']}, current config is {digest}")
        model = payload["model"]
        optimizer_state = payload["optimizer_state"]
        start_epoch = payload["epoch"] + 1
    else:
        model = build_model(descriptor, seed=derive_seed(cfg.seed, "init"))

    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                                momentum=cfg.sgd_momentum,
                                weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    index = build_class_index(dataset) if cfg.mode in _PAIR_MODES else None
    log: list = []
    checkpoints: list = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a",
                      encoding="utf-8")

    n = len(dataset)
    global_step = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rate = lr_at(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = rate
            perm = seed_stream(cfg.seed, "shuffle", epoch).permutation(n)
            noise_rng = seed_stream(cfg.seed, "attack-noise", epoch)
            sample_rng = seed_stream(cfg.seed, "pair-sample", epoch)
            bwd_noise_rng = seed_stream(cfg.seed, "pair-noise", epoch)
            aug_rng = seed_stream(cfg.seed, "augment", epoch)

            model.train()
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                sel = torch.from_numpy(perm[lo:lo + cfg.batch_size].copy())
                x = dataset.images[sel]
                y = dataset.labels[sel]
                if cfg.augment:
                    x = augment_batch(x, aug_rng)

                valid_pairs = 0
                if cfg.mode == "standard":
                    logits = model.features(x).logits
                    ce = smoothed_cross_entropy(logits, y, cfg.weights.smoothing)
                    breakdown = ce_only_breakdown(ce, cfg.weights)
                elif cfg.mode == "at":
                    x_adv = run_attack(model, x, y, cfg.attack_config(False),
                                       noise_rng)
                    if global_step % _SPOT_CHECK_EVERY == 0:
                        _spot_check(x_adv, x, cfg.eps / 255.0)
                    logits = model.features(x_adv).logits
                    ce = smoothed_cross_entropy(logits, y, cfg.weights.smoothing)
                    breakdown = ce_only_breakdown(ce, cfg.weights)
                else:
                    pair = bidirectional_pair(
                        model, x, y, dataset, index, cfg.attack_config(True),
                        noise_rng=noise_rng, sample_rng=sample_rng,
                        backward_noise_rng=bwd_noise_rng)
                    if global_step % _SPOT_CHECK_EVERY == 0:
                        _spot_check(pair.forward_ae, x, cfg.eps / 255.0)
                    valid_pairs = int(pair.has_backward.sum())
                    breakdown = total_loss(
                        model, teacher, pair, cfg.weights,
                        include_kd=needs_kd,
                        include_metric=cfg.mode in _METRIC_MODES,
                        ce_samples=cfg.ce_samples)

                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                global_step += 1

                record = TrainLogRecord(
                    epoch=epoch, step=step, lr=rate, mode=cfg.mode,
                    valid_pairs=valid_pairs, **breakdown.to_dict())
                log.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record.to_dict()) + "\n")

            if (out_dir is not None and cfg.checkpoint_every > 0
                    and (epoch + 1) % cfg.checkpoint_every == 0
                    and epoch + 1 < cfg.epochs):
                path = os.path.join(out_dir, f"checkpoint_epoch{epoch:04d}.pt")
                save_checkpoint(path, model, optimizer=optimizer, epoch=epoch,
                                config_digest=digest, seed=cfg.seed)
                checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()

    model.eval()
    final_path = None
    if out_dir is not None:
        final_path = os.path.join(out_dir, "final.pt")
        save_checkpoint(final_path, model, optimizer=optimizer,
                        epoch=cfg.epochs - 1, config_digest=digest,
                        seed=cfg.seed)
        checkpoints.append(final_path)
    return TrainResult(model=model, log=log, checkpoints=checkpoints,
                       final_checkpoint=final_path, descriptor=descriptor,
                       config_digest=digest)
