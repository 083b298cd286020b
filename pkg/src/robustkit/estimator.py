"""Estimator facades so the toolkit slots into sklearn pipelines.

``RobustImageClassifier`` wraps the training loop behind ``fit`` /
``predict`` / ``predict_proba`` with ordinary constructor hyperparameters.
``AdversarialPerturber`` is a transformer that replaces a batch of images
with adversarial versions crafted against a fitted classifier; it labels
the batch with the classifier's own predictions, so ``transform`` needs no
targets.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .attacks import named_attack, run_attack
from .data import Dataset
from .losses import LossWeights
from .models import freeze
from .seeding import seed_stream
from .training import TrainConfig, train
from .validation import InvalidInputError


def _as_image_array(X, channels: int, image_size) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 4:
        return X
    if X.ndim == 2:
        if image_size is None:
            side = int(round((X.shape[1] / channels) ** 0.5))
        else:
            side = int(image_size)
        if channels * side * side != X.shape[1]:
            raise InvalidInputError(
                f"cannot reshape {X.shape[1]} features into "
                f"({channels}, {side}, {side}) images")
        return X.reshape(-1, channels, side, side)
    raise InvalidInputError(
        f"X must be (N, C, H, W) images or (N, D) flattened pixels, "
        f"got ndim={X.ndim}")


class RobustImageClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with a configurable defense mode.

    Parameters mirror the training config. Distillation modes fit their
    own clean-trained teacher first unless one is supplied.

    Attributes set by ``fit``: ``classes_``, ``model_``, ``teacher_model_``
    (when distilling), ``n_features_in_``.
    """

    def __init__(self, mode: str = "agkd-bml", epochs: int = 10,
                 batch_size: int = 128, lr: float = 0.1, eps: float = 8.0,
                 attack_steps: int = 2, arch: str = "small-cnn",
                 width: int = 16, depth: int = 1, margin: float = 0.03,
                 lambda_triplet: float = 2.0, lambda_norm: float = 0.001,
                 smoothing: float = 0.5, augment: bool = False,
                 decay_epochs: tuple = (), teacher=None,
                 teacher_epochs: int = 10, channels: int = 3,
                 image_size=None, seed: int = 0):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eps = eps
        self.attack_steps = attack_steps
        self.arch = arch
        self.width = width
        self.depth = depth
        self.margin = margin
        self.lambda_triplet = lambda_triplet
        self.lambda_norm = lambda_norm
        self.smoothing = smoothing
        self.augment = augment
        self.decay_epochs = decay_epochs
        self.teacher = teacher
        self.teacher_epochs = teacher_epochs
        self.channels = channels
        self.image_size = image_size
        self.seed = seed

    def _train_config(self, mode: str, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(
            mode=mode, epochs=epochs, batch_size=self.batch_size, lr=self.lr,
            decay_epochs=tuple(self.decay_epochs), eps=self.eps,
            attack_steps=self.attack_steps,
            weights=LossWeights(margin=self.margin,
                                lambda_triplet=self.lambda_triplet,
                                lambda_norm=self.lambda_norm,
                                smoothing=self.smoothing),
            arch=self.arch, width=self.width, depth=self.depth,
            augment=self.augment, seed=seed)

    def fit(self, X, y):
        images = _as_image_array(X, self.channels, self.image_size)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self._input_ndim = np.asarray(X).ndim
        encoder = LabelEncoder()
        codes = encoder.fit_transform(np.asarray(y))
        self.classes_ = encoder.classes_
        if len(self.classes_) < 2:
            raise InvalidInputError("need at least 2 classes to fit")
        self._encoder = encoder

        dataset = Dataset(images=torch.from_numpy(np.clip(images, 0.0, 1.0)),
                          labels=torch.from_numpy(codes.astype(np.int64)),
                          num_classes=len(self.classes_), name="fit-data")

        teacher_model = None
        if self.mode in ("agkd", "agkd-bml"):
            if self.teacher is not None:
                supplied = self.teacher
                teacher_model = getattr(supplied, "model_", supplied)
            else:
                tcfg = self._train_config("standard", self.teacher_epochs,
                                          self.seed + 1)
                teacher_model = train(tcfg, dataset).model
            self.teacher_model_ = freeze(teacher_model)
            teacher_model = self.teacher_model_

        cfg = self._train_config(self.mode, self.epochs, self.seed)
        result = train(cfg, dataset, teacher_model)
        self.model_ = result.model
        self.train_log_ = result.log
        return self

    def _tensorize(self, X) -> torch.Tensor:
        images = _as_image_array(X, self.channels, self.image_size)
        return torch.from_numpy(np.clip(images, 0.0, 1.0))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            logits = self.model_(self._tensorize(X))
        return logits.numpy()

    def predict_proba(self, X):
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X):
        codes = self.decision_function(X).argmax(axis=1)
        return self._encoder.inverse_transform(codes)


class AdversarialPerturber(TransformerMixin, BaseEstimator):
    """Transformer that adversarially perturbs images against a classifier.

    The wrapped estimator must be a fitted ``RobustImageClassifier`` (or
    expose ``model_``). Labels for the attack are the classifier's own
    predictions on the clean batch, so the transform is self-contained.
    """

    def __init__(self, estimator=None, attack: str = "pgd-20",
                 eps: float = 8.0, seed: int = 0):
        self.estimator = estimator
        self.attack = attack
        self.eps = eps
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise InvalidInputError("AdversarialPerturber needs an estimator")
        check_is_fitted(self.estimator, "model_")
        self.config_ = named_attack(self.attack, self.eps)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        x = self.estimator._tensorize(X)
        with torch.no_grad():
            labels = self.estimator.model_(x).argmax(dim=1)
        rng = seed_stream(self.seed, "perturber")
        adv = run_attack(self.estimator.model_, x, labels, self.config_, rng)
        out = adv.numpy()
        if np.asarray(X).ndim == 2:
            out = out.reshape(out.shape[0], -1)
        return out
