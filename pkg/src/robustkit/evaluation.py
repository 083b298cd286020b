"""Accuracy measurement under attack, transfer evaluation, and exports.

White-box robust accuracy is the black-box path with the source model set
to the target itself, so the two are consistent by construction. All
attacked evaluations are deterministic given (seed, batch_size): each
batch's start noise comes from its own derived stream.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .attention import attention_map
from .data import Dataset
from .models import ImageClassifier
from .seeding import seed_stream
from .validation import InvalidInputError

_CLEAN_CFG = AttackConfig(eps=0.0, steps=0, random_start=False)


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    n: int


@torch.no_grad()
def predict_labels(model: ImageClassifier, x: torch.Tensor,
                   batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        preds = []
        for lo in range(0, x.shape[0], batch_size):
            preds.append(model(x[lo:lo + batch_size]).argmax(dim=1))
    finally:
        if was_training:
            model.train()
    return torch.cat(preds) if preds else torch.empty(0, dtype=torch.long)


def clean_accuracy(model: ImageClassifier, dataset: Dataset,
                   batch_size: int = 256) -> EvalResult:
    preds = predict_labels(model, dataset.images, batch_size)
    correct = int((preds == dataset.labels).sum())
    return EvalResult(accuracy=correct / len(dataset), correct=correct,
                      n=len(dataset))


def black_box(source_model: ImageClassifier, target_model: ImageClassifier,
              dataset: Dataset, cfg: AttackConfig, *, seed: int = 0,
              batch_size: int = 256) -> EvalResult:
    """Accuracy of the target on examples crafted against the source.

    Only the source model's gradients are consulted; the target just
    classifies the result. With ``source_model is target_model`` this is
    the white-box evaluation.
    """
    target_model.eval()
    correct = 0
    for batch_idx, lo in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.images[lo:lo + batch_size]
        y = dataset.labels[lo:lo + batch_size]
        rng = seed_stream(seed, "eval-attack", batch_idx)
        x_adv = run_attack(source_model, x, y, cfg, rng)
        with torch.no_grad():
            preds = target_model(x_adv).argmax(dim=1)
        correct += int((preds == y).sum())
    return EvalResult(accuracy=correct / len(dataset), correct=correct,
                      n=len(dataset))


def robust_accuracy(model: ImageClassifier, dataset: Dataset,
                    cfg: AttackConfig, *, seed: int = 0,
                    batch_size: int = 256) -> EvalResult:
    """White-box accuracy under one attack config."""
    return black_box(model, model, dataset, cfg, seed=seed,
                     batch_size=batch_size)


def accuracy_sweep(model: ImageClassifier, dataset: Dataset,
                   base_cfg: AttackConfig, eps_list_255, *, seed: int = 0,
                   batch_size: int = 256) -> list:
    """Robust accuracy at each budget in ``eps_list_255`` (same steps)."""
    out = []
    for eps in eps_list_255:
        cfg = base_cfg.replace(eps=float(eps))
        res = robust_accuracy(model, dataset, cfg, seed=seed,
                              batch_size=batch_size)
        out.append((float(eps), res))
    return out


@dataclass
class ReportRow:
    attack: str
    steps: int
    eps_255: float
    accuracy: float
    n: int
    checkpoint: str
    seed: int
    digest: str


@dataclass
class RobustnessReport:
    """Accuracy table with provenance columns, serialized as CSV."""

    rows: list = field(default_factory=list)

    COLUMNS = ("attack", "steps", "eps_255", "accuracy", "n", "checkpoint",
               "seed", "digest")

    def add(self, attack: str, cfg: AttackConfig, result: EvalResult,
            checkpoint: str, seed: int) -> ReportRow:
        row = ReportRow(attack=attack, steps=cfg.steps, eps_255=cfg.eps,
                        accuracy=result.accuracy, n=result.n,
                        checkpoint=checkpoint, seed=seed, digest=cfg.digest())
        self.rows.append(row)
        return row

    def to_table(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow([r.attack, r.steps, f"{r.eps_255:g}",
                             f"{r.accuracy:.4f}", r.n, r.checkpoint, r.seed,
                             r.digest])
        return buf.getvalue()

    def write(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_table())
        return path

    @classmethod
    def from_table(cls, text: str) -> "RobustnessReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != cls.COLUMNS:
            raise InvalidInputError(
                f"report header mismatch: expected {list(cls.COLUMNS)}, "
                f"got {header}")
        report = cls()
        for row in reader:
            if not row:
                continue
            report.rows.append(ReportRow(
                attack=row[0], steps=int(row[1]), eps_255=float(row[2]),
                accuracy=float(row[3]), n=int(row[4]), checkpoint=row[5],
                seed=int(row[6]), digest=row[7]))
        return report


def evaluate_suite(model: ImageClassifier, dataset: Dataset, suite, *,
                   seed: int = 0, batch_size: int = 256,
                   checkpoint: str = "-",
                   include_clean: bool = True) -> RobustnessReport:
    """Run (name, config) attack pairs and collect a report table."""
    report = RobustnessReport()
    if include_clean:
        res = clean_accuracy(model, dataset, batch_size)
        report.add("clean", _CLEAN_CFG, res, checkpoint, seed)
    for name, cfg in suite:
        res = robust_accuracy(model, dataset, cfg, seed=seed,
                              batch_size=batch_size)
        report.add(name, cfg, res, checkpoint, seed)
    return report


@torch.no_grad()
def embed_dataset(model: ImageClassifier, x: torch.Tensor,
                  batch_size: int = 256) -> tuple:
    """Penultimate embeddings and predictions for a tensor of images."""
    was_training = model.training
    model.eval()
    embs, preds = [], []
    try:
        for lo in range(0, x.shape[0], batch_size):
            out = model.features(x[lo:lo + batch_size])
            embs.append(out.embedding)
            preds.append(out.logits.argmax(dim=1))
    finally:
        if was_training:
            model.train()
    return torch.cat(embs), torch.cat(preds)


def knn_predict(train_emb: torch.Tensor, train_labels: torch.Tensor,
                test_emb: torch.Tensor, k: int,
                num_classes: int) -> torch.Tensor:
    """Majority vote over the k nearest neighbors in cosine distance.

    Vote ties resolve to the lowest class id.
    """
    if k < 1 or k > train_emb.shape[0]:
        raise InvalidInputError(
            f"k must lie in [1, {train_emb.shape[0]}], got {k}")
    train_n = torch.nn.functional.normalize(train_emb, dim=1)
    test_n = torch.nn.functional.normalize(test_emb, dim=1)
    sims = test_n @ train_n.T
    idx = sims.topk(k, dim=1).indices
    votes = torch.nn.functional.one_hot(train_labels[idx],
                                        num_classes).sum(dim=1)
    return votes.argmax(dim=1)


def knn_accuracy(model: ImageClassifier, train_set: Dataset,
                 test_set: Dataset, k: int = 50,
                 batch_size: int = 256) -> EvalResult:
    """Classify test embeddings by nearest training embeddings."""
    train_emb, _ = embed_dataset(model, train_set.images, batch_size)
    test_emb, _ = embed_dataset(model, test_set.images, batch_size)
    preds = knn_predict(train_emb, train_set.labels, test_emb, k,
                        train_set.num_classes)
    correct = int((preds == test_set.labels).sum())
    return EvalResult(accuracy=correct / len(test_set), correct=correct,
                      n=len(test_set))


def generate_attack_set(source_model: ImageClassifier, dataset: Dataset,
                        cfg: AttackConfig, *, seed: int = 0, n: int = None,
                        batch_size: int = 256) -> tuple:
    """Craft a fixed adversarial set against one source model.

    Returns (clean, adversarial, labels) tensors over the first ``n``
    samples, generated with the same per-batch streams the evaluators use.
    """
    total = len(dataset) if n is None else min(n, len(dataset))
    clean, adv, labels = [], [], []
    for batch_idx, lo in enumerate(range(0, total, batch_size)):
        x = dataset.images[lo:min(lo + batch_size, total)]
        y = dataset.labels[lo:min(lo + batch_size, total)]
        rng = seed_stream(seed, "eval-attack", batch_idx)
        clean.append(x)
        adv.append(run_attack(source_model, x, y, cfg, rng))
        labels.append(y)
    return torch.cat(clean), torch.cat(adv), torch.cat(labels)


def attention_fidelity(model: ImageClassifier, teacher: ImageClassifier,
                       clean: torch.Tensor, adv: torch.Tensor,
                       batch_size: int = 256) -> float:
    """Mean attention distance between teacher clean maps and model adversarial maps.

    Lower values mean the model's attention under attack stays closer to
    the frozen teacher's attention on the unperturbed images.
    """
    if clean.shape != adv.shape:
        raise InvalidInputError(
            f"clean and adversarial batches differ: {tuple(clean.shape)} vs "
            f"{tuple(adv.shape)}")
    model.eval()
    teacher.eval()
    total = 0.0
    with torch.no_grad():
        for lo in range(0, clean.shape[0], batch_size):
            t_map = attention_map(
                teacher.features(clean[lo:lo + batch_size]).feature_map)
            s_map = attention_map(
                model.features(adv[lo:lo + batch_size]).feature_map)
            per_sample = (t_map - s_map).abs().mean(dim=(1, 2, 3))
            total += float(per_sample.sum())
    return total / clean.shape[0]


def _format_value(v: float) -> str:
    # 9 significant digits round-trip float32 exactly.
    return f"{v:.9g}"


def export_embeddings(model: ImageClassifier, dataset: Dataset, path: str, *,
                      attack_cfg: AttackConfig = None, seed: int = 0,
                      batch_size: int = 256) -> str:
    """Write embeddings as CSV rows ``id,label,pred,tag,v1..vD``.

    Clean rows are always written; passing an attack config appends one
    adversarial row per sample (same id, tag ``adversarial``). Output is
    byte-identical across identical invocations.
    """
    emb, preds = embed_dataset(model, dataset.images, batch_size)
    rows = [(i, "clean", emb[i], preds[i]) for i in range(len(dataset))]
    if attack_cfg is not None:
        _, adv, _ = generate_attack_set(model, dataset, attack_cfg, seed=seed,
                                        batch_size=batch_size)
        adv_emb, adv_preds = embed_dataset(model, adv, batch_size)
        rows += [(i, "adversarial", adv_emb[i], adv_preds[i])
                 for i in range(len(dataset))]

    dim = emb.shape[1]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "pred", "tag"]
                        + [f"v{j + 1}" for j in range(dim)])
        for i, tag, vec, pred in rows:
            writer.writerow([i, int(dataset.labels[i]), int(pred), tag]
                            + [_format_value(float(v)) for v in vec])
    return path


def load_embedding_dump(path: str) -> dict:
    """Read an embedding CSV back into arrays (vectors as float32)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["id", "label", "pred", "tag"]:
            raise InvalidInputError(
                f"embedding dump header must start with id,label,pred,tag; "
                f"got {header[:4]}")
        ids, labels, preds, tags, vecs = [], [], [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            preds.append(int(row[2]))
            tags.append(row[3])
            vecs.append([np.float32(v) for v in row[4:]])
    return {
        "id": np.array(ids, dtype=np.int64),
        "label": np.array(labels, dtype=np.int64),
        "pred": np.array(preds, dtype=np.int64),
        "tag": np.array(tags),
        "vectors": np.array(vecs, dtype=np.float32),
    }


def knn_from_dumps(train_dump_path: str, test_dump_path: str, k: int,
                   num_classes: int, tag: str = "clean") -> EvalResult:
    """k-NN accuracy computed purely from two embedding dump files."""
    train = load_embedding_dump(train_dump_path)
    test = load_embedding_dump(test_dump_path)
    tr = train["tag"] == tag
    te = test["tag"] == tag
    preds = knn_predict(torch.from_numpy(train["vectors"][tr]),
                        torch.from_numpy(train["label"][tr]),
                        torch.from_numpy(test["vectors"][te]), k, num_classes)
    labels = torch.from_numpy(test["label"][te])
    correct = int((preds == labels).sum())
    return EvalResult(accuracy=correct / len(labels), correct=correct,
                      n=len(labels))
