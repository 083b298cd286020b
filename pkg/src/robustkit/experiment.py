"""Experiment configs, content digests, output layout, and run manifests.

A run directory is self-describing: ``config.json`` records the exact
inputs, ``manifest.json`` records every artifact the run wrote along with
its content digest. The hygiene check flags artifacts that are listed but
missing, changed since being registered, or present but never registered.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .training import TrainConfig
from .validation import InvalidInputError

OUT_ROOT_ENV = "ROBUSTKIT_OUT_ROOT"
_DEFAULT_ROOT = "runs"
MANIFEST_NAME = "manifest.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    """Full SHA-256 of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DatasetSpec:
    """Where a dataset comes from: path, on-disk format, split, subset."""

    path: str
    format: str = "cifar10-binary"
    split: str = "train"
    subset: Optional[int] = None

    def to_dict(self) -> dict:
        return {"path": self.path, "format": self.format,
                "split": self.split, "subset": self.subset}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def load(self):
        from .data import load_dataset
        ds = load_dataset(self.path, self.format, self.split)
        if self.subset is not None:
            if self.subset > len(ds):
                raise InvalidInputError(
                    f"subset {self.subset} exceeds dataset size {len(ds)}")
            ds = ds.subset(range(self.subset))
        return ds


@dataclass
class ExperimentConfig:
    """One training job: data source, recipe, optional teacher checkpoint."""

    dataset: DatasetSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_checkpoint: Optional[str] = None
    name: str = "run"

    def to_dict(self) -> dict:
        return {"name": self.name, "dataset": self.dataset.to_dict(),
                "train": self.train.to_dict(),
                "teacher_checkpoint": self.teacher_checkpoint}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(dataset=DatasetSpec.from_dict(d["dataset"]),
                   train=TrainConfig.from_dict(d["train"]),
                   teacher_checkpoint=d.get("teacher_checkpoint"),
                   name=d.get("name", "run"))

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def resolve_out_dir(name_or_path: str, root: Optional[str] = None) -> str:
    """Place a run directory under the output root.

    Absolute paths and explicit relative paths (containing a separator) are
    used as-is; bare names go under ``$ROBUSTKIT_OUT_ROOT`` or ``./runs``.
    """
    if os.path.isabs(name_or_path) or os.sep in name_or_path:
        return name_or_path
    base = root or os.environ.get(OUT_ROOT_ENV) or _DEFAULT_ROOT
    return os.path.join(base, name_or_path)


def _manifest_path(run_dir: str) -> str:
    return os.path.join(run_dir, MANIFEST_NAME)


def _load_manifest(run_dir: str) -> dict:
    path = _manifest_path(run_dir)
    if not os.path.isfile(path):
        return {"artifacts": {}}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def register_artifact(run_dir: str, path: str) -> None:
    """Record one written file (and its digest) in the run manifest."""
    rel = os.path.relpath(os.path.abspath(path), os.path.abspath(run_dir))
    if rel.startswith(".."):
        raise InvalidInputError(
            f"artifact {path} lies outside run directory {run_dir}")
    manifest = _load_manifest(run_dir)
    manifest["artifacts"][rel] = sha256_file(path)
    os.makedirs(run_dir, exist_ok=True)
    with open(_manifest_path(run_dir), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def verify_manifest(run_dir: str) -> dict:
    """Compare the manifest against the directory contents.

    Returns dict with ``missing`` (listed, not on disk), ``changed``
    (digest differs), and ``orphans`` (on disk, never registered).
    """
    manifest = _load_manifest(run_dir)
    listed = manifest["artifacts"]
    missing, changed = [], []
    for rel, digest in sorted(listed.items()):
        full = os.path.join(run_dir, rel)
        if not os.path.isfile(full):
            missing.append(rel)
        elif sha256_file(full) != digest:
            changed.append(rel)
    on_disk = []
    for base, _, names in os.walk(run_dir):
        for n in names:
            rel = os.path.relpath(os.path.join(base, n), run_dir)
            if rel != MANIFEST_NAME:
                on_disk.append(rel)
    orphans = sorted(set(on_disk) - set(listed))
    return {"missing": missing, "changed": changed, "orphans": orphans,
            "clean": not (missing or changed or orphans)}
