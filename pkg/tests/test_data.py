"""Dataset loading, the binary batch format, synthetic specs, indexing."""

import numpy as np
import pytest
import torch

from robustkit.data import (CorruptDataError, Dataset, augment_batch,
                            build_class_index, load_cifar10_binary,
                            load_dataset, make_synthetic, parse_synthetic_spec,
                            sample_from_class)
from robustkit.validation import InvalidInputError


def _write_binary_batch(path, labels, pixels):
    # hand-rolled writer: one label byte then 3072 pixel bytes per record
    records = []
    for lb, px in zip(labels, pixels):
        records.append(bytes([lb]) + px.tobytes())
    path.write_bytes(b"".join(records))


def _sample_pixels(seed, n):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=3072, dtype=np.uint8).astype(np.uint8)
            for _ in range(n)]


def test_binary_loader_round_trip(tmp_path):
    labels = [3, 0, 9]
    pixels = _sample_pixels(0, 3)
    f = tmp_path / "batch.bin"
    _write_binary_batch(f, labels, pixels)
    ds = load_cifar10_binary(str(f))
    assert len(ds) == 3
    assert ds.labels.tolist() == labels
    assert ds.images.shape == (3, 3, 32, 32)
    # first record's red plane starts with its first pixel byte / 255
    expected = pixels[0].reshape(3, 32, 32).astype(np.float32) / 255.0
    assert torch.allclose(ds.images[0], torch.from_numpy(expected))
    assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0


def test_binary_loader_reports_truncated_file(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(bytes(3073 + 100))
    with pytest.raises(CorruptDataError, match="3073"):
        load_cifar10_binary(str(f))


def test_binary_loader_reports_bad_label(tmp_path):
    pixels = _sample_pixels(1, 2)
    f = tmp_path / "bad.bin"
    _write_binary_batch(f, [1, 12], pixels)
    with pytest.raises(CorruptDataError, match="record 1"):
        load_cifar10_binary(str(f))


def test_binary_loader_directory_layout(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    pixels = _sample_pixels(2, 1)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)]:
        _write_binary_batch(root / name, [1], pixels)
    _write_binary_batch(root / "test_batch.bin", [2], pixels)
    train = load_cifar10_binary(str(tmp_path), "train")
    test = load_cifar10_binary(str(tmp_path), "test")
    assert len(train) == 5 and train.split == "train"
    assert len(test) == 1 and test.split == "test"


def test_binary_loader_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="data_batch"):
        load_cifar10_binary(str(tmp_path), "train")


def test_synthetic_spec_parse_and_defaults():
    text = """
    # toy dataset
    C = 4
    N = 100
    H = 8
    seed = 7
    margin = 0.12
    """
    values = parse_synthetic_spec(text)
    assert values["C"] == 4 and values["N"] == 100 and values["H"] == 8
    assert values["seed"] == 7 and values["margin"] == 0.12
    assert values["split"] == "train"
    assert values["noise"] > 0 and values["fragile"] > 0


def test_synthetic_spec_rejects_unknown_key():
    with pytest.raises(CorruptDataError, match="unknown key"):
        parse_synthetic_spec("C=2\nN=10\nH=4\nseed=0\nmargin=0.1\nblur=1\n")


def test_synthetic_spec_rejects_missing_key():
    with pytest.raises(CorruptDataError, match="missing keys"):
        parse_synthetic_spec("C = 2\nN = 10\n")


def test_synthetic_spec_rejects_malformed_line():
    with pytest.raises(CorruptDataError, match="line 1"):
        parse_synthetic_spec("not a key value pair\n")


def test_load_dataset_synthetic_spec(tmp_path):
    spec = tmp_path / "toy.spec"
    spec.write_text("C = 3\nN = 30\nH = 4\nseed = 5\nmargin = 0.2\n")
    ds = load_dataset(str(spec), "synthetic-spec")
    assert len(ds) == 30
    assert ds.num_classes == 3
    assert ds.images.shape == (30, 3, 4, 4)
    # same spec loads identically; test split differs in draws only
    again = load_dataset(str(spec), "synthetic-spec")
    assert torch.equal(ds.images, again.images)
    test = load_dataset(str(spec), "synthetic-spec", split="test")
    assert not torch.equal(ds.images, test.images)


def test_load_dataset_unknown_format():
    with pytest.raises(InvalidInputError, match="unknown dataset format"):
        load_dataset("nowhere", "tar-gz")


def test_make_synthetic_determinism_and_balance():
    a = make_synthetic(5, 52, 8, seed=3, margin=0.12)
    b = make_synthetic(5, 52, 8, seed=3, margin=0.12)
    assert torch.equal(a.images, b.images)
    assert torch.equal(a.labels, b.labels)
    counts = torch.bincount(a.labels, minlength=5)
    assert int(counts.max()) - int(counts.min()) <= 1
    c = make_synthetic(5, 52, 8, seed=4, margin=0.12)
    assert not torch.equal(a.images, c.images)


def test_make_synthetic_range_and_validation():
    ds = make_synthetic(2, 40, 8, seed=0, margin=0.3, noise=0.5)
    assert float(ds.images.min()) >= 0.0
    assert float(ds.images.max()) <= 1.0
    with pytest.raises(InvalidInputError):
        make_synthetic(1, 10, 8, seed=0, margin=0.1)
    with pytest.raises(InvalidInputError):
        make_synthetic(2, 10, 8, seed=0, margin=0.1, split="validation")


def test_dataset_validation_rejects_out_of_range():
    bad = torch.full((2, 3, 4, 4), 1.5)
    with pytest.raises(InvalidInputError, match="pixel values"):
        Dataset(images=bad, labels=torch.tensor([0, 1]), num_classes=2)


def test_dataset_validation_rejects_bad_labels():
    x = torch.rand(2, 3, 4, 4)
    with pytest.raises(InvalidInputError, match="labels"):
        Dataset(images=x, labels=torch.tensor([0, 5]), num_classes=2)


def test_dataset_subset():
    ds = make_synthetic(3, 30, 4, seed=1, margin=0.2)
    sub = ds.subset(range(10))
    assert len(sub) == 10
    assert torch.equal(sub.images, ds.images[:10])


def test_class_index_and_sampling():
    ds = make_synthetic(4, 80, 4, seed=2, margin=0.2)
    index = build_class_index(ds)
    assert index.num_classes == 4
    assert index.empty_classes == []
    rng = np.random.default_rng(0)
    for c in range(4):
        for _ in range(5):
            i = sample_from_class(index, c, rng)
            assert int(ds.labels[i]) == c
    with pytest.raises(InvalidInputError):
        sample_from_class(index, 9, rng)


def test_class_index_warns_on_empty_class_and_sampling_fails():
    x = torch.rand(4, 3, 4, 4).clamp(0, 1)
    ds = Dataset(images=x, labels=torch.tensor([0, 0, 2, 2]), num_classes=3)
    with pytest.warns(UserWarning, match=r"classes \[1\]"):
        index = build_class_index(ds)
    assert index.empty_classes == [1]
    with pytest.raises(LookupError, match="class 1"):
        sample_from_class(index, 1, np.random.default_rng(0))


def test_augment_batch_shapes_and_determinism():
    x = torch.rand(6, 3, 8, 8).clamp(0, 1)
    a = augment_batch(x, np.random.default_rng(9), pad=2)
    b = augment_batch(x, np.random.default_rng(9), pad=2)
    assert a.shape == x.shape
    assert torch.equal(a, b)
    c = augment_batch(x, np.random.default_rng(10), pad=2)
    assert not torch.equal(a, c)
