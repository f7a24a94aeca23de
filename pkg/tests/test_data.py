"""Tests for partitioning, synthetic tasks, and the IDX codec."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from craftfl.data import (
    Dataset,
    dirichlet_partition,
    load_idx,
    local_split,
    synthetic_task,
    write_idx,
)
from craftfl.errors import ConfigError, IdxFormatError, InvalidInputError
from craftfl.models import Mlp, MlpSpec


def balanced_labels(n, classes, seed=0):
    labels = np.arange(n) % classes
    np.random.default_rng(seed).shuffle(labels)
    return labels


def class_proportions(labels, indices, classes):
    counts = np.bincount(labels[indices], minlength=classes)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# local_split
# ---------------------------------------------------------------------------

def test_local_split_20_samples():
    train, test = local_split(np.arange(20), seed=0)
    assert len(train) == 16 and len(test) == 4


def test_local_split_5_samples_floor_with_min_one():
    train, test = local_split(np.arange(5), seed=0)
    assert len(train) == 4 and len(test) == 1


def test_local_split_disjoint_union():
    rng = np.random.default_rng(1)
    for _ in range(10):
        indices = rng.choice(10_000, size=int(rng.integers(2, 300)), replace=False)
        train, test = local_split(indices, seed=int(rng.integers(1000)))
        assert set(train) & set(test) == set()
        assert set(train) | set(test) == set(indices)


def test_local_split_too_small():
    with pytest.raises(InvalidInputError):
        local_split(np.array([3]))


# ---------------------------------------------------------------------------
# dirichlet_partition
# ---------------------------------------------------------------------------

def test_high_alpha_approaches_global_distribution():
    labels = balanced_labels(2_000, 10)
    part = dirichlet_partition(labels, num_clients=10, alpha=1e6, seed=0)
    for client in range(10):
        props = class_proportions(labels, part.assignments[client], 10)
        assert np.max(np.abs(props - 0.1)) <= 0.05


def test_low_alpha_concentrates_classes():
    # Median client should hold at least 80% of its mass in its two largest
    # classes, consistently across seeds.
    labels = balanced_labels(10_000, 10)
    for seed in range(5):
        part = dirichlet_partition(labels, num_clients=100, alpha=0.1, seed=seed)
        top2 = []
        for client in range(100):
            props = np.sort(class_proportions(labels, part.assignments[client], 10))
            top2.append(props[-2:].sum())
        assert np.median(top2) >= 0.8


def test_minimum_samples_enforced_after_repair():
    labels = balanced_labels(10_000, 10)
    for seed in range(5):
        part = dirichlet_partition(labels, num_clients=100, alpha=0.1,
                                   min_per_client=20, seed=seed)
        assert part.sizes().min() >= 20


def test_partition_disjoint_and_conserving():
    labels = balanced_labels(3_000, 10)
    part = dirichlet_partition(labels, num_clients=20, alpha=0.5, seed=3)
    everything = np.concatenate(part.assignments)
    assert len(everything) == len(np.unique(everything))
    assert len(everything) <= len(labels)
    assert everything.max() < len(labels)


def test_partition_train_test_structure():
    labels = balanced_labels(2_000, 10)
    part = dirichlet_partition(labels, num_clients=10, alpha=1.0, seed=4)
    for client in range(10):
        n = len(part.assignments[client])
        assert len(part.test[client]) == max(1, int(np.floor(0.2 * n)))
        assert len(part.train[client]) + len(part.test[client]) == n
        combined = set(part.train[client]) | set(part.test[client])
        assert combined == set(part.assignments[client])


def test_partition_deterministic():
    labels = balanced_labels(2_000, 10)
    a = dirichlet_partition(labels, 15, alpha=0.3, seed=7)
    b = dirichlet_partition(labels, 15, alpha=0.3, seed=7)
    for x, y in zip(a.assignments, b.assignments):
        npt.assert_array_equal(x, y)
    for x, y in zip(a.train, b.train):
        npt.assert_array_equal(x, y)


def test_entropy_monotone_in_alpha():
    labels = balanced_labels(6_000, 10)

    def mean_entropy(alpha, seed):
        part = dirichlet_partition(labels, 30, alpha=alpha, seed=seed)
        entropies = []
        for assigned in part.assignments:
            p = class_proportions(labels, assigned, 10)
            p = p[p > 0]
            entropies.append(-(p * np.log(p)).sum())
        return np.mean(entropies)

    seeds = range(5)
    coarse = np.mean([mean_entropy(10.0, s) for s in seeds])
    medium = np.mean([mean_entropy(1.0, s) for s in seeds])
    fine = np.mean([mean_entropy(0.1, s) for s in seeds])
    assert coarse >= medium >= fine


def test_infeasible_partition_rejected():
    with pytest.raises(ConfigError):
        dirichlet_partition(balanced_labels(100, 10), num_clients=10,
                            alpha=0.1, min_per_client=20, seed=0)
    with pytest.raises(ConfigError):
        dirichlet_partition(balanced_labels(100, 10), num_clients=0, alpha=0.1)
    with pytest.raises(ConfigError):
        dirichlet_partition(balanced_labels(100, 10), num_clients=2, alpha=0.0)


# ---------------------------------------------------------------------------
# synthetic_task
# ---------------------------------------------------------------------------

def test_synthetic_deterministic():
    a = synthetic_task(4, 10, 500, class_sep=3.0, seed=5)
    b = synthetic_task(4, 10, 500, class_sep=3.0, seed=5)
    npt.assert_array_equal(a.features, b.features)
    npt.assert_array_equal(a.labels, b.labels)


def test_synthetic_zero_separation_collapses_class_means():
    flat = synthetic_task(5, 10, 5_000, class_sep=0.0, seed=6)
    split = synthetic_task(5, 10, 5_000, class_sep=5.0, seed=6)

    def max_pairwise_mean_distance(ds):
        means = np.stack([ds.features[ds.labels == c].mean(axis=0)
                          for c in range(ds.num_classes)])
        dists = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        return dists.max()

    assert max_pairwise_mean_distance(flat) < 0.3
    assert max_pairwise_mean_distance(split) > 5 * max_pairwise_mean_distance(flat)


def test_synthetic_high_separation_is_learnable():
    # Oracle: train this package's own model centrally and require > 95%.
    ds = synthetic_task(10, 20, 1_000, class_sep=10.0, seed=7)
    model = Mlp(MlpSpec(20, (), 10))
    params = model.init_params(0)
    trained = model.local_train(params, ds.features, ds.labels, eta_l=0.5,
                                steps=300, batch_size=256, seed=1)
    accuracy = np.mean(model.forward(trained, ds.features).argmax(axis=1) == ds.labels)
    assert accuracy > 0.95


def test_synthetic_features_standardized():
    ds = synthetic_task(3, 8, 4_000, class_sep=2.0, seed=8)
    npt.assert_allclose(ds.features.mean(axis=0), 0.0, atol=1e-10)
    npt.assert_allclose(ds.features.std(axis=0), 1.0, atol=1e-10)


def test_synthetic_validation():
    with pytest.raises(InvalidInputError):
        synthetic_task(1, 10, 100, 1.0, seed=0)
    with pytest.raises(InvalidInputError):
        synthetic_task(3, 10, 100, -1.0, seed=0)


# ---------------------------------------------------------------------------
# IDX codec
# ---------------------------------------------------------------------------

def write_fixture(tmp_path, image_magic=0x00000803, label_magic=0x00000801,
                  n_images=2, n_labels=2, truncate_pixels=False):
    pixels = bytes(range(n_images * 16))
    if truncate_pixels:
        pixels = pixels[:-5]
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    images_path.write_bytes(struct.pack(">IIII", image_magic, n_images, 4, 4) + pixels)
    labels_path.write_bytes(struct.pack(">II", label_magic, n_labels)
                            + bytes(range(3, 3 + n_labels)))
    return images_path, labels_path


def test_load_idx_hand_crafted_fixture(tmp_path):
    images_path, labels_path = write_fixture(tmp_path)
    ds = load_idx(images_path, labels_path)
    assert ds.features.shape == (2, 16)
    npt.assert_allclose(ds.features, np.arange(32).reshape(2, 16) / 255.0)
    npt.assert_array_equal(ds.labels, [3, 4])
    assert ds.num_classes == 5


def test_load_idx_wrong_magic_names_offset(tmp_path):
    images_path, labels_path = write_fixture(tmp_path, image_magic=0x00000802)
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx(images_path, labels_path)
    images_path, labels_path = write_fixture(tmp_path, label_magic=0x00000803)
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx(images_path, labels_path)


def test_load_idx_count_mismatch(tmp_path):
    images_path, labels_path = write_fixture(tmp_path, n_labels=3)
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(images_path, labels_path)


def test_load_idx_truncated(tmp_path):
    images_path, labels_path = write_fixture(tmp_path, truncate_pixels=True)
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(images_path, labels_path)


def test_write_then_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    images = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    labels = rng.integers(0, 4, size=7).astype(np.uint8)
    write_idx(images, labels, tmp_path / "im.idx", tmp_path / "lb.idx")
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
    npt.assert_allclose(ds.features, images.reshape(7, 15) / 255.0)
    npt.assert_array_equal(ds.labels, labels)


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), num_classes=3)
