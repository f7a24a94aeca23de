"""Datasets, heterogeneous partitioning, and IDX file ingestion.

Client heterogeneity is produced by Dirichlet partitioning: for every class,
a proportion vector over clients is drawn from Dirichlet(alpha) and the
class's samples are dealt out accordingly. Small alpha concentrates each
client's data on few classes. A repair pass then moves samples from the
largest clients until everyone holds the configured minimum, and each client
receives a seeded 80/20 train/test split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxFormatError, InvalidInputError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInputError(f"features must be (n, p) with n >= 1, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError("labels must be one integer per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidInputError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass
class Partition:
    """Per-client index lists into a parent dataset, with train/test splits."""

    assignments: list[np.ndarray]
    train: list[np.ndarray]
    test: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments])


def local_split(indices, fraction: float = 0.8, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle-then-split; the test side gets max(1, floor((1-fraction)*n))."""
    indices = np.asarray(indices)
    n = indices.shape[0]
    if n < 2:
        raise InvalidInputError(f"need at least 2 samples to split, got {n}")
    if not 0.0 < fraction < 1.0:
        raise InvalidInputError(f"fraction must be in (0, 1), got {fraction!r}")
    rng = np.random.default_rng(seed)
    shuffled = indices[rng.permutation(n)]
    # Guard against 1 - 0.8 = 0.19999... dropping the floor one integer short.
    n_test = max(1, int(np.floor((1.0 - fraction) * n + 1e-9)))
    return shuffled[n_test:], shuffled[:n_test]


def dirichlet_partition(labels, num_clients: int, alpha: float,
                        min_per_client: int = 20, seed=0) -> Partition:
    """Partition sample indices across clients with Dirichlet(alpha) class skew.

    For each class, client proportions are drawn from a symmetric Dirichlet
    distribution and the class's (shuffled) samples are split accordingly.
    Clients below ``min_per_client`` are then topped up with uniformly drawn
    samples from whichever client is currently largest, which preserves the
    donor's class mix in expectation. Every client finally gets a seeded
    80/20 train/test split. Deterministic in ``seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if num_clients < 1:
        raise ConfigError(f"need at least one client, got {num_clients}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha!r}")
    if min_per_client < 2:
        raise ConfigError(f"min_per_client must be >= 2 (to allow a train/test split), got {min_per_client}")
    if num_clients * min_per_client > n:
        raise ConfigError(
            f"infeasible partition: {num_clients} clients x {min_per_client} "
            f"minimum samples exceeds {n} available samples")

    rng = np.random.default_rng(seed)
    bins: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = np.round(np.cumsum(proportions) * len(members)).astype(int)[:-1]
        for client, chunk in enumerate(np.split(members, cuts)):
            bins[client].append(chunk)
    pools = [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in bins]

    # Repair pass: top up deficient clients from the currently largest one.
    sizes = np.array([len(p) for p in pools])
    while sizes.min() < min_per_client:
        needy = int(sizes.argmin())
        donor = int(sizes.argmax())
        need = min_per_client - sizes[needy]
        surplus = sizes[donor] - min_per_client
        take = int(min(need, surplus))
        if take <= 0 or donor == needy:
            raise ConfigError("partition repair failed: no client has surplus samples")
        chosen = rng.choice(len(pools[donor]), size=take, replace=False)
        mask = np.zeros(len(pools[donor]), dtype=bool)
        mask[chosen] = True
        pools[needy] = np.concatenate([pools[needy], pools[donor][mask]])
        pools[donor] = pools[donor][~mask]
        sizes[needy] += take
        sizes[donor] -= take

    assignments = [np.sort(p) for p in pools]
    train, test = [], []
    for client, assigned in enumerate(assignments):
        tr, te = local_split(assigned, 0.8, seed=[seed, client])
        train.append(tr)
        test.append(te)
    return Partition(assignments=assignments, train=train, test=test)


def synthetic_task(num_classes: int, num_features: int, num_samples: int,
                   class_sep: float, seed=0) -> Dataset:
    """Gaussian class clusters on a seeded random frame.

    Class means sit at pairwise distance ``class_sep`` (exactly so when the
    frame can be made orthonormal, i.e. num_classes <= num_features); unit
    isotropic noise is added and features are standardized per dimension.
    ``class_sep = 0`` collapses all means, making chance level the best
    achievable accuracy.
    """
    if num_classes < 2 or num_features < 1 or num_samples < num_classes:
        raise InvalidInputError(
            f"invalid synthetic task sizes: C={num_classes}, p={num_features}, n={num_samples}")
    if class_sep < 0:
        raise InvalidInputError(f"class_sep must be non-negative, got {class_sep!r}")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    frame = rng.standard_normal((num_features, num_classes))
    if num_classes <= num_features:
        frame, _ = np.linalg.qr(frame)
        directions = frame.T
    else:
        directions = frame.T / np.linalg.norm(frame.T, axis=1, keepdims=True)
    means = directions * (class_sep / np.sqrt(2.0))
    features = means[labels] + rng.standard_normal((num_samples, num_features))
    std = features.std(axis=0)
    std[std == 0] = 1.0
    features = (features - features.mean(axis=0)) / std
    return Dataset(features=features, labels=labels, num_classes=num_classes)


# ---------------------------------------------------------------------------
# IDX format (big-endian; magic 0x00000803 for images, 0x00000801 for labels)
# ---------------------------------------------------------------------------

def _read_exact(handle, count: int, path, what: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"{path}: truncated file while reading {what} "
            f"(wanted {count} bytes, got {len(data)})")
    return data


def _read_u32(handle, path, what: str) -> int:
    return struct.unpack(">I", _read_exact(handle, 4, path, what))[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixel values are scaled to [0, 1]."""
    with open(images_path, "rb") as handle:
        magic = _read_u32(handle, images_path, "magic number")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic at offset 0: expected "
                f"{IDX_IMAGE_MAGIC:#010x}, got {magic:#010x}")
        count = _read_u32(handle, images_path, "image count")
        rows = _read_u32(handle, images_path, "row count")
        cols = _read_u32(handle, images_path, "column count")
        raw = _read_exact(handle, count * rows * cols, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as handle:
        magic = _read_u32(handle, labels_path, "magic number")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic at offset 0: expected "
                f"{IDX_LABEL_MAGIC:#010x}, got {magic:#010x}")
        label_count = _read_u32(handle, labels_path, "label count")
        raw = _read_exact(handle, label_count, labels_path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {count} images but "
            f"{labels_path} holds {label_count} labels")
    return Dataset(features=images.astype(np.float64) / 255.0,
                   labels=labels, num_classes=int(labels.max()) + 1)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a (n, rows, cols) uint8 image stack and labels as an IDX pair."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise InvalidInputError(f"images must be uint8 with shape (n, rows, cols), got "
                                f"{images.dtype} {images.shape}")
    if labels.shape != (images.shape[0],):
        raise InvalidInputError("labels must be one value per image")
    n, rows, cols = images.shape
    with open(images_path, "wb") as handle:
        handle.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        handle.write(images.tobytes())
    with open(labels_path, "wb") as handle:
        handle.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        handle.write(labels.astype(np.uint8).tobytes())
