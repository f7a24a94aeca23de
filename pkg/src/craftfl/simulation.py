"""Round-based federated training orchestration.

A run is fully determined by its configuration: partition, client sampling,
and local training draw from three independent named seeds, so changing one
stream never perturbs the others. Within a round, sampled clients train on a
read-only copy of the global parameters and their deltas are collected in
client-id order before aggregation, making the result independent of any
client-level scheduling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aggregators import DEFAULT_TAU, ClientUpdate, count_conflicts, make_aggregator
from .data import Dataset, Partition, dirichlet_partition, load_idx, synthetic_task
from .errors import ConfigError, CraftflError, InvalidInputError
from .models import Mlp, MlpSpec, client_delta
from .projection import DEFAULT_EPS, DEFAULT_RANK_TOL

AGGREGATOR_KINDS = ("craft", "config", "fedavg", "fedprox", "fedavgm",
                    "fedadagrad", "fedadam", "fedyogi")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    features: int = 20
    samples: int = 2000
    class_sep: float = 3.0
    images: str | None = None
    labels: str | None = None

    def validate(self):
        if self.kind == "synthetic":
            if self.classes < 2 or self.features < 1 or self.samples < self.classes:
                raise ConfigError(
                    f"invalid synthetic dataset: classes={self.classes}, "
                    f"features={self.features}, samples={self.samples}")
        elif self.kind == "idx":
            if not self.images or not self.labels:
                raise ConfigError("dataset kind 'idx' requires 'images' and 'labels' paths")
        else:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "craft"
    beta: float = 0.9          # server momentum
    beta1: float = 0.9         # adaptive first moment
    beta2: float = 0.99        # adaptive second moment
    tau_adapt: float = 1e-3    # adaptive preconditioner floor
    mu: float = 0.0            # client-side proximal weight (fedprox)

    def validate(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(
                f"unknown aggregator kind {self.kind!r}; expected one of {AGGREGATOR_KINDS}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")
        if not self.tau_adapt > 0:
            raise ConfigError(f"tau_adapt must be positive, got {self.tau_adapt!r}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu!r}")


@dataclass(frozen=True)
class Seeds:
    partition: int = 0
    training: int = 1
    sampling: int = 2

    def validate(self):
        for name in ("partition", "training", "sampling"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"seed '{name}' must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    hidden_dims: tuple[int, ...] = (200, 200)
    activation: str = "relu"
    clients: int = 50
    active_per_round: int = 10
    rounds: int = 300
    eta_g: float = 1.0
    eta_l: float = 0.1
    lr_decay: float = 0.999
    batch_size: int = 50
    alpha: float = 0.1
    min_per_client: int = 20
    eps: float = DEFAULT_EPS
    tau: float = DEFAULT_TAU
    rank_tol: float = DEFAULT_RANK_TOL
    seeds: Seeds = field(default_factory=Seeds)
    eval_every: int = 10

    def validate(self):
        self.dataset.validate()
        self.aggregator.validate()
        self.seeds.validate()
        if self.clients < 1:
            raise ConfigError(f"'clients' must be >= 1, got {self.clients}")
        if not 1 <= self.active_per_round <= self.clients:
            raise ConfigError(
                f"'active_per_round' ({self.active_per_round}) must lie in "
                f"[1, 'clients' ({self.clients})]")
        if self.rounds < 1:
            raise ConfigError(f"'rounds' must be >= 1, got {self.rounds}")
        if self.eta_g < 0 or self.eta_l < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"'lr_decay' must be in (0, 1], got {self.lr_decay!r}")
        if self.batch_size < 1:
            raise ConfigError(f"'batch_size' must be >= 1, got {self.batch_size}")
        if not self.alpha > 0:
            raise ConfigError(f"'alpha' must be positive, got {self.alpha!r}")
        if self.eval_every < 1:
            raise ConfigError(f"'eval_every' must be >= 1, got {self.eval_every}")
        if not (self.eps > 0 and self.tau > 0 and self.rank_tol > 0):
            raise ConfigError("'eps', 'tau', and 'rank_tol' must all be positive")


@dataclass
class RoundRecord:
    """Per-round telemetry; accuracy fields are filled on evaluation rounds only."""

    round: int
    conflict_count: int
    active_conflict_count: int
    residual_norm: float
    gram_ranks: tuple[int, ...]
    active_counts: tuple[int, ...]
    full_rank: bool
    all_clients_active: bool
    wall_ms: float
    accuracies: np.ndarray | None = None
    mean: float | None = None
    best10: float | None = None
    worst10: float | None = None
    std: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.accuracies is not None


def sample_clients(num_clients: int, num_active: int, round_index: int, seed: int) -> np.ndarray:
    """Uniform sample without replacement, deterministic in (seed, round); sorted."""
    if num_active > num_clients:
        raise InvalidInputError(
            f"cannot sample {num_active} clients out of {num_clients}")
    rng = np.random.default_rng([seed, round_index])
    return np.sort(rng.choice(num_clients, size=num_active, replace=False))


def summarize(accuracies) -> tuple[float, float, float, float]:
    """(mean, best-decile mean, worst-decile mean, population std).

    The decile size is max(1, floor(N/10)).
    """
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if accuracies.size == 0:
        raise InvalidInputError("cannot summarize an empty accuracy vector")
    k = max(1, accuracies.size // 10)
    ordered = np.sort(accuracies)
    return (float(accuracies.mean()), float(ordered[-k:].mean()),
            float(ordered[:k].mean()), float(accuracies.std()))


def evaluate(model: Mlp, params, dataset: Dataset, partition: Partition) -> np.ndarray:
    """Accuracy of the global model on every client's local test split."""
    accuracies = np.empty(partition.num_clients)
    for client, test_idx in enumerate(partition.test):
        logits = model.forward(params, dataset.features[test_idx])
        predicted = logits.argmax(axis=1)
        accuracies[client] = float(np.mean(predicted == dataset.labels[test_idx]))
    return accuracies


def _build_dataset(config: ExperimentConfig) -> Dataset:
    ds = config.dataset
    if ds.kind == "synthetic":
        return synthetic_task(ds.classes, ds.features, ds.samples, ds.class_sep,
                              seed=config.seeds.partition)
    return load_idx(ds.images, ds.labels)


class FederatedRun:
    """One experiment in progress: owns the model state and the round loop."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.dataset = _build_dataset(config)
        self.partition = dirichlet_partition(
            self.dataset.labels, config.clients, config.alpha,
            config.min_per_client, seed=config.seeds.partition)
        spec = MlpSpec(self.dataset.num_features, config.hidden_dims,
                       self.dataset.num_classes, config.activation)
        self.model = Mlp(spec)
        self.params = self.model.init_params(config.seeds.training)
        self.aggregator = make_aggregator(
            config.aggregator.kind, self.model.layout,
            eps=config.eps, tau=config.tau, rank_tol=config.rank_tol,
            beta=config.aggregator.beta, beta1=config.aggregator.beta1,
            beta2=config.aggregator.beta2, tau_adapt=config.aggregator.tau_adapt)
        self.records: list[RoundRecord] = []
        self.round_index = 0
        self.last_update: np.ndarray | None = None
        self.last_client_updates: list[ClientUpdate] = []

    def _train_client(self, client: int, round_index: int, eta_l: float) -> ClientUpdate:
        train_idx = self.partition.train[client]
        steps = -(-len(train_idx) // self.config.batch_size)  # one local epoch
        final = self.model.local_train(
            self.params,
            self.dataset.features[train_idx], self.dataset.labels[train_idx],
            eta_l, steps, self.config.batch_size,
            seed=[self.config.seeds.training, round_index, client],
            mu=self.config.aggregator.mu)
        return ClientUpdate(client, float(len(train_idx)),
                            client_delta(self.params, final))

    def run_round(self) -> RoundRecord:
        config = self.config
        t = self.round_index
        started = time.perf_counter()
        sampled = sample_clients(config.clients, config.active_per_round,
                                 t, config.seeds.sampling)
        eta_l = config.eta_l * config.lr_decay ** t

        try:
            updates = [self._train_client(int(c), t, eta_l) for c in sampled]
            g, diagnostics = self.aggregator.aggregate(updates)
        except CraftflError as exc:
            raise type(exc)(f"round {t}: {exc}") from exc

        conflicts = count_conflicts(updates, g)
        if diagnostics:
            everywhere_active = [
                u for position, u in enumerate(updates)
                if all(position in diag.active for diag in diagnostics)
            ]
            active_conflicts = (count_conflicts(everywhere_active, g)
                                if everywhere_active else 0)
            residual_norm = max(diag.residual_norm for diag in diagnostics)
            gram_ranks = tuple(diag.gram_rank for diag in diagnostics)
            active_counts = tuple(len(diag.active) for diag in diagnostics)
            full_rank = all(diag.full_rank for diag in diagnostics)
            all_active = all(len(diag.active) == len(updates) for diag in diagnostics)
        else:
            active_conflicts = conflicts
            residual_norm = 0.0
            gram_ranks = ()
            active_counts = ()
            full_rank = False
            all_active = False

        self.params.values -= config.eta_g * g
        self.last_update = g
        self.last_client_updates = updates

        record = RoundRecord(
            round=t, conflict_count=conflicts,
            active_conflict_count=active_conflicts,
            residual_norm=residual_norm, gram_ranks=gram_ranks,
            active_counts=active_counts, full_rank=full_rank,
            all_clients_active=all_active,
            wall_ms=0.0)
        if (t + 1) % config.eval_every == 0 or t == config.rounds - 1:
            record.accuracies = evaluate(self.model, self.params,
                                         self.dataset, self.partition)
            record.mean, record.best10, record.worst10, record.std = summarize(
                record.accuracies)
        record.wall_ms = (time.perf_counter() - started) * 1e3
        self.records.append(record)
        self.round_index += 1
        return record

    def run(self, progress=None) -> list[RoundRecord]:
        """Execute all remaining rounds; optionally report each record to ``progress``."""
        while self.round_index < self.config.rounds:
            record = self.run_round()
            if progress is not None:
                progress(record)
        return self.records


def run_experiment(config: ExperimentConfig, progress=None) -> list[RoundRecord]:
    """Run a full experiment from a validated configuration."""
    return FederatedRun(config).run(progress)
