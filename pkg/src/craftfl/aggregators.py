"""Round-level aggregation strategies.

Every strategy consumes the same list of :class:`ClientUpdate` and returns a
single d-dimensional global update, so the simulator can swap aggregators
without touching the rest of the round loop. The conflict-resolving
aggregator works layer by layer: each layer's client slices are normalized,
gated through a magnitude-based active set, and projected with
:func:`craftfl.projection.craft_correct` against the (per-layer normalized)
previous global update. Layers whose updates are all below the activity
threshold fall back to the ordinary weighted average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .projection import DEFAULT_EPS, DEFAULT_RANK_TOL, craft_correct, normalize

# Per-layer activity threshold: updates with smaller norm do not define
# alignment constraints.
DEFAULT_TAU = 1e-6


@dataclass(frozen=True)
class LayerLayout:
    """Ordered (offset, length) spans partitioning a flat vector into layers."""

    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        spans = tuple((int(o), int(n)) for o, n in self.spans)
        object.__setattr__(self, "spans", spans)
        if len(spans) < 1:
            raise InvalidInputError("layout needs at least one span")
        expected = 0
        for offset, length in spans:
            if length < 1:
                raise InvalidInputError(f"span ({offset}, {length}) has non-positive length")
            if offset != expected:
                raise InvalidInputError(
                    f"spans must be sorted and cover [0, d) without gaps or overlaps; "
                    f"expected offset {expected}, got {offset}"
                )
            expected = offset + length

    @property
    def dim(self) -> int:
        offset, length = self.spans[-1]
        return offset + length

    @property
    def num_layers(self) -> int:
        return len(self.spans)

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + n) for o, n in self.spans)

    @classmethod
    def single(cls, dim: int) -> "LayerLayout":
        """One span covering the whole vector."""
        return cls(((0, dim),))


@dataclass
class ClientUpdate:
    """One client's contribution to a round: id, data-size weight, and delta."""

    client_id: int
    weight: float
    delta: np.ndarray


@dataclass
class AggregatorState:
    """Persistent per-aggregator state carried across rounds."""

    kind: str
    round: int = 0
    prev_update: np.ndarray | None = None
    momentum: np.ndarray | None = None
    second_moment: np.ndarray | None = None


@dataclass(frozen=True)
class LayerDiagnostic:
    """Telemetry for one layer of one aggregation: active set, rank, residual."""

    layer: int
    active: tuple[int, ...]
    gram_rank: int
    residual_norm: float

    @property
    def fallback(self) -> bool:
        return len(self.active) == 0

    @property
    def full_rank(self) -> bool:
        return len(self.active) > 0 and self.gram_rank == len(self.active)


def _check_updates(updates, dim: int | None = None) -> list[np.ndarray]:
    if len(updates) == 0:
        raise InvalidInputError("update list is empty")
    deltas = []
    for u in updates:
        delta = np.asarray(u.delta, dtype=np.float64)
        if dim is not None and delta.shape != (dim,):
            raise InvalidInputError(
                f"client {u.client_id}: delta has shape {delta.shape}, expected ({dim},)"
            )
        if not np.all(np.isfinite(delta)):
            raise InvalidInputError(f"client {u.client_id}: delta contains non-finite values")
        deltas.append(delta)
    return deltas


def build_targets(updates) -> np.ndarray:
    """Data-proportional alignment targets: weight_i / sum of weights."""
    if len(updates) == 0:
        raise InvalidInputError("cannot build targets from an empty update list")
    weights = np.array([float(u.weight) for u in updates])
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        bad = updates[int(np.argmin(weights))].client_id
        raise InvalidInputError(f"client {bad}: weight must be positive and finite")
    return weights / weights.sum()


def active_set(norms, tau: float, base_targets) -> tuple[np.ndarray, np.ndarray]:
    """Indices with update norm >= tau, plus their renormalized targets.

    An empty index array signals that the caller should fall back to plain
    weighted averaging for this layer; it is not an error.
    """
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau!r}")
    norms = np.asarray(norms, dtype=np.float64)
    base_targets = np.asarray(base_targets, dtype=np.float64)
    indices = np.flatnonzero(norms >= tau)
    if indices.size == 0:
        return indices, np.empty(0)
    gated = base_targets[indices]
    return indices, gated / gated.sum()


def _weighted_average(vectors, weights) -> np.ndarray:
    # Sequential accumulation so that averaging a slice is bitwise identical
    # to slicing the average (the fallback path must reproduce plain
    # averaging exactly).
    out = np.zeros_like(vectors[0])
    for w, v in zip(weights, vectors):
        out += w * v
    return out


def _layerwise_project(updates, layout: LayerLayout, reference: np.ndarray | None,
                       eps: float, tau: float, rank_tol: float):
    deltas = _check_updates(updates, layout.dim)
    base = build_targets(updates)
    g = np.zeros(layout.dim)
    diagnostics: list[LayerDiagnostic] = []
    for q, sl in enumerate(layout.slices()):
        slices = [delta[sl] for delta in deltas]
        norms = np.array([np.linalg.norm(s) for s in slices])
        indices, targets = active_set(norms, tau, base)
        if indices.size == 0:
            g[sl] = _weighted_average(slices, base)
            diagnostics.append(LayerDiagnostic(q, (), 0, 0.0))
            continue
        U = np.stack([normalize(slices[i], eps) for i in indices])
        if reference is None:
            ref_q = np.zeros(U.shape[1])
        else:
            ref_q = normalize(reference[sl], eps)
        result = craft_correct(U, targets, ref_q, rank_tol)
        g[sl] = result.direction
        diagnostics.append(LayerDiagnostic(
            q, tuple(int(i) for i in indices), result.gram_rank,
            float(np.linalg.norm(result.residual)),
        ))
    return g, diagnostics


def craft_aggregate(updates, state: AggregatorState, layout: LayerLayout,
                    eps: float = DEFAULT_EPS, tau: float = DEFAULT_TAU,
                    rank_tol: float = DEFAULT_RANK_TOL):
    """Layer-wise conflict-resolved aggregation.

    Uses the previous global update held in ``state.prev_update`` as the
    reference (zero at the first round), then commits the returned update
    back into the state so it becomes the next round's reference.

    Returns:
        ``(g, diagnostics)`` where ``diagnostics`` is a list of
        :class:`LayerDiagnostic`, one per layer.
    """
    g, diagnostics = _layerwise_project(updates, layout, state.prev_update,
                                        eps, tau, rank_tol)
    state.prev_update = g.copy()
    state.round += 1
    return g, diagnostics


def fedavg_aggregate(updates) -> np.ndarray:
    """Weighted average of client deltas with weights renormalized over the round."""
    deltas = _check_updates(updates)
    dim = deltas[0].shape[0]
    for update, delta in zip(updates, deltas):
        if delta.shape != (dim,):
            raise InvalidInputError(
                f"client {update.client_id}: delta has shape {delta.shape}, expected ({dim},)")
    return _weighted_average(deltas, build_targets(updates))


def server_momentum_step(state: AggregatorState, avg, beta: float) -> np.ndarray:
    """Heavy-ball server momentum: v <- beta * v + avg; returns v."""
    if not 0.0 <= beta < 1.0:
        raise InvalidInputError(f"beta must be in [0, 1), got {beta!r}")
    avg = np.asarray(avg, dtype=np.float64)
    if state.momentum is None:
        state.momentum = np.zeros_like(avg)
    state.momentum = beta * state.momentum + avg
    state.round += 1
    return state.momentum


def adaptive_server_step(state: AggregatorState, avg, variant: str,
                         beta1: float = 0.9, beta2: float = 0.99,
                         tau_adapt: float = 1e-3) -> np.ndarray:
    """Adaptive server optimizers over the averaged update.

    Maintains first/second-moment buffers and returns the preconditioned
    direction ``m / (sqrt(v) + tau_adapt)``. The second-moment rule selects
    the variant: accumulate (adagrad), exponential average (adam), or the
    sign-damped update (yogi).
    """
    if variant not in ("adagrad", "adam", "yogi"):
        raise InvalidInputError(f"unknown adaptive variant {variant!r}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise InvalidInputError("beta1 and beta2 must be in [0, 1)")
    if not tau_adapt > 0:
        raise InvalidInputError(f"tau_adapt must be positive, got {tau_adapt!r}")
    avg = np.asarray(avg, dtype=np.float64)
    if state.momentum is None:
        state.momentum = np.zeros_like(avg)
    if state.second_moment is None:
        state.second_moment = np.zeros_like(avg)
    state.momentum = beta1 * state.momentum + (1.0 - beta1) * avg
    sq = avg * avg
    if variant == "adagrad":
        state.second_moment = state.second_moment + sq
    elif variant == "adam":
        state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * sq
    else:  # yogi
        state.second_moment = state.second_moment - (1.0 - beta2) * np.sign(state.second_moment - sq) * sq
    state.round += 1
    return state.momentum / (np.sqrt(state.second_moment) + tau_adapt)


def count_conflicts(updates, g) -> int:
    """Number of clients whose delta has negative inner product with g."""
    g = np.asarray(g, dtype=np.float64)
    deltas = _check_updates(updates, g.shape[0])
    return int(sum(1 for delta in deltas if float(delta @ g) < 0.0))


# ---------------------------------------------------------------------------
# Strategy objects used by the simulator
# ---------------------------------------------------------------------------

class Aggregator:
    """Shared interface: one round's ClientUpdate list in, one d-vector out."""

    kind = "base"

    def __init__(self, kind: str | None = None):
        if kind is not None:
            self.kind = kind
        self.state = AggregatorState(kind=self.kind)

    def aggregate(self, updates) -> tuple[np.ndarray, list[LayerDiagnostic]]:
        raise NotImplementedError


class CraftAggregator(Aggregator):
    kind = "craft"

    def __init__(self, layout: LayerLayout, eps: float = DEFAULT_EPS,
                 tau: float = DEFAULT_TAU, rank_tol: float = DEFAULT_RANK_TOL):
        super().__init__()
        self.layout = layout
        self.eps = eps
        self.tau = tau
        self.rank_tol = rank_tol

    def aggregate(self, updates):
        return craft_aggregate(updates, self.state, self.layout,
                               self.eps, self.tau, self.rank_tol)


class ConfigAggregator(Aggregator):
    """Layer-wise minimum-norm direction: the zero-reference projection every round."""

    kind = "config"

    def __init__(self, layout: LayerLayout, eps: float = DEFAULT_EPS,
                 tau: float = DEFAULT_TAU, rank_tol: float = DEFAULT_RANK_TOL):
        super().__init__()
        self.layout = layout
        self.eps = eps
        self.tau = tau
        self.rank_tol = rank_tol

    def aggregate(self, updates):
        g, diagnostics = _layerwise_project(updates, self.layout, None,
                                            self.eps, self.tau, self.rank_tol)
        self.state.round += 1
        return g, diagnostics


class FedAvgAggregator(Aggregator):
    kind = "fedavg"

    def aggregate(self, updates):
        g = fedavg_aggregate(updates)
        self.state.round += 1
        return g, []


class FedAvgMAggregator(Aggregator):
    kind = "fedavgm"

    def __init__(self, beta: float = 0.9):
        super().__init__()
        self.beta = beta

    def aggregate(self, updates):
        return server_momentum_step(self.state, fedavg_aggregate(updates), self.beta), []


class AdaptiveAggregator(Aggregator):
    def __init__(self, variant: str, beta1: float = 0.9, beta2: float = 0.99,
                 tau_adapt: float = 1e-3):
        super().__init__(kind=f"fed{variant}")
        self.variant = variant
        self.beta1 = beta1
        self.beta2 = beta2
        self.tau_adapt = tau_adapt

    def aggregate(self, updates):
        g = adaptive_server_step(self.state, fedavg_aggregate(updates), self.variant,
                                 self.beta1, self.beta2, self.tau_adapt)
        return g, []


def make_aggregator(kind: str, layout: LayerLayout, *, eps: float = DEFAULT_EPS,
                    tau: float = DEFAULT_TAU, rank_tol: float = DEFAULT_RANK_TOL,
                    beta: float = 0.9, beta1: float = 0.9, beta2: float = 0.99,
                    tau_adapt: float = 1e-3) -> Aggregator:
    """Construct the aggregation strategy named by ``kind``.

    ``fedprox`` shares the plain weighted-average server rule; its proximal
    term lives on the client side of the simulator.
    """
    if kind == "craft":
        return CraftAggregator(layout, eps, tau, rank_tol)
    if kind == "config":
        return ConfigAggregator(layout, eps, tau, rank_tol)
    if kind in ("fedavg", "fedprox"):
        return FedAvgAggregator(kind=kind)
    if kind == "fedavgm":
        return FedAvgMAggregator(beta)
    if kind in ("fedadagrad", "fedadam", "fedyogi"):
        return AdaptiveAggregator(kind[3:], beta1, beta2, tau_adapt)
    raise InvalidInputError(f"unknown aggregator kind {kind!r}")
