"""Minimal differentiable MLP with exact backpropagation.

Parameters live in a single flat float64 vector with a canonical layout:
each weight matrix and each bias vector is its own layer span, in network
order. That granularity is what the layer-wise aggregator operates on.

The loss is mean softmax cross-entropy, optionally augmented with a proximal
pull toward the round-start parameters (mu/2 * ||theta - anchor||^2) for
drift-regularized local training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregators import LayerLayout
from .errors import InvalidInputError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: input width, hidden widths, output classes."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise InvalidInputError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class ParamVector:
    """Flat parameter (or gradient) vector plus its layer layout."""

    values: np.ndarray
    layout: LayerLayout

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def client_delta(start: ParamVector, end: ParamVector) -> np.ndarray:
    """Accumulated update uploaded by a client: round-start minus final parameters."""
    if start.layout != end.layout:
        raise InvalidInputError("parameter vectors have different layouts")
    return start.values - end.values


class Mlp:
    """Fully connected network; immutable after construction."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        dims = spec.layer_dims
        self.shapes = tuple(zip(dims[:-1], dims[1:]))
        spans = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            spans.append((offset, fan_in * fan_out))
            offset += fan_in * fan_out
            spans.append((offset, fan_out))
            offset += fan_out
        self.layout = LayerLayout(tuple(spans))
        self.dim = offset

    # -- parameter packing ---------------------------------------------------

    def _views(self, values: np.ndarray):
        """(weight matrix, bias) views into a flat vector, one pair per linear layer."""
        slices = self.layout.slices()
        return [
            (values[slices[2 * k]].reshape(fan_in, fan_out), values[slices[2 * k + 1]])
            for k, (fan_in, fan_out) in enumerate(self.shapes)
        ]

    def init_params(self, seed) -> ParamVector:
        """Deterministic initialization: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
        rng = np.random.default_rng(seed)
        values = np.zeros(self.dim)
        for (w, _), (fan_in, fan_out) in zip(self._views(values), self.shapes):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w[:] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return ParamVector(values, self.layout)

    # -- forward / backward ---------------------------------------------------

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.spec.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _activate_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.spec.activation == "relu":
            return (z > 0.0).astype(np.float64)
        return 1.0 - a * a

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.spec.input_dim:
            raise InvalidInputError(
                f"batch must have shape (B, {self.spec.input_dim}), got {batch.shape}")
        return batch

    def forward(self, params: ParamVector, batch) -> np.ndarray:
        """Logits for a batch; activations between linear layers, none on the output."""
        h = self._check_batch(batch)
        views = self._views(params.values)
        for k, (w, b) in enumerate(views):
            z = h @ w + b
            h = self._activate(z) if k < len(views) - 1 else z
        return h

    def loss_and_grad(self, params: ParamVector, batch, labels,
                      mu: float = 0.0, anchor: ParamVector | None = None):
        """Mean softmax cross-entropy and its exact gradient.

        With ``mu > 0`` the proximal term mu/2 * ||theta - anchor||^2 is added
        to the loss, contributing mu * (theta - anchor) to the gradient.
        """
        x = self._check_batch(batch)
        labels = np.asarray(labels)
        if labels.shape != (x.shape[0],):
            raise InvalidInputError(
                f"labels must have shape ({x.shape[0]},), got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.spec.output_dim):
            raise InvalidInputError(
                f"labels must lie in [0, {self.spec.output_dim}), got range "
                f"[{labels.min()}, {labels.max()}]")
        views = self._views(params.values)

        inputs = []   # input to each linear layer
        preacts = []  # pre-activation of each hidden layer
        h = x
        for k, (w, b) in enumerate(views):
            inputs.append(h)
            z = h @ w + b
            h = self._activate(z) if k < len(views) - 1 else z
            if k < len(views) - 1:
                preacts.append((z, h))
        logits = h

        batch_size = x.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        loss = float(-np.mean(
            shifted[np.arange(batch_size), labels]
            - np.log(exp.sum(axis=1))
        ))

        grad = ParamVector(np.zeros(self.dim), self.layout)
        grad_views = self._views(grad.values)
        dz = probs.copy()
        dz[np.arange(batch_size), labels] -= 1.0
        dz /= batch_size
        for k in range(len(views) - 1, -1, -1):
            w, _ = views[k]
            gw, gb = grad_views[k]
            gw[:] = inputs[k].T @ dz
            gb[:] = dz.sum(axis=0)
            if k > 0:
                z_prev, a_prev = preacts[k - 1]
                dz = (dz @ w.T) * self._activate_grad(z_prev, a_prev)

        if mu > 0.0:
            if anchor is None:
                raise InvalidInputError("proximal term requires an anchor parameter vector")
            diff = params.values - anchor.values
            loss += 0.5 * mu * float(diff @ diff)
            grad.values += mu * diff
        return loss, grad

    # -- local training --------------------------------------------------------

    def local_train(self, params: ParamVector, features, labels, eta_l: float,
                    steps: int, batch_size: int, seed, mu: float = 0.0) -> ParamVector:
        """Run ``steps`` SGD steps on seeded mini-batches; returns new parameters.

        Batches are drawn by shuffling the sample indices with the given seed
        and slicing consecutive chunks of ``batch_size``; when the data is
        exhausted a fresh shuffled pass begins. The input parameters are the
        proximal anchor and are never mutated.
        """
        if eta_l < 0:
            raise InvalidInputError(f"learning rate must be non-negative, got {eta_l!r}")
        if steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {steps!r}")
        if batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {batch_size!r}")
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        n = features.shape[0]
        if n == 0:
            raise InvalidInputError("cannot train on an empty dataset slice")

        rng = np.random.default_rng(seed)
        theta = params.copy()
        done = 0
        while done < steps:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                if done == steps:
                    break
                take = order[start:start + batch_size]
                _, grad = self.loss_and_grad(theta, features[take], labels[take],
                                             mu=mu, anchor=params)
                theta.values -= eta_l * grad.values
                done += 1
        return theta
