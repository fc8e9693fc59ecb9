"""Desk-scale layered network plus synthetic data for training runs.

The network is a fully-connected classifier with tanh hidden activations
and a softmax cross-entropy head. Every weight-and-bias pair is one
"layer" in the sense the convergence bound uses: parameters live in a
single flat vector, each layer owns a contiguous slice of it, and a split
at a cut layer is just a pair of views into that vector. The math never
depends on where a layer executes, only on how its updates are scaled, so
the training loop can treat device placement as bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .latency import LatencyProfile
from .types import ValidationError


@dataclass(frozen=True)
class ModelSpec:
    """Widths of the network, input first, class count last."""

    layer_widths: tuple[int, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    def check(self) -> None:
        if len(self.layer_widths) < 2:
            raise ValidationError("a model needs at least one layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValidationError("layer widths must be positive")

    def layer_size(self, layer: int) -> int:
        fan_in = self.layer_widths[layer - 1]
        fan_out = self.layer_widths[layer]
        return fan_in * fan_out + fan_out

    def total_params(self) -> int:
        return sum(self.layer_size(j) for j in range(1, self.num_layers + 1))


class LayeredModel:
    """Flat parameter vector with per-layer views and exact backprop.

    Layers are addressed 1-based to match the cut-layer convention used
    everywhere else: a cut at layer ``c`` puts layers 1..c on the client.
    """

    def __init__(self, spec: ModelSpec, params: np.ndarray):
        spec.check()
        if params.shape != (spec.total_params(),):
            raise ValidationError(
                f"parameter vector has {params.shape}, "
                f"spec wants ({spec.total_params()},)"
            )
        self.spec = spec
        self.params = params
        self._offsets = np.concatenate(
            (
                [0],
                np.cumsum(
                    [spec.layer_size(j) for j in range(1, spec.num_layers + 1)]
                ),
            )
        )

    @classmethod
    def initialized(cls, spec: ModelSpec, rng: np.random.Generator) -> "LayeredModel":
        """Gaussian init scaled by fan-in, biases zero."""
        spec.check()
        chunks = []
        for layer in range(1, spec.num_layers + 1):
            fan_in = spec.layer_widths[layer - 1]
            fan_out = spec.layer_widths[layer]
            weight = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
            chunks.append(weight.ravel())
            chunks.append(np.zeros(fan_out))
        return cls(spec, np.concatenate(chunks))

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    def copy(self) -> "LayeredModel":
        return LayeredModel(self.spec, self.params.copy())

    def layer_slice(self, layer: int) -> slice:
        if not 1 <= layer <= self.num_layers:
            raise ValidationError(f"layer {layer} out of range")
        return slice(int(self._offsets[layer - 1]), int(self._offsets[layer]))

    def block_slice(self, first_layer: int, last_layer: int) -> slice:
        """Contiguous slice covering layers first..last inclusive."""
        if not 1 <= first_layer <= last_layer <= self.num_layers:
            raise ValidationError(
                f"block [{first_layer}, {last_layer}] out of range"
            )
        return slice(
            int(self._offsets[first_layer - 1]), int(self._offsets[last_layer])
        )

    def split(self, cut: int) -> tuple[np.ndarray, np.ndarray]:
        """Client view (layers 1..cut) and server view (the rest).

        Both are writable views into the flat vector, so concatenating
        them reproduces it bit-exactly by construction.
        """
        if not 1 <= cut <= self.num_layers:
            raise ValidationError(f"cut {cut} out of range")
        boundary = int(self._offsets[cut])
        return self.params[:boundary], self.params[boundary:]

    def _weights(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        fan_in = self.spec.layer_widths[layer - 1]
        fan_out = self.spec.layer_widths[layer]
        flat = self.params[self.layer_slice(layer)]
        return flat[: fan_in * fan_out].reshape(fan_in, fan_out), flat[
            fan_in * fan_out :
        ]

    def _forward(self, inputs: np.ndarray) -> list[np.ndarray]:
        activations = [inputs]
        current = inputs
        for layer in range(1, self.num_layers + 1):
            weight, bias = self._weights(layer)
            pre = current @ weight + bias
            current = np.tanh(pre) if layer < self.num_layers else pre
            activations.append(current)
        return activations

    def logits(self, inputs: np.ndarray) -> np.ndarray:
        return self._forward(inputs)[-1]

    def loss(self, inputs: np.ndarray, labels: np.ndarray) -> float:
        logits = self.logits(inputs)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(len(labels)), labels]
        return float(np.mean(log_norm - picked))

    def loss_and_layer_grads(
        self, inputs: np.ndarray, labels: np.ndarray
    ) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and one flat gradient chunk per layer."""
        if inputs.ndim != 2 or inputs.shape[1] != self.spec.input_dim:
            raise ValidationError(
                f"inputs have shape {inputs.shape}, "
                f"expected (batch, {self.spec.input_dim})"
            )
        activations = self._forward(inputs)
        logits = activations[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        batch = len(labels)
        loss = float(
            np.mean(
                np.log(exp.sum(axis=1))
                - shifted[np.arange(batch), labels]
            )
        )
        delta = probs.copy()
        delta[np.arange(batch), labels] -= 1.0
        delta /= batch
        grads: list[np.ndarray] = [np.empty(0)] * self.num_layers
        for layer in range(self.num_layers, 0, -1):
            weight, _ = self._weights(layer)
            grad_w = activations[layer - 1].T @ delta
            grad_b = delta.sum(axis=0)
            grads[layer - 1] = np.concatenate((grad_w.ravel(), grad_b))
            if layer > 1:
                upstream = delta @ weight.T
                delta = upstream * (1.0 - activations[layer - 1] ** 2)
        return loss, grads

    def flat_gradient(
        self, inputs: np.ndarray, labels: np.ndarray
    ) -> tuple[float, np.ndarray]:
        loss, grads = self.loss_and_layer_grads(inputs, labels)
        return loss, np.concatenate(grads)


def gaussian_clusters(
    num_samples: int,
    num_classes: int,
    dim: int,
    rng: np.random.Generator,
    separation: float = 3.0,
    spread: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced synthetic classification task: one Gaussian per class."""
    if num_samples < num_classes:
        raise ValidationError("need at least one sample per class")
    means = rng.normal(0.0, 1.0, (num_classes, dim))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = separation * means / np.maximum(norms, 1e-12)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    points = means[labels] + spread * rng.normal(0.0, 1.0, (num_samples, dim))
    return points, labels


def _partition_sizes(total: int, weights: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment with a floor of one sample each."""
    raw = [w * total for w in weights]
    sizes = [max(1, int(r)) for r in raw]
    remainders = [r - int(r) for r in raw]
    order = sorted(range(len(weights)), key=lambda i: -remainders[i])
    excess = sum(sizes) - total
    idx = 0
    while excess > 0:
        i = order[len(order) - 1 - idx % len(order)]
        if sizes[i] > 1:
            sizes[i] -= 1
            excess -= 1
        idx += 1
    idx = 0
    while excess < 0:
        sizes[order[idx % len(order)]] += 1
        excess += 1
        idx += 1
    return sizes


def partition_iid(
    points: np.ndarray,
    labels: np.ndarray,
    weights: tuple[float, ...],
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle once, then deal contiguous weight-proportional shards."""
    order = rng.permutation(len(labels))
    sizes = _partition_sizes(len(labels), weights)
    shards = []
    start = 0
    for size in sizes:
        take = order[start : start + size]
        shards.append((points[take], labels[take]))
        start += size
    return shards


def partition_by_primary_class(
    points: np.ndarray,
    labels: np.ndarray,
    weights: tuple[float, ...],
    rng: np.random.Generator,
    primary_share: float = 0.7,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Skewed shards: client i draws primary_share of its data from class
    i mod C and the remainder uniformly from the other classes.

    Class pools are consumed without replacement; when a pool runs dry the
    shortfall comes from whatever remains, so shard sizes are exact even
    if the skew is then slightly diluted.
    """
    if not 0.0 <= primary_share <= 1.0:
        raise ValidationError("primary_share must lie in [0, 1]")
    num_classes = int(labels.max()) + 1
    pools = {
        c: list(rng.permutation(np.flatnonzero(labels == c)))
        for c in range(num_classes)
    }
    sizes = _partition_sizes(len(labels), weights)
    shards: list[tuple[np.ndarray, np.ndarray]] = []
    for client, size in enumerate(sizes):
        primary = client % num_classes
        want_primary = int(round(primary_share * size))
        take: list[int] = []
        while len(take) < want_primary and pools[primary]:
            take.append(pools[primary].pop())
        other = [c for c in range(num_classes) if c != primary]
        spin = 0
        while len(take) < size and any(pools[c] for c in other):
            c = other[spin % len(other)]
            if pools[c]:
                take.append(pools[c].pop())
            spin += 1
        while len(take) < size and pools[primary]:
            take.append(pools[primary].pop())
        idx = np.array(take, dtype=int)
        shards.append((points[idx], labels[idx]))
    return shards


def draw_batch(
    rng: np.random.Generator, data_size: int, batch_size: int
) -> np.ndarray:
    """One mini-batch of indices, without replacement, clamped to the data."""
    take = min(batch_size, data_size)
    return rng.choice(data_size, size=take, replace=False)


def profile_from_widths(
    widths: tuple[int, ...],
    batch_size: int,
    server_speed: float = 1e9,
    bytes_per_value: float = 8.0,
    backward_factor: float = 2.0,
) -> LatencyProfile:
    """Latency profile consistent with the network's actual shapes.

    Activation traffic at a cut is the batch of that layer's outputs (the
    backward pass returns a same-sized gradient on the download side, which
    the per-direction terms already model). Work is the usual two flops per
    multiply-accumulate, with the backward pass costed as a multiple of the
    forward pass.
    """
    spec = ModelSpec(tuple(widths))
    spec.check()
    activation = tuple(
        batch_size * spec.layer_widths[j] * bytes_per_value
        for j in range(1, spec.num_layers + 1)
    )
    per_layer = [
        2.0
        * batch_size
        * spec.layer_widths[j - 1]
        * spec.layer_widths[j]
        * (1.0 + backward_factor)
        for j in range(1, spec.num_layers + 1)
    ]
    prefix = tuple(np.cumsum(per_layer))
    return LatencyProfile(
        activation_bytes=activation,
        client_flops_prefix=prefix,
        total_flops=float(prefix[-1]),
        server_speed=server_speed,
    )
