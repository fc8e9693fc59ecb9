"""Shared builders for test populations.

Most tests want a small valid population with a handful of knobs changed;
these helpers keep each test to the two or three lines that matter.
"""

from __future__ import annotations

import numpy as np
import pytest

from splitsim import (
    ClientProfile,
    LatencyProfile,
    ModelStatistics,
    Population,
    SystemConfig,
    validate_population,
)


def make_client(
    id: int = 1,
    weight: float = 1.0,
    upload_fail: float = 0.0,
    download_fail: float = 0.0,
    aggregate_fail: float = 0.0,
    uplink_rate: float = 1e6,
    downlink_rate: float = 1e6,
    fed_uplink_rate: float = 1e6,
    compute_speed: float = 1e9,
) -> ClientProfile:
    return ClientProfile(
        id=id,
        weight=weight,
        upload_fail=upload_fail,
        download_fail=download_fail,
        aggregate_fail=aggregate_fail,
        uplink_rate=uplink_rate,
        downlink_rate=downlink_rate,
        fed_uplink_rate=fed_uplink_rate,
        compute_speed=compute_speed,
    )


def make_stats(
    num_layers: int = 2,
    grad_variance: tuple[float, ...] | None = None,
    grad_second_moment: tuple[float, ...] | None = None,
    smoothness: float = 1.0,
    loss_gap: float = 1.0,
) -> ModelStatistics:
    if grad_variance is None:
        grad_variance = (1.0,) * num_layers
    if grad_second_moment is None:
        grad_second_moment = (1.0,) * num_layers
    return ModelStatistics(
        num_layers=num_layers,
        grad_variance=tuple(grad_variance),
        grad_second_moment=tuple(grad_second_moment),
        smoothness=smoothness,
        loss_gap=loss_gap,
    )


def make_system(
    num_clients: int = 1,
    sampled_per_round: int = 1,
    agg_interval: int = 1,
    learning_rate: float = 1.0,
    total_rounds: int = 100,
    latency_budget: float = 1e9,
    min_cut: int = 1,
) -> SystemConfig:
    return SystemConfig(
        num_clients=num_clients,
        sampled_per_round=sampled_per_round,
        agg_interval=agg_interval,
        learning_rate=learning_rate,
        total_rounds=total_rounds,
        latency_budget=latency_budget,
        min_cut=min_cut,
    )


def make_population(
    clients: list[ClientProfile] | None = None,
    stats: ModelStatistics | None = None,
    system: SystemConfig | None = None,
) -> Population:
    if clients is None:
        clients = [make_client()]
    if stats is None:
        stats = make_stats()
    if system is None:
        system = make_system(num_clients=len(clients))
    return validate_population(clients, stats, system)


def uniform_clients(n: int, **kwargs) -> list[ClientProfile]:
    return [make_client(id=i + 1, weight=1.0 / n, **kwargs) for i in range(n)]


class QuadraticModel:
    """Duck-typed stand-in: one parameter per layer, no data dependence.

    Loss is 0.5 * curvature * |params - target|^2, so a full-batch
    gradient step has the closed form (1 - gamma * curvature) contraction
    toward the target, and the smoothness constant is exactly the
    curvature.
    """

    def __init__(self, params, curvature=1.0, target=None):
        self.params = np.asarray(params, dtype=float).copy()
        self.curvature = curvature
        self.target = (
            np.zeros_like(self.params) if target is None else np.asarray(target)
        )

    @property
    def num_layers(self):
        return self.params.size

    def copy(self):
        return QuadraticModel(self.params, self.curvature, self.target)

    def layer_slice(self, layer):
        return slice(layer - 1, layer)

    def block_slice(self, first_layer, last_layer):
        return slice(first_layer - 1, last_layer)

    def loss(self, points, labels):
        return (
            0.5 * self.curvature * float(np.sum((self.params - self.target) ** 2))
        )

    def loss_and_layer_grads(self, points, labels):
        grad = self.curvature * (self.params - self.target)
        chunks = [grad[j : j + 1].copy() for j in range(self.params.size)]
        return self.loss(points, labels), chunks


def make_profile(
    num_layers: int = 2,
    activation_bytes: tuple[float, ...] | None = None,
    client_flops_prefix: tuple[float, ...] | None = None,
    total_flops: float | None = None,
    server_speed: float = 1e10,
) -> LatencyProfile:
    if activation_bytes is None:
        activation_bytes = tuple(1e4 for _ in range(num_layers))
    if client_flops_prefix is None:
        client_flops_prefix = tuple(1e6 * (j + 1) for j in range(num_layers))
    if total_flops is None:
        total_flops = client_flops_prefix[-1] * 2.0
    return LatencyProfile(
        activation_bytes=tuple(activation_bytes),
        client_flops_prefix=tuple(client_flops_prefix),
        total_flops=total_flops,
        server_speed=server_speed,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260816)
