"""Round-latency model: per-client path latency and its expectation.

A round for one client travels four legs: upload the cut-layer activations,
download the matching gradients, run the client-side layers locally, and run
the remaining layers on the edge server. The gradient payload is taken equal
to the activation payload (same tensor shape). Failures never enter here;
they affect updates, not the clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .types import ClientProfile, SamplingPlan, SystemConfig, ValidationError


@dataclass(frozen=True)
class LatencyProfile:
    """Model-derived costs from which per-client latencies are assembled.

    ``activation_bytes[j-1]`` is the payload when cutting after layer j and
    ``client_flops_prefix[j-1]`` the cumulative client-side work for layers
    1..j (1-based layers, 0-based storage).
    """

    activation_bytes: tuple[float, ...]
    client_flops_prefix: tuple[float, ...]
    total_flops: float
    server_speed: float

    @property
    def num_layers(self) -> int:
        return len(self.activation_bytes)

    def check(self) -> None:
        if len(self.client_flops_prefix) != len(self.activation_bytes):
            raise ValidationError("profile sequences must have equal length")
        if any(b < 0.0 for b in self.activation_bytes):
            raise ValidationError("activation_bytes must be >= 0")
        prev = 0.0
        for j, value in enumerate(self.client_flops_prefix, start=1):
            if value < prev:
                raise ValidationError(
                    f"client_flops_prefix must be non-decreasing (layer {j})"
                )
            prev = value
        if not self.total_flops > 0.0:
            raise ValidationError("total_flops must be positive")
        if self.client_flops_prefix and self.client_flops_prefix[-1] > self.total_flops:
            raise ValidationError("client_flops_prefix cannot exceed total_flops")
        if not self.server_speed > 0.0:
            raise ValidationError("server_speed must be positive")


def per_client_latency(client: ClientProfile, prof: LatencyProfile, cut: int) -> float:
    """Failure-free round latency of one client split after ``cut`` layers."""
    payload = prof.activation_bytes[cut - 1]
    client_work = prof.client_flops_prefix[cut - 1]
    return (
        payload / client.uplink_rate
        + payload / client.downlink_rate
        + client_work / client.compute_speed
        + (prof.total_flops - client_work) / prof.server_speed
    )


def best_split(
    client: ClientProfile,
    prof: LatencyProfile,
    cut_cap: int,
    system: SystemConfig,
) -> tuple[int, float]:
    """Latency-minimizing cut in [min_cut, cut_cap]; ties go to the shallowest."""
    if cut_cap < system.min_cut:
        raise ValueError("cut_cap must be >= min_cut")
    best_cut = system.min_cut
    best_value = per_client_latency(client, prof, best_cut)
    for cut in range(system.min_cut + 1, cut_cap + 1):
        value = per_client_latency(client, prof, cut)
        if value < best_value:
            best_cut, best_value = cut, value
    return best_cut, best_value


def expected_round_latency(
    plan: SamplingPlan,
    clients,
    prof: LatencyProfile,
    system: SystemConfig,
) -> float:
    """Expected wall time per round: K draws, each costing its client's A_i."""
    return system.sampled_per_round * math.fsum(
        q_i * per_client_latency(client, prof, cut)
        for client, q_i, cut in zip(clients, plan.q, plan.cut_layers)
    )
