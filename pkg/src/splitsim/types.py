"""Shared domain types for sampling/splitting plans under unreliable clients.

Everything downstream (bound evaluation, the planner, the simulator) works on
the same four value types defined here. They are frozen dataclasses: validate
once, then share freely across threads and modules.

Conventions used throughout the package:

- clients are identified by 1-based integer ids, and layer indices (cut
  layers included) are 1-based as well;
- ``weight`` is the client's share of the pooled dataset, ``D_i / D``, so the
  weights of a population sum to one;
- the three failure probabilities are Bernoulli rates per round for the
  activation upload, the gradient download, and the model upload to the
  aggregation server. Each must be strictly below one because updates are
  rescaled by the inverse success probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

WEIGHT_TOL = 1e-9
"""Absolute tolerance on sum(weights) == 1."""

PROBABILITY_TOL = 1e-6
"""Default absolute tolerance on sum(q) == 1 for sampling plans.

Plans come out of bisection loops whose own tolerance dominates this; see
``splitsim.optimizer.Tolerances``.
"""

CAP_TOL = 1e-6
"""Default absolute slack allowed on the amplification cap check."""


class ValidationError(ValueError):
    """Raised when a population or plan violates a structural invariant."""


@dataclass(frozen=True)
class ClientProfile:
    """Static description of one participating client.

    ``upload_fail``, ``download_fail`` and ``aggregate_fail`` are the
    per-round probabilities of losing, respectively, the activation upload to
    the edge server, the gradient download back to the client, and the
    client-model upload to the aggregation server.
    """

    id: int
    weight: float
    upload_fail: float
    download_fail: float
    aggregate_fail: float
    uplink_rate: float
    downlink_rate: float
    fed_uplink_rate: float
    compute_speed: float

    def joint_success(self) -> float:
        """Probability that all three failure-prone transfers succeed."""
        return (
            (1.0 - self.aggregate_fail)
            * (1.0 - self.upload_fail)
            * (1.0 - self.download_fail)
        )

    def check(self) -> None:
        for name in ("upload_fail", "download_fail", "aggregate_fail"):
            value = getattr(self, name)
            if not (0.0 <= value < 1.0):
                raise ValidationError(
                    f"client {self.id}: {name} is a failure probability and "
                    f"must be >= 0 and < 1, got {value!r}"
                )
        if not self.weight > 0.0:
            raise ValidationError(
                f"client {self.id}: weight must be positive, got {self.weight!r}"
            )
        for name in ("uplink_rate", "downlink_rate", "fed_uplink_rate", "compute_speed"):
            value = getattr(self, name)
            if not (value > 0.0 and math.isfinite(value)):
                raise ValidationError(
                    f"client {self.id}: {name} must be finite and positive, got {value!r}"
                )


@dataclass(frozen=True)
class ModelStatistics:
    """Per-layer gradient statistics plus global smoothness and loss gap.

    ``grad_variance[j]`` bounds the variance of the stochastic layer-j
    gradient, ``grad_second_moment[j]`` bounds its squared norm,
    ``smoothness`` is the gradient Lipschitz constant of the loss, and
    ``loss_gap`` is f(w0) minus the best attainable loss. Layer j of the
    1-based convention lives at sequence index j - 1.
    """

    num_layers: int
    grad_variance: tuple[float, ...]
    grad_second_moment: tuple[float, ...]
    smoothness: float
    loss_gap: float

    def check(self) -> None:
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        for name in ("grad_variance", "grad_second_moment"):
            seq = getattr(self, name)
            if len(seq) != self.num_layers:
                raise ValidationError(
                    f"{name} must have exactly {self.num_layers} entries, got {len(seq)}"
                )
            for j, value in enumerate(seq, start=1):
                if not (math.isfinite(value) and value >= 0.0):
                    raise ValidationError(
                        f"{name}[{j}] must be finite and >= 0, got {value!r}"
                    )
        if not (self.smoothness > 0.0 and math.isfinite(self.smoothness)):
            raise ValidationError(f"smoothness must be positive, got {self.smoothness!r}")
        if not (self.loss_gap >= 0.0 and math.isfinite(self.loss_gap)):
            raise ValidationError(f"loss_gap must be >= 0, got {self.loss_gap!r}")

    def variance_plus_second_moment(self) -> tuple[float, ...]:
        return tuple(
            s + g for s, g in zip(self.grad_variance, self.grad_second_moment)
        )


@dataclass(frozen=True)
class SystemConfig:
    """Run-level constants: population size, sampling, schedule, budget."""

    num_clients: int
    sampled_per_round: int
    agg_interval: int
    learning_rate: float
    total_rounds: int
    latency_budget: float
    min_cut: int

    def check(self) -> None:
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if not (1 <= self.sampled_per_round <= self.num_clients):
            raise ValidationError(
                "sampled_per_round must be in [1, num_clients], got "
                f"{self.sampled_per_round}"
            )
        if self.agg_interval < 1:
            raise ValidationError("agg_interval must be >= 1")
        # learning_rate == 0 is deliberately allowed: the planner has a
        # well-defined closed form there and tests rely on it.
        if not (self.learning_rate >= 0.0 and math.isfinite(self.learning_rate)):
            raise ValidationError(
                f"learning_rate must be >= 0, got {self.learning_rate!r}"
            )
        if self.total_rounds < 1:
            raise ValidationError("total_rounds must be >= 1")
        if not (self.latency_budget > 0.0 and math.isfinite(self.latency_budget)):
            raise ValidationError(
                f"latency_budget must be positive, got {self.latency_budget!r}"
            )
        if self.min_cut < 1:
            raise ValidationError("min_cut must be >= 1")


@dataclass(frozen=True)
class SamplingPlan:
    """A resolved decision: sampling distribution, cuts, and the cap.

    ``amplification_cap`` upper-bounds every client's variance amplification
    factor weight^2 / (q * joint_success); the planner drives it to the
    tightest feasible value.
    """

    q: tuple[float, ...]
    cut_layers: tuple[int, ...]
    max_cut: int
    amplification_cap: float


def amplification(client: ClientProfile, q_i: float) -> float:
    """Variance amplification of one client under sampling probability q_i."""
    return client.weight**2 / (q_i * client.joint_success())


@dataclass(frozen=True)
class Population:
    """Validated bundle of clients, model statistics, and run constants."""

    clients: tuple[ClientProfile, ...]
    stats: ModelStatistics
    system: SystemConfig

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(c.weight for c in self.clients)


def validate_population(
    clients,
    stats: ModelStatistics,
    system: SystemConfig,
) -> Population:
    """Check every structural invariant and return the frozen bundle.

    Raises ``ValidationError`` naming the first violated invariant (with the
    client index where one applies).
    """
    clients = tuple(clients)
    if not clients:
        raise ValidationError("population must contain at least one client")
    stats.check()
    system.check()
    for client in clients:
        client.check()
    ids = [c.id for c in clients]
    if sorted(ids) != list(range(1, len(clients) + 1)):
        raise ValidationError(
            f"client ids must be exactly 1..{len(clients)}, got {sorted(ids)}"
        )
    if len(clients) != system.num_clients:
        raise ValidationError(
            f"expected {system.num_clients} clients, got {len(clients)}"
        )
    total = math.fsum(c.weight for c in clients)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValidationError(f"weights must sum to 1, got {total!r}")
    if system.min_cut > stats.num_layers:
        raise ValidationError(
            f"min_cut {system.min_cut} exceeds num_layers {stats.num_layers}"
        )
    return Population(clients=clients, stats=stats, system=system)


def validate_plan(
    plan: SamplingPlan,
    population: Population,
    q_tol: float = PROBABILITY_TOL,
    cap_tol: float = CAP_TOL,
) -> SamplingPlan:
    """Check a sampling plan against its population.

    Verifies the distribution sums to one (within ``q_tol``), every
    probability is usable, the cut layers respect [min_cut, max_cut] with the
    maximum attained, and no client's amplification exceeds the cap by more
    than ``cap_tol``.
    """
    clients = population.clients
    n = len(clients)
    if len(plan.q) != n or len(plan.cut_layers) != n:
        raise ValidationError("plan length does not match population size")
    for i, q_i in enumerate(plan.q, start=1):
        if not (0.0 < q_i <= 1.0 + q_tol):
            raise ValidationError(f"q[{i}] must be in (0, 1], got {q_i!r}")
    total = math.fsum(plan.q)
    if abs(total - 1.0) > q_tol:
        raise ValidationError(f"sampling probabilities must sum to 1, got {total!r}")
    lo = population.system.min_cut
    if not (lo <= plan.max_cut <= population.stats.num_layers):
        raise ValidationError(
            f"max_cut must be in [{lo}, {population.stats.num_layers}], got {plan.max_cut}"
        )
    for i, cut in enumerate(plan.cut_layers, start=1):
        if not (lo <= cut <= plan.max_cut):
            raise ValidationError(
                f"cut_layers[{i}] must be in [{lo}, {plan.max_cut}], got {cut}"
            )
    if max(plan.cut_layers) != plan.max_cut:
        raise ValidationError(
            f"max_cut {plan.max_cut} is not attained by any client"
        )
    if not (plan.amplification_cap > 0.0 and math.isfinite(plan.amplification_cap)):
        raise ValidationError("amplification_cap must be finite and positive")
    for client, q_i in zip(clients, plan.q):
        value = amplification(client, q_i)
        if value > plan.amplification_cap + cap_tol:
            raise ValidationError(
                f"client {client.id}: amplification {value!r} exceeds cap "
                f"{plan.amplification_cap!r}"
            )
    return plan
