"""Convergence-bound evaluation for sampled, failure-prone split training.

The central object is an upper bound U(q, L_c) on the average squared
gradient norm after R rounds. It decomposes into four additive terms:

- an initialization term 2*vartheta / (gamma*R),
- a negative term -sum_i (m_i^2/q_i) * sum_j G_j^2 from the descent step,
- a variance term scaled by beta*gamma, where layers at or below the
  population cut pay the full inverse joint-success factor and deeper layers
  pay only the upload factor,
- a drift term scaled by beta^2 * 2*gamma^2*I^2 that accounts for the
  client-side blocks drifting between aggregations.

The same pieces regroup per client into a single coefficient (``bound_
coefficient``): U = init + sum_i (m_i^2/q_i) * C_i(cap), where ``cap``
replaces the exact amplification maximum during optimization. Evaluation
here always uses the exact maximum, never a relaxation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .types import (
    ClientProfile,
    ModelStatistics,
    Population,
    SamplingPlan,
    SystemConfig,
    amplification,
)

BREAKDOWN_REL_TOL = 1e-9


@dataclass(frozen=True)
class BoundBreakdown:
    """The bound value with its four additive components."""

    total: float
    init_term: float
    negative_term: float
    variance_term: float
    drift_term: float

    def check(self) -> None:
        parts = self.init_term + self.negative_term + self.variance_term + self.drift_term
        scale = max(1.0, abs(self.total))
        if abs(parts - self.total) > BREAKDOWN_REL_TOL * scale:
            raise AssertionError(
                f"breakdown does not add up: {parts!r} vs {self.total!r}"
            )


def _variance_factor_sums(
    stats: ModelStatistics, max_cut: int
) -> tuple[float, float, float]:
    """(sum_{j<=cut}(sigma^2+G^2), sum_{j>cut}(sigma^2+G^2), sum_{j<=cut}G^2)."""
    vpm = stats.variance_plus_second_moment()
    below = math.fsum(vpm[:max_cut])
    above = math.fsum(vpm[max_cut:])
    g_below = math.fsum(stats.grad_second_moment[:max_cut])
    return below, above, g_below


def coefficient_parts(
    client: ClientProfile,
    stats: ModelStatistics,
    max_cut: int,
    system: SystemConfig,
) -> tuple[float, float]:
    """Split the per-client coefficient into (cap-free part, cap slope).

    ``bound_coefficient`` is affine in the cap; the planner exploits that to
    re-evaluate signs cheaply while bisecting the cap.
    """
    below, above, g_below = _variance_factor_sums(stats, max_cut)
    g_total = math.fsum(stats.grad_second_moment)
    beta = stats.smoothness
    gamma = system.learning_rate
    interval = system.agg_interval
    inv_joint = 1.0 / client.joint_success()
    variance = (beta * gamma / (1.0 - client.upload_fail)) * (
        below / ((1.0 - client.download_fail) * (1.0 - client.aggregate_fail)) + above
    )
    drift_common = 2.0 * beta**2 * gamma**2 * interval**2 * g_below
    base = variance + drift_common * inv_joint - g_total
    slope = drift_common * system.num_clients
    return base, slope


def bound_coefficient(
    client: ClientProfile,
    stats: ModelStatistics,
    max_cut: int,
    cap: float,
    system: SystemConfig,
) -> float:
    """Per-client coefficient of m_i^2/q_i in the bound, at a given cap.

    Positive coefficients mean the client's sampling probability trades off
    against the others through a convex stationarity condition; negative
    coefficients mean the bound improves the more often the client is
    sampled, so its probability sits at the amplification-cap floor.
    """
    base, slope = coefficient_parts(client, stats, max_cut, system)
    return base + slope * cap


def exact_amplification_cap(plan: SamplingPlan, clients) -> float:
    """max_i of weight_i^2 / (q_i * joint_success_i), by linear scan."""
    return max(amplification(c, q_i) for c, q_i in zip(clients, plan.q))


def convergence_upper_bound(
    plan: SamplingPlan,
    population: Population,
) -> BoundBreakdown:
    """Evaluate the bound at a plan, with the amplification max taken exactly.

    Uses ``plan.max_cut`` as the population-wide cut: the bound treats every
    client as if split at the deepest cut any client uses.
    """
    clients = population.clients
    stats = population.stats
    system = population.system
    below, above, g_below = _variance_factor_sums(stats, plan.max_cut)
    g_total = math.fsum(stats.grad_second_moment)
    beta = stats.smoothness
    gamma = system.learning_rate
    interval = system.agg_interval

    if gamma > 0.0:
        init = 2.0 * stats.loss_gap / (gamma * system.total_rounds)
    else:
        init = math.inf if stats.loss_gap > 0.0 else 0.0

    cap = exact_amplification_cap(plan, clients)
    negative = 0.0
    variance = 0.0
    drift = 0.0
    for client, q_i in zip(clients, plan.q):
        mass = client.weight**2 / q_i
        negative -= mass * g_total
        variance += (
            mass
            * (beta * gamma / (1.0 - client.upload_fail))
            * (
                below
                / ((1.0 - client.download_fail) * (1.0 - client.aggregate_fail))
                + above
            )
        )
        drift += (
            mass
            * beta**2
            * 2.0
            * gamma**2
            * interval**2
            * (system.num_clients * cap + 1.0 / client.joint_success())
            * g_below
        )
    breakdown = BoundBreakdown(
        total=init + negative + variance + drift,
        init_term=init,
        negative_term=negative,
        variance_term=variance,
        drift_term=drift,
    )
    breakdown.check()
    return breakdown


def rounds_to_accuracy(
    epsilon: float,
    plan: SamplingPlan,
    population: Population,
) -> int | None:
    """Smallest round count R whose bound value reaches ``epsilon``.

    The bound reads U = 2*vartheta/(gamma*R) - Gamma where Gamma collects
    every R-independent term (with its sign flipped). U <= epsilon therefore
    needs R >= 2*vartheta / (gamma * (epsilon + Gamma)); returns None when
    epsilon + Gamma <= 0, meaning no round count can reach the target.
    """
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    breakdown = convergence_upper_bound(plan, population)
    gamma = population.system.learning_rate
    if gamma <= 0.0:
        raise ValueError("rounds_to_accuracy needs a positive learning rate")
    gap = population.stats.loss_gap
    slack = epsilon - (
        breakdown.negative_term + breakdown.variance_term + breakdown.drift_term
    )
    if slack <= 0.0:
        return None
    if gap == 0.0:
        return 1
    return max(1, math.ceil(2.0 * gap / (gamma * slack)))


def discrepancy_bound(
    client: ClientProfile,
    plan: SamplingPlan,
    population: Population,
) -> float:
    """Upper bound on E||aggregate - client block||^2 between aggregations.

    2*gamma^2*I^2 * (N * max-amplification + 1/joint_success_i) * sum of the
    second-moment bounds over layers at or below the population cut.
    """
    system = population.system
    stats = population.stats
    cap = exact_amplification_cap(plan, population.clients)
    g_below = math.fsum(stats.grad_second_moment[: plan.max_cut])
    return (
        2.0
        * system.learning_rate**2
        * system.agg_interval**2
        * (system.num_clients * cap + 1.0 / client.joint_success())
        * g_below
    )
