"""Joint sampling-distribution and cut-layer planner.

Minimizes the convergence upper bound subject to the probability simplex, the
expected-round-latency budget, and the amplification cap, by the nested
scheme the bound's structure suggests:

1. enumerate the population-wide max cut;
2. per max cut, give every client its latency-minimizing cut below the max
   and bisect the amplification cap; the cap's fixed point is where the
   candidate cap recomputed from the solution meets the probed cap;
3. per probed cap, split clients by the sign of their bound coefficient:
   negative-coefficient clients sit at the cap floor, positive-coefficient
   clients get the stationarity closed form, whose two Lagrange multipliers
   (normalization and latency) are found by nested bisection;
4. force at least one client onto the max cut (the bound is only valid if
   the max is attained), picking the candidate that hurts least;
5. return the max cut whose finished plan has the smallest bound value.

Everything is deterministic: fixed iteration order, no randomness, pure
float64 arithmetic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .bound import bound_coefficient, coefficient_parts, convergence_upper_bound
from .latency import LatencyProfile, expected_round_latency, per_client_latency
from .types import (
    ClientProfile,
    Population,
    SamplingPlan,
    SystemConfig,
    validate_plan,
)

ZERO_COEF_TOL = 1e-12
"""Coefficients within this of zero count as the zero partition class."""

_MAX_MULT_ITERS = 240
_POLISH_ITERS = 8


class InfeasibleError(RuntimeError):
    """No plan satisfies the constraints (reported with the reason)."""


@dataclass(frozen=True)
class Tolerances:
    """Bisection stopping tolerances and multiplier search brackets."""

    cap_tol: float = 1e-6
    norm_tol: float = 1e-6
    latency_tol: float = 1e-6
    cap_min: float = 1e-8
    cap_max: float = 1e7
    norm_mult_min: float = 1e-8
    norm_mult_max: float = 1e7
    latency_mult_min: float = 1e-8
    latency_mult_max: float = 1e7

    def check(self) -> None:
        for name in ("cap_tol", "norm_tol", "latency_tol"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        for lo_name, hi_name in (
            ("cap_min", "cap_max"),
            ("norm_mult_min", "norm_mult_max"),
            ("latency_mult_min", "latency_mult_max"),
        ):
            if not getattr(self, lo_name) < getattr(self, hi_name):
                raise ValueError(f"{lo_name} must be below {hi_name}")


@dataclass(frozen=True)
class Partition:
    """Client ids grouped by the sign of their bound coefficient."""

    positive: tuple[int, ...]
    negative: tuple[int, ...]
    zero: tuple[int, ...]


@dataclass(frozen=True)
class IterationRecord:
    """One outer-bisection step: cap interval, multipliers, residuals."""

    max_cut: int
    cap_lo: float
    cap_hi: float
    cap: float
    norm_mult: float
    latency_mult: float
    norm_err: float
    latency_err: float


@dataclass(frozen=True)
class OptimizerResult:
    plan: SamplingPlan
    objective: float
    trace: tuple[IterationRecord, ...]
    norm_mult: float
    latency_mult: float


class _Status(enum.Enum):
    OK = "ok"
    NO_POSITIVE = "no positive-coefficient clients"
    NEED_LARGER_CAP = "cap floors exceed the simplex"
    LATENCY_INFEASIBLE = "latency budget unreachable"


@dataclass
class _MultSolution:
    status: _Status
    q: np.ndarray | None
    norm_mult: float
    latency_mult: float
    norm_err: float
    latency_err: float


@dataclass
class _CapSolution:
    feasible: bool
    reason: str
    cap: float
    q: np.ndarray | None
    norm_mult: float
    latency_mult: float
    norm_err: float
    latency_err: float


@dataclass
class _Instance:
    """Vectorized view of one (max_cut, path-latency) subproblem."""

    w2: np.ndarray
    joint: np.ndarray
    path: np.ndarray
    coef_base: np.ndarray
    coef_slope: float
    k: int
    budget: float


def _make_instance(
    max_cut: int, path_latencies: np.ndarray, population: Population
) -> _Instance:
    clients = population.clients
    stats = population.stats
    system = population.system
    base = np.empty(len(clients))
    slope = 0.0
    for i, client in enumerate(clients):
        base[i], slope = coefficient_parts(client, stats, max_cut, system)
    return _Instance(
        w2=np.array([c.weight**2 for c in clients]),
        joint=np.array([c.joint_success() for c in clients]),
        path=np.asarray(path_latencies, dtype=float),
        coef_base=base,
        coef_slope=slope,
        k=system.sampled_per_round,
        budget=system.latency_budget,
    )


def negative_branch_probability(client: ClientProfile, cap: float) -> float:
    """Cap floor: the smallest probability keeping amplification <= cap."""
    if not cap > 0.0:
        raise ValueError("cap must be positive")
    return client.weight**2 / (cap * client.joint_success())


def positive_branch_probability(
    client: ClientProfile,
    stats,
    max_cut: int,
    cap: float,
    norm_mult: float,
    latency_mult: float,
    path_latency: float,
    system: SystemConfig,
) -> float:
    """Stationarity closed form, floored at the cap constraint.

    Valid only for positive-coefficient clients; the multiplier combination
    norm_mult + latency_mult*K*path_latency must be positive, otherwise the
    multipliers cannot be stationary for this cap.
    """
    coef = bound_coefficient(client, stats, max_cut, cap, system)
    if coef <= ZERO_COEF_TOL:
        raise ValueError("client is not on the positive branch")
    denom = norm_mult + latency_mult * system.sampled_per_round * path_latency
    if denom <= 0.0:
        raise InfeasibleError(
            "multiplier combination is nonpositive for this cap"
        )
    floor = negative_branch_probability(client, cap)
    return max(floor, math.sqrt(client.weight**2 * coef / denom))


def partition_clients(
    cap: float, max_cut: int, population: Population
) -> Partition:
    """Classify clients by the sign of their bound coefficient at this cap."""
    positive: list[int] = []
    negative: list[int] = []
    zero: list[int] = []
    for client in population.clients:
        coef = bound_coefficient(
            client, population.stats, max_cut, cap, population.system
        )
        if coef > ZERO_COEF_TOL:
            positive.append(client.id)
        elif coef < -ZERO_COEF_TOL:
            negative.append(client.id)
        else:
            zero.append(client.id)
    return Partition(tuple(positive), tuple(negative), tuple(zero))


def _solve_norm_mult(
    w2c: np.ndarray,
    floors_pos: np.ndarray,
    nu_k_a: np.ndarray,
    target: float,
    tol: Tolerances,
) -> tuple[float, np.ndarray, float]:
    """Bisect the normalization multiplier at a fixed latency multiplier.

    The positive-branch mass is strictly decreasing in the multiplier, from
    +inf at the pole -min(nu*K*A) down to the floor sum, so a sign change
    always exists whenever the floors fit under the target.
    """
    pole = -float(np.min(nu_k_a)) if np.any(nu_k_a > 0.0) else 0.0

    def q_of(mult: float) -> np.ndarray:
        with np.errstate(divide="ignore", over="ignore"):
            interior = np.sqrt(w2c / (mult + nu_k_a))
        return np.maximum(floors_pos, interior)

    lo = max(tol.norm_mult_min, pole + (tol.norm_mult_min - pole) * 0.5)
    if lo <= pole:
        lo = pole + tol.norm_mult_min
    # Widen downward toward the pole until the mass covers the target.
    for _ in range(120):
        if float(np.sum(q_of(lo))) >= target - tol.norm_tol:
            break
        lo = pole + (lo - pole) / 1024.0
    # Above the saturation multiplier every probability sits at its floor.
    with np.errstate(divide="ignore", over="ignore"):
        saturation = float(np.max(w2c / floors_pos**2 - nu_k_a))
    saturation = min(saturation, 1e300)
    hi = max(tol.norm_mult_max, saturation * (1.0 + 1e-9), lo * 2.0 + 1.0)

    mid = 0.5 * (lo + hi)
    err = float(np.sum(q_of(mid))) - target
    for _ in range(_MAX_MULT_ITERS):
        if abs(err) <= tol.norm_tol:
            break
        if err > 0.0:
            lo = mid
        else:
            hi = mid
        new_mid = 0.5 * (lo + hi)
        if new_mid == mid:
            break
        mid = new_mid
        err = float(np.sum(q_of(mid))) - target
    return mid, q_of(mid), err


def _solve_multipliers(
    inst: _Instance, cap: float, tol: Tolerances
) -> _MultSolution:
    """Find (q, multipliers) at a fixed cap, or classify why none exist."""
    coef = inst.coef_base + inst.coef_slope * cap
    pos = coef > ZERO_COEF_TOL
    floors = inst.w2 / (cap * inst.joint)
    floor_sum = float(np.sum(floors))
    if floor_sum - 1.0 > tol.norm_tol:
        return _MultSolution(
            _Status.NEED_LARGER_CAP, None, math.nan, math.nan,
            floor_sum - 1.0, math.nan,
        )
    if not bool(np.any(pos)):
        latency = inst.k * float(floors @ inst.path)
        return _MultSolution(
            _Status.NO_POSITIVE, floors, 0.0, 0.0,
            floor_sum - 1.0, max(0.0, latency - inst.budget),
        )

    w2c = inst.w2[pos] * coef[pos]
    floors_pos = floors[pos]
    path_pos = inst.path[pos]
    target = 1.0 - float(np.sum(floors[~pos]))

    def assemble(q_pos: np.ndarray) -> np.ndarray:
        q = floors.copy()
        q[pos] = q_pos
        return q

    zeros = np.zeros_like(path_pos)
    mult0, q_pos0, norm_err0 = _solve_norm_mult(w2c, floors_pos, zeros, target, tol)
    q0 = assemble(q_pos0)
    excess0 = inst.k * float(q0 @ inst.path) - inst.budget
    if excess0 <= tol.latency_tol:
        return _MultSolution(
            _Status.OK, q0, mult0, 0.0, norm_err0, max(0.0, excess0)
        )

    # The budget binds. Mass beyond the floors can only move to
    # positive-branch clients, so the cheapest reachable latency routes all
    # surplus through the fastest positive client.
    surplus = max(0.0, 1.0 - floor_sum)
    reachable = inst.k * (float(floors @ inst.path) + surplus * float(np.min(path_pos)))
    if reachable > inst.budget + tol.latency_tol:
        return _MultSolution(
            _Status.LATENCY_INFEASIBLE, None, math.nan, math.nan,
            math.nan, reachable - inst.budget,
        )

    def solve_at(nu: float) -> tuple[float, np.ndarray, float, float]:
        mult, q_pos, norm_err = _solve_norm_mult(
            w2c, floors_pos, nu * inst.k * path_pos, target, tol
        )
        q = assemble(q_pos)
        return mult, q, norm_err, inst.k * float(q @ inst.path) - inst.budget

    nu_hi = tol.latency_mult_min
    mult_hi, q_hi, norm_err_hi, excess_hi = solve_at(nu_hi)
    for _ in range(60):
        if excess_hi <= 0.0 or nu_hi >= tol.latency_mult_max:
            break
        nu_hi = min(nu_hi * 8.0, tol.latency_mult_max)
        mult_hi, q_hi, norm_err_hi, excess_hi = solve_at(nu_hi)
    if excess_hi > tol.latency_tol:
        return _MultSolution(
            _Status.LATENCY_INFEASIBLE, None, math.nan, math.nan,
            math.nan, excess_hi,
        )

    nu_lo = 0.0
    for _ in range(_MAX_MULT_ITERS):
        if abs(excess_hi) <= tol.latency_tol:
            break
        nu_mid = 0.5 * (nu_lo + nu_hi)
        if nu_mid in (nu_lo, nu_hi):
            break
        mult_mid, q_mid, norm_err_mid, excess_mid = solve_at(nu_mid)
        if excess_mid > 0.0:
            nu_lo = nu_mid
        else:
            nu_hi = nu_mid
            mult_hi, q_hi, norm_err_hi, excess_hi = (
                mult_mid, q_mid, norm_err_mid, excess_mid,
            )
    return _MultSolution(
        _Status.OK, q_hi, mult_hi, nu_hi, norm_err_hi, max(0.0, excess_hi)
    )


def solve_multipliers(
    cap: float,
    max_cut: int,
    path_latencies,
    population: Population,
    tol: Tolerances | None = None,
):
    """Public wrapper: solve the fixed-cap subproblem.

    Returns an object with ``status``, ``q``, ``norm_mult``, ``latency_mult``
    and the two residuals ``norm_err`` / ``latency_err``.
    """
    tol = tol or Tolerances()
    tol.check()
    inst = _make_instance(max_cut, np.asarray(path_latencies, float), population)
    return _solve_multipliers(inst, cap, tol)


def _cap_candidate(inst: _Instance, cap: float, q: np.ndarray) -> float:
    """Recompute the cap the current solution actually needs."""
    coef = inst.coef_base + inst.coef_slope * cap
    pos = coef > ZERO_COEF_TOL
    parts = []
    if bool(np.any(pos)):
        parts.append(float(np.max(inst.w2[pos] / (q[pos] * inst.joint[pos]))))
    if bool(np.any(~pos)):
        parts.append(float(np.sum(inst.w2[~pos] / inst.joint[~pos])))
    return max(parts)


def _surrogate_value(inst: _Instance, cap: float, q: np.ndarray) -> float:
    coef = inst.coef_base + inst.coef_slope * cap
    return float(np.sum(inst.w2 * coef / q))


def _evaluate_cap(
    inst: _Instance, cap: float, tol: Tolerances
) -> tuple[float, _MultSolution]:
    """Inner solve plus value; infeasible caps score +inf."""
    sol = _solve_multipliers(inst, cap, tol)
    feasible = (
        sol.status in (_Status.OK, _Status.NO_POSITIVE)
        and abs(sol.norm_err) <= tol.norm_tol
        and sol.latency_err <= tol.latency_tol
    )
    if not feasible:
        return math.inf, sol
    return _surrogate_value(inst, cap, sol.q), sol


_SCAN_POINTS = 48
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _minimize_cap(
    inst: _Instance,
    max_cut: int,
    tol: Tolerances,
    records: list[IterationRecord],
) -> _CapSolution:
    """Minimize the planner objective over the amplification cap.

    The objective as a function of the cap trades two effects: a larger cap
    loosens every per-client probability floor but directly inflates the
    drift coefficient. The minimum often sits strictly inside the interval
    where some clients are pinned at their floors, so the cap is searched
    by value: a geometric scan over the feasible range followed by
    golden-section refinement around the best scanned point, then a short
    fixed-point polish that lands the cap exactly on the solution's true
    amplification maximum.
    """
    # Floors sum to exactly 1 here; any smaller cap oversubscribes the
    # simplex, so this is the left end of the feasible range.
    cap_feas = float(np.sum(inst.w2 / inst.joint))
    lo = cap_feas
    hi = max(tol.cap_max, 2.0 * cap_feas)

    def score(cap: float) -> tuple[float, _MultSolution]:
        value, sol = _evaluate_cap(inst, cap, tol)
        records.append(IterationRecord(
            max_cut, lo, hi, cap, sol.norm_mult, sol.latency_mult,
            sol.norm_err, sol.latency_err,
        ))
        return value, sol

    caps = np.geomspace(lo, hi, _SCAN_POINTS)
    values: list[float] = []
    sols: list[_MultSolution] = []
    for cap in caps:
        value, sol = score(float(cap))
        values.append(value)
        sols.append(sol)
    finite = [i for i, v in enumerate(values) if math.isfinite(v)]
    if not finite:
        latency_blocked = any(
            s.status is _Status.LATENCY_INFEASIBLE for s in sols
        )
        reason = (
            _Status.LATENCY_INFEASIBLE.value
            if latency_blocked
            else _Status.NEED_LARGER_CAP.value
        )
        return _CapSolution(
            False, reason, math.nan, None,
            math.nan, math.nan, math.nan, math.nan,
        )
    best_idx = min(finite, key=lambda i: values[i])
    best_cap = float(caps[best_idx])
    best_value = values[best_idx]
    best_sol = sols[best_idx]

    # Golden-section refinement between the scanned neighbors of the best
    # point; infeasible probes score +inf, steering the shrink inward.
    a = float(caps[best_idx - 1]) if best_idx > 0 else best_cap
    b = float(caps[best_idx + 1]) if best_idx + 1 < len(caps) else best_cap
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, s1 = score(x1)
    f2, s2 = score(x2)
    for candidate, value, sol in ((x1, f1, s1), (x2, f2, s2)):
        if value < best_value:
            best_cap, best_value, best_sol = candidate, value, sol
    for _ in range(_MAX_MULT_ITERS):
        if b - a <= tol.cap_tol * max(1.0, b):
            break
        if f1 <= f2:
            b, x2, f2, s2 = x2, x1, f1, s1
            x1 = b - _GOLDEN * (b - a)
            f1, s1 = score(x1)
            if f1 < best_value:
                best_cap, best_value, best_sol = x1, f1, s1
        else:
            a, x1, f1, s1 = x1, x2, f2, s2
            x2 = a + _GOLDEN * (b - a)
            f2, s2 = score(x2)
            if f2 < best_value:
                best_cap, best_value, best_sol = x2, f2, s2

    # Fixed-point polish: move the cap onto the solution's own maximum
    # amplification. Below the pinning threshold the candidate equals the
    # cap already; above it the move only loosens coefficients.
    cap, sol = best_cap, best_sol
    for _ in range(_POLISH_ITERS):
        candidate = _cap_candidate(inst, cap, sol.q)
        if abs(candidate - cap) <= 1e-15 * max(1.0, cap):
            break
        value, refreshed = _evaluate_cap(inst, candidate, tol)
        if not math.isfinite(value) or value > best_value + tol.cap_tol:
            break
        cap, sol = candidate, refreshed
        if value < best_value:
            best_value = value
    gap = abs(_cap_candidate(inst, cap, sol.q) - cap)
    result = _CapSolution(
        True, "", cap, sol.q, sol.norm_mult, sol.latency_mult,
        sol.norm_err, sol.latency_err,
    )
    if gap > tol.cap_tol * max(1.0, cap):
        result.feasible = False
        result.reason = (
            f"cap fixed point unresolved: residual {gap:.3e} at cap {cap:.6g}"
        )
    return result


def solve_at_max_cut(
    max_cut: int,
    path_latencies,
    population: Population,
    tol: Tolerances | None = None,
    records: list[IterationRecord] | None = None,
) -> _CapSolution:
    """Search the amplification cap for one max cut.

    Returns a solution object with ``feasible`` set; infeasibility carries
    the failing reason instead of raising so the enumeration can continue.
    """
    tol = tol or Tolerances()
    tol.check()
    if records is None:
        records = []
    inst = _make_instance(max_cut, np.asarray(path_latencies, float), population)
    return _minimize_cap(inst, max_cut, tol, records)


def enforce_max_cut(
    max_cut: int,
    relaxed: _CapSolution,
    cuts: list[int],
    latency_table: np.ndarray,
    population: Population,
    tol: Tolerances,
    records: list[IterationRecord],
) -> tuple[_CapSolution, list[int]]:
    """Force at least one client onto the max cut.

    The relaxed per-client cuts minimize latency and may all undershoot the
    max cut, but the bound is computed at the max, so some client must
    attain it. Candidates are evaluated one by one; when the relaxed
    solution's latency multiplier is zero the multiplier system is
    independent of the latencies, so the relaxed (q, cap) remains optimal
    for any candidate whose forced plan still meets the budget and no
    re-solve is needed.
    """
    if max(cuts) == max_cut:
        return relaxed, cuts
    system = population.system
    min_cut = system.min_cut
    path = np.array(
        [latency_table[i, cut - min_cut] for i, cut in enumerate(cuts)]
    )
    # The bound never touches per-client cuts, so the relaxed solution keeps
    # its objective whenever it survives the forced-latency check.
    relaxed_objective = convergence_upper_bound(
        SamplingPlan(
            q=tuple(float(v) for v in relaxed.q),
            cut_layers=tuple(cuts),
            max_cut=max_cut,
            amplification_cap=relaxed.cap,
        ),
        population,
    ).total
    best_key: tuple[float, float, int] | None = None
    best_sol: _CapSolution | None = None
    best_idx = -1
    for idx in range(len(cuts)):
        forced = path.copy()
        forced[idx] = latency_table[idx, max_cut - min_cut]
        if relaxed.latency_mult == 0.0:
            latency = system.sampled_per_round * float(relaxed.q @ forced)
            if latency <= system.latency_budget + tol.latency_tol:
                key = (relaxed_objective, latency, idx)
                if best_key is None or key < best_key:
                    best_key, best_sol, best_idx = key, relaxed, idx
                continue
        resolved = solve_at_max_cut(max_cut, forced, population, tol, records)
        if not resolved.feasible:
            continue
        forced_cuts = list(cuts)
        forced_cuts[idx] = max_cut
        plan = SamplingPlan(
            q=tuple(float(v) for v in resolved.q),
            cut_layers=tuple(forced_cuts),
            max_cut=max_cut,
            amplification_cap=resolved.cap,
        )
        objective = convergence_upper_bound(plan, population).total
        latency = system.sampled_per_round * float(resolved.q @ forced)
        key = (objective, latency, idx)
        if best_key is None or key < best_key:
            best_key, best_sol, best_idx = key, resolved, idx
    if best_sol is None:
        return (
            _CapSolution(
                False, "no max-cut candidate is feasible", math.nan, None,
                math.nan, math.nan, math.nan, math.nan,
            ),
            cuts,
        )
    adjusted = list(cuts)
    adjusted[best_idx] = max_cut
    return best_sol, adjusted


def optimize(
    population: Population,
    prof: LatencyProfile,
    tol: Tolerances | None = None,
) -> OptimizerResult:
    """Plan sampling probabilities and cut layers for a whole population.

    Enumerates every admissible max cut, solves each, and returns the plan
    with the smallest bound value. Raises ``InfeasibleError`` when no max
    cut admits a plan within the latency budget.
    """
    tol = tol or Tolerances()
    tol.check()
    prof.check()
    stats = population.stats
    system = population.system
    if prof.num_layers != stats.num_layers:
        raise ValueError("latency profile and statistics disagree on layers")
    clients = population.clients
    n = len(clients)
    min_cut = system.min_cut
    num_layers = stats.num_layers

    latency_table = np.empty((n, num_layers - min_cut + 1))
    for i, client in enumerate(clients):
        for cut in range(min_cut, num_layers + 1):
            latency_table[i, cut - min_cut] = per_client_latency(client, prof, cut)

    records: list[IterationRecord] = []
    best: OptimizerResult | None = None
    reasons: list[str] = []
    running_best = np.full(n, math.inf)
    running_cut = np.full(n, min_cut, dtype=int)
    for max_cut in range(min_cut, num_layers + 1):
        column = latency_table[:, max_cut - min_cut]
        improved = column < running_best
        running_best = np.where(improved, column, running_best)
        running_cut = np.where(improved, max_cut, running_cut)

        relaxed = solve_at_max_cut(
            max_cut, running_best.copy(), population, tol, records
        )
        if not relaxed.feasible:
            reasons.append(f"max cut {max_cut}: {relaxed.reason}")
            continue
        adjusted, cuts = enforce_max_cut(
            max_cut, relaxed, [int(c) for c in running_cut],
            latency_table, population, tol, records,
        )
        if not adjusted.feasible:
            reasons.append(f"max cut {max_cut}: {adjusted.reason}")
            continue
        plan = SamplingPlan(
            q=tuple(float(v) for v in adjusted.q),
            cut_layers=tuple(int(c) for c in cuts),
            max_cut=max_cut,
            amplification_cap=adjusted.cap,
        )
        validate_plan(plan, population, q_tol=tol.norm_tol, cap_tol=tol.cap_tol)
        objective = convergence_upper_bound(plan, population).total
        if best is None or objective < best.objective:
            best = OptimizerResult(
                plan=plan,
                objective=objective,
                trace=(),
                norm_mult=adjusted.norm_mult,
                latency_mult=adjusted.latency_mult,
            )
    if best is None:
        raise InfeasibleError(
            "no admissible max cut yields a feasible plan: " + "; ".join(reasons)
        )
    return OptimizerResult(
        plan=best.plan,
        objective=best.objective,
        trace=tuple(records),
        norm_mult=best.norm_mult,
        latency_mult=best.latency_mult,
    )
