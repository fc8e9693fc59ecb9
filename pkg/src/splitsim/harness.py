"""Experiment harness: configs, generated populations, policies, artifacts.

A config is flat key=value text with sectioned keys (population.*,
system.*, model.*, policy.*, stats.*, calibration.*). The pipeline is:
generate a population, optionally perturb the failure probabilities the
planner sees, calibrate or load the bound's constants, pick a plan under
the configured policy, simulate against the true probabilities, and write
plan, trace, and summary artifacts. Everything derives deterministically
from the config's seed, so artifacts are byte-identical across reruns.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .bound import convergence_upper_bound, exact_amplification_cap
from .estimation import EstimationReport, calibrate
from .latency import best_split, expected_round_latency, per_client_latency
from .model import (
    LayeredModel,
    ModelSpec,
    gaussian_clusters,
    partition_by_primary_class,
    partition_iid,
    profile_from_widths,
)
from .optimizer import optimize, solve_at_max_cut
from .simulator import SimulationTrace, run_training
from .types import (
    ClientProfile,
    ModelStatistics,
    Population,
    SamplingPlan,
    SystemConfig,
    ValidationError,
    validate_plan,
    validate_population,
)

POLICIES = (
    "oms-ocs",
    "fms-ocs",
    "uniform",
    "weighted",
    "round-robin",
    "random-split",
)

WEIGHT_SCHEMES = ("uniform", "random")

# Fixed stream tags so each pipeline stage draws from its own generator
# regardless of which stages run; new stages get new tags.
_POPULATION_TAG = 11
_DATA_TAG = 13
_INIT_TAG = 17
_CALIBRATION_TAG = 19
_NOISE_TAG = 23
_POLICY_TAG = 29


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, tag))))


@dataclass(frozen=True)
class Range:
    """Closed interval to draw a per-client value from."""

    low: float
    high: float

    def check(self, name: str, probability: bool = False) -> None:
        if not (np.isfinite(self.low) and np.isfinite(self.high)):
            raise ValidationError(f"{name} range must be finite")
        if self.low > self.high:
            raise ValidationError(f"{name} range is inverted")
        if probability and not (0.0 <= self.low and self.high < 1.0):
            raise ValidationError(f"{name} range must lie within [0, 1)")

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.uniform(size=count)


@dataclass(frozen=True)
class PopulationSpec:
    count: int
    weight_scheme: str
    upload_fail: Range
    download_fail: Range
    aggregate_fail: Range
    uplink_rate: Range
    downlink_rate: Range
    fed_uplink_rate: Range
    compute_speed: Range

    def check(self) -> None:
        if self.count < 1:
            raise ValidationError("population.count must be >= 1")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValidationError(
                f"unknown weight scheme {self.weight_scheme!r}"
            )
        self.upload_fail.check("population.upload_fail", probability=True)
        self.download_fail.check("population.download_fail", probability=True)
        self.aggregate_fail.check("population.aggregate_fail", probability=True)
        for name in ("uplink_rate", "downlink_rate", "fed_uplink_rate", "compute_speed"):
            rng_spec: Range = getattr(self, name)
            rng_spec.check(f"population.{name}")
            if rng_spec.low <= 0.0:
                raise ValidationError(f"population.{name} must be > 0")


@dataclass(frozen=True)
class ModelDataSpec:
    layer_widths: tuple[int, ...]
    samples: int
    iid: bool
    separation: float
    spread: float

    def check(self) -> None:
        ModelSpec(self.layer_widths).check()
        if self.samples < self.layer_widths[-1]:
            raise ValidationError("model.samples must cover every class")


@dataclass(frozen=True)
class CalibrationSpec:
    adapt_steps: int
    learning_rate: float
    epochs: int

    def check(self) -> None:
        if self.adapt_steps < 1:
            raise ValidationError("calibration.adapt_steps must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValidationError("calibration.learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("calibration.epochs must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSpec
    system: SystemConfig
    model: ModelDataSpec
    policy: str
    noise_cv: float
    seed: int
    batch_size: int
    stats: ModelStatistics | None
    calibration: CalibrationSpec

    def check(self) -> None:
        self.population.check()
        self.system.check()
        self.model.check()
        self.calibration.check()
        if self.policy not in POLICIES:
            raise ValidationError(
                f"policy must be one of {', '.join(POLICIES)}, got "
                f"{self.policy!r}"
            )
        if not np.isfinite(self.noise_cv) or self.noise_cv < 0.0:
            raise ValidationError("policy.noise_cv must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("system.batch_size must be >= 1")
        if self.population.count != self.system.num_clients:
            raise ValidationError("population and system disagree on count")
        if self.stats is not None:
            self.stats.check()
            if self.stats.num_layers != len(self.model.layer_widths) - 1:
                raise ValidationError(
                    "stats cover a different number of layers than the model"
                )


_DEFAULTS = {
    "population.weight_scheme": "uniform",
    "population.upload_fail": "0.1,0.3",
    "population.download_fail": "0.1,0.3",
    "population.aggregate_fail": "0.1,0.3",
    "population.uplink_rate": "1e6,1e6",
    "population.downlink_rate": "1e6,1e6",
    "population.fed_uplink_rate": "1e6,1e6",
    "population.compute_speed": "1e9,1e9",
    "system.min_cut": "1",
    "system.batch_size": "16",
    "model.iid": "true",
    "model.separation": "3.0",
    "model.spread": "1.0",
    "policy.noise_cv": "0.0",
    "calibration.adapt_steps": "25",
    "calibration.learning_rate": "0.05",
    "calibration.epochs": "1",
}

_REQUIRED = (
    "population.count",
    "system.sampled_per_round",
    "system.agg_interval",
    "system.learning_rate",
    "system.total_rounds",
    "system.latency_budget",
    "system.seed",
    "model.layer_widths",
    "model.samples",
    "policy.name",
)

_KNOWN_KEYS = set(_DEFAULTS) | set(_REQUIRED) | {
    "stats.beta",
    "stats.sigma_sq",
    "stats.g_sq",
    "stats.vartheta",
    "stats.beta_local",
    "stats.beta_cross",
    "stats.calibration_steps",
    "stats.cross_degenerate",
    "stats.single_batch",
}


def _parse_range(raw: str, key: str) -> Range:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ValidationError(f"{key} must be 'low,high', got {raw!r}")
    return Range(low=float(parts[0]), high=float(parts[1]))


def _parse_bool(raw: str, key: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValidationError(f"{key} must be true or false, got {raw!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat key=value text into a validated ExperimentConfig."""
    values = dict(_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        values[key] = raw.strip()
    missing = [key for key in _REQUIRED if key not in values]
    if missing:
        raise ValidationError(f"missing config keys: {', '.join(missing)}")

    count = int(values["population.count"])
    population = PopulationSpec(
        count=count,
        weight_scheme=values["population.weight_scheme"],
        upload_fail=_parse_range(values["population.upload_fail"], "population.upload_fail"),
        download_fail=_parse_range(values["population.download_fail"], "population.download_fail"),
        aggregate_fail=_parse_range(values["population.aggregate_fail"], "population.aggregate_fail"),
        uplink_rate=_parse_range(values["population.uplink_rate"], "population.uplink_rate"),
        downlink_rate=_parse_range(values["population.downlink_rate"], "population.downlink_rate"),
        fed_uplink_rate=_parse_range(values["population.fed_uplink_rate"], "population.fed_uplink_rate"),
        compute_speed=_parse_range(values["population.compute_speed"], "population.compute_speed"),
    )
    system = SystemConfig(
        num_clients=count,
        sampled_per_round=int(values["system.sampled_per_round"]),
        agg_interval=int(values["system.agg_interval"]),
        learning_rate=float(values["system.learning_rate"]),
        total_rounds=int(values["system.total_rounds"]),
        latency_budget=float(values["system.latency_budget"]),
        min_cut=int(values["system.min_cut"]),
    )
    widths = tuple(
        int(w.strip()) for w in values["model.layer_widths"].split(",")
    )
    model = ModelDataSpec(
        layer_widths=widths,
        samples=int(values["model.samples"]),
        iid=_parse_bool(values["model.iid"], "model.iid"),
        separation=float(values["model.separation"]),
        spread=float(values["model.spread"]),
    )
    stats = None
    if "stats.beta" in values:
        needed = ("stats.sigma_sq", "stats.g_sq", "stats.vartheta")
        absent = [key for key in needed if key not in values]
        if absent:
            raise ValidationError(
                f"stats.beta given but missing {', '.join(absent)}"
            )
        sigma_sq = tuple(
            float(v) for v in values["stats.sigma_sq"].split(",")
        )
        g_sq = tuple(float(v) for v in values["stats.g_sq"].split(","))
        stats = ModelStatistics(
            num_layers=len(sigma_sq),
            grad_variance=sigma_sq,
            grad_second_moment=g_sq,
            smoothness=float(values["stats.beta"]),
            loss_gap=float(values["stats.vartheta"]),
        )
    calibration = CalibrationSpec(
        adapt_steps=int(values["calibration.adapt_steps"]),
        learning_rate=float(values["calibration.learning_rate"]),
        epochs=int(values["calibration.epochs"]),
    )
    config = ExperimentConfig(
        population=population,
        system=system,
        model=model,
        policy=values["policy.name"],
        noise_cv=float(values["policy.noise_cv"]),
        seed=int(values["system.seed"]),
        batch_size=int(values["system.batch_size"]),
        stats=stats,
        calibration=calibration,
    )
    config.check()
    return config


def load_config(
    path: str,
    seed: int | None = None,
    policy: str | None = None,
    noise_cv: float | None = None,
) -> ExperimentConfig:
    """Read a config file and apply command-line overrides."""
    with open(path, "r", encoding="utf-8") as handle:
        config = parse_config(handle.read())
    if seed is not None:
        config = replace(config, seed=seed)
    if policy is not None:
        config = replace(config, policy=policy)
    if noise_cv is not None:
        config = replace(config, noise_cv=noise_cv)
    config.check()
    return config


def generate_population(
    spec: PopulationSpec, seed: int
) -> tuple[ClientProfile, ...]:
    """Draw per-client weights, failure probabilities, and rates.

    Deterministic per seed; a degenerate range [v, v] yields exactly v.
    """
    spec.check()
    rng = _stream(seed, _POPULATION_TAG)
    n = spec.count
    if spec.weight_scheme == "uniform":
        weights = np.full(n, 1.0 / n)
    else:
        raw = rng.uniform(0.5, 1.5, size=n)
        weights = raw / raw.sum()
    upload = spec.upload_fail.draw(rng, n)
    download = spec.download_fail.draw(rng, n)
    aggregate = spec.aggregate_fail.draw(rng, n)
    uplink = spec.uplink_rate.draw(rng, n)
    downlink = spec.downlink_rate.draw(rng, n)
    fed_uplink = spec.fed_uplink_rate.draw(rng, n)
    compute = spec.compute_speed.draw(rng, n)
    return tuple(
        ClientProfile(
            id=i + 1,
            weight=float(weights[i]),
            upload_fail=float(upload[i]),
            download_fail=float(download[i]),
            aggregate_fail=float(aggregate[i]),
            uplink_rate=float(uplink[i]),
            downlink_rate=float(downlink[i]),
            fed_uplink_rate=float(fed_uplink[i]),
            compute_speed=float(compute[i]),
        )
        for i in range(n)
    )


def perturb_probabilities(
    clients: Sequence[ClientProfile], noise_cv: float, rng: np.random.Generator
) -> tuple[ClientProfile, ...]:
    """Multiplicative Gaussian noise on failure probabilities, clamped.

    Models measurement error in the planner's inputs; the simulator keeps
    the true values.
    """
    if noise_cv == 0.0:
        return tuple(clients)
    out = []
    for client in clients:
        noisy = {}
        for field in ("upload_fail", "download_fail", "aggregate_fail"):
            value = getattr(client, field)
            noisy[field] = float(
                np.clip(value * (1.0 + noise_cv * rng.normal()), 0.0, 0.99)
            )
        out.append(replace(client, **noisy))
    return tuple(out)


def _random_cuts(
    n: int, num_layers: int, min_cut: int, rng: np.random.Generator
) -> tuple[int, ...]:
    return tuple(int(c) for c in rng.integers(min_cut, num_layers + 1, size=n))


def _latency_best_cuts(clients, prof, system) -> tuple[int, ...]:
    return tuple(
        best_split(client, prof, prof.num_layers, system)[0]
        for client in clients
    )


def round_robin_sampler(
    n: int, k: int, rng: np.random.Generator
) -> Callable[[np.random.Generator], tuple[int, ...]]:
    """Cyclic blocks of K over a permutation, reshuffled each full pass."""
    state = {"perm": rng.permutation(n), "pos": 0}

    def sampler(_: np.random.Generator) -> tuple[int, ...]:
        out = []
        for _ in range(k):
            out.append(int(state["perm"][state["pos"]]) + 1)
            state["pos"] += 1
            if state["pos"] == n:
                state["pos"] = 0
                state["perm"] = rng.permutation(n)
        return tuple(out)

    return sampler


def _finalized_plan(
    q: Sequence[float],
    cuts: Sequence[int],
    true_clients: Sequence[ClientProfile],
) -> SamplingPlan:
    """Assemble a plan whose cap is exact under the true probabilities."""
    draft = SamplingPlan(
        q=tuple(float(v) for v in q),
        cut_layers=tuple(int(c) for c in cuts),
        max_cut=max(int(c) for c in cuts),
        amplification_cap=1.0,
    )
    cap = exact_amplification_cap(draft, true_clients)
    return replace(draft, amplification_cap=cap)


def select_plan(
    policy: str,
    planner_population: Population,
    true_clients: Sequence[ClientProfile],
    prof,
    policy_rng: np.random.Generator,
) -> tuple[SamplingPlan, Callable | None]:
    """Resolve a policy tag into a plan and an optional sampling schedule.

    The planner population may carry noisy probabilities; the returned
    plan's amplification cap is recomputed against the true clients so
    validation reflects what the simulator will actually run.
    """
    system = planner_population.system
    clients = planner_population.clients
    n = len(clients)
    weights = [c.weight for c in clients]
    num_layers = prof.num_layers

    if policy == "oms-ocs":
        result = optimize(planner_population, prof)
        plan = result.plan
        return _finalized_plan(plan.q, plan.cut_layers, true_clients), None
    if policy == "fms-ocs":
        cuts = _random_cuts(n, num_layers, system.min_cut, policy_rng)
        max_cut = max(cuts)
        paths = tuple(
            per_client_latency(client, prof, cut)
            for client, cut in zip(clients, cuts)
        )
        solution = solve_at_max_cut(max_cut, paths, planner_population)
        if not solution.feasible:
            raise ValidationError(
                f"fms-ocs infeasible under the drawn cuts: {solution.reason}"
            )
        return _finalized_plan(solution.q, cuts, true_clients), None
    if policy == "uniform":
        cuts = _latency_best_cuts(clients, prof, system)
        return _finalized_plan([1.0 / n] * n, cuts, true_clients), None
    if policy == "weighted":
        cuts = _random_cuts(n, num_layers, system.min_cut, policy_rng)
        return _finalized_plan(weights, cuts, true_clients), None
    if policy == "round-robin":
        cuts = _random_cuts(n, num_layers, system.min_cut, policy_rng)
        plan = _finalized_plan([1.0 / n] * n, cuts, true_clients)
        sampler = round_robin_sampler(
            n, system.sampled_per_round, policy_rng
        )
        return plan, sampler
    if policy == "random-split":
        cuts = _random_cuts(n, num_layers, system.min_cut, policy_rng)
        return _finalized_plan([1.0 / n] * n, cuts, true_clients), None
    raise ValidationError(f"unknown policy {policy!r}")


@dataclass(frozen=True)
class PreparedExperiment:
    """Everything an experiment needs before a plan is chosen."""

    config: ExperimentConfig
    spec: ModelSpec
    prof: object
    shards: list
    true_population: Population
    planner_population: Population
    report: EstimationReport | None


@dataclass(frozen=True)
class PlannedExperiment:
    prepared: PreparedExperiment
    plan: SamplingPlan
    sampler: Callable | None
    bound_total: float
    round_latency: float


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    plan: SamplingPlan
    trace: SimulationTrace
    bound_total: float
    round_latency: float
    report: EstimationReport | None

    @property
    def final_loss(self) -> float:
        return self.trace.final_loss


def prepare_experiment(config: ExperimentConfig) -> PreparedExperiment:
    """Generate population and data, then calibrate or load the constants."""
    config.check()
    seed = config.seed
    true_clients = generate_population(config.population, seed)

    spec = ModelSpec(config.model.layer_widths)
    data_rng = _stream(seed, _DATA_TAG)
    points, labels = gaussian_clusters(
        config.model.samples,
        spec.num_classes,
        spec.input_dim,
        data_rng,
        separation=config.model.separation,
        spread=config.model.spread,
    )
    weights = tuple(c.weight for c in true_clients)
    if config.model.iid:
        shards = partition_iid(points, labels, weights, data_rng)
    else:
        shards = partition_by_primary_class(points, labels, weights, data_rng)
    prof = profile_from_widths(config.model.layer_widths, config.batch_size)

    report = None
    if config.stats is not None:
        stats = config.stats
    else:
        calib_model = LayeredModel.initialized(spec, _stream(seed, _INIT_TAG))
        report = calibrate(
            calib_model,
            shards,
            _stream(seed, _CALIBRATION_TAG),
            adapt_steps=config.calibration.adapt_steps,
            learning_rate=config.calibration.learning_rate,
            batch_size=config.batch_size,
            epochs=config.calibration.epochs,
        )
        stats = report.to_model_statistics()

    true_population = validate_population(
        list(true_clients), stats, config.system
    )
    planner_clients = perturb_probabilities(
        true_clients, config.noise_cv, _stream(seed, _NOISE_TAG)
    )
    planner_population = validate_population(
        list(planner_clients), stats, config.system
    )
    return PreparedExperiment(
        config=config,
        spec=spec,
        prof=prof,
        shards=shards,
        true_population=true_population,
        planner_population=planner_population,
        report=report,
    )


def plan_experiment(prepared: PreparedExperiment) -> PlannedExperiment:
    """Pick the policy's plan and price it under the true population."""
    config = prepared.config
    plan, sampler = select_plan(
        config.policy,
        prepared.planner_population,
        prepared.true_population.clients,
        prepared.prof,
        _stream(config.seed, _POLICY_TAG),
    )
    validate_plan(plan, prepared.true_population)
    bound_total = convergence_upper_bound(
        plan, prepared.true_population
    ).total
    round_latency = expected_round_latency(
        plan, prepared.true_population.clients, prepared.prof, config.system
    )
    return PlannedExperiment(
        prepared=prepared,
        plan=plan,
        sampler=sampler,
        bound_total=bound_total,
        round_latency=round_latency,
    )


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full pipeline for one config; pure apart from determinism."""
    prepared = prepare_experiment(config)
    planned = plan_experiment(prepared)
    spec = prepared.spec
    factory = lambda rng: LayeredModel.initialized(spec, rng)
    trace = run_training(
        prepared.true_population,
        planned.plan,
        prepared.shards,
        factory,
        seed=config.seed,
        batch_size=config.batch_size,
        profile=prepared.prof,
        sampler=planned.sampler,
    )
    return ExperimentResult(
        config=config,
        plan=planned.plan,
        trace=trace,
        bound_total=planned.bound_total,
        round_latency=planned.round_latency,
        report=prepared.report,
    )


def render_plan(
    policy: str, seed: int, plan: SamplingPlan, bound_total: float
) -> str:
    """Plan artifact: header facts, then one client per row."""
    lines = [
        f"policy = {policy}",
        f"seed = {seed}",
        f"max_cut = {plan.max_cut}",
        f"amplification_cap = {plan.amplification_cap!r}",
        f"bound_total = {bound_total!r}",
        "client\tq\tcut",
    ]
    for i, (q_i, cut) in enumerate(zip(plan.q, plan.cut_layers), start=1):
        lines.append(f"{i}\t{q_i!r}\t{cut}")
    return "\n".join(lines) + "\n"


def render_summary(result: ExperimentResult) -> str:
    lines = [
        f"policy = {result.config.policy}",
        f"seed = {result.config.seed}",
        f"noise_cv = {result.config.noise_cv!r}",
        f"rounds = {len(result.trace.rounds)}",
        f"final_loss = {result.trace.final_loss!r}",
        f"bound_total = {result.bound_total!r}",
        f"round_latency = {result.round_latency!r}",
        f"calibrated = {str(result.report is not None).lower()}",
    ]
    return "\n".join(lines) + "\n"


def write_artifacts(result: ExperimentResult, out_dir: str) -> dict[str, str]:
    """Write plan, trace, and summary files; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    artifacts = {
        "plan.txt": render_plan(
            result.config.policy,
            result.config.seed,
            result.plan,
            result.bound_total,
        ),
        "trace.txt": result.trace.to_text(),
        "summary.txt": render_summary(result),
    }
    if result.report is not None:
        artifacts["stats.txt"] = (
            "\n".join(result.report.to_config_lines()) + "\n"
        )
    for name, content in artifacts.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(content)
        paths[name] = path
    return paths


def compare_policies(configs: Sequence[ExperimentConfig]) -> str:
    """Run each config and tabulate losses against rounds and latency.

    All configs must share a seed so they face the same population and
    data; they normally differ only in policy.
    """
    if not configs:
        raise ValidationError("no configs to compare")
    seeds = {config.seed for config in configs}
    if len(seeds) != 1:
        raise ValidationError(
            f"configs must share one seed, got {sorted(seeds)}"
        )
    results = [run_experiment(config) for config in configs]
    lines = ["policy\tfinal_loss\tbound_total\tround_latency"]
    for result in results:
        lines.append(
            f"{result.config.policy}\t{result.final_loss!r}"
            f"\t{result.bound_total!r}\t{result.round_latency!r}"
        )
    lines.append("")
    lines.append("policy\tround\tloss\tcumulative_latency")
    for result in results:
        for record in result.trace.rounds:
            cumulative = record.round * result.round_latency
            lines.append(
                f"{result.config.policy}\t{record.round}"
                f"\t{record.loss!r}\t{cumulative!r}"
            )
    return "\n".join(lines) + "\n"
