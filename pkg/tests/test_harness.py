"""Config parsing, population generation, policy plans, and artifacts."""

import os
from dataclasses import replace

import numpy as np
import pytest

from splitsim.bound import exact_amplification_cap
from splitsim.cli import main
from splitsim.harness import (
    POLICIES,
    Range,
    compare_policies,
    generate_population,
    load_config,
    parse_config,
    perturb_probabilities,
    plan_experiment,
    prepare_experiment,
    round_robin_sampler,
    run_experiment,
    select_plan,
    write_artifacts,
)
from splitsim.optimizer import optimize
from splitsim.types import ValidationError

BASE_CONFIG = """
population.count = 6
population.weight_scheme = random
population.upload_fail = 0.1,0.3
population.download_fail = 0.1,0.3
population.aggregate_fail = 0.05,0.15
population.uplink_rate = 5e5,2e6
population.downlink_rate = 5e5,2e6
population.compute_speed = 1e9,4e9
system.sampled_per_round = 3
system.agg_interval = 2
system.learning_rate = 0.05
system.total_rounds = 4
system.latency_budget = 2.0
system.seed = 42
system.batch_size = 8
model.layer_widths = 6,10,8,3
model.samples = 240
policy.name = oms-ocs
"""

PINNED_STATS = """
stats.beta = 1.5
stats.sigma_sq = 0.1,0.2,0.1
stats.g_sq = 1.0,2.0,1.0
stats.vartheta = 0.5
"""


def base_config(extra: str = "", **overrides):
    config = parse_config(BASE_CONFIG + extra)
    if overrides:
        config = replace(config, **overrides)
        config.check()
    return config


class TestParseConfig:
    def test_round_trip(self):
        config = base_config()
        assert config.policy == "oms-ocs"
        assert config.seed == 42
        assert config.population.count == 6
        assert config.system.num_clients == 6
        assert config.model.layer_widths == (6, 10, 8, 3)
        assert config.stats is None

    def test_defaults_fill_optional_keys(self):
        config = base_config()
        assert config.system.min_cut == 1
        assert config.noise_cv == 0.0
        assert config.model.iid is True
        assert config.calibration.adapt_steps == 25
        assert config.population.fed_uplink_rate == Range(1e6, 1e6)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown key"):
            parse_config(BASE_CONFIG + "population.bogus = 3\n")

    def test_missing_required_keys_reported(self):
        text = "\n".join(
            line
            for line in BASE_CONFIG.splitlines()
            if not line.startswith(("system.seed", "model.samples"))
        )
        with pytest.raises(ValidationError) as err:
            parse_config(text)
        assert "system.seed" in str(err.value)
        assert "model.samples" in str(err.value)

    def test_comments_and_blanks_skipped(self):
        config = parse_config(BASE_CONFIG + "\n# a comment\n\n")
        assert config.seed == 42

    def test_line_without_equals_rejected(self):
        with pytest.raises(ValidationError, match="line"):
            parse_config(BASE_CONFIG + "system.seed 7\n")

    def test_stats_block_parsed(self):
        config = parse_config(BASE_CONFIG + PINNED_STATS)
        assert config.stats is not None
        assert config.stats.smoothness == 1.5
        assert config.stats.grad_variance == (0.1, 0.2, 0.1)
        assert config.stats.grad_second_moment == (1.0, 2.0, 1.0)
        assert config.stats.loss_gap == 0.5
        assert config.stats.num_layers == 3

    def test_partial_stats_rejected(self):
        with pytest.raises(ValidationError, match="stats.beta given"):
            parse_config(BASE_CONFIG + "stats.beta = 1.5\n")

    def test_stats_layer_mismatch_rejected(self):
        bad = PINNED_STATS.replace("0.1,0.2,0.1", "0.1,0.2")
        bad = bad.replace("1.0,2.0,1.0", "1.0,2.0")
        with pytest.raises(ValidationError):
            parse_config(BASE_CONFIG + bad)

    def test_bad_policy_rejected(self):
        text = BASE_CONFIG.replace("policy.name = oms-ocs", "policy.name = greedy")
        with pytest.raises(ValidationError, match="policy"):
            parse_config(text)

    def test_bad_probability_range_rejected(self):
        text = BASE_CONFIG.replace(
            "population.upload_fail = 0.1,0.3",
            "population.upload_fail = 0.5,1.0",
        )
        with pytest.raises(ValidationError, match="upload_fail"):
            parse_config(text)

    def test_bad_bool_rejected(self):
        with pytest.raises(ValidationError, match="model.iid"):
            parse_config(BASE_CONFIG + "model.iid = maybe\n")

    def test_load_config_overrides(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(BASE_CONFIG, encoding="utf-8")
        config = load_config(str(path), seed=7, policy="uniform", noise_cv=0.1)
        assert config.seed == 7
        assert config.policy == "uniform"
        assert config.noise_cv == 0.1
        untouched = load_config(str(path))
        assert untouched.seed == 42


class TestGeneratePopulation:
    def test_degenerate_range_is_exact(self):
        text = BASE_CONFIG.replace(
            "population.upload_fail = 0.1,0.3",
            "population.upload_fail = 0.3,0.3",
        )
        spec = parse_config(text).population
        clients = generate_population(spec, seed=1)
        assert all(c.upload_fail == 0.3 for c in clients)

    def test_ids_are_one_based_and_ordered(self):
        clients = generate_population(base_config().population, seed=3)
        assert [c.id for c in clients] == [1, 2, 3, 4, 5, 6]

    def test_uniform_weights_exact(self):
        text = BASE_CONFIG.replace(
            "population.weight_scheme = random",
            "population.weight_scheme = uniform",
        )
        clients = generate_population(parse_config(text).population, seed=5)
        assert all(c.weight == pytest.approx(1.0 / 6, abs=0) for c in clients)

    def test_random_weights_sum_to_one(self):
        clients = generate_population(base_config().population, seed=5)
        assert sum(c.weight for c in clients) == pytest.approx(1.0, abs=1e-12)
        assert len({c.weight for c in clients}) > 1

    def test_same_seed_same_population(self):
        spec = base_config().population
        a = generate_population(spec, seed=9)
        b = generate_population(spec, seed=9)
        assert a == b
        c = generate_population(spec, seed=10)
        assert a != c

    def test_draws_match_range_mean(self):
        text = BASE_CONFIG.replace(
            "population.count = 6", "population.count = 1000"
        ).replace("system.sampled_per_round = 3", "system.sampled_per_round = 3")
        spec = parse_config(text).population
        clients = generate_population(spec, seed=11)
        uploads = np.array([c.upload_fail for c in clients])
        # Uniform on [0.1, 0.3]: mean 0.2, sd 0.2/sqrt(12).
        se = 0.2 / np.sqrt(12.0) / np.sqrt(1000.0)
        assert abs(uploads.mean() - 0.2) < 3.0 * se
        assert uploads.min() >= 0.1 and uploads.max() <= 0.3


class TestPerturbProbabilities:
    def test_zero_noise_is_identity(self, rng):
        clients = generate_population(base_config().population, seed=2)
        assert perturb_probabilities(clients, 0.0, rng) == clients

    def test_only_failure_fields_change(self, rng):
        clients = generate_population(base_config().population, seed=2)
        noisy = perturb_probabilities(clients, 0.5, rng)
        for before, after in zip(clients, noisy):
            assert after.id == before.id
            assert after.weight == before.weight
            assert after.uplink_rate == before.uplink_rate
            assert after.compute_speed == before.compute_speed
        changed = sum(
            before.upload_fail != after.upload_fail
            for before, after in zip(clients, noisy)
        )
        assert changed > 0

    def test_clamped_to_valid_probabilities(self):
        clients = generate_population(base_config().population, seed=2)
        noisy = perturb_probabilities(
            clients, 50.0, np.random.default_rng(0)
        )
        for client in noisy:
            for field in ("upload_fail", "download_fail", "aggregate_fail"):
                assert 0.0 <= getattr(client, field) <= 0.99


class TestSelectPlan:
    @pytest.fixture()
    def prepared(self):
        return prepare_experiment(parse_config(BASE_CONFIG + PINNED_STATS))

    def _plan_for(self, prepared, policy):
        return select_plan(
            policy,
            prepared.planner_population,
            prepared.true_population.clients,
            prepared.prof,
            np.random.default_rng(77),
        )

    def test_uniform_probabilities_exact(self, prepared):
        plan, sampler = self._plan_for(prepared, "uniform")
        assert sampler is None
        assert plan.q == (pytest.approx(1.0 / 6, abs=0),) * 6

    def test_weighted_matches_client_weights(self, prepared):
        plan, _ = self._plan_for(prepared, "weighted")
        weights = tuple(c.weight for c in prepared.true_population.clients)
        assert plan.q == pytest.approx(weights, abs=0)

    def test_cap_is_exact_for_every_policy(self, prepared):
        for policy in POLICIES:
            plan, _ = self._plan_for(prepared, policy)
            cap = exact_amplification_cap(
                plan, prepared.true_population.clients
            )
            assert plan.amplification_cap == cap, policy

    def test_max_cut_is_attained(self, prepared):
        for policy in POLICIES:
            plan, _ = self._plan_for(prepared, policy)
            assert max(plan.cut_layers) == plan.max_cut, policy

    def test_planner_policy_matches_direct_optimizer(self, prepared):
        plan, _ = self._plan_for(prepared, "oms-ocs")
        direct = optimize(prepared.planner_population, prepared.prof)
        assert plan.q == direct.plan.q
        assert plan.cut_layers == direct.plan.cut_layers
        assert plan.max_cut == direct.plan.max_cut

    def test_cuts_respect_min_cut_and_depth(self, prepared):
        num_layers = prepared.prof.num_layers
        min_cut = prepared.config.system.min_cut
        for policy in POLICIES:
            plan, _ = self._plan_for(prepared, policy)
            for cut in plan.cut_layers:
                assert min_cut <= cut <= num_layers, policy

    def test_unknown_policy_raises(self, prepared):
        with pytest.raises(ValidationError, match="unknown policy"):
            self._plan_for(prepared, "greedy")


class TestRoundRobinSampler:
    def test_visits_every_client_each_pass(self):
        sampler = round_robin_sampler(6, 3, np.random.default_rng(1))
        seen = sampler(None) + sampler(None)
        assert sorted(seen) == [1, 2, 3, 4, 5, 6]
        again = sampler(None) + sampler(None)
        assert sorted(again) == [1, 2, 3, 4, 5, 6]

    def test_reshuffles_between_passes(self):
        orders = set()
        sampler = round_robin_sampler(6, 6, np.random.default_rng(2))
        for _ in range(8):
            orders.add(sampler(None))
        assert len(orders) > 1

    def test_wraps_mid_draw_when_k_does_not_divide_n(self):
        sampler = round_robin_sampler(5, 3, np.random.default_rng(3))
        draws = [sampler(None) for _ in range(5)]
        flat = [cid for draw in draws for cid in draw]
        # Three full passes in 15 slots: each client appears exactly thrice.
        assert sorted(flat) == sorted(list(range(1, 6)) * 3)


class TestRunExperiment:
    def test_deterministic(self):
        config = base_config(PINNED_STATS, policy="uniform")
        a = run_experiment(config)
        b = run_experiment(config)
        assert np.array_equal(a.trace.losses(), b.trace.losses())
        assert a.plan == b.plan
        assert a.final_loss == a.trace.final_loss

    def test_pinned_stats_skip_calibration(self):
        result = run_experiment(base_config(PINNED_STATS, policy="uniform"))
        assert result.report is None

    def test_calibration_report_attached(self):
        config = base_config(
            policy="uniform",
            calibration=replace(base_config().calibration, adapt_steps=3),
        )
        result = run_experiment(config)
        assert result.report is not None
        assert result.report.beta > 0.0

    def test_planner_noise_changes_plan_not_truth(self):
        clean = run_experiment(base_config(PINNED_STATS))
        noisy = run_experiment(base_config(PINNED_STATS, noise_cv=1.0))
        assert clean.plan.q != noisy.plan.q
        # Both simulations face the same true population and data stream.
        assert clean.config.seed == noisy.config.seed

    def test_seed_changes_everything(self):
        a = run_experiment(base_config(PINNED_STATS, policy="uniform"))
        b = run_experiment(base_config(PINNED_STATS, policy="uniform", seed=43))
        assert not np.array_equal(a.trace.losses(), b.trace.losses())

    def test_round_robin_runs_end_to_end(self):
        result = run_experiment(base_config(PINNED_STATS, policy="round-robin"))
        for record in result.trace.rounds:
            assert len(record.sampled) == 3


class TestArtifacts:
    def test_files_written_and_stable(self, tmp_path):
        config = base_config(PINNED_STATS, policy="uniform")
        first = write_artifacts(run_experiment(config), str(tmp_path / "a"))
        second = write_artifacts(run_experiment(config), str(tmp_path / "b"))
        assert set(first) == {"plan.txt", "trace.txt", "summary.txt"}
        for name in first:
            with open(first[name], "rb") as fa, open(second[name], "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_stats_artifact_present_when_calibrated(self, tmp_path):
        config = base_config(
            policy="uniform",
            calibration=replace(base_config().calibration, adapt_steps=3),
        )
        paths = write_artifacts(run_experiment(config), str(tmp_path))
        assert "stats.txt" in paths
        content = open(paths["stats.txt"], encoding="utf-8").read()
        assert content.startswith("stats.beta = ")

    def test_plan_artifact_has_client_rows(self, tmp_path):
        config = base_config(PINNED_STATS, policy="uniform")
        paths = write_artifacts(run_experiment(config), str(tmp_path))
        lines = open(paths["plan.txt"], encoding="utf-8").read().splitlines()
        assert "client\tq\tcut" in lines
        rows = lines[lines.index("client\tq\tcut") + 1 :]
        assert len(rows) == 6


class TestComparePolicies:
    def test_one_row_per_policy(self):
        configs = [
            base_config(PINNED_STATS, policy=p) for p in ("uniform", "weighted")
        ]
        text = compare_policies(configs)
        table, long_rows = text.split("\n\n", 1)
        assert table.splitlines()[0] == "policy\tfinal_loss\tbound_total\tround_latency"
        assert len(table.splitlines()) == 3
        total_rounds = base_config().system.total_rounds
        assert len(long_rows.splitlines()) == 1 + 2 * total_rounds

    def test_mixed_seeds_rejected(self):
        configs = [
            base_config(PINNED_STATS, policy="uniform"),
            base_config(PINNED_STATS, policy="weighted", seed=43),
        ]
        with pytest.raises(ValidationError, match="share one seed"):
            compare_policies(configs)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError, match="no configs"):
            compare_policies([])


class TestCli:
    @pytest.fixture()
    def config_path(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(BASE_CONFIG + PINNED_STATS, encoding="utf-8")
        return str(path)

    def test_optimize_writes_plan(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "out")
        assert main(["optimize", "--config", config_path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "plan.txt"))
        assert "bound_total" in capsys.readouterr().out

    def test_simulate_writes_artifacts(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "out")
        code = main(
            [
                "simulate",
                "--config",
                config_path,
                "--out",
                out,
                "--policy",
                "uniform",
            ]
        )
        assert code == 0
        for name in ("plan.txt", "trace.txt", "summary.txt"):
            assert os.path.exists(os.path.join(out, name))
        assert "final_loss" in capsys.readouterr().out

    def test_calibrate_writes_stats(self, tmp_path, capsys):
        path = tmp_path / "exp.cfg"
        path.write_text(
            BASE_CONFIG + "calibration.adapt_steps = 3\n", encoding="utf-8"
        )
        out = str(tmp_path / "out")
        assert main(["calibrate", "--config", str(path), "--out", out]) == 0
        content = open(os.path.join(out, "stats.txt"), encoding="utf-8").read()
        assert "stats.beta = " in content
        assert "stats.vartheta = " in content

    def test_compare_writes_comparison(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "out")
        code = main(
            [
                "compare",
                "--config",
                config_path,
                "--out",
                out,
                "--policies",
                "uniform",
                "weighted",
            ]
        )
        assert code == 0
        content = open(
            os.path.join(out, "comparison.txt"), encoding="utf-8"
        ).read()
        assert content.splitlines()[0].startswith("policy\t")
        assert "uniform" in content and "weighted" in content

    def test_seed_override_changes_artifacts(self, config_path, tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        main(["simulate", "--config", config_path, "--out", out_a, "--policy", "uniform"])
        main(
            [
                "simulate",
                "--config",
                config_path,
                "--out",
                out_b,
                "--policy",
                "uniform",
                "--seed",
                "99",
            ]
        )
        a = open(os.path.join(out_a, "summary.txt"), encoding="utf-8").read()
        b = open(os.path.join(out_b, "summary.txt"), encoding="utf-8").read()
        assert a != b

    def test_missing_config_fails_cleanly(self, tmp_path, capsys):
        code = main(
            ["optimize", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_key_fails_cleanly(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text(BASE_CONFIG + "junk.key = 1\n", encoding="utf-8")
        code = main(
            ["simulate", "--config", str(path), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "unknown key" in capsys.readouterr().err
