"""Validation rules for the population and plan containers."""

from __future__ import annotations

import pytest

from splitsim import (
    SamplingPlan,
    ValidationError,
    amplification,
    validate_plan,
    validate_population,
)

from conftest import (
    make_client,
    make_population,
    make_stats,
    make_system,
    uniform_clients,
)


class TestClientValidation:
    def test_symmetric_population_accepted(self):
        clients = uniform_clients(
            3, upload_fail=0.1, download_fail=0.1, aggregate_fail=0.1
        )
        pop = validate_population(clients, make_stats(), make_system(num_clients=3))
        assert pop.weights == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_certain_upload_failure_rejected(self):
        with pytest.raises(ValidationError, match="< 1"):
            make_client(upload_fail=1.0).check()

    def test_weights_must_sum_to_one(self):
        clients = [make_client(id=1, weight=0.5), make_client(id=2, weight=0.6)]
        with pytest.raises(ValidationError, match="sum to 1"):
            validate_population(clients, make_stats(), make_system(num_clients=2))

    def test_ids_must_be_consecutive_from_one(self):
        clients = [make_client(id=1, weight=0.5), make_client(id=3, weight=0.5)]
        with pytest.raises(ValidationError, match="ids"):
            validate_population(clients, make_stats(), make_system(num_clients=2))

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValidationError):
            make_client(weight=0.0).check()

    def test_negative_probability_rejected(self):
        with pytest.raises(ValidationError):
            make_client(download_fail=-0.1).check()

    def test_client_count_must_match_config(self):
        clients = uniform_clients(2)
        with pytest.raises(ValidationError, match="clients"):
            validate_population(clients, make_stats(), make_system(num_clients=3))


class TestStatsValidation:
    def test_layer_sequences_must_match_length(self):
        with pytest.raises(ValidationError):
            make_stats(num_layers=3, grad_variance=(1.0, 1.0)).check()

    def test_negative_variance_rejected(self):
        with pytest.raises(ValidationError):
            make_stats(grad_variance=(-1.0, 1.0)).check()

    def test_negative_loss_gap_rejected(self):
        with pytest.raises(ValidationError):
            make_stats(loss_gap=-0.5).check()


class TestSystemValidation:
    def test_sample_size_cannot_exceed_population(self):
        with pytest.raises(ValidationError):
            make_system(num_clients=2, sampled_per_round=3).check()

    def test_min_cut_must_fit_model(self):
        clients = uniform_clients(1)
        with pytest.raises(ValidationError, match="cut"):
            validate_population(
                clients, make_stats(num_layers=2), make_system(min_cut=3)
            )

    def test_zero_learning_rate_allowed(self):
        make_system(learning_rate=0.0).check()


class TestJointSuccess:
    def test_product_of_survival_factors(self):
        client = make_client(
            upload_fail=0.5, download_fail=0.5, aggregate_fail=0.5
        )
        assert client.joint_success() == pytest.approx(0.125)

    def test_amplification_inverse_in_probability(self):
        client = make_client(weight=0.5)
        assert amplification(client, 0.5) == pytest.approx(0.5)
        assert amplification(client, 0.25) == pytest.approx(1.0)


class TestPlanValidation:
    def _plan(self, **overrides) -> SamplingPlan:
        base = dict(
            q=(0.5, 0.5),
            cut_layers=(2, 1),
            max_cut=2,
            amplification_cap=0.5,
        )
        base.update(overrides)
        return SamplingPlan(**base)

    def _population(self):
        return make_population(
            clients=uniform_clients(2),
            stats=make_stats(num_layers=2),
            system=make_system(num_clients=2),
        )

    def test_valid_plan_accepted(self):
        validate_plan(self._plan(), self._population())

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(ValidationError, match="sum"):
            validate_plan(self._plan(q=(0.5, 0.4)), self._population())

    def test_max_cut_must_be_attained(self):
        with pytest.raises(ValidationError, match="attain"):
            validate_plan(self._plan(cut_layers=(1, 1)), self._population())

    def test_cut_above_max_rejected(self):
        with pytest.raises(ValidationError):
            validate_plan(
                self._plan(cut_layers=(2, 3), max_cut=2), self._population()
            )

    def test_amplification_must_respect_cap(self):
        with pytest.raises(ValidationError, match="cap"):
            validate_plan(
                self._plan(amplification_cap=0.3), self._population()
            )

    def test_zero_probability_rejected(self):
        with pytest.raises(ValidationError):
            validate_plan(self._plan(q=(1.0, 0.0)), self._population())
