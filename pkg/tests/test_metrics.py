from dataclasses import replace

import numpy as np
import pytest

from mfirl.core import MeanFieldFlow, PolicyFlow
from mfirl.exceptions import ContractViolationError
from mfirl.metrics import (
    EvaluationReport,
    evaluate_equilibria,
    expected_return,
    expected_return_gap,
    inference_accuracy,
    policy_deviation,
    summarize,
    weighted_policy_deviation,
)
from mfirl.solver import solve_contexts


@pytest.fixture
def tiny_equilibria(tiny_env):
    return solve_contexts(tiny_env)


class TestPolicyDeviation:
    def test_identical_policies(self, tiny_equilibria):
        flows = {m: eq.policy_flow for m, eq in tiny_equilibria.items()}
        assert policy_deviation(flows, flows, [0.5, 0.5]) == 0.0

    def test_single_state_closed_form(self):
        expert = {0: PolicyFlow(np.array([[[0.5, 0.5]]]))}
        learned = {0: PolicyFlow(np.array([[[0.25, 0.75]]]))}
        expected = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
        assert policy_deviation(expert, learned, [1.0]) == pytest.approx(expected)

    def test_missing_support_is_infinite(self):
        expert = {0: PolicyFlow(np.array([[[0.5, 0.5]]]))}
        learned = {0: PolicyFlow(np.array([[[1.0, 0.0]]]))}
        assert policy_deviation(expert, learned, [1.0]) == float("inf")

    def test_prior_weights_contexts(self):
        same = PolicyFlow(np.array([[[0.5, 0.5]]]))
        other = PolicyFlow(np.array([[[0.25, 0.75]]]))
        single = policy_deviation({1: same}, {1: other}, [1.0])
        assert policy_deviation({0: same, 1: same}, {0: same, 1: other}, {0: 0.7, 1: 0.3}) == pytest.approx(0.3 * single)

    def test_mismatched_contexts(self):
        flow = PolicyFlow(np.array([[[0.5, 0.5]]]))
        with pytest.raises(ContractViolationError):
            policy_deviation({0: flow}, {1: flow}, [1.0])

    def test_weighted_variant_vanishes_for_identical(self, tiny_equilibria):
        flows = {m: eq.policy_flow for m, eq in tiny_equilibria.items()}
        mus = {m: eq.mean_field_flow for m, eq in tiny_equilibria.items()}
        assert weighted_policy_deviation(flows, flows, [0.5, 0.5], mus) == 0.0

    def test_weighted_variant_closed_form(self):
        expert = PolicyFlow(np.array([[[0.5, 0.5], [0.5, 0.5]]]))
        learned = PolicyFlow(np.array([[[0.25, 0.75], [0.5, 0.5]]]))
        mu = MeanFieldFlow(np.array([[0.4, 0.6]]))
        assert policy_deviation({0: expert}, {0: learned}, [1.0]) == pytest.approx(0.5 * np.log(4 / 3))
        assert weighted_policy_deviation({0: expert}, {0: learned}, [1.0], {0: mu}) == pytest.approx(0.2 * np.log(4 / 3))

    def test_weighted_variant_ignores_unvisited_states(self):
        expert = PolicyFlow(np.array([[[1.0, 0.0], [1.0, 0.0]]]))
        learned = PolicyFlow(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        mu = MeanFieldFlow(np.array([[1.0, 0.0]]))
        assert policy_deviation({0: expert}, {0: learned}, [1.0]) == float("inf")
        assert weighted_policy_deviation({0: expert}, {0: learned}, [1.0], {0: mu}) == 0.0

    def test_weighted_variant_mismatched_contexts(self):
        flow = PolicyFlow(np.array([[[0.5, 0.5]]]))
        mu = MeanFieldFlow(np.array([[1.0]]))
        with pytest.raises(ContractViolationError):
            weighted_policy_deviation({0: flow}, {0: flow}, [1.0], {1: mu})


class TestExpectedReturn:
    def test_constant_reward(self, make_identity_env):
        env = make_identity_env(num_states=2, num_actions=2, horizon=3, reward=[[1.0, 1.0], [1.0, 1.0]])
        from mfirl.solver import solve_ermfne
        eq = solve_ermfne(env, 0.0)
        assert expected_return(env, eq.mean_field_flow, eq.policy_flow, 0.0) == pytest.approx(3.0)

    def test_gap_of_identical_equilibria(self, tiny_env, tiny_equilibria):
        assert expected_return_gap(tiny_env, tiny_equilibria, tiny_equilibria, [0.5, 0.5]) == 0.0


def test_inference_accuracy():
    assert inference_accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(ContractViolationError):
        inference_accuracy([], [])


class TestSummarize:
    def test_median_and_population_variance(self):
        stats = summarize([1.0, 2.0, 3.0, 10.0])
        assert stats == {"median": 2.5, "variance": pytest.approx(12.5), "count": 4}

    def test_empty(self):
        stats = summarize([])
        assert stats["count"] == 0
        assert np.isnan(stats["median"])


def test_report_rows_flatten_per_context(tiny_env, tiny_equilibria):
    report = evaluate_equilibria(tiny_env, tiny_equilibria, tiny_equilibria, [0.5, 0.5], seed=3, inference_acc=1.0)
    assert isinstance(report, EvaluationReport)
    row = report.to_row()
    assert row["seed"] == 3
    assert row["policy_deviation"] == 0.0
    assert row["inference_accuracy"] == 1.0
    assert row["weighted_policy_deviation"] == 0.0
    for m in tiny_env.contexts:
        assert row[f"policy_deviation[{m}]"] == 0.0
        assert row[f"weighted_policy_deviation[{m}]"] == 0.0
        assert row[f"expected_return_gap[{m}]"] == 0.0


def test_report_weights_deviation_by_expert_mean_field(tiny_env, tiny_equilibria):
    uniform = PolicyFlow(np.full_like(next(iter(tiny_equilibria.values())).policy_flow.tables, 0.5))
    learned = {m: replace(eq, policy_flow=uniform) for m, eq in tiny_equilibria.items()}
    report = evaluate_equilibria(tiny_env, tiny_equilibria, learned, [0.5, 0.5], seed=0)
    expert_pf = {m: eq.policy_flow for m, eq in tiny_equilibria.items()}
    expert_mu = {m: eq.mean_field_flow for m, eq in tiny_equilibria.items()}
    expected = weighted_policy_deviation(expert_pf, {m: uniform for m in tiny_equilibria}, [0.5, 0.5], expert_mu)
    assert report.weighted_policy_deviation == pytest.approx(expected)
    assert 0.0 < report.weighted_policy_deviation <= report.policy_deviation
