import numpy as np
import pytest

from mfirl.oracles import (
    MLP_GATE,
    TV_GATE,
    OracleReport,
    check_instance,
    factorized_log_prob,
    lemma_total_variation,
    mlp_gradient_error,
    random_instance,
    run_oracle_suite,
    sample_factorized,
)


@pytest.fixture
def instance():
    return random_instance(np.random.default_rng(3), num_states=2, horizon=2)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_backward_matches_finite_differences(seed):
    assert mlp_gradient_error(np.random.default_rng(seed)) <= MLP_GATE


@pytest.mark.parametrize("backup", ["expected", "trajectory"])
@pytest.mark.parametrize("seed", range(3))
def test_soft_optimal_sampler_induces_energy_model(seed, backup):
    tv = lemma_total_variation(np.random.default_rng(seed), deterministic=True, backup=backup)
    assert tv <= TV_GATE


class TestFactorizedModel:
    def test_normalizes_per_context(self, instance):
        est = instance.estimate()
        for m in range(instance.num_contexts):
            lp = factorized_log_prob(instance.state, est, instance.enum, np.full(len(instance.enum), m))
            assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-10)

    def test_sampler_frequencies(self, instance):
        est = instance.estimate()
        n = 20_000
        batch = sample_factorized(instance.state, est, np.zeros(n, dtype=np.int64), np.random.default_rng(1))
        # the terminal state is untilted: it follows mu_hat^T(.|m)
        freq = np.mean(batch.states[:, -1] == 0)
        q = est.probs[0, -1, 0]
        assert abs(freq - q) <= 4 * np.sqrt(q * (1 - q) / n) + 1e-12


def test_exact_estimator_expectations(instance):
    report = check_instance(instance, np.random.default_rng(0), resamples=0)
    assert report.passed, report.failures()
    assert {r["check"].split("[")[0] for r in report.rows} == {"exact_L_omega", "exact_L_psi", "exact_K_psi"}


def test_small_suite_passes():
    report = run_oracle_suite(n_instances=2, resamples=0, seed=0, mlp_nets=5)
    assert report.passed, report.failures()
    frame = report.to_frame()
    assert list(frame.columns) == ["instance", "check", "value", "reference", "score", "passed"]
    assert "sampler_energy_tv" in set(frame["check"])


def test_report_collects_failures():
    report = OracleReport()
    report.add(0, "a", 1.0, 1.0, 0.0, True)
    report.add(0, "b", 2.0, 1.0, 5.0, False)
    assert not report.passed
    assert [r["check"] for r in report.failures()] == ["b"]


@pytest.mark.slow
def test_monte_carlo_estimators_are_unbiased(instance):
    report = check_instance(instance, np.random.default_rng(0), resamples=5000)
    assert report.passed, report.failures()
