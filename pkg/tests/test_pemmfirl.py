import numpy as np
import pytest

from mfirl import pemmfirl
from mfirl.approximator import FeatureCodec
from mfirl.checkpoint import load_checkpoint, save_checkpoint
from mfirl.core import Simulator, TrajectoryBatch
from mfirl.exceptions import ContractViolationError, DegenerateContextError
from mfirl.mfairl import MfairlConfig, rollout_samplers, train_mfairl
from mfirl.pemmfirl import (
    ContextInferenceModel,
    PemmfirlConfig,
    PemmfirlState,
    align_contexts,
    centering_coefficients,
    conditional_empirical_mean_field,
    infer_context,
    kappa,
    kappa_combination,
    learned_equilibria,
    log_q,
    meta_test,
    meta_test_records,
    meta_train,
    omega_combination,
    responsibility_weighted_mean_field,
    score_combination,
    slot_alignment,
    synthetic_contexts,
    trajectory_energy,
)
from mfirl.solver import generate_demonstrations, solve_contexts

CONFIG = PemmfirlConfig(iterations=4, batch_size=8, num_contexts=2, hidden=8, lr=1e-3, psi_lr=1e-3, sampler_lr=1e-3, log_every=2)


@pytest.fixture
def tiny_equilibria(tiny_env):
    return solve_contexts(tiny_env)


@pytest.fixture
def demos(tiny_env, tiny_equilibria):
    return generate_demonstrations(tiny_env, tiny_equilibria, [0.5, 0.5], 60, 2, np.random.default_rng(2))


@pytest.fixture
def state():
    return PemmfirlState.initial(2, 2, 2, PemmfirlConfig(num_contexts=2, hidden=4), seed=7)


def finite_difference(fn, params, index, h=1e-6):
    old = params[index]
    params[index] = old + h
    up = fn()
    params[index] = old - h
    down = fn()
    params[index] = old
    return (up - down) / (2 * h)


class TestConditionalMeanField:
    def test_exact_posterior_gives_per_context_histograms(self):
        states = np.array([[0, 0], [0, 1], [1, 1], [1, 1]])
        labels = np.array([0, 0, 1, 1])
        probs, weights = responsibility_weighted_mean_field(states, np.eye(2)[labels], 2)
        np.testing.assert_allclose(weights, [2.0, 2.0])
        np.testing.assert_allclose(probs[0], [[1.0, 0.0], [0.5, 0.5]])
        np.testing.assert_allclose(probs[1], [[0.0, 1.0], [0.0, 1.0]])

    def test_degenerate_slot(self):
        with pytest.raises(DegenerateContextError) as info:
            responsibility_weighted_mean_field(np.array([[0, 1]]), np.array([[1.0, 0.0]]), 2)
        assert info.value.context == 1

    def test_estimate_from_inference_model(self, state, demos):
        est = conditional_empirical_mean_field(state.inference, demos)
        assert est.probs.shape == (2, 3, 2)
        np.testing.assert_allclose(est.probs.sum(axis=-1), 1.0)
        np.testing.assert_allclose(est.responsibilities.sum(axis=1), 1.0)

    def test_empty_pool(self, state):
        with pytest.raises(ContractViolationError):
            conditional_empirical_mean_field(state.inference, TrajectoryBatch.empty(2))


class TestInference:
    def test_posterior_is_a_distribution(self, state, demos):
        post = infer_context(state.inference, demos.trajectories[0])
        assert post.shape == (2,)
        assert post.sum() == pytest.approx(1.0)

    def test_synthetic_contexts_in_range(self, state, demos, rng):
        contexts = synthetic_contexts(state.inference, demos.batch, rng)
        assert contexts.shape == (len(demos),)
        assert set(np.unique(contexts)) <= {0, 1}

    def test_inference_net_shape_checked(self, rng):
        codec = FeatureCodec(2, 2, 3)
        other = ContextInferenceModel.create(FeatureCodec(2, 2, 2), rng, hidden=4)
        with pytest.raises(ContractViolationError):
            ContextInferenceModel(other.net, codec)


class TestGradientCombinations:
    def test_omega_combination(self, state, demos):
        est = conditional_empirical_mean_field(state.inference, demos)
        batch = demos.batch.subset(np.arange(5))
        contexts = np.array([0, 1, 0, 1, 1])
        coefs = np.array([0.5, -1.0, 2.0, 0.3, -0.7])
        grad = omega_combination(state.discriminator, est, batch, contexts, coefs)
        params = state.discriminator.f_net.params

        def value():
            return float(np.sum(coefs * trajectory_energy(state.discriminator, est, batch, contexts)))

        for i in range(0, params.size, 7):
            assert grad[i] == pytest.approx(finite_difference(value, params, i), rel=1e-4, abs=1e-7)

    def test_kappa_combination_through_the_estimator(self, state, demos):
        pool = demos.batch
        batch = pool.subset(np.arange(4))
        contexts = np.array([1, 0, 0, 1])
        coefs = np.array([1.0, -0.5, 0.25, 2.0])
        est = conditional_empirical_mean_field(state.inference, pool)
        grad = kappa_combination(state.discriminator, est, batch, contexts, coefs)
        params = state.inference.net.params

        def value():
            fresh = conditional_empirical_mean_field(state.inference, pool)
            return float(np.sum(coefs * trajectory_energy(state.discriminator, fresh, batch, contexts)))

        for i in range(0, params.size, 5):
            assert grad[i] == pytest.approx(finite_difference(value, params, i), rel=1e-4, abs=1e-7)

    def test_single_trajectory_kappa(self, state, demos):
        est = conditional_empirical_mean_field(state.inference, demos)
        tau = demos.trajectories[3]
        np.testing.assert_allclose(
            kappa(tau, 1, state.discriminator, est),
            kappa_combination(state.discriminator, est, TrajectoryBatch.from_trajectories([tau]), [1], [1.0]),
        )

    def test_score_combination(self, state, demos):
        batch = demos.batch.subset(np.arange(6))
        contexts = np.array([0, 1, 1, 0, 1, 0])
        coefs = np.linspace(-1, 1, 6)
        grad = score_combination(state.inference, batch, contexts, coefs)
        params = state.inference.net.params

        def value():
            return float(np.sum(coefs * log_q(state.inference, batch, contexts)))

        for i in range(0, params.size, 5):
            assert grad[i] == pytest.approx(finite_difference(value, params, i), rel=1e-4, abs=1e-7)


class TestCentering:
    def test_reference_batch_carries_the_means(self):
        coef, ref = centering_coefficients(np.array([0, 0, 1]), np.array([0, 1, 1]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(coef, [1 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(ref, [-1.0, -0.5, -0.5])
        assert coef.sum() + ref.sum() == pytest.approx(0.0)

    def test_context_missing_from_reference(self):
        coef, ref = centering_coefficients(np.array([0, 1]), np.array([0]), np.array([1.0, 4.0]))
        np.testing.assert_allclose(coef, [0.5, 0.0])
        np.testing.assert_allclose(ref, [-0.5])


class TestAlignContexts:
    def test_swapped_slots(self):
        assert align_contexts(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 2, 2) == {1: 0, 0: 1}

    def test_surplus_slot_maps_by_majority(self):
        mapping = align_contexts(np.array([0, 0, 1, 2, 2, 2]), np.array([0, 0, 1, 1, 1, 0]), 3, 2)
        assert sorted(mapping) == [0, 1, 2]
        assert mapping[0] == 0
        assert mapping[2] == 1


class TestMetaTrain:
    def test_log_rows(self, tiny_env, demos):
        state = meta_train(Simulator(tiny_env), demos, CONFIG, seed=1)
        assert state.iteration == 4
        assert {"iter", "disc_objective", "sampler_return", "info_objective"} <= set(state.log[-1])

    def test_resume_matches_uninterrupted_run(self, tiny_env, demos, tmp_path):
        sim = Simulator(tiny_env)
        straight = meta_train(sim, demos, CONFIG, seed=3)

        half = PemmfirlConfig(**{**CONFIG.__dict__, "iterations": 2})
        partial = meta_train(sim, demos, half, seed=3)
        save_checkpoint(tmp_path / "checkpoint.bin", *partial.to_checkpoint(), key="k")
        restored = PemmfirlState.from_checkpoint(*load_checkpoint(tmp_path / "checkpoint.bin", key="k"))
        resumed = meta_train(sim, demos, CONFIG, seed=3, state=restored)

        np.testing.assert_array_equal(resumed.discriminator.f_net.params, straight.discriminator.f_net.params)
        np.testing.assert_array_equal(resumed.inference.net.params, straight.inference.net.params)
        assert resumed.log == straight.log

    def test_never_reads_context_labels(self, tiny_env, demos):
        blind = type(demos)(demos.batch, demos.prior, demos.context_values)
        a = meta_train(Simulator(tiny_env), demos, CONFIG, seed=5)
        b = meta_train(Simulator(tiny_env), blind, CONFIG, seed=5)
        np.testing.assert_array_equal(a.discriminator.f_net.params, b.discriminator.f_net.params)

    def test_extra_sampler_steps_resample(self, tiny_env, demos, monkeypatch):
        calls = []

        def counting(*args, **kwargs):
            calls.append(args[3].copy())
            return rollout_samplers(*args, **kwargs)

        monkeypatch.setattr(pemmfirl, "rollout_samplers", counting)
        config = PemmfirlConfig(**{**CONFIG.__dict__, "sampler_steps": 2})
        state = meta_train(Simulator(tiny_env), demos, config, seed=1)
        ran = sum(np.isfinite(row["disc_objective"]) for row in state.log)
        # sampled + reference, then one fresh draw for the second sampler step
        assert len(calls) == 3 * ran
        for first, extra in zip(calls[0::3], calls[2::3]):
            np.testing.assert_array_equal(extra, first)
        assert state.iteration == config.iterations


class TestEvaluation:
    def test_meta_test_with_true_reward_matches_expert(self, tiny_env, tiny_equilibria, demos, state, rng):
        tau = demos.trajectories[0]
        cache = {}
        for true_context in (0, 1):
            record = meta_test(
                state.inference, "ground_truth", tiny_env, tau, rng, tiny_equilibria, true_context,
                slot_map={0: true_context, 1: true_context}, cache=None,
            )
            assert record.inferred_m == true_context
            assert record.return_gap == 0.0
            assert record.policy_deviation == 0.0
        meta_test(state.inference, "learned", tiny_env, tau, rng, tiny_equilibria, 0,
                  discriminator=state.discriminator, cache=cache)
        assert len(cache) == 1 and next(iter(cache))[0] == "learned"

    def test_meta_test_arguments(self, tiny_env, tiny_equilibria, demos, state, rng):
        tau = demos.trajectories[0]
        with pytest.raises(ContractViolationError):
            meta_test(state.inference, "oracle", tiny_env, tau, rng, tiny_equilibria, 0)
        with pytest.raises(ContractViolationError):
            meta_test(state.inference, "learned", tiny_env, tau, rng, tiny_equilibria, 0)

    def test_learned_equilibria_per_context(self, tiny_env, demos, state):
        _, heldout = demos.split(0.5)
        eqs, accuracy = learned_equilibria(state, tiny_env, heldout)
        assert list(eqs) == list(tiny_env.contexts)
        assert 0.5 <= accuracy <= 1.0
        with pytest.raises(ContractViolationError):
            learned_equilibria(state, tiny_env, None)

    def test_learned_equilibria_needs_labels(self, tiny_env, demos, state):
        blind = type(demos)(demos.batch, demos.prior, demos.context_values)
        with pytest.raises(ContractViolationError):
            learned_equilibria(state, tiny_env, blind)

    def test_context_blind_state_shares_one_solve(self, tiny_env, demos):
        mf_state = train_mfairl(Simulator(tiny_env), demos, MfairlConfig(iterations=1, batch_size=4, hidden=4), seed=0)
        eqs, accuracy = learned_equilibria(mf_state, tiny_env)
        assert accuracy is None
        assert eqs[tiny_env.contexts[0]] is eqs[tiny_env.contexts[1]]

    def test_slot_alignment_agrees_with_learned_equilibria(self, tiny_env, demos, state):
        _, heldout = demos.split(0.5)
        mapping, accuracy = slot_alignment(state, heldout, tiny_env.num_contexts)
        assert sorted(mapping) == [0, 1]
        assert accuracy == learned_equilibria(state, tiny_env, heldout)[1]

    @pytest.mark.parametrize("source", ["ground_truth", "learned"])
    def test_records_cover_every_heldout_demo(self, tiny_env, tiny_equilibria, demos, state, rng, source):
        _, heldout = demos.split(0.5)
        slot_map, _ = slot_alignment(state, heldout, tiny_env.num_contexts)
        records = meta_test_records(state, tiny_env, heldout, tiny_equilibria, rng, source, slot_map)
        assert len(records) == len(heldout)
        assert [r.true_m for r in records] == heldout.reveal_contexts().tolist()
        assert {r.inferred_m for r in records} <= set(slot_map.values())
        assert all(r.return_gap >= 0.0 for r in records)
        if source == "ground_truth":
            for r in records:
                if r.inferred_m == r.true_m:
                    assert r.return_gap == 0.0 and r.policy_deviation == 0.0

    def test_records_need_labels(self, tiny_env, tiny_equilibria, demos, state, rng):
        blind = type(demos)(demos.batch, demos.prior, demos.context_values)
        with pytest.raises(ContractViolationError):
            meta_test_records(state, tiny_env, blind, tiny_equilibria, rng)
