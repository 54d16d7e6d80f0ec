import numpy as np
import pytest

from mfirl.approximator import (
    AdamState,
    FeatureCodec,
    Mlp,
    adam_from_arrays,
    adam_step,
    adam_to_arrays,
    inference_net,
    reward_net,
    sampler_net,
)
from mfirl.exceptions import ContractViolationError, NonFiniteGradientError, StaleCacheError


def numeric_grad(fn, params, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + eps
        up = fn()
        params[i] = old - eps
        down = fn()
        params[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


class TestMlp:
    @pytest.mark.parametrize("head,dims", [("scalar", [4, 5, 5, 1]), ("softmax", [4, 5, 3])])
    def test_param_gradient_matches_finite_differences(self, rng, head, dims):
        net = Mlp(dims, head=head, rng=rng)
        x = rng.normal(size=(6, 4))
        upstream = rng.normal(size=(6,) if head == "scalar" else (6, dims[-1]))
        grads, _ = net.vjp(x, upstream)
        numeric = numeric_grad(lambda: float(np.sum(net.forward(x) * upstream)), net.params)
        np.testing.assert_allclose(grads, numeric, rtol=1e-5, atol=1e-7)

    def test_input_gradient_matches_finite_differences(self, rng):
        net = Mlp([3, 4, 1], rng=rng)
        x = rng.normal(size=3)
        _, dx = net.vjp(x, 1.0)
        numeric = numeric_grad(lambda: float(net.forward(x)), x)
        np.testing.assert_allclose(dx, numeric, rtol=1e-5, atol=1e-7)

    def test_softmax_rows_normalize(self, rng):
        out = Mlp([2, 8, 3], head="softmax", rng=rng).forward(rng.normal(size=(5, 2)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert np.all(out > 0)

    def test_backward_needs_matching_forward(self, rng):
        net = Mlp([2, 3, 1], rng=rng)
        with pytest.raises(StaleCacheError):
            net.backward(np.zeros(2), 1.0)
        net.forward(np.zeros(2))
        with pytest.raises(StaleCacheError):
            net.backward(np.ones(2), 1.0)

    def test_wrong_input_width(self, rng):
        with pytest.raises(ContractViolationError):
            Mlp([2, 3, 1], rng=rng).forward(np.zeros(3))

    def test_bytes_round_trip_preserves_outputs(self, rng):
        net = Mlp([3, 4, 2], head="softmax", negative_slope=0.2, rng=rng)
        x = rng.normal(size=(4, 3))
        back = Mlp.from_bytes(net.to_bytes(iteration=7))
        assert back.layer_dims == net.layer_dims
        assert back.negative_slope == 0.2
        np.testing.assert_array_equal(back.forward(x), net.forward(x))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = np.array([1.0, -1.0])
        state = AdamState.for_params(params, lr=0.1)
        adam_step(state, params, np.array([2.0, -3.0]))
        np.testing.assert_allclose(params, [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_minimizes_quadratic(self):
        params = np.array([3.0, -2.0])
        state = AdamState.for_params(params, lr=0.05)
        for _ in range(2000):
            adam_step(state, params, 2 * params)
        np.testing.assert_allclose(params, 0.0, atol=1e-2)

    def test_non_finite_gradient_leaves_state(self):
        params = np.array([1.0])
        state = AdamState.for_params(params)
        with pytest.raises(NonFiniteGradientError):
            adam_step(state, params, np.array([np.nan]))
        assert state.step == 0
        assert params[0] == 1.0

    def test_state_arrays(self):
        params = np.ones(3)
        state = AdamState.for_params(params, lr=0.01)
        adam_step(state, params, np.array([0.1, 0.2, 0.3]))
        arrays, meta = adam_to_arrays(state, "opt")
        back = adam_from_arrays(arrays, meta, "opt")
        assert back.step == 1 and back.lr == 0.01
        np.testing.assert_array_equal(back.v, state.v)


class TestFeatureCodec:
    def test_encode_order_and_widths(self):
        codec = FeatureCodec(num_states=3, num_actions=2, num_contexts=2)
        vec = codec.encode(state=1, action=0, mean_field=np.array([0.2, 0.3, 0.5]), context=1)
        np.testing.assert_allclose(vec, [0, 1, 0, 1, 0, 0.2, 0.3, 0.5, 0, 1])
        assert codec.width(state=True, action=True, mean_field=True, context=True) == 10
        assert codec.mean_field_slice() == slice(5, 8)

    def test_batch_broadcasts_scalars(self):
        codec = FeatureCodec(2, 2, 2)
        rows = codec.encode_batch(states=np.array([0, 1, 1]), actions=1, mean_fields=np.array([0.5, 0.5]))
        assert rows.shape == (3, 6)
        np.testing.assert_allclose(rows[:, 2:4], [[0, 1]] * 3)

    def test_out_of_range_index(self):
        with pytest.raises(ContractViolationError):
            FeatureCodec(2, 2, 2).encode(state=2)

    def test_trajectory_features_average_over_time(self):
        codec = FeatureCodec(2, 2, 2)
        feats = codec.trajectory_features(np.array([[0, 1]]), np.array([[1, 1]]))
        np.testing.assert_allclose(feats, [[0.5, 0.5, 0.0, 1.0]])


def test_network_shapes(rng):
    codec = FeatureCodec(num_states=4, num_actions=3, num_contexts=2)
    assert reward_net(codec, rng, hidden=8).layer_dims == [4 + 3 + 4 + 2, 8, 8, 1]
    assert reward_net(codec, rng, with_context=False, hidden=8).input_dim == 11
    assert sampler_net(codec, rng, hidden=8).output_dim == 3
    assert inference_net(codec, rng, hidden=8).layer_dims[-1] == 2
