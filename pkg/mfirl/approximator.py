"""
Feedforward approximator, Adam optimizer and one-hot feature encodings.

The same Mlp class houses the reward network f_omega, the context inference
model q_psi and the per-timestep samplers pi_theta.
"""

import logging
from dataclasses import dataclass
from typing import Optional, List, Tuple, Sequence, Dict, Any, Union

import numpy as np

from .checkpoint import pack_arrays, unpack_arrays
from .exceptions import ContractViolationError, StaleCacheError, NonFiniteGradientError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
HIDDEN = 64
HEADS = ("scalar", "softmax")


class Mlp:
    """
    Fully connected network with leaky-rectifier hidden layers.

    Parameters live in one flat float64 vector; per-layer weights and biases
    are views into it, so optimizers update `params` in place.

    Example:
        net = Mlp([8, 64, 64, 1], head="scalar", rng=np.random.default_rng(0))
        out = net.forward(x)                     # (n,)
        grads, dx = net.backward(x, np.ones(n))  # summed param grads, per-row input grads
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        head: str = "scalar",
        negative_slope: float = LEAKY_SLOPE,
        rng: Optional[np.random.Generator] = None,
        params: Optional[np.ndarray] = None,
    ):
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise ContractViolationError(f"invalid layer_dims {list(layer_dims)}")
        if head not in HEADS:
            raise ContractViolationError(f"head must be one of {HEADS}, got '{head}'")
        if head == "scalar" and layer_dims[-1] != 1:
            raise ContractViolationError("a scalar head needs a final layer of width 1")
        self.layer_dims = [int(d) for d in layer_dims]
        self.head = head
        self.negative_slope = float(negative_slope)
        self.num_params = sum((d_in + 1) * d_out for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if params is not None:
            params = np.array(params, dtype=float)
            if params.shape != (self.num_params,):
                raise ContractViolationError(f"expected {self.num_params} parameters, got {params.shape}")
            self.params = params
        else:
            self.params = np.zeros(self.num_params)
            self._glorot(rng if rng is not None else np.random.default_rng(0))
        self._cache = None

    def _glorot(self, rng: np.random.Generator) -> None:
        for w, b in self.layers():
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            b[...] = 0.0

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(weight (d_in, d_out), bias (d_out,)) views into `params`."""
        return self._split(self.params)

    def _split(self, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        out, offset = [], 0
        for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = flat[offset:offset + d_in * d_out].reshape(d_in, d_out)
            offset += d_in * d_out
            b = flat[offset:offset + d_out]
            offset += d_out
            out.append((w, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.head, self.negative_slope, params=self.params.copy())

    def to_bytes(self, **metadata) -> bytes:
        arrays, meta = net_to_arrays(self, "net")
        meta.update(metadata)
        return pack_arrays(arrays, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        arrays, meta = unpack_arrays(blob)
        return net_from_arrays(arrays, meta, "net")

    def _as_rows(self, x) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        if rows.ndim != 2 or rows.shape[1] != self.input_dim:
            raise ContractViolationError(f"input width {rows.shape[-1]} != layer_dims[0]={self.input_dim}")
        return rows, single

    def forward(self, x) -> np.ndarray:
        """
        Evaluate the network and cache activations for backward().

        Args:
            x: (d,) or (n, d) input

        Returns:
            Scalar head: scalar or (n,); softmax head: (k,) or (n, k)
        """
        rows, single = self._as_rows(x)
        pre, post = [], [rows]
        h = rows
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            pre.append(z)
            if i < len(layers) - 1:
                h = np.where(z > 0, z, self.negative_slope * z)
                post.append(h)
        logits = pre[-1]
        if self.head == "softmax":
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            out = e / e.sum(axis=1, keepdims=True)
        else:
            out = logits[:, 0]
        self._cache = (rows.copy(), pre, post, out)
        if single:
            return out[0] if self.head == "scalar" else out[0].copy()
        return out

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def backward(self, x, upstream) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gradients of sum_i <upstream_i, output_i> for the cached forward pass.

        Args:
            x: The input given to the last forward() call
            upstream: dL/d(output), same shape as the forward output
                (for a softmax head: the gradient w.r.t. the probabilities)

        Returns:
            (flat parameter gradient summed over rows, input gradient per row)

        Raises:
            StaleCacheError: If no forward pass for `x` is cached
        """
        rows, single = self._as_rows(x)
        if self._cache is None or not np.array_equal(self._cache[0], rows):
            raise StaleCacheError("backward() called without a matching forward() pass")
        _, pre, post, out = self._cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None] if self.head == "scalar" else g[None, :]
        if self.head == "softmax":
            g = g.reshape(out.shape)
            dz = out * (g - np.sum(out * g, axis=1, keepdims=True))
        else:
            dz = g.reshape(-1, 1)
        grads = np.zeros_like(self.params)
        grad_layers = self._split(grads)
        layers = self.layers()
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = grad_layers[i]
            gw[...] = post[i].T @ dz
            gb[...] = dz.sum(axis=0)
            dh = dz @ w.T
            if i > 0:
                dz = dh * np.where(pre[i - 1] > 0, 1.0, self.negative_slope)
        return grads, (dh[0] if single else dh)

    def vjp(self, x, upstream) -> Tuple[np.ndarray, np.ndarray]:
        """forward() followed by backward() on the same input."""
        self.forward(x)
        return self.backward(x, upstream)


@dataclass
class AdamState:
    """Adam moment accumulators for one flat parameter vector"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-4) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """
    One bias-corrected Adam descent step, applied to `params` in place.

    Raises:
        NonFiniteGradientError: If any gradient entry is NaN or infinite
            (state and params are left untouched)
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractViolationError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("refusing Adam step on non-finite gradients")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


@dataclass(frozen=True)
class FeatureCodec:
    """One-hot state/action/context encodings; mean fields are passed through raw"""
    num_states: int
    num_actions: int
    num_contexts: int

    def width(self, state: bool = False, action: bool = False, mean_field: bool = False, context: bool = False) -> int:
        return (
            self.num_states * state + self.num_actions * action
            + self.num_states * mean_field + self.num_contexts * context
        )

    def mean_field_slice(self, state: bool = True, action: bool = True) -> slice:
        """Position of the mean-field block inside an encoded vector."""
        start = self.num_states * state + self.num_actions * action
        return slice(start, start + self.num_states)

    @staticmethod
    def _one_hot(idx: np.ndarray, size: int, what: str) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise ContractViolationError(f"{what} index outside 0..{size - 1}")
        out = np.zeros((idx.shape[0], size))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out

    def encode_batch(
        self,
        states: Optional[np.ndarray] = None,
        actions: Optional[np.ndarray] = None,
        mean_fields: Optional[np.ndarray] = None,
        contexts: Optional[Union[int, np.ndarray]] = None,
        n: Optional[int] = None,
    ) -> np.ndarray:
        """
        Encode n rows in the order state, action, mean field, context.

        Scalars and single mean-field vectors are broadcast to n rows.
        """
        for part in (states, actions, contexts):
            if part is not None and np.ndim(part) == 1:
                n = len(part)
        if n is None:
            n = 1 if mean_fields is None or np.ndim(mean_fields) == 1 else len(mean_fields)
        blocks = []
        if states is not None:
            blocks.append(self._one_hot(np.broadcast_to(states, (n,)), self.num_states, "state"))
        if actions is not None:
            blocks.append(self._one_hot(np.broadcast_to(actions, (n,)), self.num_actions, "action"))
        if mean_fields is not None:
            mf = np.asarray(mean_fields, dtype=float)
            if mf.shape[-1] != self.num_states:
                raise ContractViolationError(f"mean field width {mf.shape[-1]} != num_states {self.num_states}")
            blocks.append(np.broadcast_to(mf, (n, self.num_states)))
        if contexts is not None:
            blocks.append(self._one_hot(np.broadcast_to(contexts, (n,)), self.num_contexts, "context"))
        if not blocks:
            raise ContractViolationError("encode needs at least one part")
        return np.concatenate(blocks, axis=1)

    def encode(self, state=None, action=None, mean_field=None, context=None) -> np.ndarray:
        """Single-vector form of encode_batch."""
        mf = None if mean_field is None else getattr(mean_field, "probs", mean_field)
        return self.encode_batch(
            None if state is None else [state],
            None if action is None else [action],
            mf,
            None if context is None else [context],
            n=1,
        )[0]

    def trajectory_features(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Mean over time of (one-hot s ++ one-hot a), one row per trajectory."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        n, length = states.shape
        feats = np.zeros((n, self.num_states + self.num_actions))
        rows = np.repeat(np.arange(n), length)
        np.add.at(feats, (rows, states.ravel()), 1.0)
        np.add.at(feats, (rows, self.num_states + actions.ravel()), 1.0)
        return feats / length


def reward_net(
    codec: FeatureCodec,
    rng: np.random.Generator,
    with_context: bool = True,
    hidden: int = HIDDEN,
    negative_slope: float = LEAKY_SLOPE,
) -> Mlp:
    """f(s, a, mu[, m]): input -> hidden -> hidden -> scalar."""
    width = codec.width(state=True, action=True, mean_field=True, context=with_context)
    return Mlp([width, hidden, hidden, 1], head="scalar", negative_slope=negative_slope, rng=rng)


def sampler_net(
    codec: FeatureCodec,
    rng: np.random.Generator,
    with_context: bool = True,
    hidden: int = HIDDEN,
    negative_slope: float = LEAKY_SLOPE,
) -> Mlp:
    """pi(.|s[, m]): input -> hidden -> hidden -> |A| -> softmax over |A|."""
    width = codec.width(state=True, context=with_context)
    A = codec.num_actions
    return Mlp([width, hidden, hidden, A, A], head="softmax", negative_slope=negative_slope, rng=rng)


def inference_net(
    codec: FeatureCodec,
    rng: np.random.Generator,
    hidden: int = HIDDEN,
    negative_slope: float = LEAKY_SLOPE,
) -> Mlp:
    """q(m|tau) over pooled trajectory features: input -> hidden -> hidden -> softmax over |M|."""
    width = codec.width(state=True, action=True)
    return Mlp([width, hidden, hidden, codec.num_contexts], head="softmax", negative_slope=negative_slope, rng=rng)


def net_to_arrays(net: Mlp, prefix: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Arrays and header metadata describing `net`, keyed under `prefix`."""
    meta = {"layer_dims": net.layer_dims, "head": net.head, "negative_slope": net.negative_slope}
    return {f"{prefix}.params": net.params}, {prefix: meta}


def net_from_arrays(arrays: Dict[str, np.ndarray], meta: Dict[str, Any], prefix: str) -> Mlp:
    layout = meta[prefix]
    return Mlp(layout["layer_dims"], layout["head"], layout["negative_slope"], params=arrays[f"{prefix}.params"])


def adam_to_arrays(state: AdamState, prefix: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    arrays = {f"{prefix}.m": state.m, f"{prefix}.v": state.v}
    meta = {prefix: {
        "step": state.step, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "epsilon": state.epsilon,
    }}
    return arrays, meta


def adam_from_arrays(arrays: Dict[str, np.ndarray], meta: Dict[str, Any], prefix: str) -> AdamState:
    layout = meta[prefix]
    return AdamState(
        arrays[f"{prefix}.m"].copy(), arrays[f"{prefix}.v"].copy(), step=int(layout["step"]), lr=layout["lr"],
        beta1=layout["beta1"], beta2=layout["beta2"], epsilon=layout["epsilon"],
    )
