"""
MF-AIRL: empirical mean field, discriminator, adaptive samplers and the
adversarial training loop.

The discriminator and samplers take an optional context input so that the
PEMMFIRL learner reuses them with context-conditioned features.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Dict, Any, List, Tuple, Sequence, Union, Callable

import numpy as np

from .approximator import (
    AdamState,
    FeatureCodec,
    Mlp,
    adam_from_arrays,
    adam_step,
    adam_to_arrays,
    net_from_arrays,
    net_to_arrays,
    reward_net,
    sampler_net,
)
from .core import MeanFieldFlow, PolicyFlow, Simulator, TabularEnv, TrajectoryBatch, categorical_draw
from .exceptions import ContractViolationError, NonFiniteGradientError
from .solver import DemonstrationSet, soft_backward

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "disc_objective", "sampler_return", "wall_ms"]


def _as_batch(demos: Union[DemonstrationSet, TrajectoryBatch]) -> TrajectoryBatch:
    return demos.batch if isinstance(demos, DemonstrationSet) else demos


def empirical_mean_field(demos: Union[DemonstrationSet, TrajectoryBatch], num_states: int) -> MeanFieldFlow:
    """
    mu_hat^t(s) = fraction of demonstrations in state s at step t.

    Raises:
        ContractViolationError: If there are no demonstrations
    """
    batch = _as_batch(demos)
    if len(batch) == 0:
        raise ContractViolationError("empirical mean field needs at least one trajectory")
    T1 = batch.horizon + 1
    counts = np.zeros((T1, num_states))
    np.add.at(counts, (np.tile(np.arange(T1), len(batch)), batch.states.ravel()), 1.0)
    return MeanFieldFlow(counts / len(batch))


class Discriminator:
    """
    D(s, a) = exp(f) / (exp(f) + pi(a|s)) around a scalar reward net f.

    Inputs are encode(state, action, mean field[, context]).
    """

    def __init__(self, f_net: Mlp, codec: FeatureCodec, with_context: bool = False):
        expected = codec.width(state=True, action=True, mean_field=True, context=with_context)
        if f_net.input_dim != expected:
            raise ContractViolationError(f"reward net input {f_net.input_dim} != feature width {expected}")
        self.f_net = f_net
        self.codec = codec
        self.with_context = with_context

    @classmethod
    def create(cls, codec: FeatureCodec, rng: np.random.Generator, with_context: bool = False, **kwargs) -> "Discriminator":
        return cls(reward_net(codec, rng, with_context=with_context, **kwargs), codec, with_context)

    def inputs(self, states, actions, mean_fields, contexts=None) -> np.ndarray:
        return self.codec.encode_batch(
            states, actions, mean_fields, contexts if self.with_context else None,
        )

    def f_values(self, states, actions, mean_fields, contexts=None) -> np.ndarray:
        return self.f_net.forward(self.inputs(states, actions, mean_fields, contexts))

    def reward_table(self, mu: np.ndarray, context: Optional[int] = None) -> np.ndarray:
        """f(s, a, mu[, m]) for every (s, a), shape (S, A)."""
        S, A = self.codec.num_states, self.codec.num_actions
        s, a = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
        ctx = None if context is None else np.full(S * A, context)
        return self.f_values(s.ravel(), a.ravel(), mu, ctx).reshape(S, A)

    def reward_override(self, context: Optional[int] = None) -> Callable[[np.ndarray, Any], np.ndarray]:
        """Adapter for solver reward_override; the solver's context argument is ignored."""
        return lambda mu, _m: self.reward_table(mu, context)


def log_discriminator(f: np.ndarray, log_pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(log D, log(1 - D)) computed in log space."""
    denom = np.logaddexp(f, log_pi)
    return f - denom, log_pi - denom


def discriminator_value(
    d: Discriminator,
    s: int,
    a: int,
    mu_hat,
    m: Optional[int],
    pi_prob: float,
) -> float:
    """
    D = exp(f) / (exp(f) + pi); exactly 1 when pi_prob is 0.

    Example:
        discriminator_value(d, 0, 1, mu, None, 0.3)
    """
    if pi_prob < 0:
        raise ContractViolationError("pi_prob must be non-negative")
    mu = getattr(mu_hat, "probs", mu_hat)
    f = d.f_values([s], [a], mu, None if m is None else [m])[0]
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi_prob)
    log_d, _ = log_discriminator(np.array([f]), np.array([log_pi]))
    return float(np.exp(log_d[0]))


class SamplerFlow:
    """One softmax network per timestep t < T; the slice at T is uniform"""

    def __init__(self, nets: Sequence[Mlp], codec: FeatureCodec, with_context: bool = False):
        self.nets = list(nets)
        self.codec = codec
        self.with_context = with_context

    @classmethod
    def create(cls, codec: FeatureCodec, horizon: int, rng: np.random.Generator, with_context: bool = False, **kwargs) -> "SamplerFlow":
        return cls([sampler_net(codec, rng, with_context=with_context, **kwargs) for _ in range(horizon)], codec, with_context)

    @property
    def horizon(self) -> int:
        return len(self.nets)

    def inputs(self, states, contexts=None) -> np.ndarray:
        return self.codec.encode_batch(states, contexts=contexts if self.with_context else None)

    def probs(self, t: int, states, contexts=None) -> np.ndarray:
        if t >= self.horizon:
            return np.full((len(states), self.codec.num_actions), 1.0 / self.codec.num_actions)
        return self.nets[t].forward(self.inputs(states, contexts))

    def log_prob(self, batch: TrajectoryBatch, contexts=None) -> np.ndarray:
        """log pi^t(a^t|s^t[, m]) for t < T, shape (n, T)."""
        out = np.empty((len(batch), self.horizon))
        rows = np.arange(len(batch))
        for t in range(self.horizon):
            p = self.probs(t, batch.states[:, t], contexts)
            with np.errstate(divide="ignore"):
                out[:, t] = np.log(p[rows, batch.actions[:, t]])
        return out

    def policy_flow(self, context: Optional[int] = None) -> PolicyFlow:
        S, A = self.codec.num_states, self.codec.num_actions
        tables = np.full((self.horizon + 1, S, A), 1.0 / A)
        states = np.arange(S)
        ctx = None if context is None else np.full(S, context)
        for t in range(self.horizon):
            tables[t] = self.probs(t, states, ctx)
        return PolicyFlow(tables)


@dataclass
class Rollouts:
    """Sampler rollouts: trajectories plus the context index each was drawn with"""
    batch: TrajectoryBatch
    contexts: np.ndarray


def rollout_samplers(
    simulator: Simulator,
    samplers: SamplerFlow,
    mu_flows: np.ndarray,
    contexts: np.ndarray,
    rng: np.random.Generator,
) -> Rollouts:
    """
    Roll out one trajectory per entry of `contexts` through the simulator.

    Args:
        simulator: Sampling-only dynamics
        samplers: Policy networks
        mu_flows: (K, T+1, S) injected mean-field flows, one per context index
        contexts: (n,) context index per trajectory, selecting the flow and
            the sampler's context input
        rng: Injected random source
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    n, T = contexts.shape[0], samplers.horizon
    states = np.empty((n, T + 1), dtype=np.int64)
    actions = np.empty((n, T + 1), dtype=np.int64)
    states[:, 0] = simulator.reset(n, rng)
    ctx = contexts if samplers.with_context else None
    for t in range(T + 1):
        actions[:, t] = categorical_draw(samplers.probs(t, states[:, t], ctx), rng)
        if t == T:
            break
        nxt = np.empty(n, dtype=np.int64)
        for k in np.unique(contexts):
            rows = np.flatnonzero(contexts == k)
            nxt[rows] = simulator.step(states[rows, t], actions[rows, t], mu_flows[k, t], rng)
        states[:, t + 1] = nxt
    return Rollouts(TrajectoryBatch(states, actions), contexts)


def _step_inputs(batch: TrajectoryBatch, mu_flows: np.ndarray, contexts: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Flattened (i, t) rows for t < T: states, actions, mean fields, contexts."""
    n, T = len(batch), batch.horizon
    t_idx = np.tile(np.arange(T), n)
    c_idx = np.repeat(contexts, T)
    return (
        batch.states[:, :T].ravel(),
        batch.actions[:, :T].ravel(),
        mu_flows[c_idx, t_idx],
        c_idx,
    )


def discriminator_objective(
    d: Discriminator,
    samplers: SamplerFlow,
    mu_flows: np.ndarray,
    expert: Rollouts,
    sampled: Rollouts,
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean log D over expert pairs plus mean log(1 - D) over sampled pairs, with the pieces for its gradient."""
    x_e = d.inputs(*_step_inputs(expert.batch, mu_flows, expert.contexts))
    x_s = d.inputs(*_step_inputs(sampled.batch, mu_flows, sampled.contexts))
    ctx_e = expert.contexts if samplers.with_context else None
    ctx_s = sampled.contexts if samplers.with_context else None
    log_pi_e = samplers.log_prob(expert.batch, ctx_e).ravel()
    log_pi_s = samplers.log_prob(sampled.batch, ctx_s).ravel()
    f_e = d.f_net.forward(x_e)
    f_s = d.f_net.forward(x_s)
    log_d_e, _ = log_discriminator(f_e, log_pi_e)
    _, log_1md_s = log_discriminator(f_s, log_pi_s)
    objective = float(np.mean(log_d_e) + np.mean(log_1md_s))
    # d/df log D = 1 - D ; d/df log(1 - D) = -D
    up_e = -np.expm1(log_d_e) / log_d_e.size
    up_s = -np.exp(f_s - np.logaddexp(f_s, log_pi_s)) / log_1md_s.size
    return objective, x_e, up_e, x_s, up_s


def discriminator_update(
    d: Discriminator,
    expert: Rollouts,
    sampled: Rollouts,
    mu_flows: np.ndarray,
    samplers: SamplerFlow,
    opt: AdamState,
) -> float:
    """
    One Adam ascent step on the discriminator objective.

    Args:
        d: Discriminator to update
        expert: Expert trajectories with the context index used for their features
        sampled: Sampler rollouts with their context indices
        mu_flows: (K, T+1, S) mean-field flows held fixed during the update
        samplers: Current samplers supplying pi(a|s)
        opt: Adam state for the reward parameters

    Returns:
        The objective before the step (NaN steps are skipped and logged)
    """
    if len(expert.batch) == 0 or len(sampled.batch) == 0:
        raise ContractViolationError("discriminator update needs nonempty batches")
    objective, x_e, up_e, x_s, up_s = discriminator_objective(d, samplers, mu_flows, expert, sampled)
    grad = d.f_net.vjp(np.concatenate([x_e, x_s]), np.concatenate([up_e, up_s]))[0]
    try:
        adam_step(opt, d.f_net.params, -grad)
    except NonFiniteGradientError:
        logger.warning("skipped discriminator step objective=%s", objective)
    return objective


def sampler_update(
    samplers: SamplerFlow,
    d: Discriminator,
    mu_flows: np.ndarray,
    rollouts: Rollouts,
    opts: Sequence[AdamState],
) -> float:
    """
    REINFORCE step on E[sum_t f - log pi] with a per-timestep mean baseline.

    Returns:
        Mean entropy-augmented return of the rollouts
    """
    batch, contexts = rollouts.batch, rollouts.contexts
    n, T = len(batch), samplers.horizon
    ctx = contexts if samplers.with_context else None
    f = d.f_values(*_step_inputs(batch, mu_flows, contexts)).reshape(n, T)
    log_pi = samplers.log_prob(batch, ctx)
    rewards = f - log_pi
    to_go = np.cumsum(rewards[:, ::-1], axis=1)[:, ::-1]
    advantage = to_go - to_go.mean(axis=0, keepdims=True)
    mean_return = float(np.mean(to_go[:, 0])) if T > 0 else 0.0
    if not np.all(np.isfinite(advantage)):
        logger.warning("skipped sampler step: non-finite returns")
        return mean_return
    rows = np.arange(n)
    for t in range(T):
        x = samplers.inputs(batch.states[:, t], ctx)
        p = samplers.nets[t].forward(x)
        up = np.zeros_like(p)
        up[rows, batch.actions[:, t]] = advantage[:, t] / (p[rows, batch.actions[:, t]] * n)
        grad = samplers.nets[t].backward(x, up)[0]
        try:
            adam_step(opts[t], samplers.nets[t].params, -grad)
        except NonFiniteGradientError:
            logger.warning("skipped sampler step t=%d", t)
    return mean_return


def exact_sampler(
    env: TabularEnv,
    f: Callable[[np.ndarray, Any], np.ndarray],
    mu_hat_flow: MeanFieldFlow,
    m=None,
    backup: str = "expected",
) -> PolicyFlow:
    """
    Soft-optimal policy flow for reward f under the injected mean-field flow.

    Test-side stand-in for trained samplers; it needs the true dynamics.

    Args:
        env: Environment with known kernels
        f: (mu, m) -> (S, A) reward table
        mu_hat_flow: Flow fixing the transitions and f's mean-field input
        m: Passed through to f
        backup: See solver.soft_backward
    """
    rewards = np.stack([f(mu_hat_flow.probs[t], m) for t in range(mu_hat_flow.horizon)])
    _, tables = soft_backward(env, mu_hat_flow, rewards, backup=backup)
    return PolicyFlow(tables)


@dataclass
class MfairlConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    sampler_lr: float = 1e-4
    sampler_steps: int = 1
    hidden: int = 64
    negative_slope: float = 0.01
    log_every: int = 100
    record_wall_time: bool = False


@dataclass
class MfairlState:
    """Everything needed to resume an MF-AIRL run"""
    discriminator: Discriminator
    samplers: SamplerFlow
    disc_opt: AdamState
    sampler_opts: List[AdamState]
    mu_hat: MeanFieldFlow
    rng: np.random.Generator
    iteration: int = 0
    log: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def initial(cls, demos: DemonstrationSet, num_states: int, num_actions: int, config: MfairlConfig, seed: int) -> "MfairlState":
        rng = np.random.default_rng(seed)
        codec = FeatureCodec(num_states, num_actions, 1)
        d = Discriminator.create(codec, rng, hidden=config.hidden, negative_slope=config.negative_slope)
        samplers = SamplerFlow.create(codec, demos.horizon, rng, hidden=config.hidden, negative_slope=config.negative_slope)
        return cls(
            d, samplers, AdamState.for_params(d.f_net.params, config.lr),
            [AdamState.for_params(n.params, config.sampler_lr) for n in samplers.nets],
            empirical_mean_field(demos, num_states), rng,
        )

    def to_checkpoint(self) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        arrays, meta = {}, {"algorithm": "mfairl", "iteration": self.iteration,
                            "rng": self.rng.bit_generator.state, "log": self.log,
                            "num_states": self.discriminator.codec.num_states,
                            "num_actions": self.discriminator.codec.num_actions,
                            "horizon": self.samplers.horizon}
        for a, m in (net_to_arrays(self.discriminator.f_net, "reward"), adam_to_arrays(self.disc_opt, "reward_opt")):
            arrays.update(a)
            meta.update(m)
        for t, (net, opt) in enumerate(zip(self.samplers.nets, self.sampler_opts)):
            for a, m in (net_to_arrays(net, f"sampler{t}"), adam_to_arrays(opt, f"sampler{t}_opt")):
                arrays.update(a)
                meta.update(m)
        arrays["mu_hat"] = self.mu_hat.probs
        return arrays, meta

    @classmethod
    def from_checkpoint(cls, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> "MfairlState":
        codec = FeatureCodec(meta["num_states"], meta["num_actions"], 1)
        T = meta["horizon"]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(
            Discriminator(net_from_arrays(arrays, meta, "reward"), codec),
            SamplerFlow([net_from_arrays(arrays, meta, f"sampler{t}") for t in range(T)], codec),
            adam_from_arrays(arrays, meta, "reward_opt"),
            [adam_from_arrays(arrays, meta, f"sampler{t}_opt") for t in range(T)],
            MeanFieldFlow(arrays["mu_hat"]), rng, int(meta["iteration"]), list(meta["log"]),
        )


def train_mfairl(
    simulator: Simulator,
    demos: DemonstrationSet,
    config: MfairlConfig,
    seed: int = 0,
    state: Optional[MfairlState] = None,
    on_iteration: Optional[Callable[[MfairlState], None]] = None,
) -> MfairlState:
    """
    Context-blind MF-AIRL training loop.

    Args:
        simulator: Sampling-only environment
        demos: Expert demonstrations (contexts are never read)
        config: Budget and optimizer settings
        seed: Seed for initialization and sampling
        state: Resume from this state instead of initializing
        on_iteration: Callback after every iteration (checkpointing)

    Returns:
        Final MfairlState with the per-iteration log
    """
    if state is None:
        state = MfairlState.initial(demos, simulator.num_states, simulator.num_actions, config, seed)
    mu_flows = state.mu_hat.probs[None]
    B = config.batch_size
    while state.iteration < config.iterations:
        start = time.perf_counter()
        rng = state.rng
        expert = Rollouts(demos.sample(B, rng), np.zeros(B, dtype=np.int64))
        sampled = rollout_samplers(simulator, state.samplers, mu_flows, np.zeros(B, dtype=np.int64), rng)
        disc = discriminator_update(state.discriminator, expert, sampled, mu_flows, state.samplers, state.disc_opt)
        ret = 0.0
        for step in range(config.sampler_steps):
            if step:
                sampled = rollout_samplers(simulator, state.samplers, mu_flows, sampled.contexts, rng)
            ret = sampler_update(state.samplers, state.discriminator, mu_flows, sampled, state.sampler_opts)
        state.iteration += 1
        row = {"iter": state.iteration, "disc_objective": disc, "sampler_return": ret}
        if config.record_wall_time:
            row["wall_ms"] = (time.perf_counter() - start) * 1000.0
        state.log.append(row)
        if state.iteration % config.log_every == 0:
            logger.info("mfairl iter=%d disc_objective=%.6f sampler_return=%.6f", state.iteration, disc, ret)
        if on_iteration is not None:
            on_iteration(state)
    return state
