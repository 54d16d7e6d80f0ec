"""
PEMMFIRL: context inference, the context-conditioned mean-field estimator,
the mutual-information-regularized gradient estimators and meta-train/meta-test.

Notation used below: for a trajectory tau and context m,

    F(tau, m) = sum_{t<T} f(s^t, a^t, mu_hat^t(.|m), m) + sum_{t<=T} log mu_hat^t(s^t|m)

so that the learner's trajectory model is p(tau|m) = exp(F(tau, m)) / Z_m and
kappa(tau, m) = dF/dpsi.

Every estimator is a linear combination of per-trajectory gradients, so each
is computed with one backward pass whose upstream carries the coefficients.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Dict, Any, List, Tuple, Callable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .approximator import (
    AdamState,
    FeatureCodec,
    Mlp,
    adam_from_arrays,
    adam_step,
    adam_to_arrays,
    inference_net,
    net_from_arrays,
    net_to_arrays,
)
from .core import MeanFieldFlow, Simulator, TabularEnv, Trajectory, TrajectoryBatch, categorical_draw
from .exceptions import ContractViolationError, DegenerateContextError, NonFiniteGradientError
from .mfairl import (
    Discriminator,
    Rollouts,
    SamplerFlow,
    _step_inputs,
    discriminator_update,
    rollout_samplers,
    sampler_update,
)
from .metrics import expected_return, inference_accuracy, policy_deviation
from .solver import DemonstrationSet, Ermfne, solve_with_backoff

logger = logging.getLogger(__name__)

MIN_MASS = 1e-12
MIN_DENSITY = 1e-12


class ContextInferenceModel:
    """q(m|tau): softmax network over mean-pooled (one-hot s ++ one-hot a) features"""

    def __init__(self, net: Mlp, codec: FeatureCodec):
        if net.head != "softmax" or net.output_dim != codec.num_contexts:
            raise ContractViolationError("inference net must be a softmax over num_contexts")
        self.net = net
        self.codec = codec

    @classmethod
    def create(cls, codec: FeatureCodec, rng: np.random.Generator, **kwargs) -> "ContextInferenceModel":
        return cls(inference_net(codec, rng, **kwargs), codec)

    @property
    def num_contexts(self) -> int:
        return self.codec.num_contexts

    def features(self, batch: TrajectoryBatch) -> np.ndarray:
        return self.codec.trajectory_features(batch.states, batch.actions)

    def probs(self, batch: TrajectoryBatch) -> np.ndarray:
        return self.net.forward(self.features(batch))

    def infer(self, tau: Trajectory) -> np.ndarray:
        return self.probs(TrajectoryBatch.from_trajectories([tau]))[0]


def infer_context(q: ContextInferenceModel, tau: Trajectory) -> np.ndarray:
    """Posterior over context slots for one trajectory."""
    if tau.horizon < 0:
        raise ContractViolationError("empty trajectory")
    return q.infer(tau)


def synthetic_contexts(q: ContextInferenceModel, expert_batch: TrajectoryBatch, rng: np.random.Generator) -> np.ndarray:
    """One draw m ~ q(.|tau_E) per expert trajectory."""
    if len(expert_batch) == 0:
        raise ContractViolationError("synthetic_contexts needs a nonempty batch")
    return categorical_draw(q.probs(expert_batch), rng).astype(np.int64)


@dataclass
class ConditionalMeanFieldEstimate:
    """
    mu_hat^t(s|m) = sum_j q(m|tau_j) 1{s_j^t = s} / sum_j q(m|tau_j).

    Attributes:
        probs: (M, T+1, S) normalized estimate
        responsibilities: (N, M) q(m|tau_j) over the demo pool
        weights: (M,) column sums of the responsibilities
        pool_states: (N, T+1) demo states
        pool_features: (N, S+A) inference-model inputs of the pool
        model: The inference model that produced the responsibilities
        clamp_count: Number of mu_hat(s^t|m) lookups clamped to 1e-12
    """
    probs: np.ndarray
    responsibilities: np.ndarray
    weights: np.ndarray
    pool_states: np.ndarray
    pool_features: np.ndarray
    model: ContextInferenceModel
    clamp_count: int = 0

    @property
    def num_contexts(self) -> int:
        return self.probs.shape[0]

    @property
    def horizon(self) -> int:
        return self.probs.shape[1] - 1

    def flow(self, m: int) -> MeanFieldFlow:
        return MeanFieldFlow(self.probs[m])


def conditional_empirical_mean_field(q: ContextInferenceModel, demos) -> ConditionalMeanFieldEstimate:
    """
    Responsibility-weighted empirical mean field per context slot.

    Args:
        q: Inference model
        demos: DemonstrationSet or TrajectoryBatch (labels are never read)

    Raises:
        DegenerateContextError: If a slot's total responsibility is < 1e-12
    """
    batch = demos.batch if isinstance(demos, DemonstrationSet) else demos
    if len(batch) == 0:
        raise ContractViolationError("conditional mean field needs at least one trajectory")
    feats = q.features(batch)
    resp = q.net.forward(feats)
    probs, weights = responsibility_weighted_mean_field(batch.states, resp, q.codec.num_states)
    return ConditionalMeanFieldEstimate(probs, resp, weights, batch.states.copy(), feats, q)


def responsibility_weighted_mean_field(
    states: np.ndarray,
    responsibilities: np.ndarray,
    num_states: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (M, T+1, S) weighted state histograms and the (M,) total weights.

    Raises:
        DegenerateContextError: If a column's total weight is < 1e-12
    """
    weights = responsibilities.sum(axis=0)
    for m in range(responsibilities.shape[1]):
        if weights[m] < MIN_MASS:
            raise DegenerateContextError(m, float(weights[m]))
    n, T1 = states.shape
    onehot = np.zeros((n, T1, num_states))
    n_idx, t_idx = np.meshgrid(np.arange(n), np.arange(T1), indexing="ij")
    onehot[n_idx, t_idx, states] = 1.0
    return np.einsum("jm,jts->mts", responsibilities, onehot) / weights[:, None, None], weights


def _check_contexts(contexts: np.ndarray, est: ConditionalMeanFieldEstimate) -> np.ndarray:
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.size and (contexts.min() < 0 or contexts.max() >= est.num_contexts):
        raise ContractViolationError("context index outside the inference model's slots")
    return contexts


def reward_inputs(d: Discriminator, est: ConditionalMeanFieldEstimate, batch: TrajectoryBatch, contexts) -> np.ndarray:
    """Reward-net rows (i, t) for t < T with mu_hat^t(.|m_i) as the mean-field input."""
    return d.inputs(*_step_inputs(batch, est.probs, _check_contexts(contexts, est)))


def trajectory_energy(d: Discriminator, est: ConditionalMeanFieldEstimate, batch: TrajectoryBatch, contexts) -> np.ndarray:
    """F(tau_i, m_i) per trajectory; -inf where mu_hat(s^t|m) = 0."""
    contexts = _check_contexts(contexts, est)
    n, T = len(batch), batch.horizon
    f = d.f_net.forward(reward_inputs(d, est, batch, contexts)).reshape(n, T).sum(axis=1) if T else np.zeros(n)
    dens = est.probs[contexts[:, None], np.arange(T + 1)[None, :], batch.states]
    with np.errstate(divide="ignore"):
        return f + np.log(dens).sum(axis=1)


def log_q(q: ContextInferenceModel, batch: TrajectoryBatch, contexts) -> np.ndarray:
    p = q.probs(batch)
    with np.errstate(divide="ignore"):
        return np.log(p[np.arange(len(batch)), np.asarray(contexts, dtype=np.int64)])


def omega_combination(d: Discriminator, est: ConditionalMeanFieldEstimate, batch: TrajectoryBatch, contexts, coefs) -> np.ndarray:
    """sum_i coefs_i sum_{t<T} df(s_i^t, a_i^t, mu_hat^t(.|m_i), m_i)/domega."""
    T = batch.horizon
    if len(batch) == 0 or T == 0:
        return np.zeros(d.f_net.num_params)
    x = reward_inputs(d, est, batch, contexts)
    return d.f_net.vjp(x, np.repeat(np.asarray(coefs, dtype=float), T))[0]


def kappa_combination(d: Discriminator, est: ConditionalMeanFieldEstimate, batch: TrajectoryBatch, contexts, coefs) -> np.ndarray:
    """
    sum_i coefs_i kappa(tau_i, m_i) as a vector over the inference-model parameters.

    With u_t = grad_mu f_t (t < T) + e_{s^t} / mu_hat^t(s^t|m), the quotient rule
    through the normalized estimator gives d<u_t, mu_hat^t>/d q(m|tau_j) =
    (u_t[s_j^t] - <mu_hat^t, u_t>) / W_m. The u_t are aggregated per context
    first, then pulled back through q with a single backward pass.
    """
    contexts = _check_contexts(contexts, est)
    coefs = np.asarray(coefs, dtype=float)
    q = est.model
    S, M = q.codec.num_states, est.num_contexts
    n, T = len(batch), batch.horizon
    t_all = np.arange(T + 1)
    u = np.zeros((n, T + 1, S))
    if n and T:
        x = reward_inputs(d, est, batch, contexts)
        _, dx = d.f_net.vjp(x, np.ones(n * T))
        u[:, :T, :] = dx[:, d.codec.mean_field_slice()].reshape(n, T, S)
    dens = est.probs[contexts[:, None], t_all[None, :], batch.states]
    clamped = int(np.sum(dens < MIN_DENSITY))
    if clamped:
        est.clamp_count += clamped
        logger.warning("kappa clamped %d mean-field densities below %.0e", clamped, MIN_DENSITY)
    n_idx, t_idx = np.meshgrid(np.arange(n), t_all, indexing="ij")
    u[n_idx, t_idx, batch.states] += 1.0 / np.maximum(dens, MIN_DENSITY)
    agg = np.zeros((M, T + 1, S))
    np.add.at(agg, contexts, coefs[:, None, None] * u)
    upstream = np.zeros((est.pool_states.shape[0], M))
    for m in range(M):
        at_pool = agg[m][t_all[None, :], est.pool_states].sum(axis=1)
        inner = float(np.sum(est.probs[m] * agg[m]))
        upstream[:, m] = (at_pool - inner) / est.weights[m]
    return q.net.vjp(est.pool_features, upstream)[0]


def kappa(tau: Trajectory, m: int, f: Discriminator, est: ConditionalMeanFieldEstimate) -> np.ndarray:
    """kappa(tau, m) = dF(tau, m)/dpsi for a single trajectory."""
    batch = TrajectoryBatch.from_trajectories([tau])
    return kappa_combination(f, est, batch, [m], [1.0])


def score_combination(q: ContextInferenceModel, batch: TrajectoryBatch, contexts, coefs) -> np.ndarray:
    """sum_i coefs_i d log q(m_i|tau_i)/dpsi."""
    contexts = np.asarray(contexts, dtype=np.int64)
    feats = q.features(batch)
    p = q.net.forward(feats)
    rows = np.arange(len(batch))
    upstream = np.zeros_like(p)
    upstream[rows, contexts] = np.asarray(coefs, dtype=float) / p[rows, contexts]
    return q.net.backward(feats, upstream)[0]


def centering_coefficients(
    contexts: np.ndarray,
    ref_contexts: np.ndarray,
    a: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Coefficients of (1/N) sum_i a_i (g_i - mean_{k: m'_k = m_i} g'_k).

    Returns:
        (coefficients on the batch, coefficients on the reference batch).
        A context absent from the reference batch is centered on the batch's
        own mean for that context.
    """
    N = len(contexts)
    coef = a / N
    ref_coef = np.zeros(len(ref_contexts))
    for m in np.unique(contexts):
        total = a[contexts == m].sum()
        ref_rows = ref_contexts == m
        if ref_rows.any():
            ref_coef[ref_rows] -= total / (N * ref_rows.sum())
        else:
            own = contexts == m
            coef[own] -= total / (N * own.sum())
    return coef, ref_coef


@dataclass
class PemmfirlConfig:
    iterations: int = 2000
    batch_size: int = 64
    num_contexts: int = 2
    lr: float = 1e-4
    psi_lr: float = 1e-4
    sampler_lr: float = 1e-4
    sampler_steps: int = 1
    hidden: int = 64
    negative_slope: float = 0.01
    log_every: int = 100
    record_wall_time: bool = False


@dataclass
class PemmfirlState:
    """Reward net, inference model, samplers, their optimizers and the run bookkeeping"""
    discriminator: Discriminator
    inference: ContextInferenceModel
    samplers: SamplerFlow
    omega_opt: AdamState
    psi_opt: AdamState
    sampler_opts: List[AdamState]
    rng: np.random.Generator
    iteration: int = 0
    log: List[Dict[str, float]] = field(default_factory=list)

    @property
    def codec(self) -> FeatureCodec:
        return self.inference.codec

    @classmethod
    def initial(
        cls,
        num_states: int,
        num_actions: int,
        horizon: int,
        config: PemmfirlConfig,
        seed: int,
    ) -> "PemmfirlState":
        rng = np.random.default_rng(seed)
        codec = FeatureCodec(num_states, num_actions, config.num_contexts)
        kw = {"hidden": config.hidden, "negative_slope": config.negative_slope}
        d = Discriminator.create(codec, rng, with_context=True, **kw)
        q = ContextInferenceModel.create(codec, rng, **kw)
        samplers = SamplerFlow.create(codec, horizon, rng, with_context=True, **kw)
        return cls(
            d, q, samplers,
            AdamState.for_params(d.f_net.params, config.lr),
            AdamState.for_params(q.net.params, config.psi_lr),
            [AdamState.for_params(n.params, config.sampler_lr) for n in samplers.nets],
            rng,
        )

    def to_checkpoint(self) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        codec = self.codec
        arrays, meta = {}, {
            "algorithm": "pemmfirl", "iteration": self.iteration, "rng": self.rng.bit_generator.state,
            "log": self.log, "num_states": codec.num_states, "num_actions": codec.num_actions,
            "num_contexts": codec.num_contexts, "horizon": self.samplers.horizon,
        }
        parts = [
            net_to_arrays(self.discriminator.f_net, "reward"), adam_to_arrays(self.omega_opt, "reward_opt"),
            net_to_arrays(self.inference.net, "inference"), adam_to_arrays(self.psi_opt, "inference_opt"),
        ]
        for t, (net, opt) in enumerate(zip(self.samplers.nets, self.sampler_opts)):
            parts += [net_to_arrays(net, f"sampler{t}"), adam_to_arrays(opt, f"sampler{t}_opt")]
        for a, m in parts:
            arrays.update(a)
            meta.update(m)
        return arrays, meta

    @classmethod
    def from_checkpoint(cls, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> "PemmfirlState":
        codec = FeatureCodec(meta["num_states"], meta["num_actions"], meta["num_contexts"])
        T = meta["horizon"]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(
            Discriminator(net_from_arrays(arrays, meta, "reward"), codec, with_context=True),
            ContextInferenceModel(net_from_arrays(arrays, meta, "inference"), codec),
            SamplerFlow([net_from_arrays(arrays, meta, f"sampler{t}") for t in range(T)], codec, with_context=True),
            adam_from_arrays(arrays, meta, "reward_opt"),
            adam_from_arrays(arrays, meta, "inference_opt"),
            [adam_from_arrays(arrays, meta, f"sampler{t}_opt") for t in range(T)],
            rng, int(meta["iteration"]), list(meta["log"]),
        )


def grad_L_omega(
    state: PemmfirlState,
    est: ConditionalMeanFieldEstimate,
    contexts: np.ndarray,
    batch: TrajectoryBatch,
    ref_contexts: np.ndarray,
    ref_batch: TrajectoryBatch,
) -> np.ndarray:
    """
    Estimate of dL/domega: mean_i log q(m_i|tau_i) (g_i - E'[g | m_i]).

    Args:
        state: Learner state (reward net and inference model)
        est: Conditional mean-field estimate the trajectories were sampled under
        contexts: m_i per trajectory of `batch`
        batch: Trajectories drawn from p(.|m_i)
        ref_contexts / ref_batch: Independent draws used for the centering term
    """
    a = log_q(state.inference, batch, contexts)
    coef, ref_coef = centering_coefficients(np.asarray(contexts), np.asarray(ref_contexts), a)
    return omega_combination(
        state.discriminator, est,
        TrajectoryBatch.concat([batch, ref_batch]),
        np.concatenate([contexts, ref_contexts]),
        np.concatenate([coef, ref_coef]),
    )


def grad_L_psi(
    state: PemmfirlState,
    est: ConditionalMeanFieldEstimate,
    contexts: np.ndarray,
    batch: TrajectoryBatch,
    ref_contexts: np.ndarray,
    ref_batch: TrajectoryBatch,
) -> np.ndarray:
    """Estimate of dL/dpsi: mean_i [log q_i (kappa_i - E'[kappa | m_i]) + d log q_i/dpsi]."""
    a = log_q(state.inference, batch, contexts)
    coef, ref_coef = centering_coefficients(np.asarray(contexts), np.asarray(ref_contexts), a)
    centered = kappa_combination(
        state.discriminator, est,
        TrajectoryBatch.concat([batch, ref_batch]),
        np.concatenate([contexts, ref_contexts]),
        np.concatenate([coef, ref_coef]),
    )
    score = score_combination(state.inference, batch, contexts, np.full(len(batch), 1.0 / len(batch)))
    return centered + score


def grad_K_psi(
    state: PemmfirlState,
    est: ConditionalMeanFieldEstimate,
    expert_batch: TrajectoryBatch,
    contexts: np.ndarray,
    sampled_batch: TrajectoryBatch,
) -> np.ndarray:
    """
    Estimate of dK/dpsi: mean_i [kappa(tau~_i, m~_i) - kappa(tau_E,i, m~_i)].

    sampled_batch[i] must have been drawn under context contexts[i], which in
    turn was drawn from q(.|expert_batch[i]).
    """
    if len(expert_batch) != len(sampled_batch) or len(contexts) != len(expert_batch):
        raise ContractViolationError("expert batch, contexts and sampled batch must align")
    n = len(expert_batch)
    contexts = np.asarray(contexts, dtype=np.int64)
    return kappa_combination(
        state.discriminator, est,
        TrajectoryBatch.concat([sampled_batch, expert_batch]),
        np.concatenate([contexts, contexts]),
        np.concatenate([np.full(n, 1.0 / n), np.full(n, -1.0 / n)]),
    )


def _apply(opt: AdamState, params: np.ndarray, grad: np.ndarray, what: str, iteration: int) -> bool:
    try:
        adam_step(opt, params, grad)
        return True
    except NonFiniteGradientError:
        logger.warning("skipped %s step iteration=%d: non-finite gradient", what, iteration)
        return False


def meta_train(
    simulator: Simulator,
    demos: DemonstrationSet,
    config: PemmfirlConfig,
    seed: int = 0,
    state: Optional[PemmfirlState] = None,
    on_iteration: Optional[Callable[[PemmfirlState], None]] = None,
) -> PemmfirlState:
    """
    Meta-training loop.

    Per iteration: draw two expert batches, infer m~ ~ q(.|tau_E), rebuild the
    conditional mean field, roll out the samplers twice under it, descend K - L
    in psi, ascend L in omega, take a discriminator step on (tau_E', m~') versus
    the rollouts and a sampler REINFORCE step.

    Args:
        simulator: Sampling-only environment
        demos: Demonstrations (contexts never read)
        config: Budget, batch and optimizer settings
        seed: Seed for initialization and all sampling
        state: Resume from this state instead of initializing
        on_iteration: Callback after every iteration

    Returns:
        Final PemmfirlState with the per-iteration log
    """
    if state is None:
        state = PemmfirlState.initial(simulator.num_states, simulator.num_actions, demos.horizon, config, seed)
    B = config.batch_size
    while state.iteration < config.iterations:
        start = time.perf_counter()
        rng = state.rng
        it = state.iteration + 1
        tau_e = demos.sample(B, rng)
        tau_e2 = demos.sample(B, rng)
        contexts = synthetic_contexts(state.inference, tau_e, rng)
        row: Dict[str, float] = {"iter": it}
        try:
            est = conditional_empirical_mean_field(state.inference, demos)
        except DegenerateContextError as e:
            logger.warning("skipped iteration=%d: %s", it, e)
            state.iteration = it
            state.log.append({**row, "disc_objective": float("nan"), "sampler_return": float("nan"),
                              "info_objective": float("nan")})
            continue
        mu_flows = est.probs
        sampled = rollout_samplers(simulator, state.samplers, mu_flows, contexts, rng)
        reference = rollout_samplers(simulator, state.samplers, mu_flows, contexts, rng)

        g_k = grad_K_psi(state, est, tau_e, contexts, sampled.batch)
        g_l_psi = grad_L_psi(state, est, contexts, sampled.batch, contexts, reference.batch)
        g_l_omega = grad_L_omega(state, est, contexts, sampled.batch, contexts, reference.batch)
        info = float(np.mean(log_q(state.inference, sampled.batch, contexts)))

        _apply(state.psi_opt, state.inference.net.params, g_k - g_l_psi, "psi", it)
        _apply(state.omega_opt, state.discriminator.f_net.params, -g_l_omega, "omega", it)

        expert_contexts = synthetic_contexts(state.inference, tau_e2, rng)
        disc = discriminator_update(
            state.discriminator, Rollouts(tau_e2, expert_contexts), sampled, mu_flows,
            state.samplers, state.omega_opt,
        )
        ret = 0.0
        for step in range(config.sampler_steps):
            if step:
                sampled = rollout_samplers(simulator, state.samplers, mu_flows, sampled.contexts, rng)
            ret = sampler_update(state.samplers, state.discriminator, mu_flows, sampled, state.sampler_opts)

        state.iteration = it
        row.update({"disc_objective": disc, "sampler_return": ret, "info_objective": info})
        if config.record_wall_time:
            row["wall_ms"] = (time.perf_counter() - start) * 1000.0
        state.log.append(row)
        if it % config.log_every == 0:
            logger.info(
                "pemmfirl iter=%d disc_objective=%.6f sampler_return=%.6f info_objective=%.6f clamps=%d",
                it, disc, ret, info, est.clamp_count,
            )
        if on_iteration is not None:
            on_iteration(state)
    return state


def align_contexts(predicted: np.ndarray, truth: np.ndarray, num_slots: int, num_contexts: int) -> Dict[int, int]:
    """
    Map learner slots to true context indices by maximum agreement.

    Learned slots are identified only up to permutation; evaluation code calls
    this with held-out labels before comparing anything per context.
    """
    agreement = np.zeros((num_slots, num_contexts))
    np.add.at(agreement, (np.asarray(predicted, dtype=np.int64), np.asarray(truth, dtype=np.int64)), 1.0)
    rows, cols = linear_sum_assignment(-agreement)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    for slot in range(num_slots):
        mapping.setdefault(slot, int(np.argmax(agreement[slot])))
    return mapping


RECORD_COLUMNS = ["seed", "true_m", "inferred_m", "return_gap", "policy_deviation"]


@dataclass(frozen=True)
class MetaTestRecord:
    inferred_m: int
    true_m: int
    return_gap: float
    policy_deviation: float


def meta_test(
    q: ContextInferenceModel,
    reward_source: str,
    env: TabularEnv,
    tau_e: Trajectory,
    rng: np.random.Generator,
    expert_equilibria: Mapping[float, Ermfne],
    true_context: int,
    discriminator: Optional[Discriminator] = None,
    slot_map: Optional[Mapping[int, int]] = None,
    cache: Optional[Dict[Tuple[str, int], Ermfne]] = None,
    **solve_kwargs,
) -> MetaTestRecord:
    """
    Infer m_hat from one demonstration, solve for it, evaluate under the true m.

    Args:
        q: Inference model
        reward_source: "ground_truth" (env reward at m_hat) or "learned" (f at slot m_hat)
        env: Environment with the ground-truth reward
        tau_e: Demonstration generated under the hidden context
        rng: Random source for m_hat ~ q(.|tau_e)
        expert_equilibria: Expert equilibrium per context value
        true_context: Index of the context tau_e was generated under
        discriminator: Learned reward, required for reward_source="learned"
        slot_map: Learner slot -> context index (see align_contexts)
        cache: Optional memo of solved equilibria keyed by (source, slot)

    Returns:
        MetaTestRecord with the expected-return gap and policy deviation
    """
    if reward_source not in ("ground_truth", "learned"):
        raise ContractViolationError(f"unknown reward_source '{reward_source}'")
    slot = int(categorical_draw(infer_context(q, tau_e), rng))
    m_hat = slot_map.get(slot, slot) if slot_map is not None else slot
    key = (reward_source, slot)
    learned = cache.get(key) if cache is not None else None
    if learned is None:
        if reward_source == "ground_truth":
            learned = solve_with_backoff(env, env.contexts[m_hat], **solve_kwargs)
        else:
            if discriminator is None:
                raise ContractViolationError("reward_source='learned' needs a discriminator")
            learned = solve_with_backoff(
                env, env.contexts[m_hat], reward_override=discriminator.reward_override(slot), **solve_kwargs,
            )
        if cache is not None:
            cache[key] = learned
    m_true = env.contexts[true_context]
    expert = expert_equilibria[m_true]
    gap = abs(
        expected_return(env, expert.mean_field_flow, expert.policy_flow, m_true)
        - expected_return(env, learned.mean_field_flow, learned.policy_flow, m_true)
    )
    deviation = policy_deviation({m_true: expert.policy_flow}, {m_true: learned.policy_flow}, [1.0])
    return MetaTestRecord(m_hat, true_context, float(gap), float(deviation))


def learned_equilibria(
    state,
    env: TabularEnv,
    heldout: Optional[DemonstrationSet] = None,
    **solve_kwargs,
) -> Tuple[Dict[float, Ermfne], Optional[float]]:
    """
    Equilibrium per context value under a trained reward.

    For a PemmfirlState the held-out demos (with revealed contexts) align the
    learner's slots to true contexts; each context is solved under its slot's
    reward and the aligned inference accuracy is returned. A context-blind
    state (MF-AIRL) yields one solve shared by every context and no accuracy.

    Raises:
        ContractViolationError: If a PemmfirlState comes without labelled held-out demos
    """
    if not isinstance(state, PemmfirlState):
        shared = solve_with_backoff(env, env.contexts[0], reward_override=state.discriminator.reward_override(None), **solve_kwargs)
        return {m: shared for m in env.contexts}, None
    mapping, accuracy = slot_alignment(state, heldout, env.num_contexts)
    num_slots = state.codec.num_contexts
    inverse: Dict[int, int] = {}
    for slot, ctx in sorted(mapping.items()):
        inverse.setdefault(ctx, slot)
    out = {}
    for k, m in enumerate(env.contexts):
        slot = inverse.get(k, k % num_slots)
        out[m] = solve_with_backoff(env, m, reward_override=state.discriminator.reward_override(slot), **solve_kwargs)
    logger.info("learned equilibria slots=%s inference_accuracy=%.4f", dict(sorted(mapping.items())), accuracy)
    return out, accuracy


def _labelled_contexts(heldout: Optional[DemonstrationSet]) -> np.ndarray:
    if heldout is None or len(heldout) == 0:
        raise ContractViolationError("slot alignment needs held-out demonstrations")
    truth = heldout.reveal_contexts()
    if np.any(truth < 0):
        raise ContractViolationError("held-out demonstrations carry no context labels")
    return truth


def slot_alignment(state: PemmfirlState, heldout: DemonstrationSet, num_contexts: int) -> Tuple[Dict[int, int], float]:
    """
    Learner slot -> context index from the most likely slot of each labelled
    held-out demonstration, plus the inference accuracy after alignment.

    Raises:
        ContractViolationError: If the held-out demos are empty or unlabelled
    """
    truth = _labelled_contexts(heldout)
    slots = np.argmax(state.inference.probs(heldout.batch), axis=1)
    mapping = align_contexts(slots, truth, state.codec.num_contexts, num_contexts)
    return mapping, inference_accuracy([mapping[int(s)] for s in slots], truth)


def meta_test_records(
    state: PemmfirlState,
    env: TabularEnv,
    heldout: DemonstrationSet,
    expert_equilibria: Mapping[float, Ermfne],
    rng: np.random.Generator,
    reward_source: str = "learned",
    slot_map: Optional[Mapping[int, int]] = None,
    **solve_kwargs,
) -> List[MetaTestRecord]:
    """
    meta_test for every labelled held-out demonstration.

    Equilibria are solved once per (reward source, slot) and shared across
    demonstrations. The labels only pick the expert to compare against.
    """
    truth = _labelled_contexts(heldout)
    cache: Dict[Tuple[str, int], Ermfne] = {}
    return [
        meta_test(
            state.inference, reward_source, env, tau, rng, expert_equilibria, int(m),
            discriminator=state.discriminator, slot_map=slot_map, cache=cache, **solve_kwargs,
        )
        for tau, m in zip(heldout.trajectories, truth)
    ]
