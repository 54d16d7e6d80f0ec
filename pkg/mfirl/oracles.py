"""
Exact oracles for validating the learners on tiny instances.

Everything here enumerates trajectories, so it is only usable for
(|S||A|)^(T+1) up to the enumeration cap. The suite checks:

- Mlp backward() against central finite differences
- the estimators for dL/domega, dL/dpsi and dK/dpsi against finite
  differences of exactly enumerated L and K, both in expectation (exact)
  and by Monte Carlo z-scores
- that the soft-optimal sampler under an injected mean-field flow induces
  the normalized trajectory energy model
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Dict, Any, List, Callable

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from .approximator import Mlp
from .core import (
    MeanFieldFlow,
    PolicyFlow,
    TabularEnv,
    TrajectoryBatch,
    batch_log_prob,
    categorical_draw,
    enumerate_batch,
    rollout,
    sample_batch,
)
from .envs import build_random_env
from .mfairl import exact_sampler
from .pemmfirl import (
    ConditionalMeanFieldEstimate,
    PemmfirlConfig,
    PemmfirlState,
    conditional_empirical_mean_field,
    grad_K_psi,
    grad_L_omega,
    grad_L_psi,
    kappa_combination,
    log_q,
    omega_combination,
    score_combination,
    synthetic_contexts,
    trajectory_energy,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
Z_GATE = 3.0
TV_GATE = 1e-6
MLP_GATE = 1e-4


@dataclass
class OracleInstance:
    """A tiny environment, a learner and a labelled demonstration pool"""
    env: TabularEnv
    state: PemmfirlState
    pool: TrajectoryBatch
    enum: TrajectoryBatch

    @property
    def num_contexts(self) -> int:
        return self.state.codec.num_contexts

    def estimate(self) -> ConditionalMeanFieldEstimate:
        return conditional_empirical_mean_field(self.state.inference, self.pool)


def random_instance(
    rng: np.random.Generator,
    num_states: int = 2,
    num_actions: int = 2,
    horizon: int = 2,
    num_contexts: int = 2,
    pool_size: int = 40,
    hidden: int = 6,
) -> OracleInstance:
    """
    Random environment, random small networks and a pool drawn from one
    random policy flow per context.
    """
    env = build_random_env(rng, num_states, num_actions, horizon, contexts=tuple(float(k) for k in range(num_contexts)))
    config = PemmfirlConfig(num_contexts=num_contexts, hidden=hidden)
    state = PemmfirlState.initial(num_states, num_actions, horizon, config, int(rng.integers(2 ** 31)))
    parts = []
    per_context = max(1, pool_size // num_contexts)
    for k in range(num_contexts):
        pf = PolicyFlow(rng.dirichlet(np.ones(num_actions), size=(horizon + 1, num_states)))
        parts.append(sample_batch(env, rollout(env, pf), pf, per_context, rng, context=k))
    return OracleInstance(env, state, TrajectoryBatch.concat(parts), enumerate_batch(env, horizon))


def log_partition(state: PemmfirlState, est: ConditionalMeanFieldEstimate) -> np.ndarray:
    """
    log Z_m of the factorized model exp(F(tau, m)) per context.

    States decouple across time, so Z_m = A * prod_{t<T} sum_s mu_hat^t(s|m) sum_a exp f_t(s, a).
    """
    d = state.discriminator
    A = d.codec.num_actions
    out = np.full(est.num_contexts, np.log(A))
    for m in range(est.num_contexts):
        for t in range(est.horizon):
            f = d.reward_table(est.probs[m, t], m)
            with np.errstate(divide="ignore"):
                out[m] += logsumexp(np.log(est.probs[m, t]) + logsumexp(f, axis=1))
    return out


def factorized_log_prob(state: PemmfirlState, est: ConditionalMeanFieldEstimate, batch: TrajectoryBatch, contexts) -> np.ndarray:
    contexts = np.asarray(contexts, dtype=np.int64)
    return trajectory_energy(state.discriminator, est, batch, contexts) - log_partition(state, est)[contexts]


def sample_factorized(
    state: PemmfirlState,
    est: ConditionalMeanFieldEstimate,
    contexts: np.ndarray,
    rng: np.random.Generator,
) -> TrajectoryBatch:
    """
    Exact draws from exp(F(tau, m)) / Z_m.

    For t < T the state is drawn from mu_hat^t(s|m) * sum_a exp f_t(s, a) and the
    action from softmax f_t(s, .); at T the state follows mu_hat^T(.|m) and the
    action is uniform.
    """
    d = state.discriminator
    S, A = d.codec.num_states, d.codec.num_actions
    T = est.horizon
    contexts = np.asarray(contexts, dtype=np.int64)
    n = contexts.shape[0]
    states = np.empty((n, T + 1), dtype=np.int64)
    actions = np.empty((n, T + 1), dtype=np.int64)
    for m in np.unique(contexts):
        rows = np.flatnonzero(contexts == m)
        for t in range(T):
            f = d.reward_table(est.probs[m, t], int(m))
            with np.errstate(divide="ignore"):
                tilt = softmax(np.log(est.probs[m, t]) + logsumexp(f, axis=1))
            s = categorical_draw(np.broadcast_to(tilt, (rows.size, S)), rng)
            states[rows, t] = s
            actions[rows, t] = categorical_draw(softmax(f, axis=1)[s], rng)
        states[rows, T] = categorical_draw(np.broadcast_to(est.probs[m, T], (rows.size, S)), rng)
        actions[rows, T] = categorical_draw(np.full((rows.size, A), 1.0 / A), rng)
    return TrajectoryBatch(states, actions)


def _support(inst: OracleInstance, state: PemmfirlState, est: ConditionalMeanFieldEstimate):
    """Enumerated trajectories with positive probability, replicated per context."""
    batches, contexts, logp = [], [], []
    for m in range(est.num_contexts):
        lp = factorized_log_prob(state, est, inst.enum, np.full(len(inst.enum), m))
        keep = np.isfinite(lp)
        batches.append(inst.enum.subset(np.flatnonzero(keep)))
        contexts.append(np.full(keep.sum(), m, dtype=np.int64))
        logp.append(lp[keep])
    return TrajectoryBatch.concat(batches), np.concatenate(contexts), np.concatenate(logp)


def exact_L(inst: OracleInstance, state: PemmfirlState, est: ConditionalMeanFieldEstimate, context_weights: np.ndarray) -> float:
    """sum_m w_m sum_tau p(tau|m) log q(m|tau) with the context weights held fixed."""
    batch, contexts, logp = _support(inst, state, est)
    return float(np.sum(context_weights[contexts] * np.exp(logp) * log_q(state.inference, batch, contexts)))


def exact_K(inst: OracleInstance, state: PemmfirlState, est: ConditionalMeanFieldEstimate, pool_weights: np.ndarray) -> float:
    """-(1/N) sum_j sum_m w_jm log p(tau_j|m) over the pool, weights held fixed."""
    N, M = pool_weights.shape
    total = 0.0
    for m in range(M):
        lp = factorized_log_prob(state, est, inst.pool, np.full(N, m))
        total -= float(np.sum(pool_weights[:, m] * lp)) / N
    return total


def exact_expectations(
    inst: OracleInstance,
    state: PemmfirlState,
    est: ConditionalMeanFieldEstimate,
    pool_weights: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Expected values of the three estimators under exact sampling."""
    w = pool_weights.mean(axis=0)
    batch, contexts, logp = _support(inst, state, est)
    p = np.exp(logp)
    a = log_q(state.inference, batch, contexts)
    mean_a = np.zeros(est.num_contexts)
    np.add.at(mean_a, contexts, p * a)
    coef_l = w[contexts] * p * (a - mean_a[contexts])
    d = state.discriminator

    N, M = pool_weights.shape
    pool_rep = TrajectoryBatch.concat([inst.pool] * M)
    pool_ctx = np.repeat(np.arange(M), N)
    k_batch = TrajectoryBatch.concat([batch, pool_rep])
    k_ctx = np.concatenate([contexts, pool_ctx])
    k_coef = np.concatenate([w[contexts] * p, -pool_weights.T.ravel() / N])
    return {
        "L_omega": omega_combination(d, est, batch, contexts, coef_l),
        "L_psi": kappa_combination(d, est, batch, contexts, coef_l)
        + score_combination(state.inference, batch, contexts, w[contexts] * p),
        "K_psi": kappa_combination(d, est, k_batch, k_ctx, k_coef),
    }


def central_difference(fn: Callable[[], float], params: np.ndarray, direction: np.ndarray, h: float = FD_STEP) -> float:
    """(fn(x + h v) - fn(x - h v)) / 2h, restoring `params` afterwards."""
    base = params.copy()
    try:
        params[:] = base + h * direction
        plus = fn()
        params[:] = base - h * direction
        minus = fn()
    finally:
        params[:] = base
    return (plus - minus) / (2.0 * h)


def finite_differences(
    inst: OracleInstance,
    directions: Dict[str, np.ndarray],
    pool_weights: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Directional derivatives of exact L and K, one value per direction row."""
    state = inst.state
    w = pool_weights.mean(axis=0)

    def L() -> float:
        return exact_L(inst, state, inst.estimate(), w)

    def K() -> float:
        return exact_K(inst, state, inst.estimate(), pool_weights)

    omega = state.discriminator.f_net.params
    psi = state.inference.net.params
    return {
        "L_omega": np.array([central_difference(L, omega, v) for v in directions["omega"]]),
        "L_psi": np.array([central_difference(L, psi, v) for v in directions["psi"]]),
        "K_psi": np.array([central_difference(K, psi, v) for v in directions["psi"]]),
    }


def estimator_samples(
    inst: OracleInstance,
    est: ConditionalMeanFieldEstimate,
    directions: Dict[str, np.ndarray],
    resamples: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Dict[str, np.ndarray]:
    """(resamples, num_directions) projections of independent estimator draws."""
    state = inst.state
    out = {k: np.empty((resamples, directions["omega" if k == "L_omega" else "psi"].shape[0]))
           for k in ("L_omega", "L_psi", "K_psi")}
    N = len(inst.pool)
    for r in range(resamples):
        tau_e = inst.pool.subset(rng.integers(0, N, size=batch_size)).without_contexts()
        contexts = synthetic_contexts(state.inference, tau_e, rng)
        sampled = sample_factorized(state, est, contexts, rng)
        reference = sample_factorized(state, est, contexts, rng)
        out["L_omega"][r] = directions["omega"] @ grad_L_omega(state, est, contexts, sampled, contexts, reference)
        out["L_psi"][r] = directions["psi"] @ grad_L_psi(state, est, contexts, sampled, contexts, reference)
        out["K_psi"][r] = directions["psi"] @ grad_K_psi(state, est, tau_e, contexts, sampled)
    return out


def z_scores(samples: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """(mean - reference) / standard error per column; 0 where both spread and error vanish."""
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    diff = mean - reference
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(np.abs(diff) < 1e-12, 0.0, np.inf))
    return z


def lemma_total_variation(
    rng: np.random.Generator,
    num_states: int = 2,
    num_actions: int = 2,
    horizon: int = 3,
    deterministic: bool = True,
    backup: str = "expected",
    hidden: int = 6,
) -> float:
    """
    TV distance between the law induced by (mu_hat, soft-optimal sampler) and
    the energy model mu_hat^0(s^0) prod P(s^{t+1}|s^t, a^t, mu_hat^t) exp(sum_{t<T} f) / Z(s^0).

    The two agree exactly for deterministic transitions; with stochastic
    transitions the value is reported as a diagnostic.
    """
    env = build_random_env(rng, num_states, num_actions, horizon, contexts=(0.0, 1.0), deterministic=deterministic)
    state = PemmfirlState.initial(num_states, num_actions, horizon, PemmfirlConfig(hidden=hidden), int(rng.integers(2 ** 31)))
    d = state.discriminator
    mu_hat = MeanFieldFlow(rng.dirichlet(np.ones(num_states), size=horizon + 1))
    m = 1
    pf = exact_sampler(env, d.reward_override(m), mu_hat, m, backup=backup)
    enum = enumerate_batch(env, horizon)
    induced = batch_log_prob(enum, mu_hat, pf, env)

    kernels = env.kernels(mu_hat)
    s, a = enum.states, enum.actions
    t_idx = np.arange(horizon)
    with np.errstate(divide="ignore"):
        energy = np.log(kernels[t_idx, s[:, :-1], a[:, :-1], s[:, 1:]]).sum(axis=1)
    for t in range(horizon):
        energy += d.reward_table(mu_hat.probs[t], m)[s[:, t], a[:, t]]
    model = np.full(len(enum), -np.inf)
    for s0 in range(num_states):
        rows = s[:, 0] == s0
        with np.errstate(divide="ignore"):
            model[rows] = np.log(mu_hat.probs[0, s0]) + energy[rows] - logsumexp(energy[rows])
    return float(0.5 * np.sum(np.abs(np.exp(induced) - np.exp(model))))


def mlp_gradient_error(rng: np.random.Generator, h: float = 1e-6) -> float:
    """Relative error of backward() against central differences for one random net."""
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
    head = "softmax" if rng.random() < 0.5 else "scalar"
    if head == "scalar":
        dims[-1] = 1
    net = Mlp(dims, head=head, rng=rng)
    net.params[:] += rng.normal(scale=0.1, size=net.num_params)
    x = rng.normal(size=(3, dims[0]))
    out = net.forward(x)
    upstream = rng.normal(size=out.shape)
    grads, _ = net.backward(x, upstream)

    def value() -> float:
        return float(np.sum(upstream * net.forward(x)))

    fd = np.empty(net.num_params)
    for i in range(net.num_params):
        e = np.zeros(net.num_params)
        e[i] = 1.0
        fd[i] = central_difference(value, net.params, e, h)
    return float(np.linalg.norm(grads - fd) / max(np.linalg.norm(grads) + np.linalg.norm(fd), 1e-12))


@dataclass
class OracleReport:
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, instance: int, check: str, value: float, reference: float, score: float, passed: bool) -> None:
        self.rows.append({
            "instance": instance, "check": check, "value": value,
            "reference": reference, "score": score, "passed": bool(passed),
        })

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def failures(self) -> List[Dict[str, Any]]:
        return [r for r in self.rows if not r["passed"]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["instance", "check", "value", "reference", "score", "passed"])


def _random_directions(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    v = rng.normal(size=(count, size))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def check_instance(
    inst: OracleInstance,
    rng: np.random.Generator,
    resamples: int,
    batch_size: int = 8,
    num_directions: int = 2,
    report: Optional[OracleReport] = None,
    index: int = 0,
) -> OracleReport:
    """Exact-expectation and Monte Carlo checks of the three estimators on one instance."""
    report = report if report is not None else OracleReport()
    state = inst.state
    est = inst.estimate()
    pool_weights = est.responsibilities.copy()
    directions = {
        "omega": _random_directions(rng, num_directions, state.discriminator.f_net.num_params),
        "psi": _random_directions(rng, num_directions, state.inference.net.num_params),
    }
    fd = finite_differences(inst, directions, pool_weights)
    exact = exact_expectations(inst, state, est, pool_weights)
    for name in ("L_omega", "L_psi", "K_psi"):
        dirs = directions["omega" if name == "L_omega" else "psi"]
        projected = dirs @ exact[name]
        for k in range(num_directions):
            err = abs(projected[k] - fd[name][k]) / max(1.0, abs(fd[name][k]))
            report.add(index, f"exact_{name}[{k}]", projected[k], fd[name][k], err, err <= 1e-5)
    if resamples > 0:
        samples = estimator_samples(inst, est, directions, resamples, batch_size, rng)
        for name, values in samples.items():
            z = z_scores(values, fd[name])
            for k in range(z.shape[0]):
                report.add(index, f"mc_{name}[{k}]", float(values[:, k].mean()), fd[name][k], float(z[k]), abs(z[k]) <= Z_GATE)
    return report


def run_oracle_suite(
    n_instances: int = 20,
    resamples: int = 10_000,
    seed: int = 0,
    batch_size: int = 8,
    num_directions: int = 2,
    mlp_nets: int = 50,
) -> OracleReport:
    """
    Full validation suite on random tiny instances (|S| <= 3, |A| = 2, T <= 3, |M| = 2).

    Example:
        report = run_oracle_suite(n_instances=3, resamples=2000)
        assert report.passed, report.failures()
    """
    rng = np.random.default_rng(seed)
    report = OracleReport()
    errors = [mlp_gradient_error(rng) for _ in range(mlp_nets)]
    if errors:
        worst = max(errors)
        report.add(-1, "mlp_gradient", worst, 0.0, worst, worst <= MLP_GATE)
    for i in range(n_instances):
        inst = random_instance(
            rng,
            num_states=int(rng.integers(2, 4)),
            horizon=int(rng.integers(1, 4)),
        )
        check_instance(inst, rng, resamples, batch_size, num_directions, report, index=i)
        tv = lemma_total_variation(rng)
        report.add(i, "sampler_energy_tv", tv, 0.0, tv, tv <= TV_GATE)
        logger.info("oracle instance=%d checks=%d failures=%d", i, len(report.rows), len(report.failures()))
    logger.info("oracle suite done checks=%d passed=%s", len(report.rows), report.passed)
    return report
