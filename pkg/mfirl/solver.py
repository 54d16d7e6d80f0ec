"""Soft best response, ERMFNE fixed-point iteration and expert demonstrations"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Dict, Callable, Mapping, Sequence, Tuple, List

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .core import (
    MeanFieldFlow,
    PolicyFlow,
    TabularEnv,
    Trajectory,
    TrajectoryBatch,
    categorical_draw,
    consistency_residual,
    propagate,
    rollout,
    sample_batch,
)
from .exceptions import ContractViolationError, NonConvergenceError

logger = logging.getLogger(__name__)

RewardOverride = Callable[[np.ndarray, float], np.ndarray]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
BACKOFF_DAMPINGS = (0.0, 0.5, 0.9, 0.97)


@dataclass(frozen=True)
class Ermfne:
    """Entropy-regularized mean-field Nash equilibrium for one context"""
    mean_field_flow: MeanFieldFlow
    policy_flow: PolicyFlow
    context: float
    iterations_used: int
    final_residual: float
    damping: float = 0.0

    @property
    def horizon(self) -> int:
        return self.mean_field_flow.horizon


def _reward_tables(env: TabularEnv, mf: MeanFieldFlow, m, reward_override: Optional[RewardOverride]) -> np.ndarray:
    fn = env.reward_table if reward_override is None else reward_override
    return np.stack([fn(mf.probs[t], m) for t in range(mf.horizon)])


def soft_backward(
    env: TabularEnv,
    mf: MeanFieldFlow,
    rewards: np.ndarray,
    kernels: Optional[np.ndarray] = None,
    backup: str = "expected",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Soft backward induction over t = T-1..0 with V_T = 0.

    Args:
        env: Environment (dimensions only when `kernels` is given)
        mf: Mean-field flow fixing P(.|s, a, mu^t)
        rewards: (T, S, A) reward tables
        kernels: Optional precomputed (T+1, S, A, S) kernels
        backup: "expected" uses Q = r + sum_s' P V'; "trajectory" uses
            Q = r + log sum_s' P exp(V'). The two coincide for deterministic
            transitions, where the induced trajectory law is proportional to
            exp(sum r) per initial state

    Returns:
        (values (T+1, S), policy tables (T+1, S, A)); the slice at T is uniform
    """
    if backup not in ("expected", "trajectory"):
        raise ContractViolationError(f"unknown backup '{backup}'")
    T = mf.horizon
    S, A = env.num_states, env.num_actions
    if rewards.shape != (T, S, A):
        raise ContractViolationError(f"reward tables must be {(T, S, A)}, got {rewards.shape}")
    values = np.zeros((T + 1, S))
    tables = np.empty((T + 1, S, A))
    tables[T] = 1.0 / A
    for t in range(T - 1, -1, -1):
        kernel = env.kernel(mf.probs[t]) if kernels is None else kernels[t]
        if backup == "expected":
            cont = kernel @ values[t + 1]
        else:
            cont = logsumexp(np.broadcast_to(values[t + 1], kernel.shape), b=kernel, axis=-1)
        q = rewards[t] + cont
        values[t] = logsumexp(q, axis=1)
        tables[t] = np.exp(q - values[t][:, None])
        tables[t] /= tables[t].sum(axis=1, keepdims=True)
    return values, tables


def soft_best_response(
    env: TabularEnv,
    mf: MeanFieldFlow,
    m,
    reward_override: Optional[RewardOverride] = None,
) -> PolicyFlow:
    """
    Entropy-regularized best response to a fixed mean-field flow.

    Args:
        env: Environment
        mf: Mean-field flow of length T+1
        m: Context value passed to the reward
        reward_override: Optional (mu, m) -> (S, A) table replacing env.reward

    Returns:
        Strictly positive PolicyFlow; the terminal slice is uniform

    Example:
        pf = soft_best_response(env, flow, 1.0)
        pf.tables[0]   # softmax of Q_0
    """
    if mf.horizon != env.horizon:
        raise ContractViolationError(f"flow horizon {mf.horizon} != env horizon {env.horizon}")
    _, tables = soft_backward(env, mf, _reward_tables(env, mf, m, reward_override))
    return PolicyFlow(tables)


def entropy_regularized_return(
    env: TabularEnv,
    mf: MeanFieldFlow,
    pf: PolicyFlow,
    m,
    reward_table: Optional[RewardOverride] = None,
) -> float:
    """Exact E[sum_{t<T} r(s, a, mu^t, m) - log pi^t(a|s)] under transitions fixed by `mf`."""
    rewards = _reward_tables(env, mf, m, reward_table)
    dist = env.initial_mean_field.probs.copy()
    total = 0.0
    for t in range(mf.horizon):
        table = pf.tables[t]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pi = np.where(table > 0, np.log(table), 0.0)
        total += float(np.sum(dist[:, None] * table * (rewards[t] - log_pi)))
        dist = propagate(dist, table, env.kernel(mf.probs[t]))
    return total


def _flow_change(new: np.ndarray, old: np.ndarray) -> float:
    T = new.shape[0] - 1
    rows = slice(1, T) if T >= 2 else slice(1, T + 1)
    diff = new[rows] - old[rows]
    if diff.size == 0:
        return 0.0
    return float(np.mean(diff ** 2))


def solve_ermfne(
    env: TabularEnv,
    m,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping: float = 0.0,
    reward_override: Optional[RewardOverride] = None,
) -> Ermfne:
    """
    Fixed-point iteration between soft best response and MKV rollout.

    Each iteration computes pi = soft_best_response(mu) and the rollout of pi
    from mu^0, then mixes mu <- (1 - damping) * rollout + damping * mu. The
    solve stops when the mean squared change over t = 1..T-1 and the
    consistency residual of (mu, pi) are both <= tol.

    Args:
        env: Environment
        m: Context value
        tol: Convergence tolerance (> 0)
        max_iter: Iteration budget
        damping: lambda in [0, 1)
        reward_override: Optional learned reward (mu, m) -> (S, A)

    Returns:
        Ermfne whose policy is exactly soft_best_response of its flow

    Raises:
        NonConvergenceError: If max_iter is reached; carries the last residual
    """
    if tol <= 0:
        raise ContractViolationError("tol must be positive")
    if not 0.0 <= damping < 1.0:
        raise ContractViolationError("damping must lie in [0, 1)")
    mu = np.tile(env.initial_mean_field.probs, (env.horizon + 1, 1))
    change = np.inf
    for iteration in range(1, max_iter + 1):
        flow = MeanFieldFlow(mu)
        pf = soft_best_response(env, flow, m, reward_override)
        target = rollout(env, pf).probs
        change = _flow_change(target, mu)
        logger.debug("ermfne iteration=%d context=%s change=%.3e", iteration, m, change)
        if change <= tol:
            residual = consistency_residual(flow, pf, env)
            if residual <= tol:
                logger.info(
                    "ermfne converged context=%s iterations=%d residual=%.3e damping=%s",
                    m, iteration, residual, damping,
                )
                return Ermfne(flow, pf, m, iteration, residual, damping)
        mu = (1.0 - damping) * target + damping * mu
        mu /= mu.sum(axis=1, keepdims=True)
    raise NonConvergenceError(
        f"ERMFNE for context {m} did not converge in {max_iter} iterations (last change {change:.3e})",
        last_residual=float(change), iterations=max_iter, damping=damping,
    )


def solve_with_backoff(
    env: TabularEnv,
    m,
    dampings: Sequence[float] = BACKOFF_DAMPINGS,
    **kwargs,
) -> Ermfne:
    """
    solve_ermfne retried with increasing damping.

    Raises:
        NonConvergenceError: From the last rung when every damping fails
    """
    last_error = None
    for damping in dampings:
        try:
            return solve_ermfne(env, m, damping=damping, **kwargs)
        except NonConvergenceError as e:
            last_error = e
            logger.warning(
                "ermfne retry context=%s damping=%s last_residual=%.3e", m, damping, e.last_residual
            )
    raise last_error


def solve_contexts(
    env: TabularEnv,
    workers: int = 1,
    **kwargs,
) -> Dict[float, Ermfne]:
    """Solve every context of `env` (with backoff); solves run in a thread pool when workers > 1."""
    if workers <= 1:
        return {m: solve_with_backoff(env, m, **kwargs) for m in env.contexts}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {m: pool.submit(solve_with_backoff, env, m, **kwargs) for m in env.contexts}
        return {m: futures[m].result() for m in env.contexts}


class DemonstrationSet:
    """
    Expert trajectories with their hidden contexts.

    Training code reads `trajectories`, `states`, `actions` and `sample()`,
    none of which carry context labels. `reveal_contexts()` is for evaluation.
    """

    def __init__(self, batch: TrajectoryBatch, prior: Sequence[float], context_values: Sequence[float]):
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (len(context_values),):
            raise ContractViolationError("prior must have one entry per context")
        self._batch = batch
        self.prior = prior
        self.context_values = tuple(context_values)

    @property
    def horizon(self) -> int:
        return self._batch.horizon

    def __len__(self) -> int:
        return len(self._batch)

    @property
    def states(self) -> np.ndarray:
        return self._batch.states

    @property
    def actions(self) -> np.ndarray:
        return self._batch.actions

    @property
    def batch(self) -> TrajectoryBatch:
        return self._batch.without_contexts()

    @property
    def trajectories(self) -> List[Trajectory]:
        return self.batch.to_trajectories()

    def reveal_contexts(self) -> np.ndarray:
        """Ground-truth context indices; evaluation only."""
        return self._batch.contexts.copy()

    def sample(self, n: int, rng: np.random.Generator) -> TrajectoryBatch:
        """Bootstrap batch of n unlabelled trajectories."""
        if len(self) == 0:
            raise ContractViolationError("cannot sample from an empty demonstration set")
        return self.batch.subset(rng.integers(0, len(self), size=n))

    def split(self, fraction: float) -> Tuple["DemonstrationSet", "DemonstrationSet"]:
        """Split into (first `fraction`, rest), e.g. training and held-out demos."""
        cut = int(round(fraction * len(self)))
        head = DemonstrationSet(self._batch.subset(np.arange(cut)), self.prior, self.context_values)
        tail = DemonstrationSet(self._batch.subset(np.arange(cut, len(self))), self.prior, self.context_values)
        return head, tail

    def to_csv(self, path, contexts_path=None) -> None:
        """Trajectories (context column -1) plus an optional evaluation-only `traj_id, context` file."""
        self._batch.to_csv(path, include_contexts=False)
        if contexts_path is not None:
            pd.DataFrame({
                "traj_id": np.arange(len(self)),
                "context": self._batch.contexts,
            }).to_csv(contexts_path, index=False)

    @classmethod
    def from_csv(
        cls,
        path,
        prior: Sequence[float],
        context_values: Sequence[float],
        horizon: Optional[int] = None,
        contexts_path=None,
    ) -> "DemonstrationSet":
        batch = TrajectoryBatch.from_csv(path, horizon=horizon)
        if contexts_path is not None:
            labels = pd.read_csv(contexts_path).sort_values("traj_id")
            batch = TrajectoryBatch(batch.states, batch.actions, labels["context"].to_numpy(dtype=np.int64))
        return cls(batch, prior, context_values)


def generate_demonstrations(
    env: TabularEnv,
    ermfne_per_context: Mapping[float, Ermfne],
    prior: Sequence[float],
    count: int,
    horizon: int,
    rng: np.random.Generator,
) -> DemonstrationSet:
    """
    Draw m ~ prior, then a trajectory under (mu_E(.|m), pi_E(.|m)), `count` times.

    The hidden context of each trajectory is the index of m in the mapping's
    iteration order.
    """
    contexts = list(ermfne_per_context.keys())
    for m, eq in ermfne_per_context.items():
        if eq.horizon != horizon:
            raise ContractViolationError(f"equilibrium for context {m} has horizon {eq.horizon}, expected {horizon}")
    prior = np.asarray(prior, dtype=float)
    if count == 0:
        return DemonstrationSet(TrajectoryBatch.empty(horizon), prior, contexts)
    labels = categorical_draw(np.broadcast_to(prior, (count, len(contexts))), rng)
    states = np.empty((count, horizon + 1), dtype=np.int64)
    actions = np.empty((count, horizon + 1), dtype=np.int64)
    for k, m in enumerate(contexts):
        rows = np.flatnonzero(labels == k)
        if rows.size == 0:
            continue
        eq = ermfne_per_context[m]
        part = sample_batch(env, eq.mean_field_flow, eq.policy_flow, rows.size, rng, context=k)
        states[rows] = part.states
        actions[rows] = part.actions
    logger.info("generated demonstrations count=%d contexts=%s", count, np.bincount(labels, minlength=len(contexts)).tolist())
    return DemonstrationSet(TrajectoryBatch(states, actions, labels), prior, contexts)


def write_equilibria(equilibria: Mapping[float, Ermfne], mu_path, pi_path) -> None:
    """Write `context, t, state, mu` and `context, t, state, action, pi` tables."""
    mu_rows, pi_rows = [], []
    for m, eq in equilibria.items():
        T1, S = eq.mean_field_flow.probs.shape
        A = eq.policy_flow.tables.shape[2]
        t, s = np.meshgrid(np.arange(T1), np.arange(S), indexing="ij")
        mu_rows.append(pd.DataFrame({
            "context": m, "t": t.ravel(), "state": s.ravel(), "mu": eq.mean_field_flow.probs.ravel(),
        }))
        t, s, a = np.meshgrid(np.arange(T1), np.arange(S), np.arange(A), indexing="ij")
        pi_rows.append(pd.DataFrame({
            "context": m, "t": t.ravel(), "state": s.ravel(), "action": a.ravel(),
            "pi": eq.policy_flow.tables.ravel(),
        }))
    pd.concat(mu_rows).to_csv(mu_path, index=False, float_format="%.17g")
    pd.concat(pi_rows).to_csv(pi_path, index=False, float_format="%.17g")


def read_equilibria(mu_path, pi_path, env: Optional[TabularEnv] = None) -> Dict[float, Ermfne]:
    """Inverse of write_equilibria; residuals are recomputed when `env` is given."""
    mu_frame = pd.read_csv(mu_path)
    pi_frame = pd.read_csv(pi_path)
    out = {}
    for m, group in mu_frame.groupby("context", sort=False):
        group = group.sort_values(["t", "state"])
        T1 = group["t"].max() + 1
        S = group["state"].max() + 1
        flow = MeanFieldFlow(group["mu"].to_numpy().reshape(T1, S))
        pig = pi_frame[pi_frame["context"] == m].sort_values(["t", "state", "action"])
        A = pig["action"].max() + 1
        pf = PolicyFlow(pig["pi"].to_numpy().reshape(T1, S, A))
        residual = consistency_residual(flow, pf, env) if env is not None else float("nan")
        out[float(m)] = Ermfne(flow, pf, float(m), 0, residual)
    return out
