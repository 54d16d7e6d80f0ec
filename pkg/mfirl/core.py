"""Core mean-field game types, the MKV forward equation and trajectory utilities"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Dict, Any, List, Tuple, Callable, Sequence, Mapping, Union, Iterator

import numpy as np
import pandas as pd

from .exceptions import ContractViolationError, EnumerationCapError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
LOG_ZERO = -np.inf
DEFAULT_ENUMERATION_CAP = 10 ** 6
TRAJECTORY_COLUMNS = ["traj_id", "t", "state", "action", "context"]

RewardFn = Callable[[int, int, "MeanField", float], float]
TransitionFn = Callable[[int, int, "MeanField"], np.ndarray]


def _check_simplex(probs: np.ndarray, what: str, axis: int = -1) -> None:
    if not np.all(np.isfinite(probs)):
        raise ContractViolationError(f"{what} has non-finite entries")
    if np.any(probs < -SIMPLEX_TOL):
        raise ContractViolationError(f"{what} has negative entries (min={probs.min():.3e})")
    sums = probs.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractViolationError(f"{what} does not sum to 1 (max deviation {worst:.3e})")


def categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Inverse-CDF draws, one per row of `probs`.

    Every sampler in the package goes through this function so that a given
    generator state always yields the same trajectories.

    Args:
        probs: (n, k) or (k,) probability rows
        rng: Injected random source

    Returns:
        Integer array of shape (n,) (or a scalar int for a single row)
    """
    rows = np.atleast_2d(probs)
    u = rng.random(rows.shape[0])
    cdf = np.cumsum(rows, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    idx = np.minimum(idx, rows.shape[1] - 1)
    if probs.ndim == 1:
        return int(idx[0])
    return idx


@dataclass(frozen=True)
class MeanField:
    """Population state distribution (symbol mu)"""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1:
            raise ContractViolationError(f"MeanField must be a vector, got shape {probs.shape}")
        _check_simplex(probs, "MeanField")
        object.__setattr__(self, "probs", probs)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, num_states: int) -> "MeanField":
        return cls(np.full(num_states, 1.0 / num_states))

    @classmethod
    def point_mass(cls, num_states: int, state: int) -> "MeanField":
        probs = np.zeros(num_states)
        probs[state] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class MeanFieldFlow:
    """
    Mean fields mu^0..mu^T stacked into a (T+1, S) array.

    Example:
        flow = MeanFieldFlow(np.tile(mu0, (T + 1, 1)))
        flow[3]          # MeanField at t=3
        flow.horizon     # T
    """
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] < 1:
            raise ContractViolationError(f"MeanFieldFlow must be (T+1, S), got shape {probs.shape}")
        _check_simplex(probs, "MeanFieldFlow slice", axis=1)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_fields(cls, fields: Sequence[MeanField]) -> "MeanFieldFlow":
        return cls(np.stack([f.probs for f in fields]))

    @property
    def fields(self) -> List[MeanField]:
        return [MeanField(row) for row in self.probs]

    @property
    def horizon(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def num_states(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, t: int) -> MeanField:
        return MeanField(self.probs[t])


@dataclass(frozen=True)
class PolicySlice:
    """Per-state action distributions at one timestep, shape (S, A)"""
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 2:
            raise ContractViolationError(f"PolicySlice must be (S, A), got shape {table.shape}")
        _check_simplex(table, "PolicySlice row", axis=1)
        object.__setattr__(self, "table", table)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "PolicySlice":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))


@dataclass(frozen=True)
class PolicyFlow:
    """Policy slices pi^0..pi^T stacked into a (T+1, S, A) array"""
    tables: np.ndarray

    def __post_init__(self):
        tables = np.asarray(self.tables, dtype=float)
        if tables.ndim != 3 or tables.shape[0] < 1:
            raise ContractViolationError(f"PolicyFlow must be (T+1, S, A), got shape {tables.shape}")
        _check_simplex(tables, "PolicyFlow row", axis=2)
        object.__setattr__(self, "tables", tables)

    @classmethod
    def from_slices(cls, slices: Sequence[PolicySlice]) -> "PolicyFlow":
        return cls(np.stack([s.table for s in slices]))

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "PolicyFlow":
        return cls(np.full((horizon + 1, num_states, num_actions), 1.0 / num_actions))

    @property
    def slices(self) -> List[PolicySlice]:
        return [PolicySlice(t) for t in self.tables]

    @property
    def horizon(self) -> int:
        return self.tables.shape[0] - 1

    def __len__(self) -> int:
        return self.tables.shape[0]

    def __getitem__(self, t: int) -> PolicySlice:
        return PolicySlice(self.tables[t])


@dataclass(frozen=True)
class Trajectory:
    """
    State-action sequence (s^0, a^0), ..., (s^T, a^T).

    hidden_context is the ground-truth context index; only evaluation code
    reads it.
    """
    steps: Tuple[Tuple[int, int], ...]
    hidden_context: Optional[int] = None

    @property
    def horizon(self) -> int:
        return len(self.steps) - 1

    @property
    def states(self) -> np.ndarray:
        return np.array([s for s, _ in self.steps], dtype=np.int64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([a for _, a in self.steps], dtype=np.int64)


@dataclass
class TrajectoryBatch:
    """
    Array form of a set of trajectories.

    Attributes:
        states: (n, T+1) int array
        actions: (n, T+1) int array
        contexts: (n,) int array, -1 where the context is hidden
    """
    states: np.ndarray
    actions: np.ndarray
    contexts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.states.ndim != 2 or self.states.shape != self.actions.shape:
            raise ContractViolationError(
                f"states {self.states.shape} and actions {self.actions.shape} must share shape (n, T+1)"
            )
        if self.contexts is None:
            self.contexts = np.full(self.states.shape[0], -1, dtype=np.int64)
        self.contexts = np.asarray(self.contexts, dtype=np.int64)
        if self.contexts.shape != (self.states.shape[0],):
            raise ContractViolationError("contexts must have one entry per trajectory")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    def subset(self, idx: Union[np.ndarray, Sequence[int]]) -> "TrajectoryBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return TrajectoryBatch(self.states[idx], self.actions[idx], self.contexts[idx])

    def without_contexts(self) -> "TrajectoryBatch":
        return TrajectoryBatch(self.states.copy(), self.actions.copy())

    @classmethod
    def empty(cls, horizon: int) -> "TrajectoryBatch":
        shape = (0, horizon + 1)
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64))

    @classmethod
    def concat(cls, batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        return cls(
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.contexts for b in batches]),
        )

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], horizon: Optional[int] = None) -> "TrajectoryBatch":
        if not trajectories:
            if horizon is None:
                raise ContractViolationError("horizon is required for an empty trajectory list")
            return cls.empty(horizon)
        states = np.array([t.states for t in trajectories], dtype=np.int64)
        actions = np.array([t.actions for t in trajectories], dtype=np.int64)
        contexts = np.array(
            [-1 if t.hidden_context is None else t.hidden_context for t in trajectories], dtype=np.int64
        )
        return cls(states, actions, contexts)

    def to_trajectories(self) -> List[Trajectory]:
        out = []
        for i in range(len(self)):
            ctx = int(self.contexts[i])
            steps = tuple(zip(self.states[i].tolist(), self.actions[i].tolist()))
            out.append(Trajectory(steps, None if ctx < 0 else ctx))
        return out

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.to_trajectories())

    def to_frame(self) -> pd.DataFrame:
        n, length = self.states.shape
        return pd.DataFrame({
            "traj_id": np.repeat(np.arange(n), length),
            "t": np.tile(np.arange(length), n),
            "state": self.states.reshape(-1),
            "action": self.actions.reshape(-1),
            "context": np.repeat(self.contexts, length),
        }, columns=TRAJECTORY_COLUMNS)

    def to_csv(self, path, include_contexts: bool = True) -> None:
        """Write `traj_id, t, state, action, context` rows; context is -1 when hidden or excluded."""
        frame = self.to_frame()
        if not include_contexts:
            frame["context"] = -1
        frame.to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, horizon: Optional[int] = None) -> "TrajectoryBatch":
        missing = [c for c in TRAJECTORY_COLUMNS[:4] if c not in frame.columns]
        if missing:
            raise ContractViolationError(f"trajectory table lacks columns: {missing}")
        if frame.empty:
            if horizon is None:
                raise ContractViolationError("horizon is required to read an empty trajectory table")
            return cls.empty(horizon)
        frame = frame.sort_values(["traj_id", "t"])
        lengths = frame.groupby("traj_id")["t"].count()
        if lengths.nunique() != 1:
            raise ContractViolationError("trajectories in a table must share one horizon")
        length = int(lengths.iloc[0])
        n = len(lengths)
        states = frame["state"].to_numpy(dtype=np.int64).reshape(n, length)
        actions = frame["action"].to_numpy(dtype=np.int64).reshape(n, length)
        if "context" in frame.columns:
            contexts = frame["context"].to_numpy(dtype=np.int64).reshape(n, length)[:, 0]
        else:
            contexts = None
        return cls(states, actions, contexts)

    @classmethod
    def from_csv(cls, path, horizon: Optional[int] = None) -> "TrajectoryBatch":
        return cls.from_frame(pd.read_csv(path), horizon=horizon)


@dataclass(frozen=True)
class TabularEnv:
    """
    Finite mean-field game with a discrete context set.

    `reward` and `transition` are the scalar reference definitions. Environments
    built in `envs` also supply vectorized `kernel_fn` / `reward_table_fn`; when
    they are absent the tables are assembled from the scalar callables.

    Attributes:
        name: Identifier used in logs
        num_states: |S|
        num_actions: |A|
        contexts: Context values m in M
        horizon: T
        initial_mean_field: mu^0
        reward: r(s, a, mu, m)
        transition: P(. | s, a, mu) as a probability vector
        constants: Model constants echoed for provenance
    """
    name: str
    num_states: int
    num_actions: int
    contexts: Tuple[float, ...]
    horizon: int
    initial_mean_field: MeanField
    reward: RewardFn
    transition: TransitionFn
    kernel_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    reward_table_fn: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    constants: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_states < 1 or self.num_actions < 1 or self.horizon < 1:
            raise ContractViolationError("num_states, num_actions and horizon must be positive")
        if self.initial_mean_field.num_states != self.num_states:
            raise ContractViolationError("initial mean field does not match num_states")
        if not self.contexts:
            raise ContractViolationError("context set must be nonempty")
        object.__setattr__(self, "contexts", tuple(self.contexts))

    @property
    def num_contexts(self) -> int:
        return len(self.contexts)

    def with_horizon(self, horizon: int) -> "TabularEnv":
        return replace(self, horizon=horizon)

    def kernel(self, mu: np.ndarray) -> np.ndarray:
        """Transition tensor P[s, a, s'] under mean field `mu`."""
        mu = np.asarray(mu, dtype=float)
        if self.kernel_fn is not None:
            return self.kernel_fn(mu)
        field_ = MeanField(mu)
        return np.array([
            [self.transition(s, a, field_) for a in range(self.num_actions)]
            for s in range(self.num_states)
        ])

    def reward_table(self, mu: np.ndarray, m: float) -> np.ndarray:
        """Reward table r[s, a] under mean field `mu` and context value `m`."""
        mu = np.asarray(mu, dtype=float)
        if self.reward_table_fn is not None:
            return self.reward_table_fn(mu, m)
        field_ = MeanField(mu)
        return np.array([
            [self.reward(s, a, field_, m) for a in range(self.num_actions)]
            for s in range(self.num_states)
        ])

    def kernels(self, mf: MeanFieldFlow) -> np.ndarray:
        """Kernels for every mu^t of a flow, shape (T+1, S, A, S)."""
        return np.stack([self.kernel(mu) for mu in mf.probs])


def _as_probs(value, expected_ndim: int) -> np.ndarray:
    if isinstance(value, MeanField):
        return value.probs
    if isinstance(value, PolicySlice):
        return value.table
    arr = np.asarray(value, dtype=float)
    if arr.ndim != expected_ndim:
        raise ContractViolationError(f"expected a {expected_ndim}-d array, got shape {arr.shape}")
    return arr


def propagate(mu: np.ndarray, table: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Array form of one MKV step: sum_s mu(s) sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("s,sa,sat->t", mu, table, kernel)


def mkv_step(mu: Union[MeanField, np.ndarray], policy: Union[PolicySlice, np.ndarray], env: TabularEnv) -> MeanField:
    """
    One step of the McKean-Vlasov forward equation.

    Args:
        mu: Current mean field
        policy: Policy slice applied by every agent
        env: Environment supplying P(s'|s, a, mu)

    Returns:
        The next mean field

    Raises:
        ContractViolationError: If mu, policy and env disagree on dimensions
    """
    mu_arr = _as_probs(mu, 1)
    table = _as_probs(policy, 2)
    if mu_arr.shape[0] != env.num_states or table.shape != (env.num_states, env.num_actions):
        raise ContractViolationError(
            f"dimension mismatch: mu {mu_arr.shape}, policy {table.shape}, "
            f"env (S={env.num_states}, A={env.num_actions})"
        )
    nxt = propagate(mu_arr, table, env.kernel(mu_arr))
    nxt = np.clip(nxt, 0.0, None)
    return MeanField(nxt / nxt.sum())


def rollout(env: TabularEnv, pf: PolicyFlow, mu0: Optional[Union[MeanField, np.ndarray]] = None) -> MeanFieldFlow:
    """Forward MKV propagation of a whole policy flow from mu^0."""
    start = env.initial_mean_field.probs if mu0 is None else _as_probs(mu0, 1)
    probs = np.empty((pf.horizon + 1, env.num_states))
    probs[0] = start
    for t in range(pf.horizon):
        probs[t + 1] = mkv_step(probs[t], pf.tables[t], env).probs
    return MeanFieldFlow(probs)


def _check_flow_dims(mf: MeanFieldFlow, pf: PolicyFlow, env: TabularEnv) -> None:
    if mf.horizon != pf.horizon:
        raise ContractViolationError(f"horizon mismatch: mean field {mf.horizon}, policy {pf.horizon}")
    if mf.num_states != env.num_states or pf.tables.shape[1:] != (env.num_states, env.num_actions):
        raise ContractViolationError("flow dimensions do not match the environment")


def _resolve_policy(pf: Union[PolicyFlow, Mapping[Any, PolicyFlow]], m) -> PolicyFlow:
    if isinstance(pf, PolicyFlow):
        return pf
    if m not in pf:
        raise ContractViolationError(f"no policy flow for context {m!r}")
    return pf[m]


def batch_log_prob(
    batch: TrajectoryBatch,
    mf: MeanFieldFlow,
    pf: PolicyFlow,
    env: TabularEnv,
    kernels: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Vectorized trajectory_log_prob over a batch.

    The product runs over mu^0(s^0), every pi^t(a^t|s^t) for t = 0..T, and the
    transitions P(s^{t+1}|s^t, a^t, mu^t) for t = 0..T-1.

    Returns:
        (n,) array with LOG_ZERO where any factor vanishes
    """
    _check_flow_dims(mf, pf, env)
    if batch.horizon != mf.horizon:
        raise ContractViolationError(f"trajectory horizon {batch.horizon} != flow horizon {mf.horizon}")
    if kernels is None:
        kernels = env.kernels(mf)
    s, a = batch.states, batch.actions
    if s.size and (s.min() < 0 or s.max() >= env.num_states or a.min() < 0 or a.max() >= env.num_actions):
        raise ContractViolationError("trajectory indices outside the environment's ranges")
    T = mf.horizon
    t_idx = np.arange(T + 1)
    factors = [mf.probs[0][s[:, 0]][:, None], pf.tables[t_idx, s, a]]
    if T > 0:
        factors.append(kernels[t_idx[:-1], s[:, :-1], a[:, :-1], s[:, 1:]])
    prob = np.concatenate(factors, axis=1)
    with np.errstate(divide="ignore"):
        return np.log(prob).sum(axis=1)


def trajectory_log_prob(
    tau: Trajectory,
    mf: MeanFieldFlow,
    pf: Union[PolicyFlow, Mapping[Any, PolicyFlow]],
    env: TabularEnv,
    m=None,
) -> float:
    """
    Log-probability of a trajectory under (mean-field flow, policy flow).

    Args:
        tau: Trajectory of horizon T
        mf: Mean-field flow driving the transitions
        pf: Policy flow conditioned on m, or a mapping context -> PolicyFlow
        env: Environment
        m: Context key used when pf is a mapping

    Returns:
        The log-probability, or LOG_ZERO when any factor is 0
    """
    flow = _resolve_policy(pf, m)
    batch = TrajectoryBatch.from_trajectories([tau])
    return float(batch_log_prob(batch, mf, flow, env)[0])


class Simulator:
    """
    Sampling-only view of an environment.

    Learners see the dynamics through reset() and step() only; rewards and
    kernels are not exposed.

    Example:
        sim = Simulator(env)
        states = sim.reset(64, rng)
        nxt = sim.step(states, actions, mu_hat[t], rng)
    """

    def __init__(self, env: TabularEnv):
        self._env = env
        self.num_states = env.num_states
        self.num_actions = env.num_actions
        self.horizon = env.horizon

    def reset(self, n: int, rng: np.random.Generator, mu: Optional[np.ndarray] = None) -> np.ndarray:
        """Draw n initial states from mu^0 (or from `mu` when given)."""
        probs = self._env.initial_mean_field.probs if mu is None else np.asarray(mu, dtype=float)
        return categorical_draw(np.broadcast_to(probs, (n, self.num_states)), rng)

    def step(self, states: np.ndarray, actions: np.ndarray, mu: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw next states for a batch of agents under mean field `mu`."""
        kernel = self._env.kernel(mu)
        return categorical_draw(kernel[states, actions], rng)


def sample_batch(
    env: TabularEnv,
    mf: MeanFieldFlow,
    pf: PolicyFlow,
    n: int,
    rng: np.random.Generator,
    context: int = -1,
) -> TrajectoryBatch:
    """Draw n trajectories with transitions driven by the flow `mf`."""
    T = pf.horizon
    sim = Simulator(env)
    states = np.empty((n, T + 1), dtype=np.int64)
    actions = np.empty((n, T + 1), dtype=np.int64)
    states[:, 0] = sim.reset(n, rng)
    for t in range(T + 1):
        actions[:, t] = categorical_draw(pf.tables[t][states[:, t]], rng)
        if t < T:
            states[:, t + 1] = sim.step(states[:, t], actions[:, t], mf.probs[t], rng)
    return TrajectoryBatch(states, actions, np.full(n, context, dtype=np.int64))


def sample_trajectory(
    env: TabularEnv,
    mf_override: Optional[MeanFieldFlow],
    pf: PolicyFlow,
    m: Optional[int],
    rng: np.random.Generator,
) -> Trajectory:
    """
    Sample one trajectory: s^0 ~ mu^0, a^t ~ pi^t, s^{t+1} ~ P(.|s^t, a^t, mu^t).

    Args:
        env: Environment
        mf_override: Flow whose mu^t drives the transitions; when None the
            MKV rollout of `pf` is used
        pf: Policy flow (already conditioned on the context)
        m: Context index recorded as hidden_context (None to leave it unset)
        rng: Injected random source

    Returns:
        Trajectory of horizon pf.horizon
    """
    mf = rollout(env, pf) if mf_override is None else mf_override
    _check_flow_dims(mf, pf, env)
    batch = sample_batch(env, mf, pf, 1, rng, context=-1 if m is None else m)
    return batch.to_trajectories()[0]


def enumerate_trajectories(
    env: TabularEnv,
    horizon: int,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> List[Trajectory]:
    """
    Every trajectory of the given horizon, in lexicographic order.

    Raises:
        EnumerationCapError: If (|S||A|)^(T+1) exceeds `cap`
    """
    pairs = list(itertools.product(range(env.num_states), range(env.num_actions)))
    required = len(pairs) ** (horizon + 1)
    if required > cap:
        raise EnumerationCapError(cap=cap, required=required)
    return [Trajectory(tuple(steps)) for steps in itertools.product(pairs, repeat=horizon + 1)]


def enumerate_batch(env: TabularEnv, horizon: int, cap: int = DEFAULT_ENUMERATION_CAP) -> TrajectoryBatch:
    """enumerate_trajectories in array form."""
    return TrajectoryBatch.from_trajectories(enumerate_trajectories(env, horizon, cap), horizon=horizon)


def _step_errors(mf: MeanFieldFlow, pf: PolicyFlow, env: TabularEnv) -> np.ndarray:
    _check_flow_dims(mf, pf, env)
    errors = np.zeros((mf.horizon + 1, env.num_states))
    for t in range(1, mf.horizon + 1):
        predicted = propagate(mf.probs[t - 1], pf.tables[t - 1], env.kernel(mf.probs[t - 1]))
        errors[t] = mf.probs[t] - predicted
    return errors


def consistency_residual(mf: MeanFieldFlow, pf: PolicyFlow, env: TabularEnv) -> float:
    """
    Mean squared one-step MKV error over t = 1..T-1.

    Returns 0.0 when T < 2 (the index range is empty).
    """
    T = mf.horizon
    if T < 2:
        return 0.0
    errors = _step_errors(mf, pf, env)[1:T]
    return float(np.sum(errors ** 2) / ((T - 1) * env.num_states))


def consistency_residual_full(mf: MeanFieldFlow, pf: PolicyFlow, env: TabularEnv) -> float:
    """Diagnostic variant of consistency_residual over t = 1..T."""
    T = mf.horizon
    errors = _step_errors(mf, pf, env)[1:T + 1]
    return float(np.sum(errors ** 2) / (T * env.num_states))
