"""The simulated context-conditioned environments: VIRUS, MALWARE and INVEST"""

import logging
from typing import Dict, Any, Sequence

import numpy as np

from .core import MeanField, TabularEnv
from .exceptions import UnknownEnvironmentError, ContractViolationError

logger = logging.getLogger(__name__)

NUM_LEVELS = 10

# VIRUS
SUSCEPTIBLE, INFECTED = 0, 1
GO_OUT, DISTANCE = 0, 1
VIRUS_CONTEXTS = (0.5, 1.0)
RECOVERY_PROB = 0.3
INFECTION_SCALE = 0.9 ** 2

# MALWARE
DO_NOTHING, INTERVENE = 0, 1
MALWARE_CONTEXTS = (0.2, 0.4)
INTERVENE_COST = 0.5

# INVEST
NO_INVEST, INVEST = 0, 1
INVEST_CONTEXTS = (0.2, 0.5)
QUALITY_GAIN = 0.3
COMPETITION_COST = 0.2
QUALITY_THRESHOLD = 4.0


def mean_state(mu) -> float:
    """
    Average level <mu> = sum_s s * mu(s) over integer-labelled states.

    Args:
        mu: MeanField or probability vector

    Returns:
        Weighted average in [0, |S|-1]
    """
    probs = mu.probs if isinstance(mu, MeanField) else np.asarray(mu, dtype=float)
    return float(np.dot(np.arange(probs.shape[0]), probs))


def discretize_jump(s: int, halved: bool = False, num_states: int = NUM_LEVELS) -> np.ndarray:
    """
    Exact law of s + floor(chi * (10 - s)) (or of the halved jump) for chi ~ U[0, 1).

    The jump k = floor(chi * c) with c = 10 - s (or (10 - s) / 2) takes the
    value j with probability equal to the length of [j/c, (j+1)/c) inside [0, 1).

    Example:
        discretize_jump(5)            # uniform 1/5 over {5..9}
        discretize_jump(8, True)      # point mass at 8
    """
    if not 0 <= s < num_states:
        raise ContractViolationError(f"state {s} outside 0..{num_states - 1}")
    span = (num_states - s) / (2.0 if halved else 1.0)
    probs = np.zeros(num_states)
    j = np.arange(num_states - s)
    mass = np.clip(np.minimum((j + 1) / span, 1.0) - j / span, 0.0, None)
    probs[s:] = mass
    return probs / probs.sum()


def _jump_table(halved: bool) -> np.ndarray:
    return np.stack([discretize_jump(s, halved) for s in range(NUM_LEVELS)])


_FULL_JUMPS = _jump_table(False)
_HALF_JUMPS = _jump_table(True)


# -- VIRUS -----------------------------------------------------------------

def _virus_kernel(mu: np.ndarray) -> np.ndarray:
    infect = INFECTION_SCALE * mu[INFECTED]
    kernel = np.zeros((2, 2, 2))
    kernel[SUSCEPTIBLE, GO_OUT] = (1.0 - infect, infect)
    kernel[SUSCEPTIBLE, DISTANCE] = (1.0, 0.0)
    kernel[INFECTED, :] = (RECOVERY_PROB, 1.0 - RECOVERY_PROB)
    return kernel


def _virus_reward_table(mu: np.ndarray, m: float) -> np.ndarray:
    table = np.zeros((2, 2))
    table[INFECTED, :] -= 1.0
    table[:, DISTANCE] -= m
    return table


def _virus_reward(s: int, a: int, mu: MeanField, m: float) -> float:
    return -float(s == INFECTED) - m * float(a == DISTANCE)


def _virus_transition(s: int, a: int, mu: MeanField) -> np.ndarray:
    return _virus_kernel(mu.probs)[s, a].copy()


# -- MALWARE ---------------------------------------------------------------

def _malware_kernel(mu: np.ndarray) -> np.ndarray:
    kernel = np.zeros((NUM_LEVELS, 2, NUM_LEVELS))
    kernel[:, DO_NOTHING] = _FULL_JUMPS
    kernel[:, INTERVENE, 0] = 1.0
    return kernel


def _malware_reward_table(mu: np.ndarray, m: float) -> np.ndarray:
    levels = np.arange(NUM_LEVELS)
    table = np.repeat((-(m + mean_state(mu)) * levels / 10.0)[:, None], 2, axis=1)
    table[:, INTERVENE] -= INTERVENE_COST
    return table


def _malware_reward(s: int, a: int, mu: MeanField, m: float) -> float:
    return -(m + mean_state(mu)) * s / 10.0 - INTERVENE_COST * a


def _malware_transition(s: int, a: int, mu: MeanField) -> np.ndarray:
    return _malware_kernel(mu.probs)[s, a].copy()


# -- INVEST ----------------------------------------------------------------

def _invest_kernel(mu: np.ndarray) -> np.ndarray:
    kernel = np.zeros((NUM_LEVELS, 2, NUM_LEVELS))
    kernel[:, NO_INVEST] = np.eye(NUM_LEVELS)
    kernel[:, INVEST] = _HALF_JUMPS if mean_state(mu) >= QUALITY_THRESHOLD else _FULL_JUMPS
    return kernel


def _invest_reward_table(mu: np.ndarray, m: float) -> np.ndarray:
    levels = np.arange(NUM_LEVELS)
    base = QUALITY_GAIN * levels / 10.0 - COMPETITION_COST * mean_state(mu)
    table = np.repeat(base[:, None], 2, axis=1)
    table[:, INVEST] -= m
    return table


def _invest_reward(s: int, a: int, mu: MeanField, m: float) -> float:
    return QUALITY_GAIN * s / 10.0 - COMPETITION_COST * mean_state(mu) - m * a


def _invest_transition(s: int, a: int, mu: MeanField) -> np.ndarray:
    return _invest_kernel(mu.probs)[s, a].copy()


ENVIRONMENTS = ("virus", "malware", "invest")


def build_env(name: str, horizon: int = 50) -> TabularEnv:
    """
    Build one of the simulated environments with uniform mu^0.

    Args:
        name: "virus", "malware" or "invest" (case-insensitive)
        horizon: T

    Returns:
        A fully populated TabularEnv

    Raises:
        UnknownEnvironmentError: If the name is not recognised
    """
    key = name.lower()
    if key == "virus":
        env = TabularEnv(
            name="virus", num_states=2, num_actions=2, contexts=VIRUS_CONTEXTS, horizon=horizon,
            initial_mean_field=MeanField.uniform(2),
            reward=_virus_reward, transition=_virus_transition,
            kernel_fn=_virus_kernel, reward_table_fn=_virus_reward_table,
            constants={"recovery_prob": RECOVERY_PROB, "infection_scale": INFECTION_SCALE},
        )
    elif key == "malware":
        env = TabularEnv(
            name="malware", num_states=NUM_LEVELS, num_actions=2, contexts=MALWARE_CONTEXTS, horizon=horizon,
            initial_mean_field=MeanField.uniform(NUM_LEVELS),
            reward=_malware_reward, transition=_malware_transition,
            kernel_fn=_malware_kernel, reward_table_fn=_malware_reward_table,
            constants={"alpha": INTERVENE_COST},
        )
    elif key == "invest":
        env = TabularEnv(
            name="invest", num_states=NUM_LEVELS, num_actions=2, contexts=INVEST_CONTEXTS, horizon=horizon,
            initial_mean_field=MeanField.uniform(NUM_LEVELS),
            reward=_invest_reward, transition=_invest_transition,
            kernel_fn=_invest_kernel, reward_table_fn=_invest_reward_table,
            constants={"d": QUALITY_GAIN, "c": COMPETITION_COST, "q": QUALITY_THRESHOLD},
        )
    else:
        raise UnknownEnvironmentError(name, ENVIRONMENTS)
    logger.info("built environment %s", format_description(describe(env)))
    return env


def build_random_env(
    rng: np.random.Generator,
    num_states: int = 2,
    num_actions: int = 2,
    horizon: int = 3,
    contexts: Sequence[float] = (0.0, 1.0),
    coupling: float = 0.3,
    deterministic: bool = False,
) -> TabularEnv:
    """
    Tiny random mean-field-coupled instance for the validation oracles.

    Transitions mix a random kernel with the mean field,
    P(.|s, a, mu) = (1 - coupling) * K[s, a] + coupling * mu, and rewards are
    R[s, a] + m * C[s, a] - mu(s).

    With deterministic=True the next state is one of two random maps
    next(s, a), switched by whether mu(0) >= 0.5.
    """
    base_kernel = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    base_reward = rng.normal(size=(num_states, num_actions))
    context_term = rng.normal(size=(num_states, num_actions))
    mu0 = rng.dirichlet(np.ones(num_states))
    maps = rng.integers(0, num_states, size=(2, num_states, num_actions))
    eye = np.eye(num_states)

    def kernel_fn(mu: np.ndarray) -> np.ndarray:
        if deterministic:
            return eye[maps[int(mu[0] >= 0.5)]]
        return (1.0 - coupling) * base_kernel + coupling * mu[None, None, :]

    def reward_table_fn(mu: np.ndarray, m: float) -> np.ndarray:
        return base_reward + m * context_term - mu[:, None]

    return TabularEnv(
        name="random", num_states=num_states, num_actions=num_actions, contexts=tuple(contexts),
        horizon=horizon, initial_mean_field=MeanField(mu0),
        reward=lambda s, a, mu, m: float(reward_table_fn(mu.probs, m)[s, a]),
        transition=lambda s, a, mu: kernel_fn(mu.probs)[s, a].copy(),
        kernel_fn=kernel_fn, reward_table_fn=reward_table_fn,
        constants={"coupling": coupling, "deterministic": deterministic},
    )


def describe(env: TabularEnv) -> Dict[str, Any]:
    """Provenance record: name, constants, horizon and context set."""
    return {
        "name": env.name,
        "num_states": env.num_states,
        "num_actions": env.num_actions,
        "horizon": env.horizon,
        "contexts": list(env.contexts),
        **{f"const.{k}": v for k, v in sorted(env.constants.items())},
    }


def format_description(record: Dict[str, Any]) -> str:
    return " ".join(f"{k}={v}" for k, v in record.items())
