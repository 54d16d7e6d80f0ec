"""
Evaluation metrics comparing learned and expert equilibria.

Both metrics are deterministic: KL divergences between policy tables and
expected returns by forward propagation of state marginals.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Dict, Any, Mapping, Sequence, Union, List

import numpy as np

from .core import MeanFieldFlow, PolicyFlow, TabularEnv, propagate
from .exceptions import ContractViolationError
from .solver import Ermfne, RewardOverride, _reward_tables

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["seed", "policy_deviation", "weighted_policy_deviation", "expected_return_gap", "inference_accuracy", "wall_ms"]

Prior = Union[Sequence[float], Mapping[Any, float]]


def _prior_weights(keys: Sequence[Any], prior: Prior) -> List[float]:
    if isinstance(prior, Mapping):
        return [float(prior[k]) for k in keys]
    weights = [float(p) for p in prior]
    if len(weights) != len(keys):
        raise ContractViolationError(f"prior has {len(weights)} entries for {len(keys)} contexts")
    return weights


def _kl_tables(expert: np.ndarray, learned: np.ndarray) -> np.ndarray:
    """Per-(t, s) KL(expert || learned); +inf where learned misses expert support."""
    if expert.shape != learned.shape:
        raise ContractViolationError(f"policy shapes differ: {expert.shape} vs {learned.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expert > 0, expert * (np.log(expert) - np.log(learned)), 0.0)
    return terms.sum(axis=-1)


def policy_deviation(
    expert: Mapping[Any, PolicyFlow],
    learned: Mapping[Any, PolicyFlow],
    prior: Prior,
) -> float:
    """
    sum_m p(m) sum_t sum_s KL(pi_E^t(.|s, m) || pi_L^t(.|s, m)).

    Args:
        expert: Context -> expert policy flow
        learned: Context -> learned policy flow (same keys)
        prior: Context weights, a mapping or a sequence in `expert`'s key order

    Returns:
        The deviation; float("inf") when the learned policy puts zero mass
        where the expert does not
    """
    keys = list(expert)
    if set(keys) != set(learned):
        raise ContractViolationError("expert and learned policies cover different contexts")
    total = 0.0
    for m, w in zip(keys, _prior_weights(keys, prior)):
        if w == 0.0:
            continue
        total += w * float(_kl_tables(expert[m].tables, learned[m].tables).sum())
    return total


def weighted_policy_deviation(
    expert: Mapping[Any, PolicyFlow],
    learned: Mapping[Any, PolicyFlow],
    prior: Prior,
    expert_flows: Mapping[Any, MeanFieldFlow],
) -> float:
    """Diagnostic variant of policy_deviation with each (t, s) term weighted by mu_E^t(s|m)."""
    keys = list(expert)
    if set(keys) != set(learned) or not set(keys) <= set(expert_flows):
        raise ContractViolationError("expert, learned and mean-field flows cover different contexts")
    total = 0.0
    for m, w in zip(keys, _prior_weights(keys, prior)):
        if w == 0.0:
            continue
        kl = _kl_tables(expert[m].tables, learned[m].tables)
        mu = expert_flows[m].probs
        with np.errstate(invalid="ignore"):
            total += w * float(np.sum(np.where(mu > 0, mu * kl, 0.0)))
    return total


def expected_return(
    env: TabularEnv,
    mf: MeanFieldFlow,
    pf: PolicyFlow,
    m,
    reward_table: Optional[RewardOverride] = None,
) -> float:
    """
    E[sum_{t<T} r(s^t, a^t, mu^t, m)] by marginal propagation under transitions fixed by `mf`.

    Example:
        eq = solve_ermfne(env, 1.0)
        expected_return(env, eq.mean_field_flow, eq.policy_flow, 1.0)
    """
    rewards = _reward_tables(env, mf, m, reward_table)
    dist = env.initial_mean_field.probs.copy()
    total = 0.0
    for t in range(mf.horizon):
        table = pf.tables[t]
        total += float(np.sum(dist[:, None] * table * rewards[t]))
        dist = propagate(dist, table, env.kernel(mf.probs[t]))
    return total


def expected_return_gap(
    env: TabularEnv,
    expert_eq: Mapping[Any, Ermfne],
    learned_eq: Mapping[Any, Ermfne],
    prior: Prior,
) -> float:
    """
    |sum_m p(m) (R_E(m) - R_L(m))| with both returns under the ground-truth reward.

    Context keys are reward context values (as produced by solve_contexts).
    """
    keys = list(expert_eq)
    diff = 0.0
    for m, w in zip(keys, _prior_weights(keys, prior)):
        e, l = expert_eq[m], learned_eq[m]
        diff += w * (
            expected_return(env, e.mean_field_flow, e.policy_flow, m)
            - expected_return(env, l.mean_field_flow, l.policy_flow, m)
        )
    return abs(diff)


def inference_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise ContractViolationError("inference_accuracy needs two equal-length nonempty label arrays")
    return float(np.mean(predicted == truth))


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """Median and (population) variance over runs, plus the run count."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return {"median": float("nan"), "variance": float("nan"), "count": 0}
    return {"median": float(np.median(arr)), "variance": float(np.var(arr)), "count": int(arr.size)}


@dataclass
class EvaluationReport:
    """Per-seed evaluation row"""
    seed: int
    policy_deviation: float
    weighted_policy_deviation: float
    expected_return_gap: float
    per_context: Dict[Any, Dict[str, float]] = field(default_factory=dict)
    inference_accuracy: Optional[float] = None
    wall_ms: Optional[float] = None

    def to_row(self) -> Dict[str, Any]:
        row = {k: v for k, v in asdict(self).items() if k != "per_context"}
        for m, values in self.per_context.items():
            for name, value in values.items():
                row[f"{name}[{m}]"] = value
        return row


def evaluate_equilibria(
    env: TabularEnv,
    expert_eq: Mapping[Any, Ermfne],
    learned_eq: Mapping[Any, Ermfne],
    prior: Prior,
    seed: int,
    inference_acc: Optional[float] = None,
) -> EvaluationReport:
    """Policy deviation (plain and mu_E-weighted) and return gap, overall and per context."""
    keys = list(expert_eq)
    expert_pf = {m: expert_eq[m].policy_flow for m in keys}
    learned_pf = {m: learned_eq[m].policy_flow for m in keys}
    expert_mu = {m: expert_eq[m].mean_field_flow for m in keys}
    per_context = {}
    for m in keys:
        per_context[m] = {
            "policy_deviation": policy_deviation({m: expert_pf[m]}, {m: learned_pf[m]}, [1.0]),
            "weighted_policy_deviation": weighted_policy_deviation({m: expert_pf[m]}, {m: learned_pf[m]}, [1.0], expert_mu),
            "expected_return_gap": expected_return_gap(env, {m: expert_eq[m]}, {m: learned_eq[m]}, [1.0]),
        }
    report = EvaluationReport(
        seed=seed,
        policy_deviation=policy_deviation(expert_pf, learned_pf, prior),
        weighted_policy_deviation=weighted_policy_deviation(expert_pf, learned_pf, prior, expert_mu),
        expected_return_gap=expected_return_gap(env, expert_eq, learned_eq, prior),
        per_context=per_context,
        inference_accuracy=inference_acc,
    )
    logger.info(
        "evaluation seed=%d policy_deviation=%.6g weighted_policy_deviation=%.6g expected_return_gap=%.6g",
        seed, report.policy_deviation, report.weighted_policy_deviation, report.expected_return_gap,
    )
    return report
