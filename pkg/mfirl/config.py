"""
Experiment configuration.

Resolution order, lowest to highest precedence:

1. ExperimentConfig defaults
2. a flat ``key = value`` file (``#`` comments and blank lines ignored)
3. ``MFIRL_<FIELD>`` environment variables (a ``.env`` file is loaded first)
4. explicit CLI flags
"""

import hashlib
import logging
import os
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Dict, Any, Tuple, Mapping

from dotenv import find_dotenv, load_dotenv

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "MFIRL_"
CHECKPOINT_KEY_VAR = "MFIRL_CHECKPOINT_KEY"
CHECKPOINT_KEY_PREVIOUS_VAR = "MFIRL_CHECKPOINT_KEY_PREVIOUS"
ALGORITHMS = ("pemmfirl", "mfairl")
NONE_TEXT = "none"


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Every knob of a run. Defaults follow the published experiment settings
    where those are stated.

    Attributes:
        env: virus, malware, invest or taxi
        taxi_model: GridModel JSON used when env is taxi
        horizon: Trajectory length T
        demo_count: Expert trajectories per demonstration set
        num_contexts: Learner context cardinality |M|
        prior: Prior over the environment's contexts (uniform when unset)
        algorithm: pemmfirl or mfairl
        seeds: Seeds to fan out over
        workers: Concurrent seeds
        iterations: Training iterations per seed
        batch_size: Trajectories per gradient step
        sampler_steps: Sampler updates per iteration; each one after the first draws fresh rollouts
        lr: Reward-network learning rate
        psi_lr: Inference-network learning rate
        sampler_lr: Sampler learning rate
        hidden: Hidden width of every network
        negative_slope: Leaky-ReLU slope
        tol: ERMFNE tolerance
        max_iter: ERMFNE iteration cap
        damping: Initial mean-field damping
        heldout_fraction: Share of demos kept for evaluation
        eval_trajectories: Held-out trajectories scored by eval
        log_every: Log cadence in iterations
        checkpoint_every: Checkpoint cadence in iterations
        record_wall_time: Add wall_ms to logs (breaks byte-identical reruns)
        etas: Price caps evaluated by taxi-run
        fleet_size: Taxis simulated by taxi-run
        output_dir: Root of all result files
    """
    env: str = "virus"
    taxi_model: Optional[str] = None
    horizon: int = 50
    demo_count: int = 1000
    num_contexts: int = 2
    prior: Optional[Tuple[float, ...]] = None
    algorithm: str = "pemmfirl"
    seeds: Tuple[int, ...] = tuple(range(10))
    workers: int = 1
    iterations: int = 2000
    batch_size: int = 64
    sampler_steps: int = 1
    lr: float = 1e-4
    psi_lr: float = 1e-4
    sampler_lr: float = 1e-4
    hidden: int = 64
    negative_slope: float = 0.01
    tol: float = 1e-10
    max_iter: int = 10000
    damping: float = 0.0
    heldout_fraction: float = 0.2
    eval_trajectories: int = 200
    log_every: int = 100
    checkpoint_every: int = 100
    record_wall_time: bool = False
    etas: Tuple[float, ...] = (5.0, 10.0, 15.0, 20.0)
    fleet_size: int = 500
    output_dir: str = "runs"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got '{self.algorithm}'")
        for name in ("horizon", "num_contexts", "iterations", "batch_size", "hidden", "workers", "max_iter"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive", details={"field": name})
        if self.demo_count < 0:
            raise ConfigurationError("demo_count must be non-negative")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigurationError("damping must lie in [0, 1)")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigurationError("heldout_fraction must lie in [0, 1)")

    def echo(self) -> str:
        """Every field as sorted ``key = value`` lines; also a valid config file."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            text = format_value(getattr(self, f.name))
            if f.name == "seeds" and len(self.seeds) == 1:
                text += ","  # a bare integer reads as a seed count
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()

    def with_updates(self, **updates) -> "ExperimentConfig":
        return replace(self, **updates)

    def run_dir(self, seed: Optional[int] = None) -> Path:
        root = Path(self.output_dir) / self.env / self.algorithm
        return root if seed is None else root / f"seed{seed}"


_FIELD_TYPES: Dict[str, Any] = {f.name: f.type for f in fields(ExperimentConfig)}


def format_value(value) -> str:
    if value is None:
        return NONE_TEXT
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_seeds(text: str) -> Tuple[int, ...]:
    """
    "10" means seeds 0..9; "3,7" is an explicit list.

    Example:
        parse_seeds("3")     # (0, 1, 2)
        parse_seeds("3,7")   # (3, 7)
    """
    text = text.strip()
    try:
        if "," in text:
            return tuple(int(part) for part in text.split(",") if part.strip())
        return tuple(range(int(text)))
    except ValueError:
        raise ConfigurationError(f"cannot read seeds from '{text}'")


def coerce(name: str, text: str):
    """
    Convert text to the declared type of an ExperimentConfig field.

    Raises:
        ConfigurationError: If the key is unknown or the text does not parse
    """
    if name not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key '{name}'", details={"key": name})
    if name == "seeds":
        return parse_seeds(text)
    return _coerce_type(name, _FIELD_TYPES[name], text.strip())


def _coerce_type(name: str, kind, text: str):
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if origin is typing.Union and type(None) in args:
        if text.lower() in (NONE_TEXT, ""):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce_type(name, inner, text)
    if origin is tuple:
        return tuple(_coerce_type(name, args[0], part.strip()) for part in text.split(",") if part.strip())
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"cannot read {name} from '{text}'", details={"key": name, "value": text})


def read_config_file(path) -> Dict[str, Any]:
    """Parse a flat ``key = value`` file into coerced values."""
    values: Dict[str, Any] = {}
    for number, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{number}: expected 'key = value'", details={"line": number})
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    logger.debug("read config file path=%s keys=%s", path, sorted(values))
    return values


def read_environment(environ: Optional[Mapping[str, str]] = None, dotenv_path=None) -> Dict[str, Any]:
    """
    Values from MFIRL_<FIELD> variables.

    When reading the process environment, a ``.env`` file is loaded first
    (without overriding variables that are already set).
    """
    if environ is None:
        load_dotenv(dotenv_path=dotenv_path or find_dotenv(usecwd=True))
        environ = os.environ
    values = {}
    for name in _FIELD_TYPES:
        text = environ.get(ENV_PREFIX + name.upper())
        if text is not None:
            values[name] = coerce(name, text)
    return values


def load_config(
    path=None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    dotenv_path=None,
) -> ExperimentConfig:
    """
    Resolve an ExperimentConfig through every layer.

    Args:
        path: Optional config file
        overrides: CLI flag values; None entries mean "not given"
        environ: Environment mapping (defaults to os.environ plus .env)
        dotenv_path: Explicit .env location

    Returns:
        The resolved, validated ExperimentConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(read_environment(environ, dotenv_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown config key '{key}'", details={"key": key})
        values[key] = coerce(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def checkpoint_keys(environ: Optional[Mapping[str, str]] = None) -> Tuple[Optional[str], Optional[str]]:
    """(primary, previous) signing keys from the environment; None when unset."""
    environ = os.environ if environ is None else environ
    return environ.get(CHECKPOINT_KEY_VAR) or None, environ.get(CHECKPOINT_KEY_PREVIOUS_VAR) or None
