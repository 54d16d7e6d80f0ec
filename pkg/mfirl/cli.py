"""
Command-line experiment runner.

    mfirl solve --env virus --horizon 50
    mfirl demos --env virus --demo-count 1000
    mfirl train --env virus --algo pemmfirl --seeds 10 --workers 4
    mfirl eval --env virus --algo pemmfirl --seeds 10
    mfirl taxi-ingest trips.csv
    mfirl taxi-run --taxi-model runs/taxi/grid_model.json
    mfirl oracle-check --instances 20 --resamples 10000

Every failure ends with one stderr line ``error code=<Class> message="..."``
and a nonzero exit status.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Dict, Any, List, Callable, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import DEFAULT_KEY, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, checkpoint_keys, load_config
from .core import Simulator, TabularEnv
from .envs import ENVIRONMENTS, build_env, describe, format_description
from .exceptions import ConfigurationError, DataError, MfirlError, UnknownEnvironmentError
from .metrics import REPORT_COLUMNS, evaluate_equilibria, summarize
from .mfairl import MfairlConfig, MfairlState, train_mfairl
from .oracles import run_oracle_suite
from .pemmfirl import (
    RECORD_COLUMNS,
    PemmfirlConfig,
    PemmfirlState,
    learned_equilibria,
    meta_test_records,
    meta_train,
    slot_alignment,
)
from .plots import chart_title, log_series, write_line_chart
from .registry import RunRegistry
from .solver import DemonstrationSet, generate_demonstrations, read_equilibria, solve_contexts, write_equilibria
from .taxi import (
    GridModel,
    Grid,
    BoundingBox,
    PricingConfig,
    ProfitKernel,
    build_grid_model,
    build_pricing_env,
    ingest_trips,
    reference_note,
    run_pricing_experiment,
    synthetic_trips,
    write_heatmaps,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "log.csv"
RUN_LOG_NAME = "run.log"
USAGE_ERRORS = (ConfigurationError, UnknownEnvironmentError)
VALID_ENVS = ENVIRONMENTS + ("taxi",)
SUMMARY_METRICS = ("policy_deviation", "expected_return_gap", "inference_accuracy")
# meta-test reward source -> per-trajectory records file
RECORD_SOURCES = {"learned": "eval_records.csv", "ground_truth": "eval_records_ground_truth.csv"}

_installed_handlers: List[logging.Handler] = []

# CLI flag → ExperimentConfig field
CONFIG_FLAGS = {
    "--env": "env",
    "--taxi-model": "taxi_model",
    "--horizon": "horizon",
    "--demo-count": "demo_count",
    "--num-contexts": "num_contexts",
    "--prior": "prior",
    "--algo": "algorithm",
    "--seeds": "seeds",
    "--workers": "workers",
    "--iterations": "iterations",
    "--batch-size": "batch_size",
    "--sampler-steps": "sampler_steps",
    "--lr": "lr",
    "--psi-lr": "psi_lr",
    "--sampler-lr": "sampler_lr",
    "--hidden": "hidden",
    "--tol": "tol",
    "--max-iter": "max_iter",
    "--damping": "damping",
    "--heldout-fraction": "heldout_fraction",
    "--eval-trajectories": "eval_trajectories",
    "--log-every": "log_every",
    "--checkpoint-every": "checkpoint_every",
    "--record-wall-time": "record_wall_time",
    "--etas": "etas",
    "--fleet-size": "fleet_size",
    "--output-dir": "output_dir",
}


# -- paths and shared setup --------------------------------------------------

def env_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config.env


def equilibrium_paths(config: ExperimentConfig) -> Tuple[Path, Path]:
    root = env_dir(config)
    return root / "equilibria_mu.csv", root / "equilibria_pi.csv"


def demo_paths(config: ExperimentConfig) -> Tuple[Path, Path]:
    """(trajectories, evaluation-only contexts)."""
    root = env_dir(config)
    return root / "demos.csv", root / "demos_contexts.csv"


def resolve_env(config: ExperimentConfig) -> TabularEnv:
    """
    Raises:
        UnknownEnvironmentError: If config.env is not a known environment
        ConfigurationError: If env is taxi and no grid model is configured
    """
    if config.env.lower() == "taxi":
        if config.taxi_model is None:
            raise ConfigurationError("env taxi needs taxi_model (run taxi-ingest first)")
        model = GridModel.from_json(Path(config.taxi_model))
        return build_pricing_env(model, ProfitKernel(model, fleet_size=float(config.fleet_size), context_weighted=True), config.horizon)
    if config.env.lower() not in ENVIRONMENTS:
        raise UnknownEnvironmentError(config.env, VALID_ENVS)
    return build_env(config.env, config.horizon)


def resolve_prior(config: ExperimentConfig, env: TabularEnv) -> np.ndarray:
    if config.prior is None:
        return np.full(env.num_contexts, 1.0 / env.num_contexts)
    prior = np.asarray(config.prior, dtype=float)
    if prior.shape != (env.num_contexts,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
        raise ConfigurationError(f"prior must be a distribution over {env.num_contexts} contexts")
    return prior


def load_experts(config: ExperimentConfig, env: TabularEnv):
    mu_path, pi_path = equilibrium_paths(config)
    if not mu_path.exists() or not pi_path.exists():
        raise DataError(f"no equilibria under {env_dir(config)}; run solve first")
    return read_equilibria(mu_path, pi_path, env)


def load_demos(config: ExperimentConfig, env: TabularEnv, with_contexts: bool = False) -> DemonstrationSet:
    """Training reads trajectories only; evaluation also joins the contexts file."""
    path, contexts_path = demo_paths(config)
    if not path.exists():
        raise DataError(f"no demonstrations at {path}; run demos first")
    if with_contexts and not contexts_path.exists():
        raise DataError(f"evaluation-only contexts file {contexts_path} is missing")
    return DemonstrationSet.from_csv(
        path, resolve_prior(config, env), env.contexts, horizon=config.horizon,
        contexts_path=contexts_path if with_contexts else None,
    )


def split_demos(config: ExperimentConfig, demos: DemonstrationSet) -> Tuple[DemonstrationSet, DemonstrationSet]:
    """(training, held-out); the split is positional so train and eval agree."""
    return demos.split(1.0 - config.heldout_fraction)


def fan_out(seeds: Sequence[int], workers: int, fn: Callable[[int], Dict[str, Any]]) -> RunRegistry:
    """Run fn per seed in a worker pool; failures are isolated per seed."""
    registry = RunRegistry()
    for seed in seeds:
        registry.register(
            seed,
            on_success=lambda data, seed=seed: logger.info("seed done seed=%d", seed),
            on_failure=lambda data, seed=seed: logger.error("seed failed seed=%d error=%s", seed, data["error"]),
        )
    if workers <= 1:
        for seed in seeds:
            registry.run(seed, lambda seed=seed: fn(seed))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for seed in seeds:
                pool.submit(registry.run, seed, lambda seed=seed: fn(seed))
    return registry


# -- checkpoints ---------------------------------------------------------------

def write_state(path: Path, state, config: ExperimentConfig, key: str) -> None:
    arrays, meta = state.to_checkpoint()
    meta["fingerprint"] = config.fingerprint()
    save_checkpoint(path, arrays, meta, key)


def read_state(path: Path, key: str, previous_key: Optional[str] = None):
    arrays, meta = load_checkpoint(path, key, previous_key)
    if meta.get("algorithm") == "pemmfirl":
        return PemmfirlState.from_checkpoint(arrays, meta), meta
    return MfairlState.from_checkpoint(arrays, meta), meta


def signing_keys() -> Tuple[str, Optional[str]]:
    primary, previous = checkpoint_keys()
    return primary or DEFAULT_KEY, previous


# -- subcommands ----------------------------------------------------------------

def cmd_solve(config: ExperimentConfig, args) -> int:
    env = resolve_env(config)
    logger.info("environment %s", format_description(describe(env)))
    equilibria = solve_contexts(env, workers=config.workers, tol=config.tol, max_iter=config.max_iter, damping=config.damping)
    mu_path, pi_path = equilibrium_paths(config)
    mu_path.parent.mkdir(parents=True, exist_ok=True)
    write_equilibria(equilibria, mu_path, pi_path)
    for m, eq in equilibria.items():
        logger.info("solved context=%s iterations=%d residual=%.3e", m, eq.iterations_used, eq.final_residual)
    return 0


def cmd_demos(config: ExperimentConfig, args) -> int:
    env = resolve_env(config)
    experts = load_experts(config, env)
    rng = np.random.default_rng(config.seeds[0])
    demos = generate_demonstrations(env, experts, resolve_prior(config, env), config.demo_count, config.horizon, rng)
    path, contexts_path = demo_paths(config)
    path.parent.mkdir(parents=True, exist_ok=True)
    demos.to_csv(path, contexts_path)
    logger.info("wrote demonstrations path=%s count=%d", path, len(demos))
    return 0


def train_seed(config: ExperimentConfig, env: TabularEnv, demos: DemonstrationSet, seed: int, resume: bool) -> Dict[str, Any]:
    """One isolated training run: own RNG, own directory, own checkpoint."""
    key, previous = signing_keys()
    run_dir = config.run_dir(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.echo() + "\n")
    ckpt = run_dir / CHECKPOINT_NAME
    state = None
    if resume and ckpt.exists():
        state, meta = read_state(ckpt, key, previous)
        if meta.get("fingerprint") != config.fingerprint():
            logger.warning("resuming seed=%d with a changed config", seed)
        logger.info("resuming seed=%d iteration=%d", seed, state.iteration)

    def on_iteration(st) -> None:
        if st.iteration % config.checkpoint_every == 0 or st.iteration == config.iterations:
            write_state(ckpt, st, config, key)

    simulator = Simulator(env)
    if config.algorithm == "pemmfirl":
        state = meta_train(simulator, demos, PemmfirlConfig(
            iterations=config.iterations, batch_size=config.batch_size, num_contexts=config.num_contexts,
            lr=config.lr, psi_lr=config.psi_lr, sampler_lr=config.sampler_lr, sampler_steps=config.sampler_steps,
            hidden=config.hidden, negative_slope=config.negative_slope, log_every=config.log_every,
            record_wall_time=config.record_wall_time,
        ), seed=seed, state=state, on_iteration=on_iteration)
    else:
        state = train_mfairl(simulator, demos, MfairlConfig(
            iterations=config.iterations, batch_size=config.batch_size, lr=config.lr,
            sampler_lr=config.sampler_lr, sampler_steps=config.sampler_steps, hidden=config.hidden,
            negative_slope=config.negative_slope, log_every=config.log_every,
            record_wall_time=config.record_wall_time,
        ), seed=seed, state=state, on_iteration=on_iteration)
    pd.DataFrame(state.log).to_csv(run_dir / LOG_NAME, index=False, float_format="%.17g")
    return {"seed": seed, "iterations": state.iteration, "run_dir": str(run_dir)}


def cmd_train(config: ExperimentConfig, args) -> int:
    env = resolve_env(config)
    train, _ = split_demos(config, load_demos(config, env))
    registry = fan_out(config.seeds, config.workers, lambda seed: train_seed(config, env, train, seed, args.resume))
    return report_failures(registry)


def evaluate_seed(config: ExperimentConfig, env: TabularEnv, experts, heldout: DemonstrationSet, prior, seed: int) -> Dict[str, Any]:
    """
    Per-seed report row and training log. A PEMMFIRL seed also meta-tests every
    held-out demonstration under the learned and the ground-truth reward.
    """
    key, previous = signing_keys()
    state, _ = read_state(config.run_dir(seed) / CHECKPOINT_NAME, key, previous)
    learned, accuracy = learned_equilibria(state, env, heldout, tol=config.tol, max_iter=config.max_iter)
    report = evaluate_equilibria(env, experts, learned, prior, seed, accuracy)
    walls = [row["wall_ms"] for row in state.log if "wall_ms" in row]
    if walls:
        report.wall_ms = float(np.mean(walls))
    out = {"row": report.to_row(), "log": pd.DataFrame(state.log), "records": {}}
    if isinstance(state, PemmfirlState):
        slot_map, _ = slot_alignment(state, heldout, env.num_contexts)
        rng = np.random.default_rng(seed)
        for source in RECORD_SOURCES:
            records = meta_test_records(
                state, env, heldout, experts, rng, source, slot_map, tol=config.tol, max_iter=config.max_iter,
            )
            out["records"][source] = pd.DataFrame(
                [{"seed": seed, **asdict(r)} for r in records], columns=RECORD_COLUMNS,
            )
    return out


def cmd_eval(config: ExperimentConfig, args) -> int:
    env = resolve_env(config)
    experts = load_experts(config, env)
    prior = resolve_prior(config, env)
    _, heldout = split_demos(config, load_demos(config, env, with_contexts=True))
    if len(heldout) > config.eval_trajectories:
        heldout, _ = heldout.split(config.eval_trajectories / len(heldout))
    missing = [s for s in config.seeds if not (config.run_dir(s) / CHECKPOINT_NAME).exists()]
    if missing:
        raise DataError(f"no checkpoints for seeds {missing}; run train first", details={"seeds": missing})

    results: Dict[int, Dict[str, Any]] = {}

    def run(seed: int) -> Dict[str, Any]:
        out = evaluate_seed(config, env, experts, heldout, prior, seed)
        results[seed] = out
        return out

    registry = fan_out(config.seeds, config.workers, run)
    done = sorted(results)
    root = config.run_dir()
    root.mkdir(parents=True, exist_ok=True)
    if done:
        rows = pd.DataFrame([results[s]["row"] for s in done])
        ordered = [c for c in REPORT_COLUMNS if c in rows] + [c for c in rows if c not in REPORT_COLUMNS]
        rows[ordered].to_csv(root / "eval.csv", index=False, float_format="%.17g")
        summary = []
        for metric in SUMMARY_METRICS:
            values = [v for v in rows[metric].tolist() if v is not None and np.isfinite(v)]
            summary.append({"metric": metric, **summarize(values)})
        pd.DataFrame(summary, columns=["metric", "median", "variance", "count"]).to_csv(
            root / "summary.csv", index=False, float_format="%.17g",
        )
        logs = {f"seed{s}": results[s]["log"] for s in done}
        columns = sorted({c for frame in logs.values() for c in frame.columns if c not in ("iter", "wall_ms")})
        for column in columns:
            write_line_chart(root / f"{column}.svg", log_series(logs, column), title=chart_title(column, config.env), y_label=column)
        for source, name in RECORD_SOURCES.items():
            frames = [results[s]["records"][source] for s in done if source in results[s]["records"]]
            if frames:
                pd.concat(frames, ignore_index=True).to_csv(root / name, index=False, float_format="%.17g")
        logger.info("evaluation written dir=%s seeds=%d", root, len(done))
    return report_failures(registry)


def cmd_taxi_ingest(config: ExperimentConfig, args) -> int:
    out_dir = Path(config.output_dir) / "taxi"
    out_dir.mkdir(parents=True, exist_ok=True)
    source = args.source
    if source is None:
        source = out_dir / "synthetic_trips.csv"
        synthetic_trips(args.synthetic_seed, count=args.synthetic_count, dirty_fraction=0.05).to_csv(source, index=False)
        logger.info("wrote synthetic trips path=%s seed=%d", source, args.synthetic_seed)
    grid = Grid(BoundingBox(), args.granularity)
    result = ingest_trips(source, grid.bbox, args.granularity, sep=args.sep)
    pd.DataFrame(
        [{"rule": rule, "rejected": count} for rule, count in result.rejections.items()] + [{"rule": "total", "rejected": result.total}]
    ).to_csv(out_dir / "ingest_summary.csv", index=False)
    model = build_grid_model(result, args.initial_epochs, grid, eta=args.eta)
    model_path = Path(config.taxi_model) if config.taxi_model else out_dir / "grid_model.json"
    model.to_json(model_path)
    write_heatmaps(model, out_dir)
    logger.info("wrote grid model path=%s cells=%d", model_path, model.num_cells)
    return 0


def taxi_seed(config: ExperimentConfig, model: GridModel, seed: int) -> Dict[str, Any]:
    pricing = PricingConfig(
        etas=config.etas, horizon=config.horizon, demo_count=config.demo_count, iterations=config.iterations,
        batch_size=config.batch_size, lr=config.lr, hidden=config.hidden, fleet_size=config.fleet_size,
        algorithm=config.algorithm, tol=config.tol, max_iter=config.max_iter, seed=seed,
    )
    report = run_pricing_experiment(model, pricing)
    run_dir = Path(config.output_dir) / "taxi" / config.algorithm / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(run_dir / "profit_report.csv")
    return {"rows": report.rows.assign(seed=seed), "expected_profit": report.expected_profit}


def cmd_taxi_run(config: ExperimentConfig, args) -> int:
    if config.taxi_model is not None:
        model = GridModel.from_json(Path(config.taxi_model))
        real_data = not args.synthetic
    else:
        model = build_grid_model(ingest_trips(_synthetic_source(config, args)), args.initial_epochs)
        real_data = False
    results: Dict[int, Dict[str, Any]] = {}

    def run(seed: int) -> Dict[str, Any]:
        results[seed] = taxi_seed(config, model, seed)
        return results[seed]

    registry = fan_out(config.seeds, config.workers, run)
    root = Path(config.output_dir) / "taxi" / config.algorithm
    root.mkdir(parents=True, exist_ok=True)
    if results:
        combined = pd.concat([results[s]["rows"] for s in sorted(results)], ignore_index=True)
        combined.to_csv(root / "profit_report.csv", index=False, float_format="%.17g")
        profits = pd.DataFrame([{"seed": s, **results[s]["expected_profit"]} for s in sorted(results)])
        profits.to_csv(root / "expected_profit.csv", index=False, float_format="%.17g")
    note = reference_note(real_data)
    (root / "reference_note.txt").write_text(note + "\n")
    for line in note.splitlines():
        logger.info("%s", line)
    return report_failures(registry)


def _synthetic_source(config: ExperimentConfig, args) -> Path:
    out_dir = Path(config.output_dir) / "taxi"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "synthetic_trips.csv"
    synthetic_trips(args.synthetic_seed, count=args.synthetic_count).to_csv(path, index=False)
    return path


def cmd_oracle_check(config: ExperimentConfig, args) -> int:
    report = run_oracle_suite(n_instances=args.instances, resamples=args.resamples, seed=args.oracle_seed)
    out = Path(config.output_dir) / "oracle_report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out, index=False, float_format="%.17g")
    if not report.passed:
        raise MfirlError(f"{len(report.failures())} oracle checks failed; see {out}", details={"failures": len(report.failures())})
    logger.info("oracle checks passed count=%d", len(report.rows))
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "demos": cmd_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "taxi-ingest": cmd_taxi_ingest,
    "taxi-run": cmd_taxi_run,
    "oracle-check": cmd_oracle_check,
}


# -- entry point ------------------------------------------------------------------

def error_line(error: BaseException) -> str:
    message = str(error).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error code={type(error).__name__} message="{message}"'


def report_failures(registry: RunRegistry) -> int:
    failures = registry.failures()
    for seed, error in failures.items():
        print(error_line(error) + f" seed={seed}", file=sys.stderr)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--log-level", default="INFO", help="Logging level (default INFO)")
    for flag, name in CONFIG_FLAGS.items():
        common.add_argument(flag, dest=name, default=None, metavar=name.upper(), help=f"Override {name}")

    parser = argparse.ArgumentParser(prog="mfirl", description="Mean-field inverse RL experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="Solve the expert equilibrium of every context")
    sub.add_parser("demos", parents=[common], help="Sample expert demonstrations")
    train = sub.add_parser("train", parents=[common], help="Train PEMMFIRL or MF-AIRL for every seed")
    train.add_argument("--resume", action="store_true", help="Continue from each seed's last checkpoint")
    sub.add_parser("eval", parents=[common], help="Evaluate trained seeds")

    ingest = sub.add_parser("taxi-ingest", parents=[common], help="Clean trip records into a grid model")
    ingest.add_argument("source", nargs="?", help="Trip file path or http(s) URL (synthetic trips when omitted)")
    ingest.add_argument("--granularity", type=float, default=0.01)
    ingest.add_argument("--initial-epochs", type=int, default=3)
    ingest.add_argument("--eta", type=float, default=2.33)
    ingest.add_argument("--sep", default=",")

    run = sub.add_parser("taxi-run", parents=[common], help="Pricing experiment on a grid model")
    run.add_argument("--synthetic", action="store_true", help="Treat the configured model as synthetic")
    run.add_argument("--initial-epochs", type=int, default=3)

    for p in (ingest, run):
        p.add_argument("--synthetic-seed", type=int, default=20240601)
        p.add_argument("--synthetic-count", type=int, default=5000)

    oracle = sub.add_parser("oracle-check", parents=[common], help="Enumeration / finite-difference validation suite")
    oracle.add_argument("--instances", type=int, default=20)
    oracle.add_argument("--resamples", type=int, default=10_000)
    oracle.add_argument("--oracle-seed", type=int, default=0)
    return parser


def setup_logging(level: str, log_file: Optional[Path] = None) -> None:
    """Install stderr (and run-log) handlers on the root logger, replacing the ones a previous call installed."""
    formatter = logging.Formatter("%(asctime)s level=%(levelname)s logger=%(name)s %(message)s")
    root = logging.getLogger()
    root.setLevel(level.upper())
    while _installed_handlers:
        handler = _installed_handlers.pop()
        root.removeHandler(handler)
        handler.close()
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
        _installed_handlers.append(handler)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level)
        overrides = {name: getattr(args, name) for name in CONFIG_FLAGS.values()}
        config = load_config(args.config, overrides)
        setup_logging(args.log_level, Path(config.output_dir) / RUN_LOG_NAME)
        logger.info("command=%s version=%s fingerprint=%s", args.command, __version__, config.fingerprint())
        for line in config.echo().splitlines():
            logger.info("config %s", line)
        return COMMANDS[args.command](config, args)
    except USAGE_ERRORS as e:
        print(error_line(e), file=sys.stderr)
        return 2
    except MfirlError as e:
        print(error_line(e), file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(error_line(e), file=sys.stderr)
        return 1
