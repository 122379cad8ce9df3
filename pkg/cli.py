#!/usr/bin/env python3
"""
cli.py – command-line surface for evomerge.

    gen          materialize a synthetic world directory
    merge        run the two-stage merge search and write the solution
    serve        start the reference fitness server
    eval         report the loss of a solution or a stored merged adapter
    analyze      A-vs-B sparsification study and Lorenz curves as CSV
    bound-check  sample random triples against the pruning-error bound
    ablate       compare uniform, Stage-1-only, Stage-2-only, unsigned and full merges
    sweep        pool-size, distractor and validation-size sweeps on synthetic worlds
    init-config  write the default configuration file

Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage,
3 storage, 4 oracle or server, 5 pipeline abort.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

import app
import lowrank
import oracle
import pipeline
import storage
import sweeps
import synth
import utils
from config import (
    CONFIG_FILE_PATH,
    ConfigError,
    YamlConfigManager,
    get_experiment_config,
    get_log_level,
    write_default_config,
)
from models import ExperimentConfig, FitnessQuery

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_STORAGE = 3
EXIT_ORACLE = 4
EXIT_PIPELINE = 5

SOLUTION_FILE = "solution.json"
HISTORY_FILE = "history.jsonl"
EVALUATIONS_FILE = "evaluations.jsonl"
LANDSCAPE_FILE = "landscape.csv"
MERGED_DIR = "merged"


# ============================================================
# Argument parsing
# ============================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML configuration file (default: ./config.yaml)")
    common.add_argument("--seed", type=int, default=None, help="Experiment seed (non-negative)")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--endpoint", default=None, help="Use a remote fitness server at this URL")

    parser = argparse.ArgumentParser(prog="evomerge", description="Black-box two-stage adapter merging.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="Write a synthetic world directory")
    sub.add_parser("merge", parents=[common], help="Run the two-stage merge search")
    sub.add_parser("serve", parents=[common], help="Serve POST /fitness for a world")

    p_eval = sub.add_parser("eval", parents=[common], help="Loss of a solution or merged adapter")
    group = p_eval.add_mutually_exclusive_group()
    group.add_argument("--solution", type=Path, default=None, help="solution.json written by merge")
    group.add_argument("--adapter", type=Path, default=None, help="Merged adapter container directory")

    p_analyze = sub.add_parser("analyze", parents=[common], help="A-vs-B study and Lorenz curves")
    p_analyze.add_argument("--grid", default=None, help="Comma-separated retention ratios")

    p_bound = sub.add_parser("bound-check", parents=[common], help="Random checks of the pruning-error bound")
    p_bound.add_argument("--trials", type=int, default=None, help="Number of random triples")

    sub.add_parser("ablate", parents=[common], help="Component ablation of the merge search")

    p_sweep = sub.add_parser("sweep", parents=[common], help="Merge-search sweeps on synthetic worlds")
    p_sweep.add_argument("--kind", required=True, choices=sweeps.SWEEP_KINDS, help="What to vary")
    p_sweep.add_argument("--values", default=None, help="Comma-separated sweep values")
    p_sweep.add_argument("--seeds", type=int, default=None, help="Seeds per value")

    p_init = sub.add_parser("init-config", help="Write the default configuration file")
    p_init.add_argument("--config", type=Path, default=None, help="Target file (default: ./config.yaml)")
    p_init.add_argument("--force", action="store_true", help="Overwrite an existing file (kept as .bak)")
    return parser


def load_manager(args: argparse.Namespace) -> YamlConfigManager:
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"configuration file {args.config} does not exist")
        manager = YamlConfigManager(args.config, required=True)
    else:
        manager = YamlConfigManager(CONFIG_FILE_PATH)
    manager.load_config()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        manager.set_value("experiment.seed", args.seed)
    if args.out is not None:
        manager.set_value("experiment.output_dir", str(args.out))
    if args.endpoint:
        manager.set_value("oracle.mode", "remote")
        manager.set_value("oracle.endpoint", args.endpoint)
    return manager


# ============================================================
# World and oracle construction
# ============================================================
def load_world(exp: ExperimentConfig) -> Optional[synth.SynthWorld]:
    if exp.synth is not None:
        return synth.generate_world(exp.synth)
    if exp.world_path is not None:
        return storage.read_world(exp.world_path)
    return None


def require_world(exp: ExperimentConfig, command: str) -> synth.SynthWorld:
    world = load_world(exp)
    if world is None:
        raise ConfigError(f"'{command}' needs a local world (world_source synth or world)")
    return world


def build_oracle(exp: ExperimentConfig) -> Tuple[object, Optional[lowrank.AdapterRepository], Optional[List[str]]]:
    """
    Returns (oracle, repository, relevance labels). The repository is None when only a
    remote endpoint is known; relevance is None when no labels are stored.
    """
    if exp.oracle.mode == "remote":
        repo, relevance = None, None
        if exp.repository_path is not None:
            repo, relevance = storage.read_repository(exp.repository_path)
        else:
            world = load_world(exp)
            repo, relevance = world.repo, list(world.relevance)
        remote = oracle.RemoteOracle(exp.oracle.endpoint, timeout_s=exp.oracle.timeout_s, repo=repo)
        return remote, repo, relevance
    world = require_world(exp, "local oracle")
    return oracle.LocalOracle(world), world.repo, list(world.relevance)


def _print_json(data) -> None:
    print(json.dumps(data, sort_keys=True))


# ============================================================
# Commands
# ============================================================
def cmd_gen(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    if exp.synth is None:
        raise ConfigError("'gen' needs world_source: synth")
    world = synth.generate_world(exp.synth)
    out = Path(args.out) if args.out is not None else Path(exp.output_dir) / f"world_seed{exp.seed}"
    storage.write_world(out, world)
    _print_json({"world": str(out), "n_adapters": world.repo.n, "teacher_loss": world.teacher_loss})
    return EXIT_OK


def write_solution(out: Path, solution: pipeline.MergeSolution, relevance: Optional[List[str]], exp: ExperimentConfig) -> None:
    utils.ensure_dir(out)
    record = solution.to_record()
    record["seed"] = exp.seed
    storage.write_record(out / SOLUTION_FILE, record)
    storage.write_jsonl(out / HISTORY_FILE, (r.to_dict() for r in solution.history))
    storage.write_jsonl(out / EVALUATIONS_FILE, (r.to_dict() for r in solution.evaluations))
    labels = relevance or ["unknown"] * len(solution.alphas_star)
    storage.write_csv(
        out / LANDSCAPE_FILE,
        ["index", "relevance", "alpha_star", "beta_star"],
        (
            (i, labels[i], repr(float(a)), repr(float(b)))
            for i, (a, b) in enumerate(zip(solution.alphas_star, solution.betas_star))
        ),
    )
    if solution.merged is not None:
        storage.write_adapter(out / MERGED_DIR, solution.merged, name="merged")


def cmd_merge(exp: ExperimentConfig, args: argparse.Namespace, progress: bool) -> int:
    evaluator, repo, relevance = build_oracle(exp)
    try:
        solution = pipeline.evo_merge(
            repo, evaluator, exp.stage1, exp.stage2, workers=exp.oracle.workers, progress=progress
        )
    finally:
        evaluator.close()
    out = Path(exp.output_dir)
    write_solution(out, solution, relevance, exp)
    _print_json({"output": str(out), "final_loss": solution.final_loss, "best_fitness_stage2": solution.best_fitness_stage2})
    return EXIT_OK


def cmd_serve(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    world = require_world(exp, "serve")
    app.serve(world, exp.server.host, exp.server.port, exp.server.reply_cache_size)
    return EXIT_OK


def cmd_eval(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    if args.adapter is not None:
        world = require_world(exp, "eval --adapter")
        adapter = storage.read_adapter(args.adapter)
        if list(adapter.keys()) != list(world.layer_names):
            raise ConfigError(f"adapter layers {list(adapter.keys())} do not match the world's {list(world.layer_names)}")
        loss = oracle.adapter_loss(world, adapter)
        _print_json({"loss": loss, "n_examples": world.val.n, "source": str(args.adapter)})
        return EXIT_OK

    solution_path = args.solution if args.solution is not None else Path(exp.output_dir) / SOLUTION_FILE
    record = storage.read_record(solution_path)
    try:
        alphas = [float(a) for a in record["alphas_star"]]
        betas = [float(b) for b in record["betas_star"]]
    except (KeyError, TypeError, ValueError) as e:
        raise storage.ManifestError(f"{solution_path}: not a solution record ({e})") from e
    evaluator, _, _ = build_oracle(exp)
    try:
        reply = evaluator.evaluate(
            FitnessQuery(request_id=f"eval-{exp.seed}", stage=2, alphas=alphas, betas=betas)
        )
    finally:
        evaluator.close()
    _print_json({"loss": reply.loss, "n_examples": reply.n_examples, "source": str(solution_path)})
    return EXIT_OK


def cmd_analyze(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    world = require_world(exp, "analyze")
    try:
        grid = utils.parse_grid(args.grid) if args.grid else list(exp.retention_grid)
    except ValueError as e:
        raise ConfigError(f"--grid: {e}") from e
    out = utils.ensure_dir(exp.output_dir)
    rows = synth.ab_sparsify_study(world, grid)
    storage.write_csv(
        out / "ab_study.csv",
        ["alpha", "loss_A", "loss_B", "gini_A", "gini_B"],
        ((r.alpha, repr(r.loss_a), repr(r.loss_b), repr(r.gini_a), repr(r.gini_b)) for r in rows),
    )
    lorenz_rows = []
    for alpha in grid:
        for side in ("A", "B"):
            merged = synth.side_sparsified_merge(world.repo, alpha, side)
            try:
                report = lowrank.delta_concentration(merged)
            except lowrank.DegenerateInputError:
                logger.warning(f"Skipping Lorenz curve for alpha={alpha} side={side}: delta W is all zero")
                continue
            for population, mass in report.lorenz:
                lorenz_rows.append((alpha, side, repr(population), repr(mass)))
    storage.write_csv(out / "lorenz.csv", ["alpha", "side", "population_fraction", "mass_fraction"], lorenz_rows)
    _print_json({"output": str(out), "rows": len(rows)})
    return EXIT_OK


def bound_check(trials: int, seed: int, max_dim: int = 16) -> Tuple[float, int]:
    """Max lhs/rhs over random (A, B, alpha) triples and the number of violations of lhs <= rhs (1 + 1e-9)."""
    rng = np.random.default_rng(seed)
    worst, violations = 0.0, 0
    for _ in range(trials):
        r, k, d = (int(v) for v in rng.integers(1, max_dim + 1, size=3))
        a = rng.standard_normal((r, k))
        b = rng.standard_normal((d, r))
        alpha = float(rng.random())
        lhs, rhs = lowrank.error_bound_check(a, alpha, b)
        if rhs > 0.0:
            ratio = lhs / rhs
        else:
            ratio = 0.0 if lhs == 0.0 else float("inf")
        worst = max(worst, ratio)
        if lhs > rhs * (1 + 1e-9):
            violations += 1
    return worst, violations


def cmd_bound_check(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    trials = args.trials if args.trials is not None else exp.bound_trials
    if trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {trials}")
    worst, violations = bound_check(trials, exp.seed)
    _print_json({"trials": trials, "max_ratio": worst, "violations": violations})
    if violations:
        print(f"evomerge: error: pruning-error bound violated in {violations} trial(s)", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


def cmd_ablate(exp: ExperimentConfig, args: argparse.Namespace, progress: bool) -> int:
    evaluator, repo, _ = build_oracle(exp)
    try:
        report = pipeline.ablation_study(
            repo, evaluator, exp.stage1, exp.stage2, workers=exp.oracle.workers, progress=progress
        )
    finally:
        evaluator.close()
    out = utils.ensure_dir(exp.output_dir)
    storage.write_csv(out / "ablation.csv", ["variant", "loss"], ((n, repr(v)) for n, v in report.rows()))
    _print_json(dict(report.rows()))
    return EXIT_OK


def cmd_sweep(exp: ExperimentConfig, args: argparse.Namespace) -> int:
    if exp.synth is None:
        raise ConfigError("'sweep' needs world_source: synth")
    settings = exp.sweeps
    defaults = {
        sweeps.POOL: settings.pool_sizes,
        sweeps.DISTRACTORS: settings.distractor_counts,
        sweeps.SAMPLES: settings.sample_sizes,
    }
    minimum = 0 if args.kind == sweeps.DISTRACTORS else 1
    try:
        values = utils.parse_counts(args.values, minimum) if args.values else list(defaults[args.kind])
    except ValueError as e:
        raise ConfigError(f"--values: {e}") from e
    n_seeds = args.seeds if args.seeds is not None else settings.seeds
    if n_seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {n_seeds}")
    try:
        rows = sweeps.run_sweep(
            args.kind,
            exp.synth,
            values,
            exp.stage1,
            exp.stage2,
            seeds=range(exp.seed, exp.seed + n_seeds),
            holdout_examples=settings.holdout_examples,
            workers=exp.oracle.workers,
        )
    except ValueError as e:
        if isinstance(e, lowrank.LowRankError):
            raise
        raise ConfigError(f"sweep {args.kind}: {e}") from e
    out = utils.ensure_dir(exp.output_dir)
    target = out / f"sweep_{args.kind}.csv"
    storage.write_csv(
        target,
        sweeps.CSV_HEADER,
        ([repr(v) if isinstance(v, float) else v for v in row.to_dict().values()] for row in rows),
    )
    summary = {str(value): means for value, means in sweeps.summarize(rows).items()}
    _print_json({"output": str(target), "kind": args.kind, "rows": len(rows), "mean": summary})
    return EXIT_OK


def cmd_init_config(args: argparse.Namespace) -> int:
    path = write_default_config(args.config, force=args.force)
    _print_json({"config": str(path)})
    return EXIT_OK


# ============================================================
# Entry point
# ============================================================
def run(args: argparse.Namespace) -> int:
    if args.command == "init-config":
        return cmd_init_config(args)
    manager = load_manager(args)
    level = get_log_level(manager)
    utils.setup_logging(level)
    progress = utils.progress_enabled(level)
    exp = get_experiment_config(manager)
    logger.debug(f"Experiment configuration: {exp.model_dump()}")

    command = args.command
    if command == "gen":
        return cmd_gen(exp, args)
    if command == "merge":
        return cmd_merge(exp, args, progress)
    if command == "serve":
        return cmd_serve(exp, args)
    if command == "eval":
        return cmd_eval(exp, args)
    if command == "analyze":
        return cmd_analyze(exp, args)
    if command == "bound-check":
        return cmd_bound_check(exp, args)
    if command == "ablate":
        return cmd_ablate(exp, args, progress)
    if command == "sweep":
        return cmd_sweep(exp, args)
    raise ConfigError(f"unknown command {command!r}")


def _fail(code: int, message: str) -> int:
    print(f"evomerge: error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except storage.StorageError as e:
        return _fail(EXIT_STORAGE, str(e))
    except (oracle.OracleError, app.BindError) as e:
        return _fail(EXIT_ORACLE, str(e))
    except pipeline.PipelineError as e:
        return _fail(EXIT_PIPELINE, str(e))
    except lowrank.LowRankError as e:
        return _fail(EXIT_CONFIG, str(e))
    except KeyboardInterrupt:
        return _fail(EXIT_UNEXPECTED, "interrupted")
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        return _fail(EXIT_UNEXPECTED, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
