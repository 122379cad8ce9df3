# File: pipeline.py
# Two-stage merge search: Stage 1 looks for per-adapter retention ratios (alpha) under
# uniform weights, Stage 2 looks for signed merge weights (beta) over the frozen
# sparsified adapters. Both stages run CMA-ES against a black-box loss oracle and
# keep the best candidate ever evaluated.

import logging
import math
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import cma_es
import lowrank
from models import FitnessQuery, StageConfig
from oracle import OracleError

logger = logging.getLogger(__name__)

# (fitness, oracle loss, L1 norm of the decision vector)
Evaluation = Tuple[float, float, float]


class PipelineError(RuntimeError):
    """Base class for merge-search failures."""


class OracleFailure(PipelineError):
    """An oracle evaluation failed twice in a row; the run is aborted."""


@dataclass
class GenerationRecord:
    stage: int
    generation: int
    best_fitness: float
    mean_fitness: float
    sigma: float
    wall_ms: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class EvaluationRecord:
    stage: int
    generation: int
    index: int
    fitness: float
    loss: float
    l1: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class StageResult:
    stage: int
    best_x: np.ndarray
    best_fitness: float
    best_loss: float
    best_generation: int
    history: List[GenerationRecord] = field(default_factory=list)
    evaluations: List[EvaluationRecord] = field(default_factory=list)


@dataclass
class MergeSolution:
    alphas_star: np.ndarray
    betas_star: np.ndarray
    best_fitness_stage1: float
    best_fitness_stage2: float
    best_loss_stage2: float
    best_generation_stage1: int
    best_generation_stage2: int
    final_loss: float
    lambda1: float
    lambda2: float
    history: List[GenerationRecord] = field(default_factory=list)
    evaluations: List[EvaluationRecord] = field(default_factory=list)
    merged: Optional[lowrank.Adapter] = None

    def to_record(self) -> Dict[str, object]:
        """JSON-ready summary; the merged adapter and logs are written separately."""
        return {
            "alphas_star": [float(a) for a in self.alphas_star],
            "betas_star": [float(b) for b in self.betas_star],
            "best_fitness_stage1": float(self.best_fitness_stage1),
            "best_fitness_stage2": float(self.best_fitness_stage2),
            "best_loss_stage2": float(self.best_loss_stage2),
            "best_generation_stage1": int(self.best_generation_stage1),
            "best_generation_stage2": int(self.best_generation_stage2),
            "final_loss": float(self.final_loss),
            "lambda1": float(self.lambda1),
            "lambda2": float(self.lambda2),
        }


@dataclass
class AblationReport:
    uniform: float
    stage1_only: float
    stage2_only: float
    no_sign_flip: float
    full: float

    def rows(self) -> List[Tuple[str, float]]:
        return [
            ("uniform", self.uniform),
            ("stage1_only", self.stage1_only),
            ("stage2_only", self.stage2_only),
            ("no_sign_flip", self.no_sign_flip),
            ("full", self.full),
        ]


# ============================================================
# Fitness functions
# ============================================================
def _request_id() -> str:
    return uuid.uuid4().hex


def _l1(v: np.ndarray) -> float:
    return float(np.sum(np.abs(v)))


def _stage1_evaluation(alphas: np.ndarray, oracle, lambda1: float) -> Evaluation:
    alphas = np.asarray(alphas, dtype=np.float64)
    query = FitnessQuery(request_id=_request_id(), stage=1, alphas=alphas.tolist(), betas=None)
    loss = oracle.evaluate(query).loss
    l1 = _l1(alphas)
    return loss + lambda1 * l1, loss, l1


def _stage2_evaluation(betas: np.ndarray, alphas_star: np.ndarray, oracle, lambda2: float) -> Evaluation:
    betas = np.asarray(betas, dtype=np.float64)
    query = FitnessQuery(
        request_id=_request_id(),
        stage=2,
        alphas=np.asarray(alphas_star, dtype=np.float64).tolist(),
        betas=betas.tolist(),
    )
    loss = oracle.evaluate(query).loss
    l1 = _l1(betas)
    return loss + lambda2 * l1, loss, l1


def stage1_fitness(alphas, oracle, lambda1: float) -> float:
    """Oracle loss of the uniform-weight pre-merge at these alphas plus lambda1 * ||alphas||_1."""
    return _stage1_evaluation(alphas, oracle, lambda1)[0]


def stage2_fitness(betas, alphas_star, oracle, lambda2: float) -> float:
    """Oracle loss of the beta-weighted merge over frozen sparsified adapters plus lambda2 * ||betas||_1."""
    return _stage2_evaluation(betas, alphas_star, oracle, lambda2)[0]


# ============================================================
# Population evaluation
# ============================================================
class PopulationEvaluator:
    """
    Evaluates one generation, optionally on a thread pool. Results are cached by the
    exact bytes of the decision vector; each candidate gets one retry before the
    run is aborted.
    """

    def __init__(self, fn: Callable[[np.ndarray], Evaluation], stage: int, workers: int = 1):
        self.fn = fn
        self.stage = stage
        self.workers = max(1, int(workers))
        self._cache: Dict[bytes, Evaluation] = {}
        self.oracle_calls = 0

    def _evaluate_one(self, generation: int, index: int, x: np.ndarray) -> Evaluation:
        try:
            return self.fn(x)
        except (OracleError, OSError) as first:
            logger.warning(
                f"Stage {self.stage} gen {generation} candidate {index}: oracle failed ({first}); retrying once"
            )
            try:
                return self.fn(x)
            except (OracleError, OSError) as second:
                raise OracleFailure(
                    f"stage {self.stage}, generation {generation}, candidate {index}: "
                    f"oracle failed after retry: {second}"
                ) from second

    def evaluate(self, generation: int, xs: Sequence[np.ndarray]) -> List[Evaluation]:
        keys = [np.ascontiguousarray(x, dtype=np.float64).tobytes() for x in xs]
        pending = [i for i, key in enumerate(keys) if key not in self._cache]
        # duplicates inside one generation are evaluated once
        unique: Dict[bytes, int] = {}
        for i in pending:
            unique.setdefault(keys[i], i)
        todo = list(unique.values())
        self.oracle_calls += len(todo)
        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=min(self.workers, len(todo))) as pool:
                results = list(pool.map(lambda i: self._evaluate_one(generation, i, xs[i]), todo))
        else:
            results = [self._evaluate_one(generation, i, xs[i]) for i in todo]
        for i, result in zip(todo, results):
            self._cache[keys[i]] = result
        return [self._cache[key] for key in keys]


# ============================================================
# Stage driver
# ============================================================
def _run_stage(
    stage: int,
    evaluate_full: Callable[[np.ndarray], Evaluation],
    expand: Callable[[np.ndarray], np.ndarray],
    cma_config: cma_es.CmaConfig,
    generations: int,
    workers: int,
    progress: bool,
) -> StageResult:
    state = cma_es.cma_init(cma_config)
    evaluator = PopulationEvaluator(lambda x: evaluate_full(expand(x)), stage, workers)
    history: List[GenerationRecord] = []
    evaluations: List[EvaluationRecord] = []
    best_loss = math.inf

    for generation in tqdm(
        range(1, generations + 1), desc=f"Stage {stage}", disable=not progress, leave=False
    ):
        started = time.perf_counter()
        candidates = cma_es.ask(state)
        results = evaluator.evaluate(generation, [c.x for c in candidates])
        fitnesses = [r[0] for r in results]
        try:
            cma_es.tell(state, candidates, fitnesses)
        except cma_es.NonFiniteFitnessError as e:
            raise PipelineError(f"stage {stage}, generation {generation}: {e}") from e
        if state.best_generation == generation:
            best_loss = results[int(np.argsort(fitnesses, kind="stable")[0])][1]
        for index, (fitness, loss, l1) in enumerate(results):
            evaluations.append(EvaluationRecord(stage, generation, index, fitness, loss, l1))
        history.append(
            GenerationRecord(
                stage=stage,
                generation=generation,
                best_fitness=state.best_fitness,
                mean_fitness=float(np.mean(fitnesses)),
                sigma=state.sigma,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
        )
        logger.debug(
            f"Stage {stage} gen {generation}/{generations}: best={state.best_fitness:.6f} "
            f"mean={history[-1].mean_fitness:.6f} sigma={state.sigma:.4g}"
        )

    best_x = expand(cma_es.best(state).x)
    logger.info(
        f"Stage {stage} finished: best fitness {state.best_fitness:.6f} at generation "
        f"{state.best_generation} ({evaluator.oracle_calls} oracle calls)"
    )
    return StageResult(
        stage=stage,
        best_x=best_x,
        best_fitness=state.best_fitness,
        best_loss=best_loss,
        best_generation=state.best_generation,
        history=history,
        evaluations=evaluations,
    )


def _pool_size(repo: Optional[lowrank.AdapterRepository], oracle) -> int:
    n = oracle.n_adapters
    if repo is not None and repo.n != n:
        raise PipelineError(f"repository holds {repo.n} adapters but the oracle serves {n}")
    if n < 1:
        raise PipelineError("the adapter pool is empty")
    return n


def run_stage1(
    repo: Optional[lowrank.AdapterRepository],
    oracle,
    cfg: StageConfig,
    workers: int = 1,
    progress: bool = False,
) -> StageResult:
    """CMA-ES over [0, 1]^N from 0.5 * ones, minimizing stage1_fitness."""
    n = _pool_size(repo, oracle)
    cma_config = cma_es.CmaConfig(
        dim=n,
        population=cfg.population,
        sigma0=cfg.sigma0,
        lower=0.0,
        upper=1.0,
        x0=np.full(n, 0.5),
        seed=cfg.seed,
        max_generations=cfg.generations,
    )
    return _run_stage(
        stage=1,
        evaluate_full=lambda alphas: _stage1_evaluation(alphas, oracle, cfg.lambda_reg),
        expand=lambda x: np.asarray(x, dtype=np.float64).copy(),
        cma_config=cma_config,
        generations=cfg.generations,
        workers=workers,
        progress=progress,
    )


def run_stage2(
    repo: Optional[lowrank.AdapterRepository],
    alphas_star,
    oracle,
    cfg: StageConfig,
    workers: int = 1,
    progress: bool = False,
    nonnegative: bool = False,
) -> StageResult:
    """
    CMA-ES over [-beta_bound, beta_bound]^N from (1/N) * ones, minimizing stage2_fitness.
    Coordinates listed in cfg.fixed_betas stay at their given value and are not searched.
    With nonnegative=True the box becomes [0, beta_bound]^N, so no adapter can be sign-flipped.
    """
    n = _pool_size(repo, oracle)
    alphas_star = np.asarray(alphas_star, dtype=np.float64)
    if alphas_star.shape != (n,):
        raise PipelineError(f"alphas_star has shape {alphas_star.shape}, expected ({n},)")
    fixed = {int(i): float(v) for i, v in cfg.fixed_betas.items()}
    for i, v in fixed.items():
        if not 0 <= i < n:
            raise PipelineError(f"fixed beta index {i} outside [0, {n})")
        if abs(v) > cfg.beta_bound:
            raise PipelineError(f"fixed beta {v} for adapter {i} exceeds the bound {cfg.beta_bound}")
        if nonnegative and v < 0.0:
            raise PipelineError(f"fixed beta {v} for adapter {i} is negative in a non-negative search")
    free = [i for i in range(n) if i not in fixed]
    template = np.full(n, 1.0 / n)
    for i, v in fixed.items():
        template[i] = v

    def expand(x: np.ndarray) -> np.ndarray:
        betas = template.copy()
        betas[free] = x
        return betas

    evaluate_full = lambda betas: _stage2_evaluation(betas, alphas_star, oracle, cfg.lambda_reg)

    if not free:
        fitness, loss, l1 = evaluate_full(template)
        logger.info("Stage 2 has no free coordinates; evaluated the fixed betas once.")
        return StageResult(
            stage=2,
            best_x=template.copy(),
            best_fitness=fitness,
            best_loss=loss,
            best_generation=0,
            evaluations=[EvaluationRecord(2, 0, 0, fitness, loss, l1)],
        )

    cma_config = cma_es.CmaConfig(
        dim=len(free),
        population=cfg.population,
        sigma0=cfg.sigma0,
        lower=0.0 if nonnegative else -cfg.beta_bound,
        upper=cfg.beta_bound,
        x0=np.full(len(free), 1.0 / n),
        seed=cfg.seed,
        max_generations=cfg.generations,
    )
    return _run_stage(2, evaluate_full, expand, cma_config, cfg.generations, workers, progress)


def evo_merge(
    repo: Optional[lowrank.AdapterRepository],
    oracle,
    cfg1: StageConfig,
    cfg2: StageConfig,
    workers: int = 1,
    progress: bool = False,
) -> MergeSolution:
    """
    Runs both stages, builds the merged pair per layer from (beta*, alpha*) and
    re-evaluates it through the oracle. `merged` is None when the repository is
    not available locally (remote oracle without adapters on disk).
    """
    stage1 = run_stage1(repo, oracle, cfg1, workers=workers, progress=progress)
    stage2 = run_stage2(repo, stage1.best_x, oracle, cfg2, workers=workers, progress=progress)
    alphas_star, betas_star = stage1.best_x, stage2.best_x

    merged = lowrank.merge(repo, betas_star, alphas_star) if repo is not None else None
    final_loss = _stage2_evaluation(betas_star, alphas_star, oracle, 0.0)[1]
    logger.info(
        f"Merge finished: stage-1 fitness {stage1.best_fitness:.6f}, "
        f"stage-2 fitness {stage2.best_fitness:.6f}, final loss {final_loss:.6f}"
    )
    return MergeSolution(
        alphas_star=alphas_star,
        betas_star=betas_star,
        best_fitness_stage1=stage1.best_fitness,
        best_fitness_stage2=stage2.best_fitness,
        best_loss_stage2=stage2.best_loss,
        best_generation_stage1=stage1.best_generation,
        best_generation_stage2=stage2.best_generation,
        final_loss=final_loss,
        lambda1=cfg1.lambda_reg,
        lambda2=cfg2.lambda_reg,
        history=stage1.history + stage2.history,
        evaluations=stage1.evaluations + stage2.evaluations,
        merged=merged,
    )


def uniform_loss(oracle) -> float:
    """Loss of the plain average: weights 1/N, no pruning."""
    n = oracle.n_adapters
    return _stage1_evaluation(np.ones(n), oracle, 0.0)[1]


def ablation_study(
    repo: Optional[lowrank.AdapterRepository],
    oracle,
    cfg1: StageConfig,
    cfg2: StageConfig,
    solution: Optional[MergeSolution] = None,
    workers: int = 1,
    progress: bool = False,
) -> AblationReport:
    """
    Losses of the uniform merge, Stage 1 alone, Stage 2 alone (alpha = 1), both stages
    with betas held non-negative, and both stages.
    """
    if solution is None:
        solution = evo_merge(repo, oracle, cfg1, cfg2, workers=workers, progress=progress)
    n = oracle.n_adapters
    stage1_only = _stage1_evaluation(solution.alphas_star, oracle, 0.0)[1]
    full_alphas = np.ones(n)
    stage2 = run_stage2(repo, full_alphas, oracle, cfg2, workers=workers, progress=progress)
    stage2_only = _stage2_evaluation(stage2.best_x, full_alphas, oracle, 0.0)[1]
    unsigned = run_stage2(
        repo, solution.alphas_star, oracle, cfg2, workers=workers, progress=progress, nonnegative=True
    )
    no_sign_flip = _stage2_evaluation(unsigned.best_x, solution.alphas_star, oracle, 0.0)[1]
    report = AblationReport(
        uniform=uniform_loss(oracle),
        stage1_only=stage1_only,
        stage2_only=stage2_only,
        no_sign_flip=no_sign_flip,
        full=solution.final_loss,
    )
    logger.info(
        "Ablation: " + ", ".join(f"{name}={value:.6f}" for name, value in report.rows())
    )
    return report
