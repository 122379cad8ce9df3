# File: cma_es.py
# Covariance Matrix Adaptation Evolution Strategy with box constraints and an
# ask/tell interface. Minimization throughout.

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Eigenvalues at or below this fraction of the largest are floored to it.
EIGENVALUE_FLOOR = 1e-14

BoundLike = Union[float, Sequence[float], np.ndarray]


class CmaError(RuntimeError):
    """Base class for evolution-strategy failures."""


class InvalidConfigError(CmaError):
    pass


class NonFiniteFitnessError(CmaError):
    pass


class CovarianceError(CmaError):
    """Covariance or step size left the numerically valid region."""


@dataclass
class CmaConfig:
    dim: int
    population: int = 20
    sigma0: float = 0.05
    lower: BoundLike = -np.inf
    upper: BoundLike = np.inf
    x0: Optional[BoundLike] = None
    seed: int = 0
    max_generations: int = 100

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (self.dim,)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (self.dim,)).copy()
        return lower, upper

    def initial_mean(self) -> np.ndarray:
        if self.x0 is None:
            lower, upper = self.bounds()
            if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
                return np.zeros(self.dim)
            return 0.5 * (lower + upper)
        return np.broadcast_to(np.asarray(self.x0, dtype=np.float64), (self.dim,)).copy()

    def validate(self) -> None:
        if int(self.dim) < 1:
            raise InvalidConfigError(f"dim must be >= 1, got {self.dim}")
        if int(self.population) < 2:
            raise InvalidConfigError(f"population must be >= 2, got {self.population}")
        if not (math.isfinite(self.sigma0) and self.sigma0 > 0):
            raise InvalidConfigError(f"sigma0 must be finite and > 0, got {self.sigma0}")
        if int(self.max_generations) < 1:
            raise InvalidConfigError(f"max_generations must be >= 1, got {self.max_generations}")
        try:
            lower, upper = self.bounds()
            x0 = self.initial_mean()
        except ValueError as e:
            raise InvalidConfigError(f"bounds or x0 do not match dim={self.dim}: {e}") from e
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise InvalidConfigError("bounds contain NaN")
        if not np.all(lower < upper):
            raise InvalidConfigError("every lower bound must be strictly below its upper bound")
        if not np.all(np.isfinite(x0)):
            raise InvalidConfigError("x0 must be finite")
        if np.any(x0 < lower) or np.any(x0 > upper):
            raise InvalidConfigError(f"x0 {x0.tolist()} lies outside the bounds")


@dataclass(frozen=True)
class CmaConstants:
    """Strategy parameters of the (mu/mu_w, lambda)-CMA-ES; fixed by dim and population."""

    dim: int
    population: int
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_c: float
    c_sigma: float
    c_1: float
    c_mu: float
    d_sigma: float
    chi_n: float

    @classmethod
    def for_problem(cls, dim: int, population: int) -> "CmaConstants":
        n = float(dim)
        mu = population // 2
        raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1, dtype=np.float64))
        weights = raw / raw.sum()
        mu_eff = float(1.0 / np.sum(weights**2))
        c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
        c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
        c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
        c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        weights.setflags(write=False)
        return cls(
            dim=dim,
            population=population,
            mu=mu,
            weights=weights,
            mu_eff=mu_eff,
            c_c=c_c,
            c_sigma=c_sigma,
            c_1=c_1,
            c_mu=c_mu,
            d_sigma=d_sigma,
            chi_n=chi_n,
        )


@dataclass(frozen=True)
class Candidate:
    x: np.ndarray
    fitness: Optional[float] = None


@dataclass
class CmaState:
    config: CmaConfig
    constants: CmaConstants
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray
    sigma: float
    covariance: np.ndarray
    path_sigma: np.ndarray
    path_c: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    rng: np.random.Generator
    generation: int = 0
    evaluations: int = 0
    best_x: Optional[np.ndarray] = None
    best_fitness: float = math.inf
    best_generation: int = -1
    fitness_history: List[float] = field(default_factory=list)


def _decompose(covariance: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrizes C, eigendecomposes it and floors tiny eigenvalues. Returns (C, B, eigenvalues)."""
    covariance = 0.5 * (covariance + covariance.T)
    if not np.all(np.isfinite(covariance)):
        raise CovarianceError("covariance matrix contains non-finite entries")
    eigvals, eigvecs = np.linalg.eigh(covariance)
    top = float(eigvals.max())
    if not top > 0.0:
        raise CovarianceError(f"covariance is not positive definite (max eigenvalue {top})")
    floor = EIGENVALUE_FLOOR * top
    if np.any(eigvals <= floor):
        logger.debug(f"Flooring {int(np.sum(eigvals <= floor))} covariance eigenvalue(s) at {floor:.3e}")
        eigvals = np.maximum(eigvals, floor)
        covariance = (eigvecs * eigvals) @ eigvecs.T
        covariance = 0.5 * (covariance + covariance.T)
    return covariance, eigvecs, eigvals


def cma_init(config: CmaConfig) -> CmaState:
    """Fresh state: mean x0, identity covariance, zero paths, generator seeded from config.seed."""
    config.validate()
    dim = int(config.dim)
    lower, upper = config.bounds()
    constants = CmaConstants.for_problem(dim, int(config.population))
    logger.debug(
        f"CMA-ES init: dim={dim} lambda={constants.population} mu={constants.mu} "
        f"mu_eff={constants.mu_eff:.3f} sigma0={config.sigma0}"
    )
    return CmaState(
        config=config,
        constants=constants,
        lower=lower,
        upper=upper,
        mean=config.initial_mean(),
        sigma=float(config.sigma0),
        covariance=np.eye(dim),
        path_sigma=np.zeros(dim),
        path_c=np.zeros(dim),
        eigvecs=np.eye(dim),
        eigvals=np.ones(dim),
        rng=np.random.default_rng(config.seed),
    )


def ask(state: CmaState) -> List[Candidate]:
    """
    Samples population candidates mean + sigma * B (D z). Coordinates outside the
    box are clipped onto the violated bound.
    """
    if not np.all(state.eigvals > 0.0):
        raise CovarianceError("covariance eigenvalues are not strictly positive")
    lam = state.constants.population
    z = state.rng.standard_normal((lam, state.constants.dim))
    y = (z * np.sqrt(state.eigvals)) @ state.eigvecs.T
    xs = np.clip(state.mean + state.sigma * y, state.lower, state.upper)
    candidates = []
    for x in xs:
        x = x.copy()
        x.setflags(write=False)
        candidates.append(Candidate(x=x))
    return candidates


def tell(state: CmaState, candidates: Sequence[Candidate], fitnesses: Sequence[float]) -> CmaState:
    """
    Standard update from ranked fitness: log-rank weighted recombination of the best mu,
    cumulative step-size adaptation, rank-1 plus rank-mu covariance update.
    The state is left untouched if the generation is rejected.
    """
    const = state.constants
    lam, dim = const.population, const.dim
    if len(candidates) != lam or len(fitnesses) != lam:
        raise CmaError(
            f"tell expects {lam} candidates and fitnesses, got {len(candidates)} and {len(fitnesses)}"
        )
    f = np.asarray(fitnesses, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        bad = [i for i, v in enumerate(f) if not math.isfinite(v)]
        raise NonFiniteFitnessError(f"non-finite fitness at candidate index(es) {bad}; generation rejected")
    xs = np.array([np.asarray(c.x, dtype=np.float64) for c in candidates])
    if xs.shape != (lam, dim):
        raise CmaError(f"candidate matrix has shape {xs.shape}, expected {(lam, dim)}")

    # stable sort: equal fitness keeps sampling order
    order = np.argsort(f, kind="stable")
    ys = (xs - state.mean) / state.sigma
    y_sel = ys[order[: const.mu]]
    y_w = const.weights @ y_sel

    new_mean = state.mean + state.sigma * y_w

    inv_sqrt = (state.eigvecs / np.sqrt(state.eigvals)) @ state.eigvecs.T
    path_sigma = (1 - const.c_sigma) * state.path_sigma + math.sqrt(
        const.c_sigma * (2 - const.c_sigma) * const.mu_eff
    ) * (inv_sqrt @ y_w)
    ps_norm = float(np.linalg.norm(path_sigma))
    generation = state.generation + 1
    h_sigma = (
        ps_norm / math.sqrt(1 - (1 - const.c_sigma) ** (2 * generation)) / const.chi_n
        < 1.4 + 2 / (dim + 1)
    )
    h = 1.0 if h_sigma else 0.0
    path_c = (1 - const.c_c) * state.path_c + h * math.sqrt(
        const.c_c * (2 - const.c_c) * const.mu_eff
    ) * y_w

    rank_one = np.outer(path_c, path_c) + (1 - h) * const.c_c * (2 - const.c_c) * state.covariance
    rank_mu = (y_sel.T * const.weights) @ y_sel
    covariance = (
        (1 - const.c_1 - const.c_mu) * state.covariance
        + const.c_1 * rank_one
        + const.c_mu * rank_mu
    )
    sigma = state.sigma * math.exp((const.c_sigma / const.d_sigma) * (ps_norm / const.chi_n - 1))
    if not (math.isfinite(sigma) and sigma > 0.0):
        raise CovarianceError(f"step size diverged to {sigma}")
    covariance, eigvecs, eigvals = _decompose(covariance)

    gen_best = int(order[0])
    state.mean = new_mean
    state.sigma = sigma
    state.covariance = covariance
    state.eigvecs = eigvecs
    state.eigvals = eigvals
    state.path_sigma = path_sigma
    state.path_c = path_c
    state.generation = generation
    state.evaluations += lam
    if f[gen_best] < state.best_fitness:
        state.best_fitness = float(f[gen_best])
        state.best_x = xs[gen_best].copy()
        state.best_generation = generation
    state.fitness_history.append(state.best_fitness)
    logger.debug(
        f"gen {generation}: best={f[gen_best]:.6g} best_so_far={state.best_fitness:.6g} sigma={sigma:.4g}"
    )
    return state


def best(state: CmaState) -> Candidate:
    """Best-so-far candidate across every generation told, not the current mean."""
    if state.best_x is None:
        raise CmaError("best() called before any tell()")
    x = state.best_x.copy()
    x.setflags(write=False)
    return Candidate(x=x, fitness=state.best_fitness)


def cma_minimize(
    config: CmaConfig,
    fn: Callable[[np.ndarray], float],
    target: Optional[float] = None,
) -> CmaState:
    """Runs ask/tell for config.max_generations, stopping early once best fitness < target."""
    state = cma_init(config)
    for _ in range(int(config.max_generations)):
        candidates = ask(state)
        tell(state, candidates, [fn(c.x) for c in candidates])
        if target is not None and state.best_fitness < target:
            break
    return state
