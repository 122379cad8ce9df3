# File: lowrank.py
# Dense-matrix and low-rank adapter algebra: task vectors, magnitude sparsification,
# weighted merging, the Frobenius pruning-error bound and concentration statistics.

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Merged adapters and repository entries share this shape: layer name -> pair.
Adapter = Dict[str, "LowRankPair"]

# Decimals alpha * numel is rounded to before ceil(): 0.07 * 100 evaluates to 7.000000000000001.
_RETENTION_DECIMALS = 9


class LowRankError(ValueError):
    """Base class for invalid inputs to the low-rank algebra."""


class ShapeMismatchError(LowRankError):
    pass


class NonFiniteError(LowRankError):
    pass


class DegenerateInputError(LowRankError):
    pass


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """
    Converts array-like data to a read-only, C-contiguous float64 2-D array.
    Rejects anything that is not 2-D, is empty or holds NaN/Inf.
    """
    arr = np.array(data, dtype=np.float64, copy=True, order="C")
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LowRankPair:
    """One adapter's factors for one layer: delta W ~= b @ a, with a (r x k), b (d x r)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.a, "A")
        b = as_matrix(self.b, "B")
        if a.shape[0] != b.shape[1]:
            raise ShapeMismatchError(
                f"A has {a.shape[0]} rows but B has {b.shape[1]} columns"
            )
        rank = a.shape[0]
        if rank > min(b.shape[0], a.shape[1]):
            raise ShapeMismatchError(
                f"rank {rank} exceeds min(d={b.shape[0]}, k={a.shape[1]})"
            )
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.d, self.k, self.rank


@dataclass(frozen=True)
class AdapterRepository:
    """
    The pool of N shape-compatible adapters. Every adapter maps the same ordered
    layer names to pairs with identical (d, k, r) per layer.
    """

    adapters: Tuple[Adapter, ...]
    layer_names: Tuple[str, ...]
    names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        adapters = tuple(dict(a) for a in self.adapters)
        if not adapters:
            raise LowRankError("repository needs at least one adapter")
        layer_names = tuple(self.layer_names)
        if not layer_names:
            raise LowRankError("repository needs at least one layer")
        reference = adapters[0]
        for idx, adapter in enumerate(adapters):
            if tuple(adapter.keys()) != layer_names:
                raise ShapeMismatchError(
                    f"adapter {idx} layers {list(adapter.keys())} != {list(layer_names)}"
                )
            for layer in layer_names:
                if adapter[layer].shape != reference[layer].shape:
                    raise ShapeMismatchError(
                        f"adapter {idx} layer '{layer}' has shape {adapter[layer].shape}, "
                        f"expected {reference[layer].shape}"
                    )
        names = tuple(self.names) or tuple(f"adapter_{i:03d}" for i in range(len(adapters)))
        if len(names) != len(adapters):
            raise LowRankError(f"{len(names)} names for {len(adapters)} adapters")
        object.__setattr__(self, "adapters", adapters)
        object.__setattr__(self, "layer_names", layer_names)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return len(self.adapters)

    def layer_shape(self, layer: str) -> Tuple[int, int, int]:
        return self.adapters[0][layer].shape

    def subset(self, indices: Sequence[int]) -> "AdapterRepository":
        return AdapterRepository(
            adapters=tuple(self.adapters[i] for i in indices),
            layer_names=self.layer_names,
            names=tuple(self.names[i] for i in indices),
        )


@dataclass(frozen=True)
class ConcentrationReport:
    gini: float
    lorenz: Tuple[Tuple[float, float], ...]


def task_vector(pair: LowRankPair) -> np.ndarray:
    """Dense d x k product b @ a."""
    if pair.b.shape[1] != pair.a.shape[0]:
        raise ShapeMismatchError("corrupted pair: inner dimensions differ")
    return pair.b @ pair.a


def retained_count(alpha: float, numel: int) -> int:
    """Number of entries kept at retention ratio alpha: ceil(alpha * numel), at least 1 when alpha > 0."""
    if alpha <= 0.0:
        return 0
    if alpha >= 1.0:
        return numel
    return min(numel, max(1, math.ceil(round(alpha * numel, _RETENTION_DECIMALS))))


def _check_ratio(alpha: float, name: str = "alpha") -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha < 0.0 or alpha > 1.0:
        raise LowRankError(f"{name} must lie in [0, 1], got {alpha}")
    return alpha


def sparsify(a: np.ndarray, alpha: float) -> np.ndarray:
    """
    Keeps the ceil(alpha * numel) entries of largest absolute value and zeroes the rest.
    Ties are broken by the smaller row-major index, so retained supports are nested
    in alpha and the operator is idempotent.
    """
    alpha = _check_ratio(alpha)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"sparsify expects a 2-D matrix, got shape {a.shape}")
    if alpha == 1.0:
        return a.copy()
    flat = a.ravel()
    keep = retained_count(alpha, flat.size)
    out = np.zeros_like(flat)
    if keep:
        # stable sort on -|a| keeps equal magnitudes in index order
        order = np.argsort(-np.abs(flat), kind="stable")[:keep]
        out[order] = flat[order]
    return out.reshape(a.shape)


def _check_vector(values, n: int, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64).ravel()
    if vec.size != n:
        raise LowRankError(f"{name} has length {vec.size}, repository holds {n} adapters")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return vec


def sparsified_a_matrices(repo: AdapterRepository, alphas) -> List[Dict[str, np.ndarray]]:
    """S_alpha_i(A_i) for every adapter and layer; one alpha per adapter, broadcast over layers."""
    alphas = _check_vector(alphas, repo.n, "alphas")
    for alpha in alphas:
        _check_ratio(alpha)
    return [
        {layer: sparsify(adapter[layer].a, alpha) for layer in repo.layer_names}
        for adapter, alpha in zip(repo.adapters, alphas)
    ]


def merge(repo: AdapterRepository, weights, alphas) -> Adapter:
    """
    Per layer: A_m = sum_i w_i * S_alpha_i(A_i) and B_m = sum_i w_i * B_i.
    Accumulation runs in adapter order so results are reproducible bit for bit.
    """
    weights = _check_vector(weights, repo.n, "weights")
    sparse_a = sparsified_a_matrices(repo, alphas)
    merged: Adapter = {}
    for layer in repo.layer_names:
        d, k, r = repo.layer_shape(layer)
        acc_a = np.zeros((r, k))
        acc_b = np.zeros((d, r))
        for i, adapter in enumerate(repo.adapters):
            acc_a = acc_a + weights[i] * sparse_a[i][layer]
            acc_b = acc_b + weights[i] * adapter[layer].b
        merged[layer] = LowRankPair(a=acc_a, b=acc_b)
    return merged


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def premerge_uniform(repo: AdapterRepository, alphas) -> Adapter:
    """Stage-1 pre-merge: merge with weights fixed to 1/N."""
    return merge(repo, uniform_weights(repo.n), alphas)


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(m, dtype=np.float64)))))


def error_bound_check(a: np.ndarray, alpha: float, b: np.ndarray) -> Tuple[float, float]:
    """
    Both sides of the pruning-error bound
    ||B A - B S(A)||_F <= ||B||_F * ||A - S(A)||_F.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if b.shape[1] != a.shape[0]:
        raise ShapeMismatchError(f"B is {b.shape}, A is {a.shape}")
    pruned = sparsify(a, alpha)
    lhs = frobenius_norm(b @ a - b @ pruned)
    rhs = frobenius_norm(b) * frobenius_norm(a - pruned)
    return lhs, rhs


def concentration(values) -> ConcentrationReport:
    """Gini coefficient and Lorenz curve of a non-negative vector (ascending-sort formula, no small-sample correction)."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise DegenerateInputError("concentration of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("concentration input contains non-finite values")
    if x[0] < 0.0:
        raise LowRankError("concentration expects non-negative values")
    total = float(x.sum())
    if total <= 0.0:
        raise DegenerateInputError("Gini coefficient is undefined for an all-zero vector")
    n = x.size
    ranks = np.arange(1, n + 1, dtype=np.float64)
    gini = float(np.sum((2.0 * ranks - n - 1.0) * x) / (n * total))
    gini = min(1.0, max(0.0, gini))

    population = np.arange(0, n + 1, dtype=np.float64) / n
    mass = np.concatenate(([0.0], np.cumsum(x) / total))
    mass = np.minimum(np.maximum.accumulate(mass), population)
    mass[-1] = 1.0
    population[-1] = 1.0
    lorenz = tuple(zip(population.tolist(), mass.tolist()))
    return ConcentrationReport(gini=gini, lorenz=lorenz)


def delta_concentration(adapter: Mapping[str, LowRankPair]) -> ConcentrationReport:
    """Concentration of |delta W| over all layers of an adapter."""
    entries = np.concatenate([np.abs(task_vector(p)).ravel() for p in adapter.values()])
    return concentration(entries)


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    nx, ny = frobenius_norm(x), frobenius_norm(y)
    if nx == 0.0 or ny == 0.0:
        return None
    return float(np.sum(np.asarray(x) * np.asarray(y)) / (nx * ny))
