# File: synth.py
# Planted synthetic worlds: a base linear model, a low-rank target delta, a pool of
# relevant / adversarial / distractor adapters and a validation set labelled by the teacher.

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import lowrank
import oracle
from models import SynthSpec

logger = logging.getLogger(__name__)

RELEVANT = "relevant"
ADVERSARIAL = "adversarial"
IRRELEVANT = "irrelevant"

# Second seed word of the held-out generator; keeps it apart from the world stream.
HOLDOUT_STREAM = 1


@dataclass(frozen=True)
class SynthWorld:
    spec: Optional[SynthSpec]
    base: Dict[str, np.ndarray]  # layer -> d x k
    target_delta: Dict[str, lowrank.LowRankPair]
    repo: lowrank.AdapterRepository
    relevance: Tuple[str, ...]
    val: oracle.ValidationSet
    teacher_loss: float

    @property
    def layer_names(self) -> Tuple[str, ...]:
        return self.repo.layer_names

    def indices(self, label: str) -> List[int]:
        return [i for i, r in enumerate(self.relevance) if r == label]


@dataclass(frozen=True)
class SparsifyStudyRow:
    alpha: float
    loss_a: float
    loss_b: float
    gini_a: float
    gini_b: float


def to_storage_precision(arr: np.ndarray) -> np.ndarray:
    """Rounds to float32 and widens back, so the world survives a disk round-trip unchanged."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def layer_names_for(n_layers: int) -> List[str]:
    return [f"layer{i}" for i in range(n_layers)]


def sample_labels(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one class per row from softmax(logits)."""
    probs = np.exp(oracle.log_softmax(logits))
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(logits.shape[0])
    labels = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(labels, logits.shape[1] - 1)


def generate_world(spec: SynthSpec) -> SynthWorld:
    """
    Draws, in order: base weights, target factors, then each adapter (relevant, adversarial,
    irrelevant), then validation inputs and teacher labels, all from one seeded generator.
    Noise lands on A unless spec.noise_side == "B".
    """
    rng = np.random.default_rng(spec.seed)
    k, d, r, s = spec.input_dim, spec.class_count, spec.rank, spec.signal_scale
    layers = layer_names_for(spec.n_layers)
    q = to_storage_precision

    base = {
        name: q(rng.standard_normal((d, k)) * spec.base_scale / math.sqrt(k)) for name in layers
    }
    target = {
        name: lowrank.LowRankPair(
            b=q(rng.standard_normal((d, r)) * s),
            a=q(rng.standard_normal((r, k)) * s),
        )
        for name in layers
    }

    n_irrelevant = spec.n_adapters - spec.n_relevant - spec.n_adversarial
    relevance = (
        [RELEVANT] * spec.n_relevant
        + [ADVERSARIAL] * spec.n_adversarial
        + [IRRELEVANT] * n_irrelevant
    )
    adapters = []
    for label in relevance:
        adapter = {}
        for name in layers:
            star = target[name]
            if label == RELEVANT:
                if spec.noise_side == "A":
                    noise = rng.standard_normal((r, k)) * spec.noise_level
                    pair = lowrank.LowRankPair(a=q(star.a + noise), b=star.b)
                else:
                    noise = rng.standard_normal((d, r)) * spec.noise_level
                    pair = lowrank.LowRankPair(a=star.a, b=q(star.b + noise))
            elif label == ADVERSARIAL:
                pair = lowrank.LowRankPair(a=star.a, b=-star.b)
            else:
                pair = lowrank.LowRankPair(
                    b=q(rng.standard_normal((d, r)) * s),
                    a=q(rng.standard_normal((r, k)) * s),
                )
            adapter[name] = pair
        adapters.append(adapter)
    repo = lowrank.AdapterRepository(adapters=tuple(adapters), layer_names=tuple(layers))

    inputs = q(rng.standard_normal((spec.n_val, k)))
    teacher_w = {name: base[name] + lowrank.task_vector(target[name]) for name in layers}
    teacher_total = sum(teacher_w.values())
    labels = sample_labels(rng, inputs @ teacher_total.T)
    val = oracle.ValidationSet(inputs=inputs, labels=labels)
    teacher_loss = oracle.cross_entropy_loss(teacher_w, val)

    logger.info(
        f"Generated world seed={spec.seed}: N={spec.n_adapters} "
        f"({spec.n_relevant} relevant, {spec.n_adversarial} adversarial, {n_irrelevant} irrelevant), "
        f"layers={spec.n_layers}, teacher_loss={teacher_loss:.4f}"
    )
    return SynthWorld(
        spec=spec,
        base=base,
        target_delta=target,
        repo=repo,
        relevance=tuple(relevance),
        val=val,
        teacher_loss=teacher_loss,
    )


def holdout_world(world: SynthWorld, n_examples: int, seed: int) -> SynthWorld:
    """
    The same world scored on a fresh validation set of n_examples teacher-labelled inputs.
    Draws come from their own generator, so the search-time set is never reused.
    """
    if n_examples < 1:
        raise ValueError(f"held-out set needs at least one example, got {n_examples}")
    rng = np.random.default_rng((seed, HOLDOUT_STREAM))
    k = world.repo.layer_shape(world.layer_names[0])[1]
    teacher_w = {
        name: world.base[name] + lowrank.task_vector(world.target_delta[name]) for name in world.layer_names
    }
    teacher_total = sum(teacher_w.values())
    inputs = to_storage_precision(rng.standard_normal((n_examples, k)))
    labels = sample_labels(rng, inputs @ teacher_total.T)
    val = oracle.ValidationSet(inputs=inputs, labels=labels)
    return replace(world, val=val, teacher_loss=oracle.cross_entropy_loss(teacher_w, val))


def zero_delta_loss(world: SynthWorld) -> float:
    return oracle.adapter_loss(world, None)


def relevant_only_loss(world: SynthWorld) -> float:
    """Loss of the uniform average of the relevant adapters only, at full retention."""
    idx = world.indices(RELEVANT)
    if not idx:
        raise ValueError("world has no relevant adapters")
    sub = world.repo.subset(idx)
    merged = lowrank.merge(sub, lowrank.uniform_weights(sub.n), np.ones(sub.n))
    return oracle.adapter_loss(world, merged)


def uniform_average_loss(world: SynthWorld) -> float:
    """Every adapter at weight 1/N and alpha 1."""
    repo = world.repo
    return oracle.adapter_loss(world, lowrank.premerge_uniform(repo, np.ones(repo.n)))


def relevance_cosines(world: SynthWorld) -> List[float]:
    """Cosine between each adapter's task vector and the target, over all layers."""
    target = np.concatenate(
        [lowrank.task_vector(world.target_delta[n]).ravel() for n in world.layer_names]
    )
    out = []
    for adapter in world.repo.adapters:
        tv = np.concatenate([lowrank.task_vector(adapter[n]).ravel() for n in world.layer_names])
        cos = lowrank.cosine_similarity(tv, target)
        out.append(0.0 if cos is None else cos)
    return out


def side_sparsified_merge(repo: lowrank.AdapterRepository, alpha: float, side: str = "A") -> lowrank.Adapter:
    """Uniform merge with the pruning operator applied to every A (side "A") or every B (side "B")."""
    if side == "A":
        return lowrank.premerge_uniform(repo, np.full(repo.n, alpha))
    if side != "B":
        raise ValueError(f"side must be 'A' or 'B', got {side!r}")
    pruned = [
        {
            name: lowrank.LowRankPair(a=adapter[name].a, b=lowrank.sparsify(adapter[name].b, alpha))
            for name in repo.layer_names
        }
        for adapter in repo.adapters
    ]
    pruned_repo = lowrank.AdapterRepository(
        adapters=tuple(pruned), layer_names=repo.layer_names, names=repo.names
    )
    return lowrank.premerge_uniform(pruned_repo, np.ones(repo.n))


def _gini_or_zero(adapter: lowrank.Adapter) -> float:
    try:
        return lowrank.delta_concentration(adapter).gini
    except lowrank.DegenerateInputError:
        return 0.0


def ab_sparsify_study(world: SynthWorld, retention_grid: Sequence[float]) -> List[SparsifyStudyRow]:
    """Per retention ratio: loss and |delta W| Gini of the uniform merge with A-side vs B-side pruning."""
    repo = world.repo
    rows = []
    for alpha in retention_grid:
        alpha = float(alpha)
        if not (0.0 < alpha <= 1.0):
            raise lowrank.LowRankError(f"retention ratio {alpha} outside (0, 1]")
        merged_a = side_sparsified_merge(repo, alpha, "A")
        merged_b = side_sparsified_merge(repo, alpha, "B")
        rows.append(
            SparsifyStudyRow(
                alpha=alpha,
                loss_a=oracle.adapter_loss(world, merged_a),
                loss_b=oracle.adapter_loss(world, merged_b),
                gini_a=_gini_or_zero(merged_a),
                gini_b=_gini_or_zero(merged_b),
            )
        )
        logger.debug(f"alpha={alpha}: loss_A={rows[-1].loss_a:.4f} loss_B={rows[-1].loss_b:.4f}")
    return rows
