# File: sweeps.py
# Synthetic-world sweeps over the merge search: a growing adapter pool, extra
# distractor adapters and the size of the validation set the oracle scores on.
# Every point is scored on a held-out teacher-labelled set.

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

import oracle
import pipeline
import synth
from models import StageConfig, SynthSpec

logger = logging.getLogger(__name__)

POOL = "pool"
DISTRACTORS = "distractors"
SAMPLES = "samples"
SWEEP_KINDS = (POOL, DISTRACTORS, SAMPLES)


@dataclass
class SweepRow:
    kind: str
    value: int
    seed: int
    n_adapters: int
    n_relevant: int
    n_val: int
    search_loss: float  # final loss on the search-time validation set
    evomerge_loss: float  # the rest are held-out losses
    uniform_loss: float
    relevant_only_loss: float
    teacher_loss: float

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


CSV_HEADER = list(SweepRow.__dataclass_fields__)


# ============================================================
# Spec variants
# ============================================================
def pool_spec(base: SynthSpec, n_adapters: int) -> SynthSpec:
    """Pool of n_adapters keeping the base recipe's share of relevant adapters (at least one)."""
    if n_adapters < 1:
        raise ValueError(f"pool size must be >= 1, got {n_adapters}")
    share = base.n_relevant / base.n_adapters
    n_relevant = min(n_adapters, max(1, int(round(share * n_adapters))))
    n_adversarial = min(base.n_adversarial, n_adapters - n_relevant)
    return base.model_copy(
        update={"n_adapters": n_adapters, "n_relevant": n_relevant, "n_adversarial": n_adversarial}
    )


def distractor_spec(base: SynthSpec, extra: int) -> SynthSpec:
    """The base pool plus `extra` irrelevant adapters."""
    if extra < 0:
        raise ValueError(f"distractor count must be >= 0, got {extra}")
    return base.model_copy(update={"n_adapters": base.n_adapters + extra})


def sample_spec(base: SynthSpec, n_val: int) -> SynthSpec:
    if n_val < 1:
        raise ValueError(f"validation size must be >= 1, got {n_val}")
    return base.model_copy(update={"n_val": n_val})


_VARIANTS = {POOL: pool_spec, DISTRACTORS: distractor_spec, SAMPLES: sample_spec}


# ============================================================
# Sweep driver
# ============================================================
def run_point(
    kind: str,
    value: int,
    spec: SynthSpec,
    cfg1: StageConfig,
    cfg2: StageConfig,
    holdout_examples: int,
    workers: int = 1,
) -> SweepRow:
    """One merge search on the world `spec` describes, scored on a held-out set."""
    world = synth.generate_world(spec)
    local = oracle.LocalOracle(world)
    solution = pipeline.evo_merge(world.repo, local, cfg1, cfg2, workers=workers)
    held = synth.holdout_world(world, holdout_examples, spec.seed)
    has_relevant = bool(world.indices(synth.RELEVANT))
    row = SweepRow(
        kind=kind,
        value=int(value),
        seed=spec.seed,
        n_adapters=spec.n_adapters,
        n_relevant=spec.n_relevant,
        n_val=spec.n_val,
        search_loss=solution.final_loss,
        evomerge_loss=oracle.adapter_loss(held, solution.merged),
        uniform_loss=synth.uniform_average_loss(held),
        relevant_only_loss=synth.relevant_only_loss(held) if has_relevant else float("nan"),
        teacher_loss=held.teacher_loss,
    )
    logger.info(
        f"Sweep {kind}={value} seed={spec.seed}: evomerge={row.evomerge_loss:.4f} "
        f"uniform={row.uniform_loss:.4f} teacher={row.teacher_loss:.4f}"
    )
    return row


def run_sweep(
    kind: str,
    base: SynthSpec,
    values: Sequence[int],
    cfg1: StageConfig,
    cfg2: StageConfig,
    seeds: Iterable[int],
    holdout_examples: int = 2048,
    workers: int = 1,
) -> List[SweepRow]:
    """
    Runs the merge search for every (value, seed) pair. World and Stage 1 use the seed,
    Stage 2 uses seed + 1, matching a single `merge` run at that seed.
    """
    if kind not in _VARIANTS:
        raise ValueError(f"unknown sweep kind {kind!r}; choose from {SWEEP_KINDS}")
    if not values:
        raise ValueError("sweep needs at least one value")
    seeds = list(seeds)
    variant = _VARIANTS[kind]
    rows = []
    for value in values:
        spec = variant(base, int(value))
        for seed in seeds:
            rows.append(
                run_point(
                    kind,
                    value,
                    spec.model_copy(update={"seed": seed}),
                    cfg1.model_copy(update={"seed": seed}),
                    cfg2.model_copy(update={"seed": seed + 1}),
                    holdout_examples,
                    workers=workers,
                )
            )
    return rows


def summarize(rows: Sequence[SweepRow]) -> Dict[int, Dict[str, float]]:
    """Mean held-out losses per sweep value."""
    grouped: Dict[int, List[SweepRow]] = defaultdict(list)
    for row in rows:
        grouped[row.value].append(row)
    return {
        value: {
            "evomerge_loss": float(np.mean([r.evomerge_loss for r in group])),
            "uniform_loss": float(np.mean([r.uniform_loss for r in group])),
            "teacher_loss": float(np.mean([r.teacher_loss for r in group])),
        }
        for value, group in grouped.items()
    }
