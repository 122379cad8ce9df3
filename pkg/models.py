# File: models.py
# Pydantic models for the fitness wire protocol, synthetic-world specs, stage budgets
# and the validated experiment configuration.

import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

# Wire error codes, shared by server and client.
ERROR_DIM_MISMATCH = "dim_mismatch"
ERROR_BAD_STAGE = "bad_stage"
ERROR_PARSE = "parse_error"
# Well-formed query whose merged model produces a NaN/Inf loss.
ERROR_NON_FINITE = "non_finite_loss"


def _require_finite(values: Optional[List[float]], name: str) -> Optional[List[float]]:
    if values is None:
        return values
    for i, v in enumerate(values):
        if not math.isfinite(v):
            raise ValueError(f"{name}[{i}] is not a finite number")
    return values


class FitnessQuery(BaseModel):
    """Request body of POST /fitness."""

    request_id: str = Field(..., min_length=1, description="Opaque token echoed back in the reply.")
    stage: Literal[1, 2] = Field(..., description="1 = sparsity search, 2 = sign-aware scaling.")
    alphas: List[float] = Field(
        ...,
        min_length=1,
        description="Per-adapter retention ratios in [0, 1]. Frozen Stage-1 result for stage 2.",
    )
    betas: Optional[List[float]] = Field(
        None, description="Per-adapter merge weights; required for stage 2, null for stage 1."
    )

    @field_validator("alphas")
    @classmethod
    def _alphas_in_unit_box(cls, v: List[float]) -> List[float]:
        _require_finite(v, "alphas")
        for i, a in enumerate(v):
            if a < 0.0 or a > 1.0:
                raise ValueError(f"alphas[{i}]={a} outside [0, 1]")
        return v

    @field_validator("betas")
    @classmethod
    def _betas_finite(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        return _require_finite(v, "betas")

    @model_validator(mode="after")
    def _betas_match_stage(self) -> "FitnessQuery":
        if self.stage == 2 and self.betas is None:
            raise ValueError("stage 2 queries must carry betas")
        if self.stage == 1 and self.betas is not None:
            raise ValueError("stage 1 queries must not carry betas")
        # vector lengths are checked against the pool size by the evaluator (dim_mismatch)
        return self


class FitnessReply(BaseModel):
    request_id: str = Field(..., description="Echo of the query's request_id.")
    loss: float = Field(..., ge=0.0, description="Mean validation cross-entropy.")
    n_examples: int = Field(..., ge=1, description="Validation items aggregated into the loss.")

    @field_validator("loss")
    @classmethod
    def _loss_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("loss is not finite")
        return v


class ErrorReply(BaseModel):
    error: Literal["dim_mismatch", "bad_stage", "parse_error", "non_finite_loss"] = Field(
        ..., description="Machine-readable error code."
    )
    detail: str = Field("", description="Human-readable explanation.")


class WorldInfo(BaseModel):
    """Public description of a served world; never carries parameters."""

    n_adapters: int = Field(..., ge=1)
    layer_names: List[str]
    n_examples: int = Field(..., ge=1)


class SynthSpec(BaseModel):
    """Planted synthetic world recipe. Defaults give a desk-scale world."""

    input_dim: int = Field(32, ge=1, description="Feature dimension k.")
    class_count: int = Field(8, ge=2, description="Number of classes d.")
    rank: int = Field(4, ge=1, description="Adapter rank r.")
    n_adapters: int = Field(20, ge=1, description="Pool size N.")
    n_relevant: int = Field(5, ge=0, description="Adapters derived from the planted target.")
    n_adversarial: int = Field(
        0, ge=0, description="Adapters whose task vector is the negated target (B = -B*)."
    )
    noise_level: float = Field(0.5, ge=0.0, description="Std-dev of perturbations on relevant adapters.")
    noise_side: Literal["A", "B"] = Field("A", description="Factor receiving the perturbation.")
    signal_scale: float = Field(1.0, gt=0.0, description="Scale s of target and distractor factors.")
    base_scale: float = Field(1.0, ge=0.0, description="Multiplier on the base weights.")
    n_layers: int = Field(1, ge=1, description="Layers per adapter; logits sum the per-layer maps.")
    n_val: int = Field(256, ge=1, description="Validation-set size.")
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> "SynthSpec":
        if self.rank > min(self.class_count, self.input_dim):
            raise ValueError(
                f"rank {self.rank} exceeds min(class_count={self.class_count}, input_dim={self.input_dim})"
            )
        if self.n_relevant + self.n_adversarial > self.n_adapters:
            raise ValueError(
                f"n_relevant + n_adversarial = {self.n_relevant + self.n_adversarial} "
                f"exceeds n_adapters = {self.n_adapters}"
            )
        return self


class StageConfig(BaseModel):
    """Budget and regularization for one CMA-ES stage."""

    lambda_reg: float = Field(0.05, ge=0.0, description="L1 coefficient on the decision vector.")
    generations: int = Field(20, ge=1)
    population: int = Field(20, ge=2)
    sigma0: float = Field(0.05, gt=0.0)
    beta_bound: float = Field(1.5, gt=0.0, description="Stage-2 box half-width.")
    seed: int = Field(0, ge=0)
    fixed_betas: Dict[int, float] = Field(
        default_factory=dict,
        description="Stage-2 coordinates frozen at the given value (adapter index -> beta).",
    )


class LayerManifest(BaseModel):
    name: str = Field(..., min_length=1)
    d: int = Field(..., ge=1)
    k: int = Field(..., ge=1)
    a_file: str = Field(..., min_length=1)
    b_file: str = Field(..., min_length=1)


class AdapterManifest(BaseModel):
    name: str
    rank: int = Field(..., ge=1)
    layers: List[LayerManifest] = Field(..., min_length=1)


class OracleSettings(BaseModel):
    mode: Literal["local", "remote"] = "local"
    endpoint: Optional[str] = Field(None, description="Base URL of a fitness server (remote mode).")
    timeout_s: float = Field(30.0, gt=0.0)
    workers: int = Field(1, ge=1, description="Concurrent evaluations per generation.")

    @model_validator(mode="after")
    def _endpoint_for_remote(self) -> "OracleSettings":
        if self.mode == "remote" and not self.endpoint:
            raise ValueError("remote oracle mode needs an endpoint")
        return self


class ServerSettings(BaseModel):
    host: str = "127.0.0.1"
    port: int = Field(8765, ge=0, le=65535)
    reply_cache_size: int = Field(4096, ge=0)


class SweepSettings(BaseModel):
    """Synthetic-world sweeps: pool growth, added distractors and validation-set size."""

    pool_sizes: List[int] = Field(default_factory=lambda: [10, 20, 40], min_length=1)
    distractor_counts: List[int] = Field(default_factory=lambda: [0, 5, 10], min_length=1)
    sample_sizes: List[int] = Field(default_factory=lambda: [16, 64, 256], min_length=1)
    seeds: int = Field(3, ge=1, description="Seeds per sweep value, starting at the experiment seed.")
    holdout_examples: int = Field(2048, ge=1, description="Size of the held-out scoring set.")

    @field_validator("pool_sizes", "sample_sizes")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        for x in v:
            if x < 1:
                raise ValueError(f"sweep value {x} must be >= 1")
        return v

    @field_validator("distractor_counts")
    @classmethod
    def _non_negative(cls, v: List[int]) -> List[int]:
        for x in v:
            if x < 0:
                raise ValueError(f"distractor count {x} must be >= 0")
        return v


class ExperimentConfig(BaseModel):
    """Everything a run needs; reproducible from this plus the seed."""

    seed: int = Field(0, ge=0)
    output_dir: str = "outputs"
    synth: Optional[SynthSpec] = None
    world_path: Optional[str] = None
    repository_path: Optional[str] = None
    stage1: StageConfig = Field(default_factory=StageConfig)
    stage2: StageConfig = Field(default_factory=lambda: StageConfig(generations=40))
    oracle: OracleSettings = Field(default_factory=OracleSettings)
    server: ServerSettings = Field(default_factory=ServerSettings)
    retention_grid: List[float] = Field(
        default_factory=lambda: [0.1, 0.2, 0.3, 0.5, 0.7, 1.0]
    )
    bound_trials: int = Field(1000, ge=1)
    sweeps: SweepSettings = Field(default_factory=SweepSettings)

    @field_validator("retention_grid")
    @classmethod
    def _grid_in_range(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("retention_grid must not be empty")
        for a in v:
            if not (0.0 < a <= 1.0):
                raise ValueError(f"retention ratio {a} outside (0, 1]")
        return v

    @model_validator(mode="after")
    def _exactly_one_source(self) -> "ExperimentConfig":
        sources = [s for s in (self.synth, self.world_path, self.repository_path) if s is not None]
        if len(sources) != 1:
            raise ValueError(
                "exactly one of synth / world_path / repository_path must be set, "
                f"got {len(sources)}"
            )
        if self.repository_path is not None and self.oracle.mode != "remote":
            raise ValueError("a bare repository_path carries no validation set; use a remote oracle")
        return self
