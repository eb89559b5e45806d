"""
Pydantic models for configuration, scenario definitions and reports.
"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


# ============================================================================
# DEMAND SIMULATION
# ============================================================================

class RouteChoiceRule(BaseModel):
    """Route-choice model with its parameters"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["binomial", "clogit", "proportional", "logit", "fixed"] = Field(
        default="logit", description="Route-choice model family"
    )
    p: float = Field(default=0.35, gt=0.0, lt=1.0, description="Binomial success probability")
    theta: float = Field(default=2.0, gt=0.0, description="Cost sensitivity (scaled by mean cost)")
    beta: float = Field(default=1.0, ge=0.0, description="C-Logit commonality weight")
    gamma: float = Field(default=1.0, gt=0.0, description="C-Logit overlap exponent")


class DemandPattern(BaseModel):
    """OD demand pattern"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["single_od", "one_way_multi_od", "two_way_multi_od"] = Field(
        default="single_od", description="Demand pattern"
    )
    origin: Optional[str] = Field(default=None, description="Single-OD origin link (canonical pair if unset)")
    dest: Optional[str] = Field(default=None, description="Single-OD destination link (canonical pair if unset)")
    major_flow_weight: float = Field(default=8.0, ge=1.0, description="Weight multiplier of major OD pairs")

    @property
    def name(self) -> str:
        return self.kind


# ============================================================================
# TRAINING CONFIGURATION
# ============================================================================

class TrainConfig(BaseModel):
    """Adversarial imitation training hyperparameters (desk-scale defaults)"""
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(default=2000, ge=1, description="Training iterations")
    samples: int = Field(default=512, ge=1, description="Trajectories rolled out per iteration")
    discriminator_updates: int = Field(default=2, ge=1, description="Discriminator steps per iteration")
    generator_updates: int = Field(default=6, ge=1, description="(value, policy) alternations per iteration")
    hidden_size: int = Field(default=64, ge=1, description="Hidden neurons per recurrent layer")
    num_layers: int = Field(default=3, ge=1, description="Recurrent layers per embedding")
    learning_rate: float = Field(default=1e-3, gt=0.0, description="Optimizer step size")
    gamma: float = Field(default=0.95, gt=0.0, le=1.0, description="Reward discount")
    entropy_coef: float = Field(default=0.01, ge=0.0, description="Entropy bonus coefficient (lambda)")
    max_len: Optional[int] = Field(default=None, ge=1, description="Rollout length cap; 3x longest expert route if unset")
    seed: int = Field(default=0, ge=0, description="Seed for initialization and rollouts")
    collapse_floor: int = Field(default=2, ge=0, description="Unique generated routes below which an iteration counts as collapsed")
    collapse_patience: int = Field(default=100, ge=1, description="Consecutive collapsed iterations before warning")
    log_every: int = Field(default=50, ge=1, description="INFO summary interval")
    progress: bool = Field(default=False, description="Show a progress bar")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale hyperparameter table"""
        values = dict(iterations=20000, samples=20000, learning_rate=5e-5)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def multi_od(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset for multi-OD demand"""
        values = dict(iterations=6000, samples=2048)
        values.update(overrides)
        return cls(**values)


class BcRnnConfig(BaseModel):
    """Behaviour-cloning recurrent baseline hyperparameters"""
    model_config = ConfigDict(extra="forbid")

    hidden_size: int = Field(default=64, ge=1)
    num_layers: int = Field(default=3, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=256, ge=1)
    seed: int = Field(default=0, ge=0)
    progress: bool = Field(default=False)


class MaxEntConfig(BaseModel):
    """Maximum-entropy IRL hyperparameters"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.05, gt=0.0, description="Adam step size on reward weights")
    iterations: int = Field(default=300, ge=1, description="Maximum gradient steps")
    tolerance: float = Field(default=1e-4, gt=0.0, description="Stop when max |gradient| falls below")
    horizon_factor: float = Field(default=1.5, gt=0.0, description="Horizon as a multiple of the longest expert trajectory")
    seed: int = Field(default=0, ge=0)


# ============================================================================
# TRAINING RECORDS AND REPORTS
# ============================================================================

class ConvergenceRecord(BaseModel):
    """One row of the adversarial training convergence log"""
    iter: int
    J_policy: float
    J_value: float
    J_discrim: float
    entropy: float
    unique_routes: int


class ScoreReport(BaseModel):
    """Trajectory-level similarity scores"""
    bleu: List[float] = Field(default_factory=list, description="Per-trajectory BLEU_n")
    meteor: List[float] = Field(default_factory=list, description="Per-trajectory METEOR")
    bleu_mean: float = Field(..., ge=0.0, le=1.0)
    bleu_std: float = Field(..., ge=0.0)
    meteor_mean: float = Field(..., ge=0.0, le=1.0)
    meteor_std: float = Field(..., ge=0.0)
    n: int = Field(default=4, ge=1, description="BLEU order")


class DistributionReport(BaseModel):
    """Dataset-level route-distribution comparison"""
    d_js: float = Field(..., ge=0.0, le=1.0, description="Jensen-Shannon distance of route distributions")
    unknown_count: int = Field(..., ge=0)
    unknown_rate: float = Field(..., ge=0.0, le=1.0)
    route_counts_generated: Dict[str, int] = Field(default_factory=dict)
    route_counts_reference: Dict[str, int] = Field(default_factory=dict)
    entropy_generated: float = Field(default=0.0, ge=0.0, description="Link transition entropy (bits)")
    entropy_reference: float = Field(default=0.0, ge=0.0, description="Link transition entropy (bits)")
    attribute_js: Dict[str, float] = Field(default_factory=dict, description="JS distance of length/origin/destination/OD")


class ComplexityFit(BaseModel):
    """OLS fit of d_JS against link transition entropy"""
    slope: float
    intercept: float
    r_squared: float
    n_points: int


# ============================================================================
# EXPERIMENT CONFIGURATION
# ============================================================================

class NetworkSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rows: int = Field(default=3, ge=2)
    cols: int = Field(default=3, ge=2)
    block_length: float = Field(default=200.0, gt=0.0)
    terminate_anywhere: bool = Field(default=False)
    edge_list: Optional[str] = Field(default=None, description="Load this edge list instead of building a grid")


class DemandSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pattern: Literal["single_od", "one_way_multi_od", "two_way_multi_od"] = Field(default="single_od")
    origin: Optional[str] = Field(default=None)
    dest: Optional[str] = Field(default=None)
    major_flow_weight: float = Field(default=8.0, ge=1.0)
    rule: Literal["binomial", "clogit", "proportional", "logit", "fixed"] = Field(default="logit")
    p: float = Field(default=0.35, gt=0.0, lt=1.0)
    theta: float = Field(default=2.0, gt=0.0)
    beta: float = Field(default=1.0, ge=0.0)
    gamma: float = Field(default=1.0, gt=0.0)
    k_max: int = Field(default=6, ge=1)
    n: int = Field(default=20000, ge=1)


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["mmc", "bcrnn", "maxent_svf", "maxent_savf", "trajgail"] = Field(default="trajgail")


class TrainSection(BaseModel):
    """Every TrainConfig field plus the baseline settings; prefixed keys belong to baselines"""
    model_config = ConfigDict(extra="forbid")

    scale: Literal["desk", "multi_od", "paper"] = Field(default="desk")
    iterations: Optional[int] = Field(default=None, ge=1)
    samples: Optional[int] = Field(default=None, ge=1)
    discriminator_updates: int = Field(default=2, ge=1)
    generator_updates: int = Field(default=6, ge=1)
    hidden_size: int = Field(default=64, ge=1)
    num_layers: int = Field(default=3, ge=1)
    learning_rate: Optional[float] = Field(default=None, gt=0.0)
    gamma: float = Field(default=0.95, gt=0.0, le=1.0)
    entropy_coef: float = Field(default=0.01, ge=0.0)
    max_len: Optional[int] = Field(default=None, ge=1)
    collapse_floor: int = Field(default=2, ge=0)
    collapse_patience: int = Field(default=100, ge=1)
    log_every: int = Field(default=50, ge=1)
    progress: bool = Field(default=False)
    bc_epochs: int = Field(default=30, ge=1)
    bc_batch_size: int = Field(default=256, ge=1)
    bc_learning_rate: float = Field(default=1e-3, gt=0.0)
    maxent_learning_rate: float = Field(default=0.05, gt=0.0)
    maxent_iterations: int = Field(default=300, ge=1)
    maxent_tolerance: float = Field(default=1e-4, gt=0.0)
    maxent_horizon_factor: float = Field(default=1.5, gt=0.0)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bleu_n: int = Field(default=4, ge=1)
    n_generate: int = Field(default=20000, ge=1)
    max_len: Optional[int] = Field(default=None, ge=1)
    split_ratio: float = Field(default=0.7, gt=0.0, lt=1.0)


class IoSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out: str = Field(default="runs", description="Parent directory of run directories")
    run_id: Optional[str] = Field(default=None, description="Run directory name; derived from the config hash if unset")
    seed: int = Field(default=0, ge=0, description="Global seed")


class RunConfig(BaseModel):
    """Fully resolved experiment configuration"""
    model_config = ConfigDict(extra="forbid")

    network: NetworkSection = Field(default_factory=NetworkSection)
    demand: DemandSection = Field(default_factory=DemandSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    io: IoSection = Field(default_factory=IoSection)


class RunManifest(BaseModel):
    """Record of one command's inputs, outputs and timings"""
    run_id: str
    command: str
    config_hash: str
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> SHA-256")
    checkpoints: Dict[str, str] = Field(default_factory=dict, description="Checkpoint path -> SHA-256")
    reports: Dict[str, str] = Field(default_factory=dict, description="Report path -> SHA-256")
    datasets: Dict[str, str] = Field(default_factory=dict, description="Dataset path -> SHA-256")
    metrics: Dict[str, float] = Field(default_factory=dict, description="Headline metrics for report tables")
    labels: Dict[str, str] = Field(default_factory=dict, description="Scenario labels (pattern, rule, model)")
    timings: Dict[str, float] = Field(default_factory=dict, description="Wall-clock seconds per phase")

    @model_validator(mode="after")
    def _non_empty_paths(self):
        for group in (self.inputs, self.checkpoints, self.reports, self.datasets):
            for path in group:
                if not path:
                    raise ValueError("empty artifact path in manifest")
        return self
