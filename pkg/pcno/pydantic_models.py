from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List, Literal, Optional

# --- MODEL & OPERATOR ---
class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(1, ge=1, le=3)
    d_a: int = Field(1, ge=0)
    d_u: int = Field(1, ge=1)
    width: int = Field(128, gt=0)
    layers: int = Field(4, gt=0)
    k_max: int = Field(16, ge=0)
    proj_width: int = Field(128, gt=0)
    n_subdomains: int = Field(1, ge=1)
    dtype: Literal["real64", "real32"] = "real64"
    # None: initialized from the training set's bounding box
    length_init: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_length_init(self):
        if self.length_init is not None:
            if len(self.length_init) != self.dim:
                raise ValueError(f"length_init must have {self.dim} entries")
            if any(v <= 0 for v in self.length_init):
                raise ValueError("length_init entries must be positive")
        return self

# --- OPTIMIZATION ---
class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)

class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_lr: float = Field(1e-3, gt=0.0)
    total_steps: int = Field(1, gt=0)
    warm_frac: float = Field(0.2, gt=0.0, lt=1.0)
    start_div: float = Field(2.0, gt=1.0)
    final_div: float = Field(100.0, gt=1.0)
    # Learning-rate multiplier of the length-scale parameter group
    length_lr_scale: float = Field(0.1, gt=0.0)

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(500, gt=0)
    batch_size: int = Field(8, gt=0)
    eval_batch_size: int = Field(8, gt=0)
    divergence_factor: float = Field(1e3, gt=1.0)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)

class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    density_mode: Literal["uniform", "pointcloud"] = "uniform"
    # None: taken from each sample (the container manifest)
    intrinsic_dim: Optional[int] = Field(None, ge=1, le=3)
    centering: Literal["vertex", "cell"] = "vertex"
    sv_rel_tol: float = Field(1e-8, gt=0.0, lt=1.0)

class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)

# --- DATASET CONTAINER ---
class SampleRecordInfo(BaseModel):
    file: str
    checksum: str
    n_nodes: int
    label: str = ""
    params: Dict[str, float] = {}

class DatasetManifest(BaseModel):
    format_version: str
    problem: str = ""
    dim: int
    intrinsic_dim: int
    d_a: int
    d_u: int
    channel_names: Dict[str, List[str]] = {}
    units: Dict[str, str] = {}
    centering: Literal["vertex", "cell"] = "vertex"
    density_mode: Optional[Literal["uniform", "pointcloud"]] = None
    has_features: bool = False
    sample_count: int
    records: List[SampleRecordInfo] = []

# --- TRAINING OUTPUTS ---
class EpochRecord(BaseModel):
    epoch: int
    train_rel_l2: float
    test_rel_l2: Optional[float] = None
    lr: float
    wall_time: float

class RunHistory(BaseModel):
    epochs: List[EpochRecord] = []
    status: Literal["running", "completed", "diverged"] = "running"
    best_epoch: Optional[int] = None
    best_test_rel_l2: Optional[float] = None
    skipped_steps: int = 0

class EvalReport(BaseModel):
    n_samples: int
    mean_rel_l2: float
    median_rel_l2: float
    worst_rel_l2: float
    per_group: Dict[str, float] = {}
    per_group_counts: Dict[str, int] = {}

class GradcheckReport(BaseModel):
    passed: bool
    tolerance: float
    per_op: Dict[str, float]
    worst_op: str
    worst_discrepancy: float

class BenchRow(BaseModel):
    n_nodes: int
    seconds: float

class BenchReport(BaseModel):
    rows: List[BenchRow]
    exponent: Optional[float] = None

# --- DATA GENERATION ---
class GRFSpec1D(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scale: float = Field(625.0, gt=0.0)
    tau: float = Field(5.0, gt=0.0)
    alpha: float = Field(2.0, gt=0.0)
    n_terms: int = Field(256, gt=0)
    resolution: int = Field(512, ge=512)

class AdvDiffCase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    length: float = Field(ge=10.0, le=15.0)
    u_left: float = Field(ge=0.0, le=1.0)
    diffusivity: float = Field(ge=5e-3, le=5e-2)
    source_length: float = Field(ge=5.0, le=8.0)
    grf_seed: int = Field(ge=0)
    mesh_kind: Literal["uniform", "exponential", "linear"] = "uniform"

    @model_validator(mode="after")
    def _check_source_support(self):
        if self.source_length >= self.length:
            raise ValueError("source_length must be smaller than length")
        return self
