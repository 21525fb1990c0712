# vadd_lab/schemas.py

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from vadd_lab.errors import ConfigurationError, DataError

DATASET_NAMES = ("checkerboard", "swissroll", "circles")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# =====================================================
# Run Configuration
# =====================================================

class DatasetConfig(_Strict):
    name: str = "checkerboard"
    n: int = Field(100_000, ge=1)
    seed: int = 0
    board_size: int = Field(2, ge=1)
    truth_n: int = Field(100_000, ge=1)

    @field_validator("name")
    @classmethod
    def _known(cls, value):
        if value not in DATASET_NAMES:
            raise ValueError(f"unknown dataset '{value}' (choose from {', '.join(DATASET_NAMES)})")
        return value


class ModelConfig(_Strict):
    vocab_size: int = Field(100, ge=2)
    seq_len: int = Field(2, ge=1)
    latent_dim: int = Field(2, ge=1)
    width: int = Field(512, ge=1)
    time_features: int = Field(1024, ge=2)
    readout_depth: int = Field(5, ge=1)
    trunk_depth: int = Field(5, ge=1)
    logstd_clamp: float = Field(7.0, gt=0)
    embed_init_std: float = Field(0.02, gt=0)
    shared_latent: bool = False

    @field_validator("time_features")
    @classmethod
    def _even(cls, value):
        if value % 2:
            raise ValueError("time_features must be even (sin/cos pairs)")
        return value


class OptimizerConfig(_Strict):
    lr0: float = Field(3e-4, gt=0)
    schedule: Literal["cosine", "constant"] = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class TrainingConfig(_Strict):
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(256, ge=1)
    anneal_epochs: int = Field(100, ge=0)
    t_min: float = Field(1e-5, gt=0, lt=1)
    log_every: int = Field(100, ge=1)
    record_wallclock: bool = False
    progress: bool = False


class SamplingConfig(_Strict):
    steps: list[int] = Field(default_factory=lambda: [1, 5])
    n_samples: int = Field(100_000, ge=1)
    chunk_size: int = Field(1024, ge=1)


class EvalConfig(_Strict):
    K: int = Field(1000, ge=1)
    n_time_pairs: int = Field(100, ge=1)
    n_sequences: int = Field(1000, ge=1)


class RunConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    threads: int = Field(1, ge=1)


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON config (or defaults) and apply dotted-key overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"config file {path} is not valid JSON: {e}")

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        cursor = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            cursor = cursor.setdefault(key, {})
        cursor[leaf] = value

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}")


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# =====================================================
# File Schemas
# =====================================================

class DataManifest(_Strict):
    name: str
    n: int
    seed: int
    pool: Literal["train", "truth"]
    bounds: list[float]
    bin_width: float
    board_size: int
    config_hash: str


class CheckResult(_Strict):
    name: str
    passed: bool
    value: float
    threshold: float
    margin: float
    details: dict = Field(default_factory=dict)


class OracleReport(_Strict):
    scope: str
    passed: bool
    checks: list[CheckResult]
    seed: int
    config_hash: str


class EvalMetrics(_Strict):
    js: dict[str, float]
    nll: float
    K: int
    n_time_pairs: int
    seed: int
    model: str
    config_hash: str
    sample_stats: dict[str, dict] = Field(default_factory=dict)
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    lineage: list[str] = Field(default_factory=list)


def load_eval_metrics(path: Path) -> EvalMetrics:
    path = Path(path)
    if not path.exists():
        raise DataError(f"metrics not found: {path} (run eval first)")
    try:
        return EvalMetrics.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DataError(f"invalid metrics file {path}: {e}")
