"""Configuration management for the ADNet lab"""
import copy
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from models import (EncoderConfig, HeadConfig, LossConfig, PreprocessConfig, SamplerConfig, SgdConfig,
                    SupervoxelParams, SyntheticSpec, TransformSpec)

RESOLVED_CONFIG = "resolved_config.json"


class ConfigurationError(Exception):
    """Configuration-related errors"""
    pass


class LabSettings(BaseSettings):
    """Process-level settings from ADNET_* environment variables or .env"""
    model_config = SettingsConfigDict(env_prefix="ADNET_", env_file=".env", case_sensitive=False,
                                      extra="ignore")

    log_level: str = "INFO"
    logs_dir: str = "logs"
    log_file: Optional[str] = None
    threads: int = 1
    config_file: str = "config.yaml"

    @property
    def resolved_log_file(self) -> str:
        return self.log_file or str(Path(self.logs_dir) / "adnet_lab.log")


class ExperimentConfig(BaseModel):
    """Everything one experiment needs; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    # data
    dataset_dir: Optional[str] = None  # None: generate from `synthetic`
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    supervoxel_dir: Optional[str] = None
    preprocessing: PreprocessConfig = Field(default_factory=PreprocessConfig)

    # self-supervision
    supervoxel: SupervoxelParams = Field(default_factory=SupervoxelParams)
    self_supervision: Literal["supervoxel", "superpixel"] = "supervoxel"
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    transform: TransformSpec = Field(default_factory=TransformSpec)

    # model and optimisation
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    sgd: SgdConfig = Field(default_factory=SgdConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    iterations: int = Field(default=2000, ge=0)
    log_every: int = Field(default=100, ge=1)

    # evaluation
    protocol: Literal["EP1", "EP2"] = "EP2"
    ep2_support: Literal["middle", "all"] = "middle"
    n_folds: int = Field(default=5, ge=1)
    split_seed: int = 0
    runs_per_fold: int = Field(default=3, ge=1)
    folds: Optional[List[int]] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_folds(self):
        if self.folds is not None:
            bad = [f for f in self.folds if not 0 <= f < self.n_folds]
            if bad:
                raise ValueError(f"folds {bad} outside [0, {self.n_folds})")
            if len(set(self.folds)) != len(self.folds):
                raise ValueError(f"duplicate folds in {self.folds}")
        return self

    def fold_indices(self) -> List[int]:
        return sorted(self.folds) if self.folds is not None else list(range(self.n_folds))

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    if first["type"] == "extra_forbidden":
        return f"unknown config key '{location}'"
    if location:
        return f"invalid value for '{location}': {first['msg']}"
    return first["msg"]


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping of ExperimentConfig keys")
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(_describe(e))


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a JSON or YAML experiment file; yaml.safe_load parses both"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Failed to load config from {path}: {e}")
    return parse_experiment_config(data)


class LabConfig:
    """Main configuration manager: settings, experiment and CLI overrides"""

    def __init__(self, config_path: Optional[str] = None, seed: Optional[int] = None):
        self.settings = LabSettings()
        self.config_path = Path(config_path) if config_path else None
        self.experiment = ExperimentConfig()
        self.load_config()
        if seed is not None:
            self.experiment = parse_experiment_config({**self.experiment.model_dump(), "seed": seed})

    def with_overrides(self, changes: Dict[str, Any]) -> "LabConfig":
        """Copy with experiment keys replaced; nested sections merge one level deep"""
        data = self.experiment.model_dump()
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        clone = copy.copy(self)
        clone.experiment = parse_experiment_config(data)
        return clone

    def load_config(self) -> None:
        if self.config_path is None:
            return
        if not self.config_path.exists():
            raise ConfigurationError(f"config file not found: {self.config_path}")
        self.experiment = load_experiment_config(self.config_path)

    def validate(self) -> List[str]:
        """Cross-field problems the component models cannot see on their own"""
        errors = []
        exp = self.experiment
        dims = exp.synthetic.dims
        height, width = exp.preprocessing.crop or dims[1:]
        s = exp.encoder.downsample
        if height % s or width % s:
            errors.append(f"slice size {height}x{width} is not divisible by the encoder downsampling {s}")
        if exp.dataset_dir is None and exp.sampler.min_pixels > height * width:
            errors.append(f"min_pixels {exp.sampler.min_pixels} exceeds the slice area {height * width}")
        if exp.dataset_dir is None and exp.synthetic.volume_count < exp.n_folds:
            errors.append(f"{exp.synthetic.volume_count} volumes cannot fill {exp.n_folds} folds")
        return errors

    def get_config_summary(self) -> Dict[str, Any]:
        exp = self.experiment
        return {
            "config_file": str(self.config_path) if self.config_path else "<defaults>",
            "data": exp.dataset_dir or f"synthetic x{exp.synthetic.volume_count} {exp.synthetic.dims}",
            "self_supervision": exp.self_supervision,
            "rho": exp.supervoxel.rho,
            "iterations": exp.iterations,
            "protocol": exp.protocol,
            "folds": exp.fold_indices(),
            "runs_per_fold": exp.runs_per_fold,
            "loss_terms": [name for name, on in (("L_S", True), ("L_T", exp.loss.threshold_loss),
                                                  ("L_PAR", exp.loss.par_loss)) if on],
            "seed": exp.seed,
        }

    def write_resolved(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_CONFIG
        path.write_text(self.experiment.canonical_json(), encoding="utf-8")
        return path
