"""Data and configuration models for the ADNet lab"""
import math
from datetime import datetime
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


ShapeFamily = Literal["ellipsoid", "box", "tube"]


class ClassShape(BaseModel):
    """Foreground class placed in every synthetic volume"""
    model_config = ConfigDict(extra="forbid")

    class_id: int = Field(ge=1)
    family: ShapeFamily = "ellipsoid"
    radii: Tuple[float, float, float] = (4.0, 12.0, 12.0)  # (z, y, x) in voxels
    level: float = 1.0  # multiplies the contrast; negative means darker than background

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, value):
        if any(r <= 0 for r in value):
            raise ValueError(f"radii must be positive, got {value}")
        return value


class SyntheticSpec(BaseModel):
    """Desk-scale stand-in for an MRI dataset"""
    model_config = ConfigDict(extra="forbid")

    volume_count: int = Field(default=20, ge=1)
    dims: Tuple[int, int, int] = (16, 64, 64)
    spacing: Tuple[float, float, float] = (3.0, 1.0, 1.0)
    classes: List[ClassShape] = Field(default_factory=lambda: [
        ClassShape(class_id=1, family="ellipsoid", radii=(4.0, 12.0, 12.0), level=1.0),
        ClassShape(class_id=2, family="box", radii=(3.0, 9.0, 9.0), level=-1.0),
    ])
    contrast: float = 1.0
    noise_sigma: float = 0.05
    background: float = 0.0
    jitter: float = Field(default=0.0, ge=0.0, lt=1.0)  # relative radius jitter per volume
    distractors: int = Field(default=0, ge=0)  # unlabeled blobs with intermediate intensity
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, value):
        if any(d < 1 for d in value):
            raise ValueError(f"dims must be >= 1, got {value}")
        return value

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError(f"spacing must be > 0, got {value}")
        return value

    @model_validator(mode="after")
    def _check_classes(self):
        if self.contrast <= 0:
            raise ValueError("contrast must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.classes:
            raise ValueError("at least one class is required")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids: {ids}")
        return self


class ShapePlacement(BaseModel):
    """Where a shape ended up in one synthetic volume"""
    class_id: int  # 0 for distractors
    family: ShapeFamily
    center: Tuple[int, int, int]
    radii: Tuple[float, float, float]
    level: float


class PreprocessConfig(BaseModel):
    """Intensity clipping, normalization and slice crop/pad"""
    model_config = ConfigDict(extra="forbid")

    clip_pct: float = Field(default=0.005, ge=0.0, lt=1.0)
    normalize: bool = True
    crop: Optional[Tuple[int, int]] = None

    @field_validator("crop")
    @classmethod
    def _positive_crop(cls, value):
        if value is not None and any(v < 1 for v in value):
            raise ValueError(f"crop target must be >= 1, got {value}")
        return value


class SupervoxelParams(BaseModel):
    """Parameters of the graph-based supervoxel engine"""
    model_config = ConfigDict(extra="forbid")

    rho: int = Field(default=327, ge=1)  # minimum supervoxel size in voxels
    scale_k: float = Field(default=0.5, gt=0.0)
    presmooth_sigma: float = Field(default=0.0, ge=0.0)


class SamplerConfig(BaseModel):
    """Self-supervised episode sampling"""
    model_config = ConfigDict(extra="forbid")

    min_pixels: int = Field(default=200, ge=1)
    max_attempts: int = Field(default=50, ge=1)
    transform_target: Literal["support", "query"] = "query"
    seed: int = 0


class TransformSpec(BaseModel):
    """Ranges for the random geometric and intensity transform"""
    model_config = ConfigDict(extra="forbid")

    rotation_deg: float = Field(default=25.0, ge=0.0)
    scale_range: Tuple[float, float] = (0.8, 1.2)
    translation_frac: float = Field(default=0.1, ge=0.0)
    shear_deg: float = Field(default=5.0, ge=0.0)
    gamma_range: Tuple[float, float] = (0.7, 1.5)

    @field_validator("scale_range", "gamma_range")
    @classmethod
    def _ordered_positive(cls, value):
        low, high = value
        if low <= 0 or high < low:
            raise ValueError(f"range must satisfy 0 < low <= high, got {value}")
        return value

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls(rotation_deg=0.0, scale_range=(1.0, 1.0), translation_frac=0.0,
                   shear_deg=0.0, gamma_range=(1.0, 1.0))


class TransformParams(BaseModel):
    """One sampled transform; translation is in pixels (y, x)"""
    rotation_deg: float = 0.0
    scale: float = 1.0
    translation: Tuple[float, float] = (0.0, 0.0)
    shear_deg: float = 0.0
    gamma: float = 1.0

    @property
    def is_identity_geometry(self) -> bool:
        return (self.rotation_deg == 0.0 and self.scale == 1.0 and self.shear_deg == 0.0
                and self.translation == (0.0, 0.0))


class EncoderConfig(BaseModel):
    """Small strided conv net used as the feature extractor"""
    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(default=1, ge=1)
    stage_widths: List[int] = Field(default_factory=lambda: [16, 32, 32])
    feature_dim: int = Field(default=32, ge=1)
    downsample: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_downsample(self):
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be non-empty positive ints, got {self.stage_widths}")
        steps = math.log2(self.downsample)
        if steps != int(steps):
            raise ValueError(f"downsample must be a power of 2, got {self.downsample}")
        if int(steps) > len(self.stage_widths):
            raise ValueError(
                f"downsample {self.downsample} needs {int(steps)} strided stages, "
                f"only {len(self.stage_widths)} configured"
            )
        return self


class HeadConfig(BaseModel):
    """Anomaly head constants; t_init defaults to -alpha/2"""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=20.0, gt=0.0)
    kappa: float = Field(default=0.5, gt=0.0)
    t_init: Optional[float] = None

    @property
    def initial_threshold(self) -> float:
        return -self.alpha / 2.0 if self.t_init is None else self.t_init


class SgdConfig(BaseModel):
    """SGD with momentum, weight decay and a stepwise learning rate decay"""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    decay: float = Field(default=0.98, gt=0.0, le=1.0)
    decay_every: int = Field(default=1000, ge=1)


class LossConfig(BaseModel):
    """Loss-term toggles and class weights"""
    model_config = ConfigDict(extra="forbid")

    threshold_loss: bool = True
    par_loss: bool = True
    w_fg: float = Field(default=1.0, gt=0.0)
    w_bg: float = Field(default=0.1, gt=0.0)


class EpisodeProvenance(BaseModel):
    """Where an episode came from"""
    volume_id: str = ""
    support_z: int
    query_z: int
    supervoxel_id: int
    transformed: Literal["support", "query"] = "query"
    attempts: int = 1
    transform: Optional[TransformParams] = None


class TrainingRecord(BaseModel):
    """One line of the training log"""
    model_config = ConfigDict(populate_by_name=True)

    iteration: int
    loss_s: float = Field(alias="L_S")
    loss_t: float = Field(alias="L_T")
    loss_par: float = Field(alias="L_PAR")
    T: float
    lr: float
    par_skipped: bool = False


class TrainingRunStats(BaseModel):
    """Statistics for one training run"""
    run_id: str
    fold: Optional[int] = None
    run: int = 0
    seed: int = 0
    iterations: int = 0
    start_time: datetime
    end_time: Optional[datetime] = None
    duration_seconds: Optional[float] = None
    initial_T: float = 0.0
    final_T: float = 0.0
    mean_loss_first: Optional[float] = None
    mean_loss_last: Optional[float] = None
    par_skipped: int = 0
    training_cases: List[str] = Field(default_factory=list)


class SplitPlan(BaseModel):
    """Cross-validation folds with one support case per fold"""
    fold_assignments: Dict[str, int]
    support_ids: List[str]
    runs_per_fold: int = 3

    @property
    def n_folds(self) -> int:
        return len(self.support_ids)

    def fold_members(self, fold: int) -> List[str]:
        return [cid for cid, f in self.fold_assignments.items() if f == fold]

    def query_ids(self, fold: int) -> List[str]:
        support = self.support_ids[fold]
        return [cid for cid in self.fold_members(fold) if cid != support]

    def training_ids(self, fold: int) -> List[str]:
        return [cid for cid, f in self.fold_assignments.items() if f != fold]

    @model_validator(mode="after")
    def _support_in_fold(self):
        for fold, support in enumerate(self.support_ids):
            if self.fold_assignments.get(support) != fold:
                raise ValueError(f"support case {support} is not a member of fold {fold}")
        return self


class DiceRecord(BaseModel):
    """One row of results.csv"""
    protocol: str
    fold: int
    run: int
    class_id: int
    query_id: str
    dice: float = Field(ge=0.0, le=100.0)


class ClassSummary(BaseModel):
    class_id: int
    mean: float
    std: float
    count: int


class ProtocolResult(BaseModel):
    """Per-class and overall dice statistics"""
    protocol: str
    classes: List[ClassSummary] = Field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    count: int = 0

    def class_mean(self, class_id: int) -> float:
        for summary in self.classes:
            if summary.class_id == class_id:
                return summary.mean
        raise KeyError(class_id)


class LineSearchPoint(BaseModel):
    threshold: float
    mean: float
    std: float


class LineSearchResult(BaseModel):
    """Dice as a function of an inference-time threshold override"""
    points: List[LineSearchPoint]
    learned_threshold: float
    learned_thresholds: List[float] = Field(default_factory=list)

    @property
    def best(self) -> LineSearchPoint:
        return max(self.points, key=lambda p: p.mean)


class SupervoxelManifest(BaseModel):
    """Written next to generated label files"""
    mode: Literal["supervoxel", "superpixel"] = "supervoxel"
    params: SupervoxelParams
    counts: Dict[str, int] = Field(default_factory=dict)


class SweepRow(BaseModel):
    """One row of a sensitivity table"""
    parameter: str
    value: str
    class_means: Dict[int, float] = Field(default_factory=dict)
    class_stds: Dict[int, float] = Field(default_factory=dict)
    mean: float = 0.0
    std: float = 0.0
    output_dir: str = ""
    supervoxel_manifest: Optional[str] = None
