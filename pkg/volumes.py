"""Volume and label types, RVF file I/O and preprocessing"""
import json
import math
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from models import PreprocessConfig
import logging

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_DTYPES = {"f32le": "<f4", "u32le": "<u4"}


class VolumeFormatError(Exception):
    """Malformed volume data or RVF files"""
    pass


class VolumeIOError(Exception):
    """Filesystem failures while reading or writing RVF files"""
    pass


class Volume(BaseModel):
    """3D scalar image, C-order (z, y, x), 32-bit float"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("data")
    @classmethod
    def _check_data(cls, value):
        value = np.ascontiguousarray(value, dtype=np.float32)
        if value.ndim != 3 or min(value.shape) < 1:
            raise VolumeFormatError(f"volume data must be 3D with all dims >= 1, got shape {value.shape}")
        if not np.isfinite(value).all():
            raise VolumeFormatError("volume contains non-finite values")
        return value

    @field_validator("spacing")
    @classmethod
    def _check_spacing(cls, value):
        if any(not (s > 0) for s in value):
            raise VolumeFormatError(f"spacing must be > 0, got {value}")
        return tuple(float(s) for s in value)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def num_voxels(self) -> int:
        return int(self.data.size)

    def slice(self, z: int) -> np.ndarray:
        return self.data[z]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data=data, spacing=self.spacing)


class LabelVolume(BaseModel):
    """Integer-labeled 3D partition: supervoxel ids or class masks"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labels: np.ndarray

    @field_validator("labels")
    @classmethod
    def _check_labels(cls, value):
        value = np.asarray(value)
        if value.ndim != 3 or min(value.shape) < 1:
            raise VolumeFormatError(f"labels must be 3D with all dims >= 1, got shape {value.shape}")
        if np.issubdtype(value.dtype, np.signedinteger) and value.size and value.min() < 0:
            raise VolumeFormatError("labels must be non-negative")
        return np.ascontiguousarray(value, dtype=np.uint32)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def max_label(self) -> int:
        return int(self.labels.max())

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


class Slice2D(BaseModel):
    """One axial slice with an optional binary mask"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    volume_id: str
    z: int
    image: np.ndarray
    mask: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_mask(self):
        if self.z < 0:
            raise VolumeFormatError(f"z-index must be >= 0, got {self.z}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise VolumeFormatError("slice mask shape differs from image shape")
            if not np.isin(self.mask, (0, 1)).all():
                raise VolumeFormatError("slice mask must be binary")
        return self

    @classmethod
    def from_volume(cls, volume_id: str, volume: Volume, z: int,
                    mask: Optional[np.ndarray] = None) -> "Slice2D":
        if not 0 <= z < volume.dims[0]:
            raise VolumeFormatError(f"z-index {z} outside [0, {volume.dims[0]})")
        return cls(volume_id=volume_id, z=z, image=volume.data[z], mask=mask)


def rvf_paths(path: PathLike) -> Tuple[Path, Path]:
    """Return (metadata, payload) paths for `<name>`, `<name>.rvf.json` or `<name>.rvf.raw`"""
    path = Path(path)
    name = path.name
    for suffix in (".rvf.json", ".rvf.raw", ".rvf"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    base = path.with_name(name)
    return base.with_name(name + ".rvf.json"), base.with_name(name + ".rvf.raw")


def _read_rvf(path: PathLike, expected_dtype: str) -> Tuple[np.ndarray, dict]:
    meta_path, raw_path = rvf_paths(path)
    for p in (meta_path, raw_path):
        if not p.exists():
            raise VolumeIOError(f"missing RVF file: {p}")
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"cannot read RVF metadata {meta_path}: {e}")

    dtype = meta.get("dtype")
    if dtype != expected_dtype:
        raise VolumeFormatError(f"{meta_path}: expected dtype {expected_dtype}, found {dtype}")
    dims = meta.get("dims")
    if not isinstance(dims, list) or len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
        raise VolumeFormatError(f"{meta_path}: invalid dims {dims}")

    try:
        payload = np.fromfile(raw_path, dtype=_DTYPES[dtype])
    except OSError as e:
        raise VolumeIOError(f"cannot read RVF payload {raw_path}: {e}")
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload holds {payload.size} values, dims {dims} need {expected}"
        )
    return payload.reshape(dims), meta


def _write_rvf(path: PathLike, array: np.ndarray, dtype: str, spacing: Tuple[float, ...]) -> None:
    meta_path, raw_path = rvf_paths(path)
    meta = {
        "dims": [int(d) for d in array.shape],
        "dtype": dtype,
        "spacing": [float(s) for s in spacing],
    }
    try:
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump(meta, f, sort_keys=True)
        np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tofile(raw_path)
    except OSError as e:
        raise VolumeIOError(f"cannot write RVF file {meta_path}: {e}")


def load_volume(path: PathLike) -> Volume:
    """Load a float volume from its RVF sidecar and payload"""
    data, meta = _read_rvf(path, "f32le")
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"{path}: payload contains non-finite values")
    spacing = meta.get("spacing", [1.0, 1.0, 1.0])
    return Volume(data=data.astype(np.float32), spacing=tuple(spacing))


def save_volume(volume: Volume, path: PathLike) -> None:
    _write_rvf(path, volume.data, "f32le", volume.spacing)


def load_labels(path: PathLike) -> LabelVolume:
    data, _ = _read_rvf(path, "u32le")
    return LabelVolume(labels=data.astype(np.uint32))


def save_labels(labels: LabelVolume, path: PathLike,
                spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> None:
    _write_rvf(path, labels.labels, "u32le", spacing)


def clip_top_percentile(volume: Volume, pct: float) -> Volume:
    """Clip intensities above the (1 - pct) order statistic of the sorted data"""
    if not 0.0 <= pct < 1.0:
        raise ValueError(f"pct must be in [0, 1), got {pct}")
    flat = np.sort(volume.data, axis=None)
    index = max(math.ceil((1.0 - pct) * flat.size) - 1, 0)
    ceiling = flat[index]
    return volume.with_data(np.minimum(volume.data, ceiling))


def normalize_intensity(volume: Volume) -> Volume:
    """Per-volume z-score; a constant volume maps to zeros"""
    data = volume.data.astype(np.float64)
    std = data.std()
    if std == 0:
        return volume.with_data(np.zeros_like(volume.data))
    return volume.with_data(((data - data.mean()) / std).astype(np.float32))


def _axis_window(size: int, target: int) -> Tuple[slice, slice, Tuple[int, int]]:
    """Source slice, destination slice and (low, high) padding for one axis"""
    if target <= size:
        start = (size - target) // 2
        return slice(start, start + target), slice(0, target), (0, 0)
    low = (target - size) // 2
    return slice(0, size), slice(low, low + size), (low, target - size - low)


def crop_or_pad_array(array: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Center-crop or zero-pad the last two axes; odd remainders go to the high side"""
    height, width = target
    if height < 1 or width < 1:
        raise ValueError(f"target must be >= 1 in both axes, got {target}")
    src_y, dst_y, _ = _axis_window(array.shape[-2], height)
    src_x, dst_x, _ = _axis_window(array.shape[-1], width)
    out = np.zeros(array.shape[:-2] + (height, width), dtype=array.dtype)
    out[..., dst_y, dst_x] = array[..., src_y, src_x]
    return out


def crop_or_pad(volume: Volume, target: Tuple[int, int]) -> Volume:
    return volume.with_data(crop_or_pad_array(volume.data, target))


def crop_or_pad_labels(labels: LabelVolume, target: Tuple[int, int]) -> LabelVolume:
    return LabelVolume(labels=crop_or_pad_array(labels.labels, target))


def preprocess_volume(volume: Volume, config: PreprocessConfig) -> Volume:
    """Clip the top intensities, z-score, then crop/pad slices"""
    if config.clip_pct > 0:
        volume = clip_top_percentile(volume, config.clip_pct)
    if config.normalize:
        volume = normalize_intensity(volume)
    if config.crop is not None:
        volume = crop_or_pad(volume, config.crop)
    return volume


def preprocess_labels(labels: LabelVolume, config: PreprocessConfig) -> LabelVolume:
    if config.crop is not None:
        return crop_or_pad_labels(labels, config.crop)
    return labels
