"""Synthetic volumes with geometric foreground classes, and the on-disk dataset layout"""
import json
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from models import ShapePlacement, SyntheticSpec
from volumes import (LabelVolume, Volume, VolumeIOError, load_labels, load_volume,
                     save_labels, save_volume)
import logging

logger = logging.getLogger(__name__)

DATASET_MANIFEST = "dataset.json"
_PLACEMENT_ATTEMPTS = 200
_DISTRACTOR_RADII = ((2.0, 5.0, 5.0), (3.0, 7.0, 7.0))
_DISTRACTOR_LEVELS = (0.3, 0.6)


class SyntheticDataError(Exception):
    """Synthetic spec that cannot be realised, or a malformed dataset directory"""
    pass


class DatasetCase(BaseModel):
    """One patient: image, class labels and an id"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    case_id: str
    volume: Volume
    labels: LabelVolume


def case_id_for(index: int) -> str:
    return f"case_{index:03d}"


def shape_mask(family: str, dims: Tuple[int, int, int], center: Sequence[float],
               radii: Sequence[float]) -> np.ndarray:
    """Boolean mask of a shape evaluated at voxel centers"""
    zz, yy, xx = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    dz = (zz - center[0]) / radii[0]
    dy = (yy - center[1]) / radii[1]
    dx = (xx - center[2]) / radii[2]
    if family == "ellipsoid":
        return dz ** 2 + dy ** 2 + dx ** 2 <= 1.0
    if family == "box":
        return (np.abs(dz) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    if family == "tube":
        return (np.abs(dz) <= 1.0) & (dy ** 2 + dx ** 2 <= 1.0)
    raise SyntheticDataError(f"unknown shape family: {family}")


def _extent(radii: Sequence[float]) -> Tuple[int, int, int]:
    return tuple(int(math.floor(r)) for r in radii)


def _fits(dims: Sequence[int], radii: Sequence[float]) -> bool:
    return all(2 * e + 1 <= d for e, d in zip(_extent(radii), dims))


def _place(rng: np.random.Generator, dims, family: str, radii, occupied: np.ndarray):
    """Random center whose shape stays one voxel clear of everything placed so far"""
    ext = _extent(radii)
    for _ in range(_PLACEMENT_ATTEMPTS):
        center = tuple(int(rng.integers(e, d - e)) for e, d in zip(ext, dims))
        if not (shape_mask(family, dims, center, radii) & occupied).any():
            return center
    return None


def _occupy(occupied: np.ndarray, family: str, center, radii) -> np.ndarray:
    mask = shape_mask(family, occupied.shape, center, radii)
    return occupied | ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool))


def plan_placements(spec: SyntheticSpec, index: int) -> List[ShapePlacement]:
    """Deterministic shape layout for volume `index`; classes first, then distractors"""
    rng = np.random.default_rng([spec.seed, index, 0])
    placed: List[ShapePlacement] = []
    occupied = np.zeros(spec.dims, dtype=bool)

    for shape in spec.classes:
        radii = tuple(r * float(rng.uniform(1.0 - spec.jitter, 1.0 + spec.jitter)) if spec.jitter else r
                      for r in shape.radii)
        if not _fits(spec.dims, radii):
            raise SyntheticDataError(
                f"class {shape.class_id} ({shape.family}, radii {radii}) does not fit in dims {spec.dims}"
            )
        center = _place(rng, spec.dims, shape.family, radii, occupied)
        if center is None:
            raise SyntheticDataError(
                f"no free position for class {shape.class_id} in dims {spec.dims} after {_PLACEMENT_ATTEMPTS} attempts"
            )
        occupied = _occupy(occupied, shape.family, center, radii)
        placed.append(ShapePlacement(class_id=shape.class_id, family=shape.family,
                                     center=center, radii=radii, level=shape.level))

    for _ in range(spec.distractors):
        low, high = _DISTRACTOR_RADII
        radii = tuple(float(rng.uniform(lo, hi)) for lo, hi in zip(low, high))
        level = float(rng.uniform(*_DISTRACTOR_LEVELS))
        if not _fits(spec.dims, radii):
            continue
        center = _place(rng, spec.dims, "ellipsoid", radii, occupied)
        if center is None:
            logger.debug(f"Skipping distractor in volume {index}: no free position")
            continue
        occupied = _occupy(occupied, "ellipsoid", center, radii)
        placed.append(ShapePlacement(class_id=0, family="ellipsoid", center=center,
                                     radii=radii, level=level))
    return placed


def render_case(spec: SyntheticSpec, index: int) -> Tuple[Volume, LabelVolume]:
    placements = plan_placements(spec, index)
    data = np.full(spec.dims, spec.background, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.uint32)
    for placement in placements:
        mask = shape_mask(placement.family, spec.dims, placement.center, placement.radii)
        data[mask] = spec.background + spec.contrast * placement.level
        if placement.class_id:
            labels[mask] = placement.class_id
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, index, 1])
        data += noise_rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return Volume(data=data.astype(np.float32), spacing=spec.spacing), LabelVolume(labels=labels)


def generate_synthetic_dataset(spec: SyntheticSpec) -> List[Tuple[Volume, LabelVolume]]:
    """Pure function of the spec: one (image, class labels) pair per volume"""
    dataset = [render_case(spec, i) for i in range(spec.volume_count)]
    logger.info(f"Generated {len(dataset)} synthetic volumes of dims {spec.dims} "
                f"with classes {[c.class_id for c in spec.classes]}")
    return dataset


def synthetic_cases(spec: SyntheticSpec) -> List[DatasetCase]:
    return [DatasetCase(case_id=case_id_for(i), volume=volume, labels=labels)
            for i, (volume, labels) in enumerate(generate_synthetic_dataset(spec))]


def class_ids_of(spec: SyntheticSpec) -> List[int]:
    return [shape.class_id for shape in spec.classes]


def write_dataset(cases: List[DatasetCase], class_ids: List[int], out_dir: Path) -> Path:
    """Write images, labels and dataset.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_volume(case.volume, out_dir / case.case_id)
        save_labels(case.labels, out_dir / f"{case.case_id}_labels", spacing=case.volume.spacing)
    manifest = {"cases": [c.case_id for c in cases], "classes": list(class_ids)}
    manifest_path = out_dir / DATASET_MANIFEST
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(cases)} cases to {out_dir}")
    return manifest_path


def read_manifest(data_dir: Path) -> Dict[str, list]:
    manifest_path = Path(data_dir) / DATASET_MANIFEST
    if not manifest_path.exists():
        raise VolumeIOError(f"dataset manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SyntheticDataError(f"cannot read dataset manifest {manifest_path}: {e}")
    if not isinstance(manifest.get("cases"), list) or not isinstance(manifest.get("classes"), list):
        raise SyntheticDataError(f"{manifest_path}: expected 'cases' and 'classes' lists")
    return manifest


def load_dataset(data_dir: Path) -> Tuple[List[DatasetCase], List[int]]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    cases = []
    for case_id in manifest["cases"]:
        volume = load_volume(data_dir / case_id)
        labels = load_labels(data_dir / f"{case_id}_labels")
        if labels.dims != volume.dims:
            raise SyntheticDataError(f"{case_id}: label dims {labels.dims} differ from image dims {volume.dims}")
        cases.append(DatasetCase(case_id=case_id, volume=volume, labels=labels))
    return cases, [int(c) for c in manifest["classes"]]
