"""Self-supervised episodes from supervoxel (or superpixel) pseudo-labels"""
import math
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from adnet import Episode
from models import EpisodeProvenance, SamplerConfig, TransformParams, TransformSpec
from volumes import LabelVolume, Volume
import logging

logger = logging.getLogger(__name__)

SelfSupervision = Literal["supervoxel", "superpixel"]


class EpisodeSamplingError(Exception):
    """No pseudo-label yields a valid episode"""
    pass


class SupervoxelIndex:
    """Per-slice pixel counts of every label in one pseudo-label volume"""

    def __init__(self, labels: LabelVolume, min_pixels: int):
        depth = labels.dims[0]
        num_labels = labels.max_label + 1
        self.counts = np.zeros((num_labels, depth), dtype=np.int64)
        for z in range(depth):
            self.counts[:, z] = np.bincount(labels.labels[z].ravel(), minlength=num_labels)
        self.counts[0] = 0
        self.qualifying = self.counts >= min_pixels
        self.labels = labels
        self.min_pixels = min_pixels

    @property
    def supervoxel_candidates(self) -> np.ndarray:
        """Ids with at least two qualifying slices"""
        return np.flatnonzero(self.qualifying.sum(axis=1) >= 2)

    @property
    def superpixel_candidates(self) -> np.ndarray:
        """(label, z) pairs with one qualifying slice, as an [n, 2] array"""
        return np.argwhere(self.qualifying)

    def slices_for(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.qualifying[label])

    def has_candidates(self, mode: SelfSupervision) -> bool:
        if mode == "superpixel":
            return bool(self.qualifying.any())
        return self.supervoxel_candidates.size > 0


def sample_transform_params(spec: TransformSpec, shape: Tuple[int, int],
                            rng: np.random.Generator) -> TransformParams:
    height, width = shape
    return TransformParams(
        rotation_deg=float(rng.uniform(-spec.rotation_deg, spec.rotation_deg)),
        scale=float(rng.uniform(*spec.scale_range)),
        translation=(float(rng.uniform(-spec.translation_frac * height, spec.translation_frac * height)),
                     float(rng.uniform(-spec.translation_frac * width, spec.translation_frac * width))),
        shear_deg=float(rng.uniform(-spec.shear_deg, spec.shear_deg)),
        gamma=float(rng.uniform(*spec.gamma_range)),
    )


def affine_matrix(params: TransformParams) -> np.ndarray:
    """Forward map on (y, x) about the slice center: rotation . shear . scale"""
    theta = math.radians(params.rotation_deg)
    rotation = np.array([[math.cos(theta), -math.sin(theta)],
                         [math.sin(theta), math.cos(theta)]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(params.shear_deg)), 1.0]])
    return rotation @ shear @ (params.scale * np.eye(2))


def _warp(array: np.ndarray, params: TransformParams, order: int) -> np.ndarray:
    center = (np.array(array.shape, dtype=np.float64) - 1.0) / 2.0
    inverse = np.linalg.inv(affine_matrix(params))
    offset = center - inverse @ (center + np.asarray(params.translation))
    return ndimage.affine_transform(array, inverse, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def adjust_gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma on the slice normalized to [0, 1], original range restored; constant slices unchanged"""
    if gamma == 1.0:
        return image
    low, high = float(image.min()), float(image.max())
    if high == low:
        return image
    normalized = (image.astype(np.float64) - low) / (high - low)
    return (normalized ** gamma * (high - low) + low).astype(image.dtype)


def apply_transform(image: np.ndarray, mask: np.ndarray,
                    params: TransformParams) -> Tuple[np.ndarray, np.ndarray]:
    """Warp image (bilinear) and mask (nearest) identically, then apply gamma to the image"""
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if not params.is_identity_geometry:
        image = _warp(image.astype(np.float64), params, order=1).astype(np.float32)
        mask = _warp(mask.astype(np.float64), params, order=0) > 0.5
    return adjust_gamma(image, params.gamma), mask.astype(np.uint8)


def apply_random_transform(image: np.ndarray, mask: np.ndarray, spec: TransformSpec,
                           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    params = sample_transform_params(spec, image.shape, rng)
    return apply_transform(image, mask, params)


def _transformed_pair(image, mask, spec: TransformSpec, config: SamplerConfig,
                      rng) -> Optional[Tuple[np.ndarray, np.ndarray, TransformParams]]:
    """One transform draw; None when the warped mask falls below min_pixels"""
    params = sample_transform_params(spec, image.shape, rng)
    new_image, new_mask = apply_transform(image, mask, params)
    if int(new_mask.sum()) < config.min_pixels:
        return None
    return new_image, new_mask, params


def _draw_supervoxel_episode(volume: Volume, supervoxels: LabelVolume, index: SupervoxelIndex,
                             config: SamplerConfig, spec: TransformSpec, rng: np.random.Generator,
                             volume_id: str, attempt: int) -> Optional[Episode]:
    label = int(rng.choice(index.supervoxel_candidates))
    support_z, query_z = (int(z) for z in rng.choice(index.slices_for(label), size=2, replace=False))
    images = {"support": volume.data[support_z], "query": volume.data[query_z]}
    masks = {"support": (supervoxels.labels[support_z] == label).astype(np.uint8),
             "query": (supervoxels.labels[query_z] == label).astype(np.uint8)}

    side = config.transform_target
    transformed = _transformed_pair(images[side], masks[side], spec, config, rng)
    if transformed is None:
        return None
    images[side], masks[side], params = transformed

    provenance = EpisodeProvenance(volume_id=volume_id, support_z=support_z, query_z=query_z,
                                   supervoxel_id=label, transformed=side, attempts=attempt,
                                   transform=params)
    logger.debug(f"Episode {provenance.model_dump_json()}")
    return Episode(support_image=images["support"], support_mask=masks["support"],
                   query_image=images["query"], query_mask=masks["query"], provenance=provenance)


def _draw_superpixel_episode(volume: Volume, superpixels: LabelVolume, index: SupervoxelIndex,
                             config: SamplerConfig, spec: TransformSpec, rng: np.random.Generator,
                             volume_id: str, attempt: int) -> Optional[Episode]:
    candidates = index.superpixel_candidates
    label, z = (int(v) for v in candidates[rng.integers(len(candidates))])
    image = volume.data[z]
    mask = (superpixels.labels[z] == label).astype(np.uint8)
    transformed = _transformed_pair(image, mask, spec, config, rng)
    if transformed is None:
        return None
    query_image, query_mask, params = transformed
    provenance = EpisodeProvenance(volume_id=volume_id, support_z=z, query_z=z, supervoxel_id=label,
                                   transformed="query", attempts=attempt, transform=params)
    return Episode(support_image=image, support_mask=mask, query_image=query_image,
                   query_mask=query_mask, provenance=provenance)


def _budget_exhausted(config: SamplerConfig) -> EpisodeSamplingError:
    return EpisodeSamplingError(
        f"transformed mask fell below {config.min_pixels} pixels after {config.max_attempts} attempts"
    )


def _checked_index(volume: Volume, labels: LabelVolume, config: SamplerConfig,
                   index: Optional[SupervoxelIndex]) -> SupervoxelIndex:
    if labels.dims != volume.dims:
        raise EpisodeSamplingError(f"pseudo-labels {labels.dims} do not match volume {volume.dims}")
    return index or SupervoxelIndex(labels, config.min_pixels)


def sample_episode(volume: Volume, supervoxels: LabelVolume, config: SamplerConfig,
                   spec: TransformSpec, rng: np.random.Generator, volume_id: str = "",
                   index: Optional[SupervoxelIndex] = None) -> Episode:
    """Two distinct slices through one random supervoxel; one side transformed.

    A transform that shrinks the mask below min_pixels redraws the whole episode
    (supervoxel, slices, transform); max_attempts bounds the redraws.
    """
    index = _checked_index(volume, supervoxels, config, index)
    if not index.has_candidates("supervoxel"):
        raise EpisodeSamplingError(
            f"no supervoxel in {volume_id or 'volume'} has two slices with >= {config.min_pixels} pixels"
        )
    for attempt in range(1, config.max_attempts + 1):
        episode = _draw_supervoxel_episode(volume, supervoxels, index, config, spec, rng, volume_id, attempt)
        if episode is not None:
            return episode
    raise _budget_exhausted(config)


def sample_superpixel_episode(volume: Volume, superpixels: LabelVolume, config: SamplerConfig,
                              spec: TransformSpec, rng: np.random.Generator, volume_id: str = "",
                              index: Optional[SupervoxelIndex] = None) -> Episode:
    """One superpixel in one slice; the query is a transformed copy of the support"""
    index = _checked_index(volume, superpixels, config, index)
    if not index.has_candidates("superpixel"):
        raise EpisodeSamplingError(
            f"no superpixel in {volume_id or 'volume'} has >= {config.min_pixels} pixels"
        )
    for attempt in range(1, config.max_attempts + 1):
        episode = _draw_superpixel_episode(volume, superpixels, index, config, spec, rng, volume_id, attempt)
        if episode is not None:
            return episode
    raise _budget_exhausted(config)


class EpisodeSampler:
    """Draws episodes across a set of volumes with one rng stream"""

    def __init__(self, cases: Sequence[Tuple[str, Volume, LabelVolume]], config: SamplerConfig,
                 spec: TransformSpec, mode: SelfSupervision = "supervoxel",
                 seed: Optional[Union[int, Sequence[int]]] = None):
        self.config = config
        self.spec = spec
        self.mode = mode
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.cases: List[Tuple[str, Volume, LabelVolume, SupervoxelIndex]] = []
        skipped = []
        for case_id, volume, labels in cases:
            if labels.dims != volume.dims:
                raise EpisodeSamplingError(f"{case_id}: pseudo-labels {labels.dims} do not match {volume.dims}")
            index = SupervoxelIndex(labels, config.min_pixels)
            if index.has_candidates(mode):
                self.cases.append((case_id, volume, labels, index))
            else:
                skipped.append(case_id)
        if skipped:
            logger.warning(f"{len(skipped)} volumes have no valid {mode} episodes: {skipped}")
        if not self.cases:
            raise EpisodeSamplingError(f"no volume yields a valid {mode} episode")

    @property
    def case_ids(self) -> List[str]:
        return [case[0] for case in self.cases]

    def sample(self) -> Episode:
        """Volume, pseudo-label, slices and transform are all redrawn on each failed attempt"""
        draw = _draw_superpixel_episode if self.mode == "superpixel" else _draw_supervoxel_episode
        for attempt in range(1, self.config.max_attempts + 1):
            case_id, volume, labels, index = self.cases[int(self.rng.integers(len(self.cases)))]
            episode = draw(volume, labels, index, self.config, self.spec, self.rng, case_id, attempt)
            if episode is not None:
                return episode
        raise _budget_exhausted(self.config)
