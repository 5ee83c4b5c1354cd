"""Anomaly-detection-inspired prototype head: scoring, learned threshold, losses and slice inference"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import expit

import tensor as tn
from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from encoder import EncoderParams, encode, init_encoder
from models import EncoderConfig, EpisodeProvenance, HeadConfig, LossConfig
from tensor import Tensor
import logging

logger = logging.getLogger(__name__)

SupportPair = Tuple[np.ndarray, np.ndarray]


class EmptyMaskError(Exception):
    """A mask that must contain foreground is empty"""
    pass


class Episode(BaseModel):
    """Support image/mask and query image/mask for one foreground class"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray
    provenance: EpisodeProvenance

    @model_validator(mode="after")
    def _check_pairs(self):
        shape = self.support_image.shape
        for name in ("support_mask", "query_image", "query_mask"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} differs from support image {shape}")
        for name in ("support_mask", "query_mask"):
            if not np.isin(getattr(self, name), (0, 1)).all():
                raise ValueError(f"{name} must be binary")
        if not self.support_mask.any():
            raise ValueError("support mask is empty")
        return self


class AnomalyHead:
    """Learnable threshold T with fixed scale alpha and steepness kappa"""

    def __init__(self, alpha: float = 20.0, kappa: float = 0.5, t_init: Optional[float] = None):
        if alpha <= 0 or kappa <= 0:
            raise ValueError(f"alpha and kappa must be > 0, got {alpha}, {kappa}")
        self.alpha = float(alpha)
        self.kappa = float(kappa)
        self.T = Tensor(-alpha / 2.0 if t_init is None else t_init, requires_grad=True, name="head.T")

    @classmethod
    def from_config(cls, config: HeadConfig) -> "AnomalyHead":
        return cls(alpha=config.alpha, kappa=config.kappa, t_init=config.initial_threshold)

    @property
    def threshold(self) -> float:
        return self.T.item()


class Prediction(BaseModel):
    """Foreground probability and anomaly scores at image size"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    fg: Tensor
    scores: Tensor

    @property
    def bg(self) -> np.ndarray:
        return 1.0 - self.fg.data


class EpisodeLosses(BaseModel):
    """Loss terms for one episode; `total` carries the graph"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    total: Tensor
    loss_s: float
    loss_t: float
    loss_par: float
    T: float
    par_skipped: bool = False


class SliceInference(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: np.ndarray
    prob: np.ndarray
    scores: np.ndarray


def image_tensor(image: np.ndarray) -> Tensor:
    return Tensor(np.asarray(image)[None, None])


def masked_feature_sum(features: Tensor, mask: np.ndarray) -> Tuple[Tensor, float]:
    """Sum of feature vectors over mask positions, and the mask count"""
    mask = np.asarray(mask, dtype=features.data.dtype)
    if features.ndim != 3 or mask.shape != features.shape[1:]:
        raise tn.NumericsError(f"mask {mask.shape} does not match features {features.shape}")
    count = float(mask.sum())
    if count == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return tn.sum(tn.mul(features, mask[None]), axis=(1, 2)), count


def masked_average_pool(features: Tensor, mask: np.ndarray) -> Tensor:
    """Mean feature vector over the mask; features must already be at mask resolution"""
    total, count = masked_feature_sum(features, mask)
    return tn.scale(total, 1.0 / count)


def anomaly_scores(features: Tensor, prototype: Tensor, alpha: float) -> Tensor:
    """-alpha * cos(F, p), in [-alpha, alpha]"""
    return tn.scale(tn.cosine_similarity_map(features, prototype), -alpha)


def upsample_scores(scores: Tensor, size: Tuple[int, int]) -> Tensor:
    h, w = scores.shape
    resized = tn.bilinear_resize(tn.reshape(scores, (1, 1, h, w)), size)
    return tn.reshape(resized, tuple(size))


def soft_threshold(scores: Tensor, head: AnomalyHead, threshold: Optional[Tensor] = None) -> Tensor:
    """Foreground probability 1 - sigmoid(kappa * (S - T))"""
    threshold = head.T if threshold is None else threshold
    return tn.sub(1.0, tn.sigmoid_kappa(tn.sub(scores, threshold), head.kappa))


def soft_threshold_array(scores: np.ndarray, threshold: float, kappa: float) -> np.ndarray:
    """Inference-time probabilities in 64-bit"""
    return 1.0 - expit(kappa * (np.asarray(scores, dtype=np.float64) - float(threshold)))


def segmentation_loss(pred_fg: Tensor, target: np.ndarray, w_fg: float = 1.0, w_bg: float = 0.1) -> Tensor:
    return tn.weighted_bce(pred_fg, target, w_fg, w_bg)


def threshold_loss(head: AnomalyHead) -> Tensor:
    return tn.scale(head.T, 1.0 / head.alpha)


def par_loss(support_features: Tensor, support_mask: np.ndarray, query_features: Tensor,
             query_fg: Tensor, head: AnomalyHead, w_fg: float = 1.0, w_bg: float = 0.1) -> Tuple[Tensor, bool]:
    """Role-reversed loss: the binarized query prediction segments the support.

    support_features is [d, h, w] at feature resolution, query_features is [d, H, W]
    at image resolution. Returns (loss, skipped); an empty predicted query foreground
    gives a zero loss and skipped=True.
    """
    predicted = query_fg.data > 0.5
    if not predicted.any():
        return tn.as_tensor(0.0), True
    prototype = masked_average_pool(query_features, predicted)
    scores = upsample_scores(anomaly_scores(support_features, prototype, head.alpha), support_mask.shape)
    return segmentation_loss(soft_threshold(scores, head), support_mask, w_fg, w_bg), False


class ADNetModel:
    """Shared encoder plus anomaly head; parameters are {theta, T}"""

    def __init__(self, encoder: EncoderParams, head: AnomalyHead):
        self.encoder = encoder
        self.head = head

    @classmethod
    def initialize(cls, encoder_config: EncoderConfig, head_config: HeadConfig, seed: int) -> "ADNetModel":
        return cls(init_encoder(encoder_config, seed), AnomalyHead.from_config(head_config))

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + [self.head.T]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.encoder.tensors.items()}
        state["head.T"] = self.head.T.data
        return state

    def features(self, image: np.ndarray) -> Tensor:
        """[d, h, w] feature map of one slice"""
        fmap = encode(self.encoder, image_tensor(image))
        return tn.reshape(fmap, fmap.shape[1:])

    def save(self, path: Union[str, Path], meta: Dict[str, Any] = None) -> Path:
        header = {
            "encoder": self.encoder.config.model_dump(mode="json"),
            "head": {"alpha": self.head.alpha, "kappa": self.head.kappa},
        }
        header.update(meta or {})
        return save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["ADNetModel", Dict[str, Any]]:
        tensors, meta = load_checkpoint(path)
        if "encoder" not in meta or "head" not in meta or "head.T" not in tensors:
            raise CheckpointError(f"{path}: not an ADNet checkpoint")
        config = EncoderConfig(**meta["encoder"])
        threshold = tensors.pop("head.T")
        encoder = EncoderParams(config, {name: Tensor(data, requires_grad=True, name=name)
                                         for name, data in tensors.items()})
        head = AnomalyHead(alpha=meta["head"]["alpha"], kappa=meta["head"]["kappa"],
                           t_init=float(threshold.reshape(-1)[0]))
        return cls(encoder, head), meta


def episode_losses(model: ADNetModel, episode: Episode, config: LossConfig) -> EpisodeLosses:
    """Forward pass of one episode; call under an active Tape to train"""
    size = episode.query_image.shape
    support = model.features(episode.support_image)
    query = model.features(episode.query_image)
    d = support.shape[0]

    support_full = tn.reshape(tn.bilinear_resize(tn.reshape(support, (1,) + support.shape), size), (d,) + size)
    prototype = masked_average_pool(support_full, episode.support_mask)
    scores = upsample_scores(anomaly_scores(query, prototype, model.head.alpha), size)
    pred = soft_threshold(scores, model.head)

    loss_s = segmentation_loss(pred, episode.query_mask, config.w_fg, config.w_bg)
    total = loss_s
    loss_t = 0.0
    if config.threshold_loss:
        term = threshold_loss(model.head)
        loss_t = term.item()
        total = tn.add(total, term)

    loss_par, skipped = 0.0, False
    if config.par_loss:
        query_full = tn.reshape(tn.bilinear_resize(tn.reshape(query, (1,) + query.shape), size), (d,) + size)
        term, skipped = par_loss(support, episode.support_mask, query_full, pred, model.head,
                                 config.w_fg, config.w_bg)
        if not skipped:
            loss_par = term.item()
            total = tn.add(total, term)

    return EpisodeLosses(total=total, loss_s=loss_s.item(), loss_t=loss_t, loss_par=loss_par,
                         T=model.head.threshold, par_skipped=skipped)


def total_loss(episode: Episode, model: ADNetModel, config: LossConfig) -> EpisodeLosses:
    return episode_losses(model, episode, config)


def compute_prototype(model: ADNetModel, supports: Sequence[SupportPair]) -> Tensor:
    """One prototype from all support slices: summed masked features over summed counts, in 64-bit"""
    if not supports:
        raise EmptyMaskError("at least one support slice is required")
    total, count = None, 0.0
    with tn.float64_mode():
        for image, mask in supports:
            fmap = model.features(image)
            full = tn.reshape(tn.bilinear_resize(tn.reshape(fmap, (1,) + fmap.shape), mask.shape),
                              (fmap.shape[0],) + mask.shape)
            part, n = masked_feature_sum(full, mask)
            total = part if total is None else tn.add(total, part)
            count += n
        return tn.scale(total, 1.0 / count)


def slice_scores(model: ADNetModel, prototype: Tensor, image: np.ndarray) -> np.ndarray:
    """Anomaly scores of one query slice at image size, in 64-bit"""
    with tn.float64_mode():
        scores = anomaly_scores(model.features(image), prototype, model.head.alpha)
        return upsample_scores(scores, image.shape).data


def segment_with_prototype(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground where S < T; ties are background"""
    return np.asarray(scores) < threshold


def infer_slice(model: ADNetModel, supports: Sequence[SupportPair], query_image: np.ndarray,
                threshold: Optional[float] = None) -> SliceInference:
    threshold = model.head.threshold if threshold is None else threshold
    prototype = compute_prototype(model, supports)
    scores = slice_scores(model, prototype, query_image)
    return SliceInference(mask=segment_with_prototype(scores, threshold),
                          prob=soft_threshold_array(scores, threshold, model.head.kappa),
                          scores=scores)
