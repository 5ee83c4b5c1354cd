"""Dice, cross-validation splits, EP1/EP2 protocols, threshold line search and aggregation"""
import math
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from adnet import ADNetModel, compute_prototype, slice_scores
from models import ClassSummary, DiceRecord, LineSearchPoint, LineSearchResult, ProtocolResult, SplitPlan
from volumes import LabelVolume, Volume
import logging

logger = logging.getLogger(__name__)

Protocol = Literal["EP1", "EP2"]
EP1_CHUNKS = 3


class EvaluationError(Exception):
    """Protocol preconditions violated or invalid evaluation inputs"""
    pass


class AccessTrackedLabels:
    """Query ground truth that records which stage read it"""

    def __init__(self, labels: LabelVolume):
        self._labels = labels
        self.accesses: List[str] = []

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self._labels.dims

    def read(self, stage: str) -> np.ndarray:
        self.accesses.append(stage)
        return self._labels.labels


QueryLabels = Union[LabelVolume, AccessTrackedLabels]


def _read_labels(labels: QueryLabels, stage: str) -> np.ndarray:
    if isinstance(labels, AccessTrackedLabels):
        return labels.read(stage)
    return labels.labels


class QueryEvaluation(BaseModel):
    """Scores and dice of one query volume for one class"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    protocol: str
    class_id: int
    scores: np.ndarray  # +inf where the protocol never queries a slice
    truth: np.ndarray
    threshold: float
    support_slices: List[List[int]]  # support z-indices per prototype

    @property
    def prediction(self) -> np.ndarray:
        return self.scores < self.threshold

    @property
    def dice(self) -> float:
        return dice(self.prediction, self.truth)

    def dice_at(self, threshold: float) -> float:
        return dice(self.scores < threshold, self.truth)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|) * 100; both empty is a perfect match"""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise EvaluationError(f"dice: shapes differ, {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def make_cv_splits(patient_ids: Sequence[str], n_folds: int = 5, seed: int = 0,
                   runs_per_fold: int = 3) -> SplitPlan:
    """Shuffle, cut into contiguous folds, first patient of each fold supports it"""
    if n_folds < 1:
        raise EvaluationError(f"n_folds must be >= 1, got {n_folds}")
    if len(patient_ids) < n_folds:
        raise EvaluationError(f"{len(patient_ids)} patients cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(patient_ids))
    shuffled = [patient_ids[i] for i in order]
    folds = np.array_split(np.arange(len(shuffled)), n_folds)
    assignments = {shuffled[i]: fold for fold, members in enumerate(folds) for i in members}
    supports = [shuffled[members[0]] for members in folds]
    return SplitPlan(fold_assignments=assignments, support_ids=supports, runs_per_fold=runs_per_fold)


def class_slice_range(mask: np.ndarray) -> Optional[Tuple[int, int]]:
    """(first, last) z-index containing the class, or None"""
    present = np.flatnonzero(mask.reshape(mask.shape[0], -1).any(axis=1))
    if present.size == 0:
        return None
    return int(present[0]), int(present[-1])


def split_chunks(first: int, last: int, n: int = EP1_CHUNKS) -> List[np.ndarray]:
    """Near-equal sub-chunks of [first, last]; remainder slices go to the earlier chunks"""
    return np.array_split(np.arange(first, last + 1), n)


def chunk_middle(chunk: np.ndarray) -> int:
    """Lower middle slice, floor((len - 1) / 2): chunks of 3, 2, 2 slices give offsets 1, 0, 0"""
    return int(chunk[(len(chunk) - 1) // 2])


def _support_chunk(chunks: List[np.ndarray], i: int) -> np.ndarray:
    """Chunk i, or the nearest earlier (then later) non-empty chunk"""
    for j in list(range(i, -1, -1)) + list(range(i + 1, len(chunks))):
        if len(chunks[j]):
            return chunks[j]
    raise EvaluationError("support class range is empty")


def _support_pair(volume: Volume, mask: np.ndarray, z: int) -> Tuple[np.ndarray, np.ndarray]:
    return volume.data[z], mask[z].astype(np.uint8)


def _score_slices(model: ADNetModel, prototype, query: Volume, slices: Sequence[int],
                  scores: np.ndarray) -> None:
    for z in slices:
        scores[z] = slice_scores(model, prototype, query.data[z])


def run_ep1(model: ADNetModel, support: Volume, support_labels: LabelVolume, query: Volume,
            query_labels: QueryLabels, class_id: int, threshold: Optional[float] = None) -> QueryEvaluation:
    """Three sub-chunks; each support middle slice segments the matching query sub-chunk"""
    support_mask = support_labels.labels == class_id
    weak = _read_labels(query_labels, "weak_labels") == class_id
    support_range = class_slice_range(support_mask)
    query_range = class_slice_range(weak)
    if support_range is None or query_range is None:
        raise EvaluationError(f"class {class_id} absent from the {'support' if support_range is None else 'query'} volume")

    support_chunks = split_chunks(*support_range)
    query_chunks = split_chunks(*query_range)
    scores = np.full(query.dims, np.inf, dtype=np.float64)
    used = []
    for i, query_chunk in enumerate(query_chunks):
        if len(query_chunk) == 0:
            continue
        z = chunk_middle(_support_chunk(support_chunks, i))
        prototype = compute_prototype(model, [_support_pair(support, support_mask, z)])
        _score_slices(model, prototype, query, query_chunk, scores)
        used.append([z])

    truth = _read_labels(query_labels, "scoring") == class_id
    return QueryEvaluation(protocol="EP1", class_id=class_id, scores=scores, truth=truth,
                           threshold=model.head.threshold if threshold is None else threshold,
                           support_slices=used)


def run_ep2(model: ADNetModel, support: Volume, support_labels: LabelVolume, query: Volume,
            query_labels: QueryLabels, class_id: int, threshold: Optional[float] = None,
            support_mode: Literal["middle", "all"] = "middle") -> QueryEvaluation:
    """Middle support slice (or every support slice with the class) segments the whole query"""
    support_mask = support_labels.labels == class_id
    support_range = class_slice_range(support_mask)
    if support_range is None:
        raise EvaluationError(f"class {class_id} absent from the support volume")

    first, last = support_range
    if support_mode == "all":
        slices = [z for z in range(first, last + 1) if support_mask[z].any()]
    else:
        slices = [(first + last) // 2]
    prototype = compute_prototype(model, [_support_pair(support, support_mask, z) for z in slices])
    scores = np.empty(query.dims, dtype=np.float64)
    _score_slices(model, prototype, query, range(query.dims[0]), scores)

    truth = _read_labels(query_labels, "scoring") == class_id
    return QueryEvaluation(protocol="EP2", class_id=class_id, scores=scores, truth=truth,
                           threshold=model.head.threshold if threshold is None else threshold,
                           support_slices=[slices])


def run_protocol(protocol: Protocol, model: ADNetModel, support: Volume, support_labels: LabelVolume,
                 query: Volume, query_labels: QueryLabels, class_id: int,
                 ep2_support: Literal["middle", "all"] = "middle") -> QueryEvaluation:
    if protocol == "EP1":
        return run_ep1(model, support, support_labels, query, query_labels, class_id)
    return run_ep2(model, support, support_labels, query, query_labels, class_id, support_mode=ep2_support)


class FoldEvaluation(BaseModel):
    """Every query evaluation of one trained model"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    fold: int
    run: int
    learned_threshold: float
    queries: Dict[str, List[QueryEvaluation]]  # query id -> per-class evaluations

    def records(self, threshold: Optional[float] = None) -> List[DiceRecord]:
        rows = []
        for query_id in sorted(self.queries):
            for evaluation in self.queries[query_id]:
                value = evaluation.dice if threshold is None else evaluation.dice_at(threshold)
                rows.append(DiceRecord(protocol=evaluation.protocol, fold=self.fold, run=self.run,
                                       class_id=evaluation.class_id, query_id=query_id, dice=value))
        return rows


def evaluate_fold(model: ADNetModel, plan: SplitPlan, fold: int, run: int,
                  cases: Dict[str, Tuple[Volume, LabelVolume]], class_ids: Sequence[int],
                  protocol: Protocol, ep2_support: Literal["middle", "all"] = "middle") -> FoldEvaluation:
    """The fold's support case segments every other case of the fold"""
    support_id = plan.support_ids[fold]
    support, support_labels = cases[support_id]
    queries: Dict[str, List[QueryEvaluation]] = {}
    for query_id in plan.query_ids(fold):
        query, query_labels = cases[query_id]
        evaluations = []
        for class_id in class_ids:
            try:
                evaluations.append(run_protocol(protocol, model, support, support_labels, query,
                                                query_labels, class_id, ep2_support))
            except EvaluationError as e:
                if protocol == "EP1" and (query_labels.labels == class_id).any():
                    raise
                logger.warning(f"Fold {fold}: skipping class {class_id} for {query_id}: {e}")
        queries[query_id] = evaluations
    return FoldEvaluation(fold=fold, run=run, learned_threshold=model.head.threshold, queries=queries)


def aggregate(records: Sequence[DiceRecord], protocol: Optional[str] = None) -> ProtocolResult:
    """Per-class and overall mean / population std"""
    if not records:
        raise EvaluationError("no dice records to aggregate")
    protocol = protocol or records[0].protocol
    by_class: Dict[int, List[float]] = {}
    for record in records:
        by_class.setdefault(record.class_id, []).append(record.dice)
    classes = [ClassSummary(class_id=c, mean=float(np.mean(v)), std=float(np.std(v)), count=len(v))
               for c, v in sorted(by_class.items())]
    values = [r.dice for r in records]
    return ProtocolResult(protocol=protocol, classes=classes, mean=float(np.mean(values)),
                          std=float(np.std(values)), count=len(values))


def threshold_grid(t_min: float, t_max: float, t_step: float) -> List[float]:
    """Inclusive grid t_min, t_min + step, ..., <= t_max"""
    if t_step <= 0 or t_max < t_min:
        raise EvaluationError(f"empty threshold range [{t_min}, {t_max}] with step {t_step}")
    count = int(math.floor((t_max - t_min) / t_step + 1e-9)) + 1
    return [round(t_min + i * t_step, 10) for i in range(count)]


def threshold_line_search(evaluations: Sequence[FoldEvaluation], thresholds: Sequence[float]) -> LineSearchResult:
    """Mean and std of dice with T overridden by each grid value"""
    if not thresholds:
        raise EvaluationError("empty threshold grid")
    if not evaluations:
        raise EvaluationError("no evaluations to search over")
    points = []
    for threshold in thresholds:
        values = [r.dice for e in evaluations for r in e.records(threshold)]
        points.append(LineSearchPoint(threshold=float(threshold), mean=float(np.mean(values)),
                                      std=float(np.std(values))))
    learned = [e.learned_threshold for e in evaluations]
    return LineSearchResult(points=points, learned_threshold=float(np.mean(learned)),
                            learned_thresholds=learned)
