"""Episodic self-supervised training loop"""
import json
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from adnet import ADNetModel, EmptyMaskError, episode_losses
from episodes import EpisodeSampler, EpisodeSamplingError
from models import EncoderConfig, HeadConfig, LossConfig, SamplerConfig, SgdConfig, TrainingRecord, \
    TrainingRunStats, TransformSpec
from optim import SgdOptimizer
from tensor import NumericsError, Tape, backward
from volumes import LabelVolume, Volume
import logging

logger = logging.getLogger(__name__)

TrainingCase = Tuple[str, Volume, LabelVolume]
_PROGRESS_WINDOW = 100


class TrainingError(Exception):
    """Training cannot start or diverged"""
    pass


class TrainingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ADNetModel
    records: List[TrainingRecord]
    stats: TrainingRunStats


class EpisodicTrainer:
    """Sample episode, total loss, backward, SGD on {theta, T}"""

    def __init__(self, model: ADNetModel, sampler: EpisodeSampler, sgd: SgdConfig, loss: LossConfig,
                 log_path: Optional[Path] = None, log_every: int = 100):
        self.model = model
        self.sampler = sampler
        self.loss_config = loss
        self.optimizer = SgdOptimizer(model.parameters(), sgd)
        self.log_path = Path(log_path) if log_path else None
        self.log_every = log_every

    def step(self, iteration: int) -> TrainingRecord:
        self.optimizer.zero_grad()
        episode = self.sampler.sample()
        with Tape():
            losses = episode_losses(self.model, episode, self.loss_config)
        backward(losses.total)
        lr = self.optimizer.step(iteration)
        return TrainingRecord(iteration=iteration, L_S=losses.loss_s, L_T=losses.loss_t,
                              L_PAR=losses.loss_par, T=self.model.head.threshold, lr=lr,
                              par_skipped=losses.par_skipped)

    def run(self, iterations: int, stats: TrainingRunStats) -> TrainingResult:
        records: List[TrainingRecord] = []
        stats.initial_T = self.model.head.threshold
        log_file = None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            log_file = open(self.log_path, "w", encoding="utf-8")
        try:
            for iteration in range(iterations):
                try:
                    record = self.step(iteration)
                except (NumericsError, EmptyMaskError, EpisodeSamplingError) as e:
                    raise TrainingError(f"{stats.run_id}: iteration {iteration} failed: {e}")
                records.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record.model_dump(by_alias=True), sort_keys=True) + "\n")
                if self.log_every and (iteration + 1) % self.log_every == 0:
                    recent = records[-self.log_every:]
                    logger.info(
                        f"[{stats.run_id}] it {iteration + 1}/{iterations} "
                        f"loss {np.mean([_total(r) for r in recent]):.4f} T {record.T:.3f} lr {record.lr:.2e}"
                    )
        finally:
            if log_file is not None:
                log_file.close()

        stats.iterations = iterations
        stats.final_T = self.model.head.threshold
        stats.par_skipped = sum(r.par_skipped for r in records)
        if records:
            window = min(_PROGRESS_WINDOW, len(records))
            stats.mean_loss_first = float(np.mean([_total(r) for r in records[:window]]))
            stats.mean_loss_last = float(np.mean([_total(r) for r in records[-window:]]))
        stats.end_time = datetime.now()
        stats.duration_seconds = (stats.end_time - stats.start_time).total_seconds()
        return TrainingResult(model=self.model, records=records, stats=stats)


def _total(record: TrainingRecord) -> float:
    return record.loss_s + record.loss_t + record.loss_par


def train(cases: Sequence[TrainingCase], *, encoder: EncoderConfig, head: HeadConfig, sampler: SamplerConfig,
          transform: TransformSpec, sgd: SgdConfig, loss: LossConfig, iterations: int, seed: int,
          self_supervision: str = "supervoxel", log_path: Optional[Path] = None, log_every: int = 100,
          run_id: str = "run", fold: Optional[int] = None, run: int = 0) -> TrainingResult:
    """Train a fresh model on (id, volume, pseudo-labels) cases; deterministic per seed"""
    if iterations < 0:
        raise TrainingError(f"iterations must be >= 0, got {iterations}")
    stats = TrainingRunStats(run_id=run_id, fold=fold, run=run, seed=seed, start_time=datetime.now(),
                             training_cases=[case[0] for case in cases])
    try:
        episode_sampler = EpisodeSampler(cases, sampler, transform, mode=self_supervision, seed=[seed, 1])
    except EpisodeSamplingError as e:
        raise TrainingError(f"{run_id}: dataset has no valid episodes: {e}")

    model = ADNetModel.initialize(encoder, head, seed)
    logger.info(f"[{run_id}] training {iterations} iterations on {len(episode_sampler.case_ids)} volumes "
                f"(seed {seed}, {self_supervision} self-supervision, T0 {model.head.threshold:.3f})")
    trainer = EpisodicTrainer(model, episode_sampler, sgd, loss, log_path=log_path, log_every=log_every)
    return trainer.run(iterations, stats)
