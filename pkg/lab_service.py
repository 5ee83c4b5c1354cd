"""Experiment orchestration: synth, supervoxel, train, eval, sweep and linesearch"""
import json
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict

from adnet import ADNetModel
from checkpoint import CheckpointError
from config import ConfigurationError, LabConfig
from evaluation import (FoldEvaluation, aggregate, evaluate_fold, make_cv_splits, threshold_grid,
                        threshold_line_search)
from models import (LineSearchResult, PreprocessConfig, ProtocolResult, SplitPlan, SupervoxelManifest,
                    SupervoxelParams, SweepRow, TrainingRunStats)
from reporter import ResultsReporter
from supervoxels import segment_volume
from synthetic import DATASET_MANIFEST, DatasetCase, class_ids_of, load_dataset, synthetic_cases, write_dataset
from trainer import train
from volumes import (LabelVolume, Volume, VolumeIOError, load_labels, load_volume, preprocess_labels,
                     preprocess_volume, save_labels)
import logging

logger = logging.getLogger(__name__)

SUPERVOXEL_MANIFEST = "manifest.json"
CHECKPOINT_MANIFEST = "checkpoints.json"
SWEEP_PARAMETERS = ("rho", "kappa", "self_supervision")


class TrainedModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    fold: int
    run: int
    model: ADNetModel


def checkpoint_name(fold: int, run: int) -> str:
    return f"fold{fold}_run{run}.ckpt"


def supervoxel_path(out_dir: Path, case_id: str) -> Path:
    return Path(out_dir) / f"{case_id}_sv"


def _intensity_only(config: PreprocessConfig) -> PreprocessConfig:
    return config.model_copy(update={"crop": None})


def _list_volume_ids(input_dir: Path) -> List[str]:
    """Case ids from dataset.json, or every image RVF in the directory"""
    if (input_dir / DATASET_MANIFEST).exists():
        with open(input_dir / DATASET_MANIFEST, "r", encoding="utf-8") as f:
            return list(json.load(f).get("cases", []))
    names = [p.name[: -len(".rvf.json")] for p in sorted(input_dir.glob("*.rvf.json"))]
    return [n for n in names if not n.endswith(("_labels", "_sv"))]


class LabService:
    def __init__(self, config: LabConfig, out_dir: Path, threads: int = 1):
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = max(1, threads)
        self._cases: Optional[List[DatasetCase]] = None
        self._class_ids: List[int] = []

        summary = config.get_config_summary()
        logger.info("📊 Configuration Summary:")
        for key, value in summary.items():
            logger.info(f"   • {key}: {value}")
        for problem in config.validate():
            logger.warning(f"Config check: {problem}")

    @property
    def experiment(self):
        return self.config.experiment

    def _pool(self) -> ThreadPoolExecutor:
        return ThreadPoolExecutor(max_workers=self.threads)

    # ---- data ---------------------------------------------------------------

    def load_cases(self) -> Tuple[List[DatasetCase], List[int]]:
        """Preprocessed cases from dataset_dir, or generated from the synthetic spec"""
        if self._cases is None:
            exp = self.experiment
            if exp.dataset_dir:
                cases, class_ids = load_dataset(Path(exp.dataset_dir))
            else:
                cases, class_ids = synthetic_cases(exp.synthetic), class_ids_of(exp.synthetic)
            self._cases = [DatasetCase(case_id=c.case_id,
                                       volume=preprocess_volume(c.volume, exp.preprocessing),
                                       labels=preprocess_labels(c.labels, exp.preprocessing))
                           for c in cases]
            self._class_ids = class_ids
            logger.info(f"Loaded {len(self._cases)} cases, classes {class_ids}")
        return self._cases, self._class_ids

    def split_plan(self) -> SplitPlan:
        cases, _ = self.load_cases()
        exp = self.experiment
        return make_cv_splits([c.case_id for c in cases], exp.n_folds, exp.split_seed, exp.runs_per_fold)

    def _segment_case(self, volume: Volume, params: SupervoxelParams, mode: str) -> LabelVolume:
        # pseudo-labels see the same intensities as the network; crop is applied afterwards
        return segment_volume(preprocess_volume(volume, _intensity_only(self.experiment.preprocessing)),
                              params, mode)

    def generate_pseudo_labels(self, volumes: Dict[str, Volume], params: SupervoxelParams, mode: str,
                               out_dir: Path) -> SupervoxelManifest:
        out_dir.mkdir(parents=True, exist_ok=True)
        ids = sorted(volumes)
        with self._pool() as pool:
            labels = list(pool.map(lambda cid: self._segment_case(volumes[cid], params, mode), ids))
        counts = {}
        for case_id, label_volume in zip(ids, labels):
            save_labels(label_volume, supervoxel_path(out_dir, case_id), spacing=volumes[case_id].spacing)
            counts[case_id] = label_volume.max_label
        manifest = SupervoxelManifest(mode=mode, params=params, counts=counts)
        with open(out_dir / SUPERVOXEL_MANIFEST, "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2, sort_keys=True)
        logger.info(f"Wrote {len(ids)} {mode} label volumes to {out_dir}")
        return manifest

    def pseudo_labels(self, sv_dir: Optional[Path] = None, params: Optional[SupervoxelParams] = None,
                      mode: Optional[str] = None) -> Tuple[Dict[str, LabelVolume], Path]:
        """Load pseudo-labels for every case; (re)generate them when missing or built with other settings"""
        exp = self.experiment
        params = params or exp.supervoxel
        mode = mode or exp.self_supervision
        sv_dir = Path(sv_dir or exp.supervoxel_dir or self.out_dir / "supervoxels")
        manifest_path = sv_dir / SUPERVOXEL_MANIFEST
        cases, _ = self.load_cases()

        current = manifest_path.exists()
        if current:
            manifest = SupervoxelManifest(**json.loads(manifest_path.read_text(encoding="utf-8")))
            if manifest.mode != mode or manifest.params != params:
                logger.warning(f"{manifest_path} was built with {manifest.mode} {manifest.params}, "
                               f"regenerating for {mode} {params}")
                current = False
        if not current:
            self.generate_pseudo_labels(self._raw_volumes(), params, mode, sv_dir)

        labels = {c.case_id: preprocess_labels(load_labels(supervoxel_path(sv_dir, c.case_id)), exp.preprocessing)
                  for c in cases}
        return labels, manifest_path

    def _raw_volumes(self) -> Dict[str, Volume]:
        exp = self.experiment
        if exp.dataset_dir:
            cases, _ = load_dataset(Path(exp.dataset_dir))
        else:
            cases = synthetic_cases(exp.synthetic)
        return {c.case_id: c.volume for c in cases}

    # ---- commands -----------------------------------------------------------

    def cmd_synth(self) -> Path:
        spec = self.experiment.synthetic
        manifest = write_dataset(synthetic_cases(spec), class_ids_of(spec), self.out_dir)
        self.config.write_resolved(self.out_dir)
        return manifest

    def cmd_supervoxel(self, input_dir: Path, params: Optional[SupervoxelParams] = None,
                       mode: Optional[str] = None) -> SupervoxelManifest:
        input_dir = Path(input_dir)
        if not input_dir.is_dir():
            raise VolumeIOError(f"input directory not found: {input_dir}")
        volumes = {case_id: load_volume(input_dir / case_id) for case_id in _list_volume_ids(input_dir)}
        manifest = self.generate_pseudo_labels(volumes, params or self.experiment.supervoxel,
                                               mode or self.experiment.self_supervision, self.out_dir)
        self.config.write_resolved(self.out_dir)
        return manifest

    def cmd_train(self) -> List[Path]:
        start = datetime.now()
        exp = self.experiment
        cases, _ = self.load_cases()
        by_id = {c.case_id: c for c in cases}
        plan = self.split_plan()
        pseudo, _ = self.pseudo_labels()
        self.config.write_resolved(self.out_dir)

        def _train(task: Tuple[int, int]) -> Tuple[Path, TrainingRunStats]:
            fold, run = task
            seed = exp.seed + 1000 * fold + run
            training = [(cid, by_id[cid].volume, pseudo[cid]) for cid in sorted(plan.training_ids(fold))]
            result = train(training, encoder=exp.encoder, head=exp.head, sampler=exp.sampler,
                           transform=exp.transform, sgd=exp.sgd, loss=exp.loss, iterations=exp.iterations,
                           seed=seed, self_supervision=exp.self_supervision,
                           log_path=self.out_dir / "logs" / f"fold{fold}_run{run}.jsonl",
                           log_every=exp.log_every, run_id=f"fold{fold}_run{run}", fold=fold, run=run)
            path = result.model.save(self.out_dir / checkpoint_name(fold, run),
                                     {"fold": fold, "run": run, "seed": seed, "iterations": exp.iterations})
            return path, result.stats

        tasks = [(fold, run) for fold in exp.fold_indices() for run in range(exp.runs_per_fold)]
        with self._pool() as pool:
            outcomes = list(pool.map(_train, tasks))

        manifest = {
            "checkpoints": [{"fold": f, "run": r, "path": checkpoint_name(f, r)} for f, r in tasks],
            "split": plan.model_dump(mode="json"),
        }
        with open(self.out_dir / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        ResultsReporter(self.out_dir).write_run_stats([stats for _, stats in outcomes])

        self._log_banner("TRAINING COMPLETED", start, [
            f"Runs: {len(tasks)}",
            f"Final T: {[round(s.final_T, 3) for _, s in outcomes]}",
            f"Checkpoints: {self.out_dir}",
        ])
        return [path for path, _ in outcomes]

    def load_models(self, checkpoint: Path) -> List[TrainedModel]:
        """One checkpoint file, or a directory with checkpoints.json"""
        checkpoint = Path(checkpoint)
        if checkpoint.is_dir():
            manifest_path = checkpoint / CHECKPOINT_MANIFEST
            if not manifest_path.exists():
                raise CheckpointError(f"{checkpoint} has no {CHECKPOINT_MANIFEST}")
            entries = json.loads(manifest_path.read_text(encoding="utf-8"))["checkpoints"]
            wanted = set(self.experiment.fold_indices())
            models = []
            for entry in entries:
                if entry["fold"] in wanted:
                    model, _ = ADNetModel.load(checkpoint / entry["path"])
                    models.append(TrainedModel(fold=entry["fold"], run=entry["run"], model=model))
            if not models:
                raise CheckpointError(f"no checkpoints in {checkpoint} for folds {sorted(wanted)}")
            return models
        model, meta = ADNetModel.load(checkpoint)
        folds = [meta["fold"]] if meta.get("fold") is not None else self.experiment.fold_indices()
        return [TrainedModel(fold=f, run=meta.get("run", 0), model=model) for f in folds]

    def evaluate(self, models: Sequence[TrainedModel]) -> List[FoldEvaluation]:
        exp = self.experiment
        cases, class_ids = self.load_cases()
        by_id = {c.case_id: (c.volume, c.labels) for c in cases}
        plan = self.split_plan()
        with self._pool() as pool:
            return list(pool.map(
                lambda m: evaluate_fold(m.model, plan, m.fold, m.run, by_id, class_ids,
                                        exp.protocol, exp.ep2_support),
                models))

    def cmd_eval(self, checkpoint: Path) -> ProtocolResult:
        start = datetime.now()
        evaluations = self.evaluate(self.load_models(checkpoint))
        records = [r for e in evaluations for r in e.records()]
        result = aggregate(records, self.experiment.protocol)
        reporter = ResultsReporter(self.out_dir)
        reporter.write_results(records)
        reporter.write_summary(result, {"learned_thresholds": [e.learned_threshold for e in evaluations]})
        self.config.write_resolved(self.out_dir)
        reporter.log_summary(result)
        self._log_banner("EVALUATION COMPLETED", start, [f"Results: {self.out_dir}"])
        return result

    def cmd_linesearch(self, checkpoint: Path, t_min: float, t_max: float, t_step: float) -> LineSearchResult:
        grid = threshold_grid(t_min, t_max, t_step)
        result = threshold_line_search(self.evaluate(self.load_models(checkpoint)), grid)
        ResultsReporter(self.out_dir).write_line_search(result)
        self.config.write_resolved(self.out_dir)
        logger.info(f"Learned T {result.learned_threshold:.3f}; best grid T {result.best.threshold:.3f} "
                    f"({result.best.mean:.2f} mean dice)")
        return result

    def _arm_config(self, parameter: str, value: str, shared_sv: str) -> LabConfig:
        if parameter == "rho":
            return self.config.with_overrides({"supervoxel": {"rho": int(value)}, "supervoxel_dir": None})
        if parameter == "kappa":
            return self.config.with_overrides({"head": {"kappa": float(value)}, "supervoxel_dir": shared_sv})
        return self.config.with_overrides({"self_supervision": value, "supervoxel_dir": None})

    def cmd_sweep(self, parameter: str, values: Sequence[str]) -> List[SweepRow]:
        """Train and evaluate one arm per value; rho and self_supervision arms rebuild pseudo-labels"""
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigurationError(f"unknown sweep parameter {parameter}; expected one of {SWEEP_PARAMETERS}")
        if not values:
            raise ConfigurationError("sweep needs at least one value")
        start = datetime.now()
        cases, class_ids = self.load_cases()
        shared_sv = self.experiment.supervoxel_dir or str(self.out_dir / "supervoxels")
        rows = []
        for value in values:
            arm_dir = self.out_dir / f"{parameter}_{value}"
            arm = LabService(self._arm_config(parameter, str(value), shared_sv), arm_dir, self.threads)
            arm._cases, arm._class_ids = cases, class_ids
            arm.cmd_train()
            result = arm.cmd_eval(arm_dir)
            sv_dir = Path(arm.experiment.supervoxel_dir or arm_dir / "supervoxels")
            rows.append(SweepRow(
                parameter=parameter, value=str(value),
                class_means={c.class_id: c.mean for c in result.classes},
                class_stds={c.class_id: c.std for c in result.classes},
                mean=result.mean, std=result.std, output_dir=str(arm_dir),
                supervoxel_manifest=str(sv_dir / SUPERVOXEL_MANIFEST),
            ))
        ResultsReporter(self.out_dir).write_sweep(rows, class_ids)
        self.config.write_resolved(self.out_dir)
        self._log_banner(f"{parameter.upper()} SWEEP COMPLETED", start, [f"Arms: {len(rows)}"])
        return rows

    def _log_banner(self, title: str, start: datetime, lines: List[str]) -> None:
        duration = (datetime.now() - start).total_seconds()
        logger.info("=" * 60)
        logger.info(title)
        logger.info("=" * 60)
        logger.info(f"Duration: {duration:.2f} seconds")
        for line in lines:
            logger.info(line)
        logger.info("=" * 60)
