"""Result files: dice tables, summaries, line-search curves, sweep tables and run stats"""
import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Sequence

from models import DiceRecord, LineSearchResult, ProtocolResult, SweepRow, TrainingRunStats
import logging

logger = logging.getLogger(__name__)

RESULTS_COLUMNS = ["protocol", "fold", "run", "class", "query_id", "dice"]


class ResultsReporter:
    """Writes every result file of one command into its output directory"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _write_json(self, name: str, payload: Any) -> Path:
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def write_results(self, records: Sequence[DiceRecord]) -> Path:
        path = self.out_dir / "results.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(RESULTS_COLUMNS)
            for r in records:
                writer.writerow([r.protocol, r.fold, r.run, r.class_id, r.query_id, f"{r.dice:.6f}"])
        logger.info(f"Wrote {len(records)} dice rows to {path}")
        return path

    def write_summary(self, result: ProtocolResult, extra: Dict[str, Any] = None) -> Path:
        payload = result.model_dump(mode="json")
        payload.update(extra or {})
        return self._write_json("summary.json", payload)

    def write_line_search(self, result: LineSearchResult) -> Path:
        path = self.out_dir / "linesearch.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["threshold", "mean_dice", "std_dice"])
            for p in result.points:
                writer.writerow([f"{p.threshold:.6f}", f"{p.mean:.6f}", f"{p.std:.6f}"])
        self._write_json("linesearch.json", {
            "learned_threshold": result.learned_threshold,
            "learned_thresholds": result.learned_thresholds,
            "best_threshold": result.best.threshold,
            "best_mean": result.best.mean,
        })
        logger.info(f"Wrote {len(result.points)}-point threshold curve to {path}")
        return path

    def write_sweep(self, rows: List[SweepRow], class_ids: Sequence[int]) -> Path:
        """Table with one row per value: per-class mean +- std, overall mean +- std"""
        path = self.out_dir / "sweep.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["parameter", "value"] + [f"class_{c}" for c in class_ids] + ["mean"])
            for row in rows:
                cells = [f"{row.class_means.get(c, float('nan')):.2f}+-{row.class_stds.get(c, float('nan')):.2f}"
                         for c in class_ids]
                writer.writerow([row.parameter, row.value] + cells + [f"{row.mean:.2f}+-{row.std:.2f}"])
        self._write_json("sweep.json", [row.model_dump(mode="json") for row in rows])
        logger.info(f"Wrote {len(rows)}-row {rows[0].parameter if rows else ''} sweep table to {path}")
        return path

    def write_run_stats(self, stats: Sequence[TrainingRunStats]) -> Path:
        """Timing and loss summaries; the only result file carrying timestamps"""
        return self._write_json("run_stats.json", [s.model_dump(mode="json") for s in stats])

    def log_summary(self, result: ProtocolResult) -> None:
        logger.info("=" * 60)
        logger.info(f"{result.protocol} SUMMARY ({result.count} dice values)")
        for summary in result.classes:
            logger.info(f"   • class {summary.class_id}: {summary.mean:.2f} ± {summary.std:.2f} (n={summary.count})")
        logger.info(f"   • overall: {result.mean:.2f} ± {result.std:.2f}")
        logger.info("=" * 60)
