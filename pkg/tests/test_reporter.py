import json
from datetime import datetime

from models import (ClassSummary, DiceRecord, LineSearchPoint, LineSearchResult, ProtocolResult, SweepRow,
                    TrainingRunStats)
from reporter import ResultsReporter


def records():
    return [DiceRecord(protocol="EP2", fold=0, run=1, class_id=c, query_id="case_001", dice=d)
            for c, d in ((1, 62.5), (2, 100.0))]


class TestResultsReporter:
    def test_results_csv(self, tmp_path):
        path = ResultsReporter(tmp_path / "out").write_results(records())
        assert path.read_text().splitlines() == [
            "protocol,fold,run,class,query_id,dice",
            "EP2,0,1,1,case_001,62.500000",
            "EP2,0,1,2,case_001,100.000000",
        ]

    def test_summary_is_stable(self, tmp_path):
        result = ProtocolResult(protocol="EP2", classes=[ClassSummary(class_id=1, mean=70.0, std=10.0, count=2)],
                                mean=70.0, std=10.0, count=2)
        first = ResultsReporter(tmp_path / "a").write_summary(result, {"learned_thresholds": [-9.5]})
        second = ResultsReporter(tmp_path / "b").write_summary(result, {"learned_thresholds": [-9.5]})
        assert first.read_bytes() == second.read_bytes()
        payload = json.loads(first.read_text())
        assert payload["mean"] == 70.0 and payload["learned_thresholds"] == [-9.5]

    def test_line_search(self, tmp_path):
        result = LineSearchResult(points=[LineSearchPoint(threshold=-10.0, mean=50.0, std=1.0),
                                          LineSearchPoint(threshold=-9.5, mean=60.0, std=2.0)],
                                  learned_threshold=-9.8, learned_thresholds=[-9.8])
        reporter = ResultsReporter(tmp_path)
        path = reporter.write_line_search(result)
        assert path.read_text().splitlines()[1:] == ["-10.000000,50.000000,1.000000",
                                                    "-9.500000,60.000000,2.000000"]
        payload = json.loads((tmp_path / "linesearch.json").read_text())
        assert payload["best_threshold"] == -9.5 and payload["learned_threshold"] == -9.8

    def test_sweep_table(self, tmp_path):
        rows = [SweepRow(parameter="rho", value="100", class_means={1: 55.0}, class_stds={1: 5.0},
                         mean=55.0, std=5.0)]
        path = ResultsReporter(tmp_path).write_sweep(rows, [1, 2])
        assert path.read_text().splitlines() == ["parameter,value,class_1,class_2,mean",
                                                 "rho,100,55.00+-5.00,nan+-nan,55.00+-5.00"]

    def test_run_stats(self, tmp_path):
        stats = TrainingRunStats(run_id="fold0_run0", fold=0, start_time=datetime(2024, 1, 1))
        path = ResultsReporter(tmp_path).write_run_stats([stats])
        assert json.loads(path.read_text())[0]["run_id"] == "fold0_run0"
