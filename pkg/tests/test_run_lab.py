import csv
import json
import logging
from pathlib import Path

import pytest
import yaml

from checkpoint import CheckpointError
from config import ConfigurationError
from episodes import EpisodeSamplingError
from run_lab import build_parser, error_category, exit_code_for, main
from tensor import NumericsError
from volumes import VolumeFormatError, VolumeIOError

TINY_EXPERIMENT = {
    "synthetic": {
        "volume_count": 6,
        "dims": [8, 32, 32],
        "spacing": [2.0, 1.0, 1.0],
        "classes": [
            {"class_id": 1, "family": "ellipsoid", "radii": [2.5, 6.0, 6.0], "level": 1.0},
            {"class_id": 2, "family": "box", "radii": [2.0, 4.0, 4.0], "level": -1.0},
        ],
        "noise_sigma": 0.02,
        "seed": 3,
    },
    "supervoxel": {"rho": 60, "scale_k": 0.5},
    "sampler": {"min_pixels": 20},
    "encoder": {"stage_widths": [4, 8], "feature_dim": 8, "downsample": 2},
    "iterations": 4,
    "log_every": 2,
    "n_folds": 3,
    "runs_per_fold": 1,
    "folds": [0],
}


@pytest.fixture(autouse=True)
def isolated_logging(tmp_path, monkeypatch):
    """main() reconfigures the root logger; put it back afterwards"""
    monkeypatch.setenv("ADNET_LOG_FILE", str(tmp_path / "lab.log"))
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers[:]:
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)


def tiny_config(tmp_path: Path, **changes) -> str:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({**TINY_EXPERIMENT, **changes}), encoding="utf-8")
    return str(path)


class TestErrorCategories:
    @pytest.mark.parametrize("error,category", [
        (ConfigurationError("x"), "config"),
        (VolumeIOError("x"), "io"),
        (CheckpointError("x"), "io"),
        (FileNotFoundError("x"), "io"),
        (VolumeFormatError("x"), "data"),
        (NumericsError("x"), "numerics"),
        (EpisodeSamplingError("x"), "sampling"),
        (RuntimeError("x"), "internal"),
    ])
    def test_mapping(self, error, category):
        assert error_category(error) == category

    def test_exit_codes(self):
        assert exit_code_for("config") == 2
        assert exit_code_for("io") == 1
        assert exit_code_for("internal") == 1

    def test_parser(self):
        args = build_parser().parse_args(["linesearch", "--checkpoint", "out"])
        assert (args.t_min, args.t_max, args.t_step) == (-20.0, -5.0, 0.5)
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sweep", "--param", "lr"])


class TestMain:
    def test_missing_config(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("error=config message=config file not found")

    def test_unknown_key(self, tmp_path, capsys):
        code = main(["synth", "--config", tiny_config(tmp_path, bogus=1), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "unknown config key 'bogus'" in capsys.readouterr().err

    def test_missing_input_directory(self, tmp_path, capsys):
        code = main(["supervoxel", "--input", str(tmp_path / "nowhere"), "--out", str(tmp_path / "sv")])
        assert code == 1
        assert "error=io " in capsys.readouterr().err

    def test_empty_input_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        out = tmp_path / "sv"
        assert main(["supervoxel", "--input", str(tmp_path / "empty"), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["counts"] == {} and manifest["mode"] == "supervoxel"

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["eval", "--config", tiny_config(tmp_path), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error=io" in capsys.readouterr().err

    def test_synth_then_supervoxel(self, tmp_path):
        data_dir, sv_dir = tmp_path / "data", tmp_path / "sv"
        config = tiny_config(tmp_path)
        assert main(["synth", "--config", config, "--out", str(data_dir)]) == 0
        dataset = json.loads((data_dir / "dataset.json").read_text())
        assert dataset["classes"] == [1, 2] and len(dataset["cases"]) == 6
        assert (data_dir / "resolved_config.json").exists()

        assert main(["supervoxel", "--config", config, "--input", str(data_dir), "--out", str(sv_dir),
                     "--rho", "100", "--threads", "2"]) == 0
        manifest = json.loads((sv_dir / "manifest.json").read_text())
        assert sorted(manifest["counts"]) == dataset["cases"]
        assert manifest["params"]["rho"] == 100
        assert all(count >= 1 for count in manifest["counts"].values())


@pytest.mark.slow
class TestPipeline:
    def test_train_eval_linesearch(self, tmp_path):
        config, out = tiny_config(tmp_path), tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        checkpoints = json.loads((out / "checkpoints.json").read_text())
        assert [c["path"] for c in checkpoints["checkpoints"]] == ["fold0_run0.ckpt"]
        log_lines = (out / "logs" / "fold0_run0.jsonl").read_text().splitlines()
        assert len(log_lines) == 4
        assert (out / "supervoxels" / "manifest.json").exists()

        assert main(["eval", "--config", config, "--checkpoint", str(out), "--out", str(out)]) == 0
        with open(out / "results.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows and all(0.0 <= float(r["dice"]) <= 100.0 for r in rows)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["protocol"] == "EP2" and len(summary["learned_thresholds"]) == 1

        assert main(["linesearch", "--config", config, "--checkpoint", str(out / "fold0_run0.ckpt"),
                     "--out", str(out), "--t-min", "-12", "--t-max", "-8", "--t-step", "1"]) == 0
        assert len((out / "linesearch.csv").read_text().splitlines()) == 1 + 5
        assert "learned_threshold" in json.loads((out / "linesearch.json").read_text())

    def test_training_is_reproducible(self, tmp_path):
        config = tiny_config(tmp_path)
        for name in ("a", "b"):
            assert main(["train", "--config", config, "--out", str(tmp_path / name)]) == 0
        first = (tmp_path / "a" / "fold0_run0.ckpt").read_bytes()
        assert first == (tmp_path / "b" / "fold0_run0.ckpt").read_bytes()
        assert main(["train", "--config", config, "--seed", "1", "--out", str(tmp_path / "c")]) == 0
        assert first != (tmp_path / "c" / "fold0_run0.ckpt").read_bytes()

    def test_ep1_protocol(self, tmp_path):
        config, out = tiny_config(tmp_path, protocol="EP1"), tmp_path / "ep1"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        assert main(["eval", "--config", config, "--checkpoint", str(out), "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["protocol"] == "EP1"

    def test_kappa_sweep(self, tmp_path):
        config, out = tiny_config(tmp_path, iterations=2), tmp_path / "sweep"
        assert main(["sweep", "--config", config, "--param", "kappa", "--values", "0.5", "2.0",
                     "--out", str(out)]) == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert [r["value"] for r in rows] == ["0.5", "2.0"]
        assert rows[0]["supervoxel_manifest"] == rows[1]["supervoxel_manifest"]
        assert (out / "kappa_2.0" / "fold0_run0.ckpt").exists()

    def test_rho_sweep_builds_separate_pseudo_labels(self, tmp_path):
        config, out = tiny_config(tmp_path, iterations=2), tmp_path / "rho"
        assert main(["sweep", "--config", config, "--param", "rho", "--values", "20", "60", "200",
                     "--out", str(out)]) == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert [r["value"] for r in rows] == ["20", "60", "200"]
        manifests = [Path(r["supervoxel_manifest"]) for r in rows]
        assert len(set(manifests)) == 3
        totals = []
        for rho, path in zip((20, 60, 200), manifests):
            manifest = json.loads(path.read_text())
            assert manifest["params"]["rho"] == rho
            totals.append(sum(manifest["counts"].values()))
        assert totals == sorted(totals, reverse=True)

    def test_self_supervision_sweep(self, tmp_path):
        config, out = tiny_config(tmp_path, iterations=2), tmp_path / "ssl"
        assert main(["sweep", "--config", config, "--param", "self_supervision",
                     "--values", "supervoxel", "superpixel", "--out", str(out)]) == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert [r["value"] for r in rows] == ["supervoxel", "superpixel"]
        modes = [json.loads(Path(r["supervoxel_manifest"]).read_text())["mode"] for r in rows]
        assert modes == ["supervoxel", "superpixel"]
        assert (out / "sweep.csv").exists()
