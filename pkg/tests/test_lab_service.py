import json

import numpy as np
import pytest

from checkpoint import CheckpointError
from config import ConfigurationError, LabConfig
from lab_service import CHECKPOINT_MANIFEST, LabService, _list_volume_ids, checkpoint_name, supervoxel_path
from models import SupervoxelParams
from volumes import Volume, save_volume


@pytest.fixture
def tiny_lab(tmp_path, tiny_spec):
    config = LabConfig().with_overrides({
        "synthetic": tiny_spec.model_dump(),
        "supervoxel": {"rho": 60},
        "sampler": {"min_pixels": 20},
        "encoder": {"stage_widths": [4, 8], "feature_dim": 8, "downsample": 2},
        "n_folds": 2,
        "runs_per_fold": 1,
    })
    return LabService(config, tmp_path / "out")


class TestData:
    def test_load_cases_is_cached(self, tiny_lab):
        cases, class_ids = tiny_lab.load_cases()
        assert class_ids == [1, 2]
        assert [c.case_id for c in cases] == ["case_000", "case_001", "case_002", "case_003"]
        assert tiny_lab.load_cases()[0] is cases
        assert abs(float(cases[0].volume.data.mean())) < 1e-4

    def test_split_plan(self, tiny_lab):
        plan = tiny_lab.split_plan()
        assert plan.n_folds == 2 and len(plan.fold_assignments) == 4

    def test_pseudo_labels_generated_once(self, tiny_lab, caplog):
        labels, manifest_path = tiny_lab.pseudo_labels()
        assert manifest_path.exists()
        assert sorted(labels) == ["case_000", "case_001", "case_002", "case_003"]
        assert labels["case_000"].dims == (8, 32, 32)
        written = json.loads(manifest_path.read_text())["counts"]
        assert written == {cid: labels[cid].max_label for cid in labels}

        before = manifest_path.read_text()
        again, _ = tiny_lab.pseudo_labels()
        assert manifest_path.read_text() == before
        assert "was built with" not in caplog.text
        for cid in labels:
            np.testing.assert_array_equal(again[cid].labels, labels[cid].labels)

    def test_stale_pseudo_labels_are_regenerated(self, tiny_lab, caplog):
        tiny_lab.pseudo_labels()
        params = SupervoxelParams(rho=10)
        _, manifest_path = tiny_lab.pseudo_labels(params=params)
        assert "was built with" in caplog.text
        manifest = json.loads(manifest_path.read_text())
        assert manifest["params"]["rho"] == 10
        assert SupervoxelParams(**manifest["params"]) == params

    def test_list_volume_ids(self, tmp_path):
        for name in ("b", "a", "a_labels", "a_sv"):
            save_volume(Volume(data=np.zeros((1, 2, 2))), tmp_path / name)
        assert _list_volume_ids(tmp_path) == ["a", "b"]

    def test_paths(self, tmp_path):
        assert checkpoint_name(2, 1) == "fold2_run1.ckpt"
        assert supervoxel_path(tmp_path, "case_000") == tmp_path / "case_000_sv"


class TestCheckpoints:
    def test_directory_without_manifest(self, tiny_lab, tmp_path):
        with pytest.raises(CheckpointError, match=CHECKPOINT_MANIFEST):
            tiny_lab.load_models(tmp_path)

    def test_single_file_without_fold_uses_configured_folds(self, tiny_lab, small_model, tmp_path):
        path = small_model.save(tmp_path / "m.ckpt")
        assert [m.fold for m in tiny_lab.load_models(path)] == [0, 1]

    def test_manifest_filtered_by_folds(self, tiny_lab, small_model, tmp_path):
        entries = []
        for fold in (0, 1):
            small_model.save(tmp_path / checkpoint_name(fold, 0), {"fold": fold, "run": 0})
            entries.append({"fold": fold, "run": 0, "path": checkpoint_name(fold, 0)})
        (tmp_path / CHECKPOINT_MANIFEST).write_text(json.dumps({"checkpoints": entries}))
        lab = LabService(tiny_lab.config.with_overrides({"folds": [1]}), tmp_path / "eval")
        assert [(m.fold, m.run) for m in lab.load_models(tmp_path)] == [(1, 0)]


class TestSweepArms:
    def test_arm_configs(self, tiny_lab):
        rho = tiny_lab._arm_config("rho", "90", "shared")
        assert rho.experiment.supervoxel.rho == 90 and rho.experiment.supervoxel_dir is None
        kappa = tiny_lab._arm_config("kappa", "2.0", "shared")
        assert kappa.experiment.head.kappa == 2.0 and kappa.experiment.supervoxel_dir == "shared"
        mode = tiny_lab._arm_config("self_supervision", "superpixel", "shared")
        assert mode.experiment.self_supervision == "superpixel"
        assert tiny_lab.experiment.head.kappa == 0.5

    def test_invalid_sweeps(self, tiny_lab):
        with pytest.raises(ConfigurationError, match="unknown sweep parameter"):
            tiny_lab.cmd_sweep("lr", ["0.1"])
        with pytest.raises(ConfigurationError, match="at least one value"):
            tiny_lab.cmd_sweep("rho", [])
        with pytest.raises(ConfigurationError):
            tiny_lab.cmd_sweep("self_supervision", ["pixels"])
