import numpy as np
import pytest

from checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"b.bias": rng.normal(size=3).astype(np.float32),
                   "a.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
                   "head.T": np.asarray(-5.0, dtype=np.float32)}
        path = save_checkpoint(tmp_path / "nested" / "m.ckpt", tensors, {"fold": 2, "seed": 7})
        loaded, meta = load_checkpoint(path)
        assert meta == {"fold": 2, "seed": 7}
        assert set(loaded) == set(tensors)
        for name, data in tensors.items():
            assert loaded[name].shape == data.shape
            assert loaded[name].tobytes() == data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT\n{}\n")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "t.ckpt", {"w": np.ones((4, 4), dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "h.ckpt"
        path.write_bytes(MAGIC + b"{not json\n")
        with pytest.raises(CheckpointError, match="malformed"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
