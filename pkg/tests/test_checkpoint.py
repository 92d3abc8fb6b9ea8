import numpy as np
import pytest

from framepol.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


class TestCheckpointContainer:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a.w": rng.normal(size=(7, 3)),
            "b": rng.normal(size=(2, 3, 3)),
            "scalar": np.array(3.14159),
        }
        meta = {"lr": 1e-4, "name": "demo", "nested": {"k": [1, 2, 3]}}
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, meta, arrays)
        meta2, arrays2 = load_checkpoint(path)
        assert meta2 == meta
        assert list(arrays2) == list(arrays)
        for name, arr in arrays.items():
            assert arrays2[name].dtype == np.float64
            assert (arrays2[name] == arr).all()

    def test_double_roundtrip_same_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"x": rng.normal(size=(5, 5))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"v": 1}, arrays)
        meta, loaded = load_checkpoint(p1)
        save_checkpoint(p2, meta, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {}, {"x": np.zeros((4, 4))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated|trailing"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot open"):
            load_checkpoint(tmp_path / "none.ckpt")
