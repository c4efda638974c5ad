import numpy as np
import pytest

from attnguide.serialization import load_array, load_checkpoint, save_array, save_checkpoint


class TestPortableArray:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).uniform(size=(7, 11)).astype(np.float32)
        path = tmp_path / "map.f32"
        save_array(path, arr)
        back = load_array(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_header_is_ascii_line(self, tmp_path):
        path = tmp_path / "map.f32"
        save_array(path, np.zeros((3, 4)))
        with open(path, "rb") as f:
            header = f.readline()
        assert header == b"3 4 dtype=f32 order=row-major\n"

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError):
            save_array(tmp_path / "bad.f32", np.zeros((2, 2, 2)))

    def test_rejects_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.f32"
        path.write_bytes(b"3 4 dtype=f64 order=row-major\n" + b"\x00" * 48)
        with pytest.raises(ValueError):
            load_array(path)

    def test_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "short.f32"
        path.write_bytes(b"3 4 dtype=f32 order=row-major\n" + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_array(path)


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        manifest = {"kind": "demo", "nested": {"a": 1}, "items": [1, 2, 3]}
        tensors = {
            "weight": rng.normal(size=(4, 5)).astype(np.float32),
            "bias": rng.normal(size=(5,)).astype(np.float32),
            "scalarish": np.float32(3.5).reshape(()),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, manifest, tensors)
        got_manifest, got_tensors = load_checkpoint(path)
        assert got_manifest == manifest
        assert set(got_tensors) == set(tensors)
        for name in tensors:
            assert np.array_equal(got_tensors[name], np.asarray(tensors[name], dtype=np.float32))
            assert got_tensors[name].shape == np.asarray(tensors[name]).shape

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(path)
