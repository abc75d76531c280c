import numpy as np
import pytest
import torch

from mvc.checkpoint import config_hash, load_checkpoint, save_checkpoint


class TestContainer:
    def test_round_trip_mixed_dtypes(self, tmp_path):
        tensors = {
            "weights.a": np.arange(12, dtype=np.float32).reshape(3, 4),
            "weights.b": np.array([1, -2, 3], dtype=np.int64),
            "bias": torch.tensor([0.5, -0.5], dtype=torch.float64),
            "scalar": np.float32(7.25).reshape(()),
        }
        meta = {"kind": "test", "model_config": {"width": 8, "mults": [1, 2]}}
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, tensors, meta)
        loaded, meta_back = load_checkpoint(path)
        assert meta_back == meta
        assert set(loaded) == set(tensors)
        assert np.array_equal(loaded["weights.a"], tensors["weights.a"])
        assert loaded["weights.a"].dtype == np.float32
        assert np.array_equal(loaded["weights.b"], tensors["weights.b"])
        assert np.allclose(loaded["bias"], [0.5, -0.5])
        assert loaded["scalar"].shape == ()

    def test_header_offsets_documented_layout(self, tmp_path):
        import json
        import struct

        path = tmp_path / "y.ckpt"
        save_checkpoint(path, {"t": np.ones((2, 2), dtype=np.float32)}, {"kind": "k"})
        raw = path.read_bytes()
        assert raw[:8] == b"MVCKPT01"
        (header_len,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + header_len])
        entry = header["tensors"]["t"]
        assert entry == {"dtype": "float32", "shape": [2, 2], "offset": 0, "nbytes": 16}
        payload = raw[16 + header_len :]
        assert np.frombuffer(payload, dtype=np.float32).tolist() == [1.0] * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "z.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(path)

    def test_config_hash_stable_and_order_independent(self):
        a = config_hash({"x": 1, "y": [1, 2]})
        b = config_hash({"y": [1, 2], "x": 1})
        assert a == b
        assert a != config_hash({"x": 2, "y": [1, 2]})
