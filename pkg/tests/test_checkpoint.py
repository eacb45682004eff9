"""Weight checkpoint round trips."""

import numpy as np
import pytest

from bfkit.checkpoint import (CheckpointError, load_model, load_weights,
                              save_model, save_weights)
from bfkit.model import ModelConfig, init_model


class TestWeights:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.uniform(-1, 1, (3, 4)),
                  "b": rng.uniform(-1, 1, (7,)).astype(np.float32),
                  "scalar": np.array(3.5)}
        path = tmp_path / "w.bfwt"
        save_weights(path, arrays, meta={"note": "x"})
        loaded, meta = load_weights(path)
        assert meta == {"note": "x"}
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert loaded[k].dtype == arrays[k].dtype
            assert np.array_equal(loaded[k], arrays[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bfwt"
        path.write_bytes(b"XXXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_weights(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "w.bfwt"
        save_weights(path, {"a": np.ones((10, 10))})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            load_weights(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_weights(tmp_path / "w.bfwt", {"a": np.ones(3, dtype=np.int32)})


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(ModelConfig(pos_encoding="pos2d"), seed=3)
        path = tmp_path / "m.bfwt"
        save_model(path, model, extra_meta={"val_loss": 0.5})
        loaded = load_model(path)
        assert loaded.config == model.config
        for k, t in model.params.items():
            assert np.array_equal(loaded.params[k].values, t.values)
        assert loaded.params["head_w"].requires_grad

    def test_missing_config_rejected(self, tmp_path):
        path = tmp_path / "w.bfwt"
        save_weights(path, {"a": np.ones(2)})
        with pytest.raises(CheckpointError):
            load_model(path)
