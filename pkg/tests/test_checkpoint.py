"""Binary checkpoint round trips and failure modes."""
import json
import struct

import numpy as np
import pytest

from densekit import checkpoint
from densekit.errors import FormatError, PlanMismatchError, TruncatedFileError
from densekit.model import forward, init_model, predict
from densekit.plan import ArchConfig


@pytest.fixture
def trained_model(tiny_config):
    model = init_model(tiny_config, 4)
    forward(model, np.random.default_rng(0).standard_normal((4, 3, 8, 8)))   # move running stats
    return model


class TestRoundTrip:
    def test_params_and_stats_bit_identical(self, trained_model, tmp_path):
        path = checkpoint.save_checkpoint(trained_model, tmp_path / "m.dkpt", epoch=3,
                                          rng_state={"seed": 4, "next_epoch": 3}, extra={"note": "x"})
        ck = checkpoint.read_checkpoint(path)
        for name, t in trained_model.params.items():
            assert ck.model.params[name].data.tobytes() == t.data.tobytes()
        for name, rs in trained_model.running_stats.items():
            assert ck.model.running_stats[name].mean.tobytes() == rs.mean.tobytes()
            assert ck.model.running_stats[name].var.tobytes() == rs.var.tobytes()
        assert (ck.epoch, ck.rng_state, ck.extra) == (3, {"seed": 4, "next_epoch": 3}, {"note": "x"})
        assert ck.model.config == trained_model.config

    def test_reloaded_model_gives_identical_logits(self, trained_model, tmp_path):
        x = np.random.default_rng(1).standard_normal((3, 3, 8, 8))
        path = checkpoint.save_checkpoint(trained_model, tmp_path / "m.dkpt")
        np.testing.assert_array_equal(predict(checkpoint.load_checkpoint(path), x), predict(trained_model, x))

    def test_extra_tensors(self, trained_model, tmp_path):
        buf = {"velocity/a": np.arange(6, dtype=np.float32).reshape(2, 3)}
        path = checkpoint.save_checkpoint(trained_model, tmp_path / "m.dkpt", extra_tensors=buf)
        np.testing.assert_array_equal(checkpoint.read_checkpoint(path).tensors["velocity/a"], buf["velocity/a"])

    def test_encoding_is_deterministic(self, trained_model):
        assert checkpoint.encode(trained_model, 1) == checkpoint.encode(trained_model, 1)

    def test_layout(self, trained_model):
        data = checkpoint.encode(trained_model, epoch=2)
        magic, version, hlen = struct.unpack_from("<4sII", data)
        assert (magic, version) == (b"DKPT", 1)
        header = json.loads(data[12:12 + hlen])
        assert {"config", "tensors", "epoch", "rng_state"} <= set(header)
        first = header["tensors"][0]
        assert first["dtype"] == "f32" and first["offset"] == 0
        payload = np.frombuffer(data[12 + hlen:12 + hlen + first["length"]], "<f4")
        np.testing.assert_array_equal(payload, trained_model.params["stem.conv.weight"].data.ravel())
        assert len(data) == 12 + hlen + sum(t["length"] for t in header["tensors"])


class TestRejections:
    def test_bad_magic(self, trained_model):
        data = bytearray(checkpoint.encode(trained_model))
        data[0] ^= 0xFF
        with pytest.raises(FormatError, match="magic"):
            checkpoint.decode(bytes(data))

    def test_bad_version(self, trained_model):
        data = bytearray(checkpoint.encode(trained_model))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError, match="version"):
            checkpoint.decode(bytes(data))

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_truncated(self, trained_model, cut):
        data = checkpoint.encode(trained_model)
        with pytest.raises(TruncatedFileError):
            checkpoint.decode(data[:cut])

    def test_plan_mismatch(self, trained_model, tmp_path):
        path = checkpoint.save_checkpoint(trained_model, tmp_path / "m.dkpt")
        with pytest.raises(PlanMismatchError):
            checkpoint.read_checkpoint(path, expect=ArchConfig(depth_L=7, growth_k=4))
        assert checkpoint.read_checkpoint(path, expect=trained_model.config).epoch == 0

    def test_error_kinds_are_distinct(self):
        assert not issubclass(PlanMismatchError, FormatError)
        assert issubclass(TruncatedFileError, FormatError)
