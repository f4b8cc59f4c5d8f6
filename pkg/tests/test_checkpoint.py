import struct

import numpy as np
import pytest

from mspformer.checkpoint import (decode_checkpoint, encode_checkpoint, load_model, read_checkpoint,
                                  restore_state, save_checkpoint)
from mspformer.config import RunConfig
from mspformer.errors import FormatError
from mspformer.model import ModelConfig, MSPFormer
from mspformer.optimizer import OptimState


@pytest.fixture
def run_config():
    cfg = RunConfig(model=ModelConfig.tiny())
    cfg.train.seed = 11
    return cfg.validate()


def test_model_only_layout():
    raw = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    assert raw[:4] == b"MSPF"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert raw[12:14] == struct.pack("<H", 1)
    assert raw[14:15] == b"w"
    assert raw[15] == 2
    assert struct.unpack("<2I", raw[16:24]) == (1, 2)
    assert np.frombuffer(raw[24:], dtype="<f4").tolist() == [1.0, 2.0]
    ckpt = decode_checkpoint(raw)
    assert ckpt.moments is None and ckpt.meta == {} and ckpt.config_text == ""


def test_sections_decode():
    raw = encode_checkpoint({"w": np.ones(3)}, {"w.m": np.zeros(3), "w.v": np.ones(3)}, t=42,
                            meta={"epoch": 3, "step": 12}, config_text="[train]\nseed = 1\n")
    ckpt = decode_checkpoint(raw)
    assert ckpt.t == 42
    assert set(ckpt.moments) == {"w.m", "w.v"}
    assert (ckpt.epoch, ckpt.step) == (3, 12)
    assert ckpt.config_text == "[train]\nseed = 1\n"


@pytest.mark.parametrize("mutate,offset", [
    (lambda raw: b"XSPF" + raw[4:], 0),
    (lambda raw: raw[:4] + struct.pack("<I", 9) + raw[8:], 4),
    (lambda raw: raw[:-2], 24),
    (lambda raw: raw + b"JUNK", 32),
])
def test_corruption_is_reported(mutate, offset):
    raw = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    with pytest.raises(FormatError) as info:
        decode_checkpoint(mutate(raw))
    assert info.value.offset == offset


def test_model_and_optimizer_round_trip(tmp_path, run_config):
    model = MSPFormer(run_config.model, seed=run_config.train.seed)
    state = run_config.train.optim_state()
    state.ensure(model.named_parameters())
    for name in state.m:
        state.m[name] += 0.5
    state.t = 9
    path = tmp_path / "a.mspf"
    save_checkpoint(path, model, state, {"epoch": 2, "step": 9}, run_config.to_ini())

    loaded, ckpt, cfg = load_model(path)
    assert cfg == run_config
    assert ckpt.epoch == 2
    for name, p in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data)
    fresh = restore_state(ckpt, run_config.train.optim_state())
    assert fresh.t == 9
    np.testing.assert_array_equal(fresh.m["head.weight"], state.m["head.weight"])

    again = tmp_path / "b.mspf"
    save_checkpoint(again, loaded, fresh, {"epoch": 2, "step": 9}, cfg.to_ini())
    assert path.read_bytes() == again.read_bytes()
    assert not (tmp_path / "a.mspf.tmp").exists()


def test_checkpoint_without_config_uses_defaults(tmp_path):
    model = MSPFormer(ModelConfig(), seed=0)
    path = tmp_path / "plain.mspf"
    save_checkpoint(path, model)
    loaded, ckpt, cfg = load_model(path)
    assert cfg == RunConfig()
    assert ckpt.moments is None
    assert loaded.count_params() == model.count_params()


def test_read_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nope.mspf")
