import struct

import numpy as np
import pytest

from scanfer.checkpoint import MAGIC, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, \
    save_checkpoint
from scanfer.config import parse_config
from scanfer.metrics import evaluate
from scanfer.model import FerModel
from scanfer.optim import TrainConfig, fit


@pytest.fixture(scope="module")
def trained():
    cfg = parse_config("input_size = 20\nepochs = 2\nbatch_size = 8\nlr_backbone = 0.01\nlr_heads = 0.05\n")
    model = FerModel.create(cfg.fer_config(), seed=0)
    r = np.random.default_rng(0)
    data = (r.uniform(size=(12, 3, 20, 20)), r.integers(0, 7, 12))
    result = fit(model, data, config=cfg.train_config())
    return cfg, model, result, data


def test_round_trip_bitwise(trained, tmp_path):
    cfg, model, result, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, cfg, result.state, meta={"rng_state": result.rng_state})
    ck = load_checkpoint(path)
    assert ck.config == cfg
    before, after = model.state_dict(), ck.model.state_dict()
    assert before.keys() == after.keys()
    for name in before:
        assert before[name].tobytes() == after[name].tobytes(), name
    assert ck.state.velocity.keys() == result.state.velocity.keys()
    for name, v in result.state.velocity.items():
        assert v.tobytes() == ck.state.velocity[name].tobytes()
    assert ck.state.epoch == result.state.epoch == 1
    assert ck.meta["rng_state"] == result.rng_state
    assert encode_checkpoint(ck.model, ck.config, ck.state, {"rng_state": result.rng_state}) == path.read_bytes()


def test_report_identical_after_load(trained):
    cfg, model, _, (images, labels) = trained
    ck = decode_checkpoint(encode_checkpoint(model, cfg))
    assert ck.state is None
    a, b = evaluate(model, images, labels), evaluate(ck.model, images, labels)
    assert a == b and a.to_record() == b.to_record()


def test_layout_header(trained):
    cfg, model, _, _ = trained
    data = encode_checkpoint(model, cfg)
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1


def test_bad_magic(trained):
    cfg, model, _, _ = trained
    data = encode_checkpoint(model, cfg)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + data[4:])


def test_version_mismatch(trained):
    cfg, model, _, _ = trained
    data = encode_checkpoint(model, cfg)
    with pytest.raises(CheckpointError, match="version 2"):
        decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])


@pytest.mark.parametrize("cut", [1, 9, 1000])
def test_truncation(trained, cut):
    cfg, model, _, _ = trained
    data = encode_checkpoint(model, cfg)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-cut])


def test_trailing_bytes(trained):
    cfg, model, _, _ = trained
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(encode_checkpoint(model, cfg) + b"\0")
