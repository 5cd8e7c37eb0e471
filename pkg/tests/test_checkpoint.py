import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hssl.checkpoint import (decode, encode, load_base, load_state, read_checkpoint, save_base,
                             save_state, write_checkpoint)
from hssl.config import RunConfig
from hssl.data import generate_synthetic, iter_view_batches
from hssl.engine import detach_auxiliary, extract_features, fit, new_state, train_step
from hssl.errors import CheckpointError

from conftest import tiny_run_doc


def parse_by_hand(data: bytes):
    """Independent reader for the documented layout."""
    assert data[:4] == b"HSSL"
    version, hlen = struct.unpack_from("<II", data, 4)
    pos = 12
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.array(struct.unpack_from(f"<{size}f", data, pos), np.float32).reshape(shape)
        pos += 4 * size
    assert pos == len(data)
    return version, header, blobs


def test_layout_matches_hand_reader():
    blobs = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32([-1.5]),
             "scalar": np.array(2.25, np.float32)}
    raw = encode({"kind": "x", "n": 1}, blobs)
    version, header, got = parse_by_hand(raw)
    assert version == 1 and header == {"kind": "x", "n": 1}
    assert list(got) == list(blobs)
    for k in blobs:
        assert got[k].shape == blobs[k].shape
        np.testing.assert_array_equal(got[k], blobs[k])


@settings(max_examples=40)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(width=32, allow_nan=False)),
                       max_size=5))
def test_encode_decode_is_bit_exact(blobs):
    header, back = decode(encode({"k": "v"}, blobs))
    assert header == {"k": "v"}
    assert list(back) == list(blobs)
    for k, v in blobs.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_format_errors(tmp_path):
    good = encode({}, {"w": np.ones(3, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOPE" + good[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode(good[:-2])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(good + b"\0")
    with pytest.raises(CheckpointError):
        encode({}, {"w": np.ones(3)})


def test_write_is_atomic(tmp_path):
    path = tmp_path / "sub" / "c.hssl"
    write_checkpoint(path, {"a": 1}, {"w": np.zeros(2, np.float32)})
    assert read_checkpoint(path)[0] == {"a": 1}
    assert [p.name for p in path.parent.iterdir()] == ["c.hssl"]


# -- training state ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    cfg = RunConfig.from_dict(tiny_run_doc())
    data = generate_synthetic(4, 8, 16, seed=0)
    state = new_state(cfg.hssl, data)
    fit(state, data, epochs=1)
    return cfg, data, state


def _same(a: dict, b: dict):
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_state_round_trip_is_bit_exact(tmp_path, trained):
    cfg, _, state = trained
    path = tmp_path / "s.hssl"
    save_state(path, state, cfg)
    back, back_cfg = load_state(path)
    assert back_cfg == cfg and back.step == state.step
    _same(back.student.state_dict(), state.student.state_dict())
    _same(back.teacher.state_dict(), state.teacher.state_dict())
    _same(back.centers, state.centers)
    a, b = back.optimizer.state_dict(), state.optimizer.state_dict()
    assert a["t"] == b["t"]
    _same(a["m"], b["m"])
    _same(a["v"], b["v"])
    save_state(tmp_path / "again.hssl", back, back_cfg)
    assert (tmp_path / "again.hssl").read_bytes() == path.read_bytes()


def test_resumed_training_matches_uninterrupted(tmp_path):
    cfg = RunConfig.from_dict(tiny_run_doc(optimizer={"epochs": 2, "batch_size": 8}))
    data = generate_synthetic(4, 4, 16, seed=1)
    full = new_state(cfg.hssl, data)
    fit(full, data)
    part = new_state(cfg.hssl, data)
    fit(part, data, epochs=1)
    save_state(tmp_path / "mid.hssl", part, cfg)
    resumed, _ = load_state(tmp_path / "mid.hssl")
    fit(resumed, data)
    _same(resumed.student.state_dict(), full.student.state_dict())
    _same(resumed.teacher.state_dict(), full.teacher.state_dict())


def test_contrastive_bank_round_trip(tmp_path):
    doc = tiny_run_doc(objective={"kind": "contrastive", "bank_size": 8})
    cfg = RunConfig.from_dict(doc)
    data = generate_synthetic(4, 4, 16, seed=0)
    state = new_state(cfg.hssl, data)
    batch = next(iter_view_batches(data, cfg.hssl.augment, 16, 0, seed=cfg.seed))
    train_step(batch, state)
    save_state(tmp_path / "c.hssl", state, cfg)
    back, _ = load_state(tmp_path / "c.hssl")
    for k, bank in state.banks.items():
        assert back.banks[k].keys.tobytes() == bank.keys.tobytes()
        assert back.banks[k].state()["ptr"] == bank.state()["ptr"]


# -- base export ----------------------------------------------------------------

def test_exported_base_reproduces_teacher_features(tmp_path, trained):
    cfg, data, state = trained
    save_base(tmp_path / "base.hssl", detach_auxiliary(state), cfg)
    header, blobs = read_checkpoint(tmp_path / "base.hssl")
    assert header["kind"] == "base" and all(k.startswith("base/") for k in blobs)
    assert not any("head" in k for k in blobs)
    base, _ = load_base(tmp_path / "base.hssl")
    want = extract_features(detach_auxiliary(state), data.images)
    assert extract_features(base, data.images).tobytes() == want.tobytes()
    # a training-state checkpoint yields the same teacher base
    save_state(tmp_path / "s.hssl", state, cfg)
    from_state, _ = load_base(tmp_path / "s.hssl")
    assert extract_features(from_state, data.images).tobytes() == want.tobytes()


def test_exported_base_reattaches_to_a_fresh_head(tmp_path, trained):
    cfg, data, state = trained
    save_base(tmp_path / "base.hssl", detach_auxiliary(state), cfg)
    base, _ = load_base(tmp_path / "base.hssl")
    fresh = new_state(cfg.hssl, data)
    fresh.student.base.load_state_dict(base.state_dict())
    batch = next(iter_view_batches(data, cfg.hssl.augment, 16, 0, seed=cfg.seed))
    loss, _, _ = train_step(batch, fresh)
    assert np.isfinite(loss)


def test_kind_and_shape_mismatches(tmp_path, trained):
    cfg, _, state = trained
    save_base(tmp_path / "base.hssl", detach_auxiliary(state), cfg)
    with pytest.raises(CheckpointError, match="base"):
        load_state(tmp_path / "base.hssl")
    header, blobs = read_checkpoint(tmp_path / "base.hssl")
    header["config"]["model"]["base"]["embed_width"] = 8
    header["config"]["model"]["heads"] = []
    header["config"]["model"]["supervision"] = "base_only"
    write_checkpoint(tmp_path / "bad.hssl", header, blobs)
    with pytest.raises(CheckpointError):
        load_base(tmp_path / "bad.hssl")
