"""Binary checkpoints.

Layout (all integers little-endian uint32)::

    b"HSSL" | version | header length | UTF-8 JSON header | blob count
    then per blob: name length | UTF-8 name | ndim | extents... | float32 LE data

The header carries the kind (``state`` or ``base``), the resolved run
configuration, the step counter and scalar optimizer/bank state.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"HSSL"
VERSION = 1
_U32 = struct.Struct("<I")


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode(header: dict, blobs: dict) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [_U32.pack(len(head)), head, _U32.pack(len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"blob {name!r} is {arr.dtype}, only float32 is stored")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode(data: bytes) -> tuple[dict, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    blobs = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        blobs[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last blob")
    return header, blobs


def write_checkpoint(path, header: dict, blobs: dict):
    _atomic_write(path, encode(header, blobs))


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(os.fspath(path), "rb") as fh:
        return decode(fh.read())


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": np.asarray(v, dtype=np.float32) for k, v in d.items()}


def _strip(prefix: str, blobs: dict) -> dict:
    return {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}


def save_state(path, state, run_config=None):
    """Student, teacher, optimizer moments, centers, banks and step counter."""
    from .config import RunConfig

    run_config = run_config or RunConfig(hssl=state.config)
    opt = state.optimizer.state_dict()
    header = {"kind": "state", "config": run_config.resolved(), "step": state.step,
              "steps_per_epoch": state.steps_per_epoch, "optimizer_t": opt["t"],
              "banks": {k: {"ptr": b.state()["ptr"], "count": b.state()["count"]}
                        for k, b in state.banks.items()}}
    blobs = {}
    blobs.update(_prefixed("student/", state.student.state_dict()))
    blobs.update(_prefixed("teacher/", state.teacher.state_dict()))
    blobs.update(_prefixed("opt.m/", opt["m"]))
    blobs.update(_prefixed("opt.v/", opt["v"]))
    blobs.update(_prefixed("center/", state.centers))
    blobs.update(_prefixed("bank/", {k: b.state()["buffer"] for k, b in state.banks.items()}))
    write_checkpoint(path, header, blobs)


def load_state(path):
    """Rebuild a :class:`TeacherStudentState` and the run config it was saved with."""
    from .config import RunConfig
    from .engine import TeacherStudentState

    header, blobs = read_checkpoint(path)
    if header.get("kind") != "state":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, not a training state")
    run_config = RunConfig.from_dict(header["config"])
    state = TeacherStudentState(run_config.hssl, header["steps_per_epoch"])
    try:
        state.student.load_state_dict(_strip("student/", blobs))
        state.teacher.load_state_dict(_strip("teacher/", blobs))
    except Exception as exc:
        raise CheckpointError(f"parameter blobs do not match the configured model: {exc}") from None
    state.optimizer.load_state_dict({"t": header["optimizer_t"], "m": _strip("opt.m/", blobs),
                                     "v": _strip("opt.v/", blobs)})
    centers = _strip("center/", blobs)
    if set(centers) != set(state.centers):
        raise CheckpointError("teacher centers do not match the configured streams")
    state.centers = {k: centers[k] for k in state.centers}
    buffers = _strip("bank/", blobs)
    for key, bank in state.banks.items():
        meta = header["banks"][key]
        bank.load_state({"buffer": buffers[key], "ptr": meta["ptr"], "count": meta["count"]})
    state.step = int(header["step"])
    return state, run_config


def save_base(path, base, run_config):
    """Export only the base model (auxiliary heads and projections are excluded)."""
    header = {"kind": "base", "config": run_config.resolved(), "num_parameters": base.num_parameters()}
    write_checkpoint(path, header, _prefixed("base/", base.state_dict()))


def load_base(path):
    from .config import RunConfig
    from .zoo import build_base_model

    header, blobs = read_checkpoint(path)
    run_config = RunConfig.from_dict(header["config"])
    if header.get("kind") == "state":
        params = _strip("teacher/base.", blobs)
    elif header.get("kind") == "base":
        params = _strip("base/", blobs)
    else:
        raise CheckpointError(f"unknown checkpoint kind {header.get('kind')!r}")
    base = build_base_model(run_config.hssl.base, run_config.hssl.seed)
    try:
        base.load_state_dict(params)
    except Exception as exc:
        raise CheckpointError(f"base parameters do not match the configured model: {exc}") from None
    base.freeze()
    return base, run_config
