"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DSFF"  version:u8  count:u32
    count x { name_len:u16  name:utf-8  rank:u8  dims:u64*rank  values:f64*prod(dims) }

Parameters are stored as ``param/<name>``, AdamW moments as ``opt.m/<name>`` and
``opt.v/<name>``; ``opt.step`` and ``epoch`` are rank-0 tensors; the training
config is JSON text stored byte-per-value in ``meta/config_json``.
"""
from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .training import Checkpoint, OptimizerState, TrainConfig

MAGIC = b"DSFF"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> Dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, expected b'DSFF'", 0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported version {version}, expected version {VERSION}", 4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not UTF-8", start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(8 * n, f"values of {name!r}")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name!r}", start)
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes", pos)
    return tensors


def checkpoint_tensors(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    t: Dict[str, np.ndarray] = {}
    for k, v in ckpt.params.items():
        t[f"param/{k}"] = v
    for k, v in ckpt.state.m.items():
        t[f"opt.m/{k}"] = v
    for k, v in ckpt.state.v.items():
        t[f"opt.v/{k}"] = v
    t["opt.step"] = np.array(float(ckpt.state.step))
    t["epoch"] = np.array(float(ckpt.epoch))
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    t["meta/config_json"] = np.frombuffer(cfg, dtype=np.uint8).astype(np.float64)
    return t


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(checkpoint_tensors(ckpt)))


def _split(tensors: Dict[str, np.ndarray]) -> Tuple[dict, dict, dict]:
    groups: Tuple[dict, dict, dict] = ({}, {}, {})
    for k, v in tensors.items():
        for g, prefix in zip(groups, ("param/", "opt.m/", "opt.v/")):
            if k.startswith(prefix):
                g[k[len(prefix):]] = v
    return groups


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    tensors = decode_tensors(buf)
    for key in ("opt.step", "epoch", "meta/config_json"):
        if key not in tensors:
            raise CheckpointFormatError(f"missing tensor {key!r}", len(buf))
    params, m, v = _split(tensors)
    cfg_bytes = tensors["meta/config_json"].astype(np.uint8).tobytes()
    config = TrainConfig.from_dict(json.loads(cfg_bytes.decode("utf-8")))
    state = OptimizerState(m, v, int(tensors["opt.step"]))
    return Checkpoint(params, state, int(tensors["epoch"]), config)
