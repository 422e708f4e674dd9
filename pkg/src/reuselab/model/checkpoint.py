"""Binary checkpoint format.

Layout::

    b"RATT" | u16 version | u32 header length | JSON header | float64 payloads

The header holds the model config, the training step, the seed and a
manifest of ``{name, rows, cols, offset}`` entries; offsets are bytes from
the start of the payload. Payloads are little-endian float64, row-major,
in manifest order.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .optim import AdamState

MAGIC = b"RATT"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    adam: AdamState
    seed: int

    @property
    def step(self):
        return self.adam.step


def _tensors(ckpt):
    for name, a in ckpt.params.items():
        yield "param/" + name, a
    for name, a in ckpt.adam.m.items():
        yield "adam_m/" + name, a
    for name, a in ckpt.adam.v.items():
        yield "adam_v/" + name, a


def dumps(ckpt):
    manifest = []
    chunks = []
    offset = 0
    for name, a in _tensors(ckpt):
        a = np.asarray(a)
        if a.ndim != 2:
            raise CheckpointError(f"tensor {name} is not 2-D")
        raw = np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
        manifest.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.adam.step,
        "seed": ckpt.seed,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes, *chunks])


def loads(data):
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 10
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen:]
    params, m, v = {}, {}, {}
    groups = {"param": params, "adam_m": m, "adam_v": v}
    for entry in header["tensors"]:
        kind, name = entry["name"].split("/", 1)
        count = entry["rows"] * entry["cols"]
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"])
        groups[kind][name] = arr.astype(np.float64).reshape(entry["rows"], entry["cols"])
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(config, params, AdamState(m, v, header["step"]), header["seed"])


def save(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
