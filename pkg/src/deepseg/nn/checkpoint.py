"""DSEGMDL1 model checkpoints.

Layout: the 8 magic bytes ``DSEGMDL1``, a uint32-LE byte length followed by
the ModelConfig as UTF-8 JSON, then every state array in graph order (all
parameters, then each layer's running statistics right after its
parameters), each as a uint32-LE element count and raw float32-LE values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from deepseg.nn.model import ModelConfig, ModelGraph, assemble_model

MAGIC = b"DSEGMDL1"


class CheckpointError(ValueError):
    pass


def dumps(model: ModelGraph) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(cfg)), cfg]
    for _, arr in model.state_arrays():
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        chunks.append(struct.pack("<I", flat.size))
        chunks.append(flat.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> ModelGraph:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}; expected {MAGIC!r}")
    pos = 8
    (n,) = _unpack("<I", blob, pos, "config length")
    pos += 4
    if pos + n > len(blob):
        raise CheckpointError("checkpoint truncated inside the config block")
    try:
        cfg = ModelConfig.from_dict(json.loads(blob[pos : pos + n].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    pos += n
    model = assemble_model(cfg)
    for (nid, name), arr in model.state_arrays():
        (count,) = _unpack("<I", blob, pos, f"length of node {nid} {name}")
        pos += 4
        if count != arr.size:
            raise CheckpointError(f"node {nid} {name}: checkpoint holds {count} values, model expects {arr.size}")
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside node {nid} {name}")
        arr[...] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(arr.shape)
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last array")
    return model


def _unpack(fmt, blob, pos, what):
    size = struct.calcsize(fmt)
    if pos + size > len(blob):
        raise CheckpointError(f"checkpoint truncated reading {what}")
    return struct.unpack_from(fmt, blob, pos)


def save_checkpoint(model: ModelGraph, path) -> int:
    blob = dumps(model)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path) -> ModelGraph:
    return loads(Path(path).read_bytes())
