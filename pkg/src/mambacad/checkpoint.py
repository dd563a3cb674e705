"""Flat named-array checkpoint container.

Layout (little-endian)::

    b"MCADCKPT"            8 bytes magic
    u32 version            currently 1
    u32 manifest_length
    manifest               UTF-8 JSON: {"version", "meta", "tensors": [
                               {"name", "shape", "dtype": "float32", "offset", "nbytes"}]}
    data                   concatenated float32 arrays, offsets relative to data start

Integer buffers are stored as float32 and cast back on ``load_state_dict``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MCADCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, state: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a mambacad checkpoint")
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[16 : 16 + mlen])
    base = 16 + mlen
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, "<f4", int(np.prod(e["shape"], dtype=np.int64)), base + e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return state, manifest["meta"]
