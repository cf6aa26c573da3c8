"""Checkpoint file format.

Single file: magic ``MDCKPT1\\n``, a little-endian uint64 header length, a
JSON header, then one raw little-endian float32 blob. The header carries
the run config echo, phase, step, seeds, and the parameter ordering table
(name, shape, element offset), so identical bytes mean identical model.
Parameters are float64 in memory; storage rounds to float32.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError

_MAGIC = b"MDCKPT1\n"


def save_checkpoint(path, named_params, config_json: dict, phase: str,
                    step: int, seeds: dict | None = None) -> None:
    table = []
    blobs = []
    offset = 0
    for name, p in named_params:
        arr = np.asarray(p.data, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.reshape(-1))
        offset += arr.size
    header = {
        "format": "mocadet-checkpoint-v1",
        "phase": phase,
        "step": int(step),
        "seeds": seeds or {},
        "config": config_json,
        "params": table,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(payload)).tobytes())
        fh.write(payload)
        if blobs:
            fh.write(np.concatenate(blobs).tobytes())


def load_checkpoint(path):
    """Returns (header dict, {param name: float64 array})."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise CheckpointError(f"{path}: bad checkpoint magic")
            (length,) = np.frombuffer(fh.read(8), dtype="<u8")
            header = json.loads(fh.read(int(length)).decode("utf-8"))
            blob = np.frombuffer(fh.read(), dtype="<f4")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if header.get("format") != "mocadet-checkpoint-v1":
        raise CheckpointError(f"{path}: unknown checkpoint format")
    params = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        chunk = blob[start:start + size]
        if chunk.size != size:
            raise CheckpointError(f"{path}: truncated parameter {entry['name']!r}")
        params[entry["name"]] = chunk.astype(np.float64).reshape(entry["shape"])
    return header, params


def restore_params(named_params, stored: dict, *, allow_extra: bool = True) -> None:
    """Copy stored arrays into live parameters, matching by name.

    Every live parameter must be present with the right shape; extra stored
    entries (e.g. a pretraining-only head) are ignored when ``allow_extra``.
    """
    names = set()
    for name, p in named_params:
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = stored[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"parameter {name!r} shape {arr.shape} != live {p.data.shape}")
        p.data[...] = arr
        names.add(name)
    if not allow_extra:
        extra = set(stored) - names
        if extra:
            raise CheckpointError(f"unexpected checkpoint parameters: {sorted(extra)}")
