"""Flat named-tensor checkpoint container.

Layout (documented contract, little-endian throughout):

    bytes 0..7    magic ``MVCKPT01``
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON: {"meta": {...}, "tensors": {name: entry}}
                  entry = {"dtype": numpy dtype string, "shape": [...],
                           "offset": int, "nbytes": int}
    payload       raw tensor bytes at the stated offsets

``meta`` carries the model configuration; ``config_hash`` of that mapping is
what dependent checkpoints pin themselves to.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVCKPT01"


def config_hash(meta: dict) -> str:
    """Stable digest of a JSON-serializable configuration mapping."""
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: str | Path, tensors: dict, meta: dict) -> None:
    arrays = {}
    shapes = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        value = np.asarray(value)
        shapes[name] = list(value.shape)  # ascontiguousarray promotes 0-d to 1-d
        arrays[name] = np.ascontiguousarray(value)

    entries = {}
    offset = 0
    for name, arr in arrays.items():
        entries[name] = {
            "dtype": arr.dtype.name,
            "shape": shapes[name],
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode())
        payload = f.read()

    tensors = {}
    for name, entry in header["tensors"].items():
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[name] = arr.copy()
    return tensors, header["meta"]


def state_dict_to_tensors(state_dict: dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def tensors_to_state_dict(tensors: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
