"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic b"NNCK"
    bytes 4..7    format version, uint32
    bytes 8..15   header length in bytes, uint64
    ...           header: UTF-8 JSON with sorted keys
    ...           payload: tensor data, concatenated in header order

The header holds the config snapshot, the optimizer step counter, and one
entry per tensor: {"name", "shape", "dtype", "offset", "nbytes"}. Tensors are
stored C-order as little-endian float64 ("<f8"). Optimizer moment tensors are
stored alongside parameters under the reserved prefixes "adam.m." / "adam.v.".
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NNCK"
FORMAT_VERSION = 1
_DTYPE = "<f8"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    optimizer_step: int
    version: int = FORMAT_VERSION

    def optimizer_state(self, param_names: list[str]) -> dict | None:
        if all(f"adam.m.{n}" in self.tensors for n in param_names):
            return {
                "step": self.optimizer_step,
                "m": {n: self.tensors[f"adam.m.{n}"] for n in param_names},
                "v": {n: self.tensors[f"adam.v.{n}"] for n in param_names},
            }
        return None


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                    config: dict | None = None,
                    optimizer: dict | None = None) -> None:
    all_tensors = dict(tensors)
    step = 0
    if optimizer is not None:
        step = int(optimizer["step"])
        for name, arr in optimizer["m"].items():
            all_tensors[f"adam.m.{name}"] = arr
        for name, arr in optimizer["v"].items():
            all_tensors[f"adam.v.{name}"] = arr

    entries = []
    offset = 0
    blobs = []
    for name in sorted(all_tensors):
        arr = np.ascontiguousarray(all_tensors[name], dtype=np.float64)
        blob = arr.astype(_DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _DTYPE,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({
        "config": config or {},
        "optimizer_step": step,
        "tensors": entries,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    header = json.loads(data[16:16 + header_len].decode("utf-8"))
    payload = data[16 + header_len:]

    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(tensors=tensors, config=header["config"],
                      optimizer_step=header["optimizer_step"], version=version)
