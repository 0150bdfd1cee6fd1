"""Single-file binary checkpoints.

Layout::

    magic    8 bytes  b"CMFCKPT\\0"
    version  uint32   little-endian
    hlen     uint64   length of the JSON header in bytes
    crc      uint32   CRC-32 of header + blob
    header   hlen bytes of UTF-8 JSON (sorted keys)
    blob     little-endian float64 arrays, concatenated

The header carries the model and training configs, an index of named arrays
(``name``, ``shape``, ``offset`` in elements) for parameters and optimiser
moments, the optimiser step counter and epoch counters. Writing the same state
twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CMRobertaModel, ModelConfig
from .tensor import ShapeError
from .train import AdamState

MAGIC = b"CMFCKPT\x00"
VERSION = 1
_FIXED = struct.Struct("<8sIQI")


class CheckpointError(Exception):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    train_config: dict | None = None
    counters: dict = field(default_factory=dict)

    def build_model(self) -> CMRobertaModel:
        model = CMRobertaModel(self.model_config)
        try:
            model.load_state_dict(self.params)
        except (KeyError, ShapeError) as e:
            raise CheckpointError(f"parameters do not fit the stored config: {e}") from e
        return model


def _index(arrays: list[tuple[str, np.ndarray]]) -> tuple[list[dict], int]:
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    return entries, offset


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = list(ckpt.params.items())
    if ckpt.adam is not None:
        arrays += [(f"adam.m.{k}", a) for k, a in ckpt.adam.m.items()]
        arrays += [(f"adam.v.{k}", a) for k, a in ckpt.adam.v.items()]
    entries, _ = _index(arrays)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "arrays": entries,
        "n_params": len(ckpt.params),
        "adam_step": None if ckpt.adam is None else ckpt.adam.t,
        "counters": ckpt.counters,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    crc = zlib.crc32(hbytes + blob)
    return _FIXED.pack(MAGIC, VERSION, len(hbytes), crc) + hbytes + blob


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _FIXED.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen, crc = _FIXED.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body = raw[_FIXED.size:]
    if hlen > len(body):
        raise CheckpointError("truncated header")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e
    data = np.frombuffer(body[hlen:], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > data.size:
            raise CheckpointError(f"array {e['name']} runs past the end of the file")
        arrays[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    names = [e["name"] for e in header["arrays"]]
    params = {k: arrays[k] for k in names[:header["n_params"]]}
    adam = None
    if header["adam_step"] is not None:
        adam = AdamState({k: arrays[f"adam.m.{k}"] for k in params},
                         {k: arrays[f"adam.v.{k}"] for k in params}, int(header["adam_step"]))
    return Checkpoint(config, params, adam, header.get("train_config"), header.get("counters") or {})


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
