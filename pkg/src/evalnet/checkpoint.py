"""Binary checkpoint archive.

Layout: 8-byte magic ``EVCKPT01``, a little-endian u32 manifest length, the
UTF-8 JSON manifest, then the float32 little-endian parameter blobs. Each
manifest tensor entry carries ``offset`` and ``len`` in bytes, measured from
the first byte after the manifest.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import EvalNet, ModelConfig

MAGIC = b"EVCKPT01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    stage: int
    epoch: int
    validation_rmse_log: float
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    norm_stats: Optional[dict] = None

    @classmethod
    def from_model(cls, model: EvalNet, stage: int, epoch: int, rmse: float, norm_stats=None) -> "Checkpoint":
        tensors = {k: v.astype("<f4", copy=True) for k, v in model.state_dict().items()}
        return cls(stage, epoch, float(rmse), model.config, tensors, norm_stats)

    def manifest(self) -> dict:
        entries = []
        offset = 0
        for name, arr in self.tensors.items():
            nbytes = arr.size * 4
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": nbytes})
            offset += nbytes
        manifest = {
            "format_version": FORMAT_VERSION,
            "stage": self.stage,
            "epoch": self.epoch,
            "validation_rmse_log": self.validation_rmse_log,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "tensors": entries,
        }
        if self.norm_stats is not None:
            manifest["norm_stats"] = self.norm_stats
        return manifest

    def build_model(self) -> EvalNet:
        model = EvalNet(self.config)
        model.load_state_dict(self.tensors)
        return model

    def parameter_count(self) -> int:
        return sum(a.size for a in self.tensors.values())


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.manifest(), separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.tensors.values())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an EVCKPT01 checkpoint")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + mlen > len(blob):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config: {exc}") from exc

    base = 12 + mlen
    tensors: dict[str, np.ndarray] = {}
    entries = manifest.get("tensors")
    if not isinstance(entries, list) or not all(isinstance(e, dict) and {"name", "shape", "offset", "len"} <= set(e) for e in entries):
        raise CheckpointError("manifest tensor table is missing or malformed")
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if entry["len"] != count * 4:
            raise CheckpointError(f"{entry['name']}: length {entry['len']} does not match shape {shape}")
        start = base + entry["offset"]
        if start + entry["len"] > len(blob):
            raise CheckpointError(f"truncated blob for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()

    expected = {name: p.shape for name, p in EvalNet(config).named_parameters()}
    for name, arr in tensors.items():
        if name not in expected or expected[name] != arr.shape:
            raise CheckpointError(f"tensor {name} {arr.shape} does not fit the manifest config")
    if set(expected) != set(tensors):
        raise CheckpointError(f"missing tensors: {sorted(set(expected) - set(tensors))}")
    return Checkpoint(
        stage=int(manifest["stage"]),
        epoch=int(manifest["epoch"]),
        validation_rmse_log=float(manifest["validation_rmse_log"]),
        config=config,
        tensors=tensors,
        norm_stats=manifest.get("norm_stats"),
    )


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def save_model(model: EvalNet, path, stage: int, epoch: int, rmse: float, norm_stats=None) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, stage, epoch, rmse, norm_stats)
    save_checkpoint(ckpt, path)
    return ckpt


def load_model(path) -> tuple[EvalNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt
