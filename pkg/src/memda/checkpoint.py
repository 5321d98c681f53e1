"""Versioned binary checkpoint for the whole model.

Layout: ``MEMDA-CK``, one version byte, a little-endian uint32 header length,
a UTF-8 JSON header, then raw little-endian tensor payloads in header order.
Parameters are grouped as ``encoder``, ``pattern-memory``, ``adaptor`` and
``decoder``; normalization statistics travel in a ``normalization`` group.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, build_variant
from .data import NormalizationStats
from .model import MemDAModel

MAGIC = b"MEMDA-CK"
FORMAT_VERSION = 1

_GROUPS = {
    "encoder": "encoder",
    "revin": "encoder",
    "pattern_memory": "pattern-memory",
    "weights": "adaptor",
    "decoder": "decoder",
}


def parameter_group(name: str) -> str:
    return _GROUPS[name.split(".", 1)[0]]


def _entries(model: MemDAModel, stats: NormalizationStats | None):
    for name, tensor in model.state_dict().items():
        yield name, parameter_group(name), tensor.detach().cpu().numpy()
    if stats is not None:
        yield "normalization.mean", "normalization", np.asarray(stats.mean, dtype=np.float64)
        yield "normalization.std", "normalization", np.asarray(stats.std, dtype=np.float64)


def checkpoint_bytes(model: MemDAModel, config: TrainConfig, stats: NormalizationStats | None = None, extra: dict | None = None) -> bytes:
    tensors, payloads = [], []
    offset = 0
    for name, group, array in _entries(model, stats):
        dtype = array.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        tensors.append({"name": name, "group": group, "shape": list(array.shape), "dtype": dtype.str, "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": config.to_dict(), "variant": model.variant, "tensors": tensors, "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(header)) + header + b"".join(payloads)


def save_checkpoint(path: str | Path, model: MemDAModel, config: TrainConfig, stats: NormalizationStats | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, config, stats, extra))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a memda checkpoint")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (length,) = struct.unpack_from("<I", blob, len(MAGIC) + 1)
    start = len(MAGIC) + 5
    header = json.loads(blob[start:start + length].decode("utf-8"))
    base = start + length
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path, in_channels: int | None = None) -> tuple[MemDAModel, TrainConfig, NormalizationStats | None, dict]:
    header, arrays = read_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    if in_channels is None:
        in_channels = _channels_from(arrays, config)
    model = build_variant(config, in_channels)
    state = {k: torch.from_numpy(v) for k, v in arrays.items() if not k.startswith("normalization.")}
    model.load_state_dict(state)
    stats = None
    if "normalization.mean" in arrays:
        stats = NormalizationStats(mean=arrays["normalization.mean"], std=arrays["normalization.std"])
    return model, config, stats, header.get("extra", {})


def _channels_from(arrays: dict[str, np.ndarray], config: TrainConfig) -> int:
    weights = [k for k in arrays if k.startswith("decoder.net.") and k.endswith(".weight")]
    last = max(weights, key=lambda k: int(k.split(".")[2]))
    return arrays[last].shape[0] // config.alpha
