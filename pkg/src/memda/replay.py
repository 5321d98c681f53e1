"""Timestamp-indexed cache of segment embeddings.

Training mode keeps one entry per timestamp for the whole training range and
tags each entry with the epoch that wrote it. Rolling mode keeps only the
``capacity`` most recent writes (``p * K`` at test time) and evicts the
oldest write first.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .errors import ConfigurationError, MemoryMissError, ShapeError

TRAINING = "training"
ROLLING = "rolling"

MAGIC = b"MEMDA-RM"
FORMAT_VERSION = 1
_RECORD_HEADER = struct.Struct("<qII")


class ReplayMemory:
    def __init__(self, mode: str = TRAINING, capacity: int | None = None):
        if mode not in (TRAINING, ROLLING):
            raise ConfigurationError(f"unknown replay mode {mode!r}")
        if mode == ROLLING and (capacity is None or capacity <= 0):
            raise ConfigurationError(f"rolling replay memory needs a positive capacity, got {capacity}")
        self.mode = mode
        self.capacity = capacity if mode == ROLLING else None
        self._store: OrderedDict[int, torch.Tensor] = OrderedDict()
        self._epoch: dict[int, int] = {}
        self._shape: tuple[int, int] | None = None
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, t: int) -> bool:
        return t in self._store

    def keys(self) -> list[int]:
        return list(self._store)

    def items(self) -> Iterator[tuple[int, torch.Tensor]]:
        return iter(self._store.items())

    def epoch_of(self, t: int) -> int | None:
        return self._epoch.get(t)

    def write(self, t: int, z: torch.Tensor, epoch: int = 0) -> None:
        if z.ndim != 2:
            raise ShapeError(f"embedding must be (N, C_e), got shape {tuple(z.shape)}")
        if self._shape is None:
            self._shape = tuple(z.shape)
        elif tuple(z.shape) != self._shape:
            raise ShapeError(f"embedding shape {tuple(z.shape)} differs from stored {self._shape}")
        t = int(t)
        if t in self._store:
            del self._store[t]
        self._store[t] = z.detach().clone()
        self._epoch[t] = epoch
        if self.mode == ROLLING:
            while len(self._store) > self.capacity:
                old, _ = self._store.popitem(last=False)
                del self._epoch[old]
                self.evictions += 1

    def read(self, t: int) -> torch.Tensor | None:
        """Stored embedding for ``t`` or ``None``; never fabricates a value."""
        return self._store.get(int(t))

    def gather(
        self,
        t: int,
        alpha: int,
        p: int,
        K: int,
        fallback_encoder: Callable[[int], torch.Tensor] | None = None,
        epoch: int = 0,
    ) -> list[torch.Tensor]:
        """Look-back embeddings ``[Z(t-P1), Z(t+a-P1), ..., Z(t-PK), Z(t+a-PK)]``.

        Missing entries are computed by ``fallback_encoder(end_index)`` without
        gradient tracking and written back.
        """
        out = []
        for k in range(1, K + 1):
            for s in (t - p * k, t + alpha - p * k):
                z = self.read(s)
                if z is None:
                    if fallback_encoder is None:
                        raise MemoryMissError(f"no replay entry for timestamp {s} and no fallback encoder")
                    with torch.no_grad():
                        z = fallback_encoder(s)
                    self.write(s, z, epoch)
                    z = self.read(s)
                out.append(z)
        return out

    # -- checkpoint ----------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(MAGIC)
            fh.write(bytes([FORMAT_VERSION]))
            for t, z in self._store.items():
                n, c = z.shape
                fh.write(_RECORD_HEADER.pack(t, n, c))
                fh.write(z.detach().cpu().numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, mode: str = TRAINING, capacity: int | None = None) -> "ReplayMemory":
        blob = Path(path).read_bytes()
        if blob[:len(MAGIC)] != MAGIC:
            raise ValueError(f"{path} is not a replay memory dump")
        version = blob[len(MAGIC)]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported replay memory format version {version}")
        rm = cls(mode, capacity)
        pos = len(MAGIC) + 1
        while pos < len(blob):
            t, n, c = _RECORD_HEADER.unpack_from(blob, pos)
            pos += _RECORD_HEADER.size
            payload = np.frombuffer(blob, dtype="<f4", count=n * c, offset=pos).reshape(n, c)
            pos += 4 * n * c
            rm.write(t, torch.from_numpy(payload.copy()))
        return rm


def rm_init(mode: str = TRAINING, capacity: int | None = None) -> ReplayMemory:
    return ReplayMemory(mode, capacity)


def rm_write(rm: ReplayMemory, t: int, z: torch.Tensor, epoch: int = 0) -> None:
    rm.write(t, z, epoch)


def rm_read(rm: ReplayMemory, t: int) -> torch.Tensor | None:
    return rm.read(t)


def rm_gather(rm: ReplayMemory, t: int, alpha: int, p: int, K: int, fallback_encoder=None, epoch: int = 0):
    return rm.gather(t, alpha, p, K, fallback_encoder, epoch)
