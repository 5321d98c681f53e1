"""Segment encoders and the projection decoder.

Encoders map a ``(..., alpha, N, C)`` segment to a ``(..., N, C_e)``
embedding. Nodes are encoded independently, with no spatial mixing.
"""
from __future__ import annotations

import difflib
import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError


@dataclass
class EncoderSpec:
    kind: str = "temporal-conv"
    C_e: int = 64
    depth: int = 3
    options: dict = field(default_factory=dict)


@dataclass
class DecoderSpec:
    hidden_width: int = 128
    depth: int = 2


class SegmentEncoder(nn.Module):
    """Base class: checks shapes, folds nodes into the batch and counts calls.

    ``calls`` grows by the number of segments encoded, so one batched call on
    ``B`` segments counts ``B``.
    """

    def __init__(self, alpha: int, in_channels: int, C_e: int):
        super().__init__()
        self.alpha, self.in_channels, self.C_e = alpha, in_channels, C_e
        self.calls = 0

    def forward(self, segment: torch.Tensor) -> torch.Tensor:
        if segment.ndim < 3 or segment.shape[-3] != self.alpha or segment.shape[-1] != self.in_channels:
            raise ShapeError(
                f"segment shape {tuple(segment.shape)} does not end in (alpha={self.alpha}, N, C={self.in_channels})"
            )
        lead = segment.shape[:-3]
        n_nodes = segment.shape[-2]
        self.calls += math.prod(lead)
        # (..., alpha, N, C) -> (B*N, C, alpha)
        x = segment.reshape(-1, self.alpha, n_nodes, self.in_channels)
        x = x.permute(0, 2, 3, 1).reshape(-1, self.in_channels, self.alpha)
        z = self.encode_nodes(x)
        return z.reshape(*lead, n_nodes, self.C_e)

    def encode_nodes(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class GatedDilatedBlock(nn.Module):
    def __init__(self, width: int, kernel_size: int, dilation: int):
        super().__init__()
        self.pad = (kernel_size - 1) * dilation
        self.filter = nn.Conv1d(width, width, kernel_size, dilation=dilation)
        self.gate = nn.Conv1d(width, width, kernel_size, dilation=dilation)
        self.residual = nn.Conv1d(width, width, 1)

    def forward(self, x):
        h = nn.functional.pad(x, (self.pad, 0))
        h = torch.tanh(self.filter(h)) * torch.sigmoid(self.gate(h))
        return x + self.residual(h)


class TemporalConvEncoder(SegmentEncoder):
    """WaveNet-style stack of causal gated convolutions with dilations
    1, 2, 4, ..., closed by a convolution spanning the whole segment."""

    def __init__(self, alpha: int, in_channels: int, C_e: int, depth: int = 3, width: int = 32, kernel_size: int = 2):
        super().__init__(alpha, in_channels, C_e)
        self.start = nn.Conv1d(in_channels, width, 1)
        self.blocks = nn.ModuleList(GatedDilatedBlock(width, kernel_size, 2 ** i) for i in range(depth))
        self.collapse = nn.Conv1d(width, C_e, alpha)

    def encode_nodes(self, x):
        h = self.start(x)
        for block in self.blocks:
            h = block(h)
        return self.collapse(h).squeeze(-1)


class RecurrentEncoder(SegmentEncoder):
    """GRU over the segment; the last hidden state is the embedding."""

    def __init__(self, alpha: int, in_channels: int, C_e: int, depth: int = 1):
        super().__init__(alpha, in_channels, C_e)
        self.gru = nn.GRU(in_channels, C_e, num_layers=depth, batch_first=True)

    def encode_nodes(self, x):
        _, h = self.gru(x.transpose(1, 2))
        return h[-1]


class ProjectionDecoder(nn.Module):
    """Pointwise layers ``C_e -> hidden -> ... -> alpha * C`` applied per node."""

    def __init__(self, C_e: int, alpha: int, out_channels: int, hidden_width: int = 128, depth: int = 2):
        super().__init__()
        if depth < 2:
            raise ConfigurationError(f"decoder depth must be >= 2, got {depth}")
        self.C_e, self.alpha, self.out_channels = C_e, alpha, out_channels
        layers: list[nn.Module] = [nn.Linear(C_e, hidden_width)]
        for _ in range(depth - 2):
            layers += [nn.ReLU(), nn.Linear(hidden_width, hidden_width)]
        layers += [nn.ReLU(), nn.Linear(hidden_width, alpha * out_channels)]
        self.net = nn.Sequential(*layers)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.ndim < 2 or fused.shape[-1] != self.C_e:
            raise ShapeError(f"decoder input {tuple(fused.shape)} does not end in C_e={self.C_e}")
        out = self.net(fused)
        out = out.reshape(*fused.shape[:-1], self.alpha, self.out_channels)
        # (..., N, alpha, C) -> (..., alpha, N, C)
        return out.transpose(-3, -2)


def encode(segment: torch.Tensor, encoder: SegmentEncoder) -> torch.Tensor:
    return encoder(segment)


def decode(fused: torch.Tensor, decoder: ProjectionDecoder) -> torch.Tensor:
    return decoder(fused)


EncoderFactory = Callable[..., SegmentEncoder]


def _temporal_conv(alpha: int, in_channels: int, C_e: int, depth: int = 3, **options) -> SegmentEncoder:
    return TemporalConvEncoder(alpha, in_channels, C_e, depth=depth, **options)


def _recurrent(alpha: int, in_channels: int, C_e: int, depth: int = 1, **options) -> SegmentEncoder:
    return RecurrentEncoder(alpha, in_channels, C_e, depth=depth, **options)


BACKBONES: dict[str, EncoderFactory] = {
    "temporal-conv": _temporal_conv,
    "recurrent": _recurrent,
}


def backbone_registry(name: str) -> EncoderFactory:
    try:
        return BACKBONES[name]
    except KeyError:
        close = difflib.get_close_matches(name, BACKBONES, n=1)
        hint = f" (did you mean {close[0]!r}?)" if close else ""
        raise ConfigurationError(
            f"unknown backbone {name!r}{hint}; available: {', '.join(sorted(BACKBONES))}"
        ) from None


def build_encoder(spec: EncoderSpec, alpha: int, in_channels: int) -> SegmentEncoder:
    return backbone_registry(spec.kind)(alpha, in_channels, spec.C_e, depth=spec.depth, **spec.options)
