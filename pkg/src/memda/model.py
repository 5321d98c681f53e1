"""Forecasting model with the five ablation variants.

========  ===================================================================
backbone  encoder + decoder on the latest segment only
rm        periodic look-back segments from replay memory, static fusion
rm_pm     rm plus pattern-memory queries, static fusion over 4K+2 entries
meta      rm_pm with weights from an affine map on pooled embeddings
memda     rm_pm with weights from pair similarities (NTN + meta layer)
========  ===================================================================
"""
from __future__ import annotations

import torch
from torch import nn

from .adaptor import DriftAdaptor, EmbeddingMetaWeights, StaticFusionWeights, fuse
from .backbones import DecoderSpec, EncoderSpec, ProjectionDecoder, SegmentEncoder, build_encoder
from .errors import ConfigurationError, ShapeError
from .pattern import PatternMemory

VARIANTS = ("backbone", "rm", "rm_pm", "meta", "memda")


class InstanceNorm(nn.Module):
    """Per-sample, per-node normalization of the input window that is undone
    on the forecast, with a learnable affine map per channel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def normalize(self, x):
        mean = x.mean(dim=-3, keepdim=True).detach()
        std = torch.sqrt(x.var(dim=-3, keepdim=True, unbiased=False) + self.eps).detach()
        return (x - mean) / std * self.weight + self.bias, (mean, std)

    def denormalize(self, y, stats):
        mean, std = stats
        return (y - self.bias) / (self.weight + self.eps * self.eps) * std + mean


class MemDAModel(nn.Module):
    def __init__(
        self,
        variant: str,
        encoder: SegmentEncoder,
        decoder: ProjectionDecoder,
        K: int,
        L: int = 20,
        D: int = 32,
        N_s: int = 5,
        share_xy_ntn: bool = False,
        revin: bool = False,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        if variant != "backbone" and K < 1:
            raise ConfigurationError(f"variant {variant!r} needs K >= 1")
        if revin and variant != "backbone":
            raise ConfigurationError("instance normalization is only wired for the backbone variant")
        self.variant = variant
        self.K = 0 if variant == "backbone" else K
        self.alpha = encoder.alpha
        self.C_e = encoder.C_e
        self.encoder = encoder
        self.decoder = decoder
        self.revin = InstanceNorm(encoder.in_channels) if revin else None
        self.pattern_memory = PatternMemory(L, D, self.C_e) if variant in ("rm_pm", "meta", "memda") else None

        n_segments = 2 * self.K + 1
        self.n_entries = n_segments * (2 if self.pattern_memory is not None else 1)
        self.weights: nn.Module | None
        if variant in ("rm", "rm_pm"):
            self.weights = StaticFusionWeights(self.n_entries)
        elif variant == "meta":
            self.weights = EmbeddingMetaWeights(self.C_e, self.n_entries)
        elif variant == "memda":
            self.weights = DriftAdaptor(self.K, self.C_e, N_s, share_xy=share_xy_ntn)
        else:
            self.weights = None

    @property
    def uses_history(self) -> bool:
        return self.K > 0

    @property
    def weight_input_dim(self) -> int | None:
        if isinstance(self.weights, DriftAdaptor):
            return self.weights.meta.in_features
        if isinstance(self.weights, EmbeddingMetaWeights):
            return self.weights.in_features
        return None

    def encode(self, segment: torch.Tensor) -> torch.Tensor:
        return self.encoder(segment)

    def fusion_weights(self, E: torch.Tensor) -> torch.Tensor:
        """``E``: ``(B, 2K+1, N, C_e)`` -> ``(B, n_entries)``."""
        if isinstance(self.weights, StaticFusionWeights):
            return self.weights(E.shape[:-3])
        if isinstance(self.weights, EmbeddingMetaWeights):
            return self.weights(E)
        return self.weights(list(E.unbind(dim=-3)))

    def head(self, z_t: torch.Tensor, replay: torch.Tensor | None = None):
        """Forecast from the live embedding ``(B, N, C_e)`` and the replayed
        look-back embeddings ``(B, 2K, N, C_e)``.

        Returns ``(forecast (B, alpha, N, C), weights (B, n_entries) or None)``.
        """
        if not self.uses_history:
            return self.decoder(z_t), None
        if replay is None or replay.shape[-3] != 2 * self.K:
            raise ShapeError(f"expected {2 * self.K} replayed embeddings")
        E = torch.cat([z_t.unsqueeze(-3), replay], dim=-3)
        H = E
        if self.pattern_memory is not None:
            H = torch.cat([E, self.pattern_memory(E)], dim=-3)
        W = self.fusion_weights(E)
        return self.decoder(fuse(H, W)), W

    def forward(self, x_t: torch.Tensor, replay: torch.Tensor | None = None):
        """Replay-memory path: only ``x_t`` ``(B, alpha, N, C)`` is encoded."""
        stats = None
        if self.revin is not None:
            x_t, stats = self.revin.normalize(x_t)
        pred, W = self.head(self.encode(x_t), replay)
        if stats is not None:
            pred = self.revin.denormalize(pred, stats)
        return pred, W

    def forward_plain(self, segments: torch.Tensor):
        """Multi-branch path: every one of the ``2K+1`` raw segments
        ``(B, 2K+1, alpha, N, C)`` is encoded live."""
        if not self.uses_history:
            return self.forward(segments[:, 0])
        Z = self.encode(segments)
        return self.head(Z[:, 0], Z[:, 1:])


def build_model(
    variant: str,
    alpha: int,
    in_channels: int,
    K: int = 2,
    encoder: EncoderSpec | None = None,
    decoder: DecoderSpec | None = None,
    L: int = 20,
    D: int = 32,
    N_s: int = 5,
    share_xy_ntn: bool = False,
    revin: bool = False,
) -> MemDAModel:
    encoder = encoder or EncoderSpec()
    decoder = decoder or DecoderSpec()
    enc = build_encoder(encoder, alpha, in_channels)
    dec = ProjectionDecoder(encoder.C_e, alpha, in_channels, decoder.hidden_width, decoder.depth)
    return MemDAModel(variant, enc, dec, K, L=L, D=D, N_s=N_s, share_xy_ntn=share_xy_ntn, revin=revin)
