"""Meta-dynamic generation of per-sample fusion weights.

Embedding pairs aligned by clock time are scored by neural tensor networks,
the concatenated scores go through one affine layer and a softmax, and the
resulting weights fuse the ``4K + 2`` drift-embedding entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError

PAIR_KINDS = ("x", "y", "xy")


@dataclass
class PairSet:
    pairs: list[tuple[torch.Tensor, torch.Tensor]]
    kinds: list[str]

    def __len__(self) -> int:
        return len(self.pairs)


def pair_count(K: int) -> int:
    return 3 * K - 2


def build_pairs(Z_list: Sequence[torch.Tensor], K: int) -> PairSet:
    """``Z_list`` is ``[Z_t, Z(t-P1), Z(t+a-P1), ..., Z(t-PK), Z(t+a-PK)]``.

    Produces the x-pairs ``(Z_t, Z(t-P1))`` and ``(Z(t-Pk), Z(t-P(k+1)))``,
    then the y-pairs over the ``t+a-Pk`` entries, then the xy-pairs over their
    channel-wise concatenations, with ``k`` running over ``1..K-1``.
    """
    if K < 1:
        raise ConfigurationError(f"pair construction needs K >= 1, got {K}")
    if len(Z_list) != 2 * K + 1:
        raise ShapeError(f"expected {2 * K + 1} embeddings for K={K}, got {len(Z_list)}")
    z_t = Z_list[0]
    past = [Z_list[2 * k - 1] for k in range(1, K + 1)]
    after = [Z_list[2 * k] for k in range(1, K + 1)]

    pairs = [(z_t, past[0])]
    kinds = ["x"]
    for k in range(K - 1):
        pairs.append((past[k], past[k + 1]))
        kinds.append("x")
    for k in range(K - 1):
        pairs.append((after[k], after[k + 1]))
        kinds.append("y")
    for k in range(K - 1):
        left = torch.cat([past[k], after[k]], dim=-1)
        right = torch.cat([past[k + 1], after[k + 1]], dim=-1)
        pairs.append((left, right))
        kinds.append("xy")
    return PairSet(pairs, kinds)


class NeuralTensorNetwork(nn.Module):
    """``tanh(z_i^T W_S[:, :, s] z_j + V [z_i, z_j] + b_S)`` for ``s < N_s``.

    Inputs are ``(..., N, d)`` node embeddings, mean-pooled over nodes first.
    """

    def __init__(self, d: int, N_s: int):
        super().__init__()
        self.d, self.N_s = d, N_s
        self.W_S = nn.Parameter(torch.empty(d, d, N_s))
        self.V = nn.Parameter(torch.empty(N_s, 2 * d))
        self.b_S = nn.Parameter(torch.zeros(N_s))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.uniform_(self.W_S, -1.0 / self.d, 1.0 / self.d)
        bound = 1.0 / math.sqrt(2 * self.d)
        nn.init.uniform_(self.V, -bound, bound)
        nn.init.zeros_(self.b_S)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        if left.shape != right.shape or left.shape[-1] != self.d:
            raise ShapeError(f"pair shapes {tuple(left.shape)}, {tuple(right.shape)} do not match d={self.d}")
        zi = left.mean(dim=-2)
        zj = right.mean(dim=-2)
        bilinear = torch.einsum("...i,ijs,...j->...s", zi, self.W_S, zj)
        linear = torch.cat([zi, zj], dim=-1) @ self.V.T
        return torch.tanh(bilinear + linear + self.b_S)


def ntn_similarity(left: torch.Tensor, right: torch.Tensor, ntn: NeuralTensorNetwork) -> torch.Tensor:
    return ntn(left, right)


class MetaWeightGenerator(nn.Module):
    """Affine map from concatenated similarity scores to ``4K + 2`` softmax weights."""

    def __init__(self, K: int, N_s: int):
        super().__init__()
        self.K, self.N_s = K, N_s
        self.in_features = pair_count(K) * N_s
        self.out_features = 4 * K + 2
        self.linear = nn.Linear(self.in_features, self.out_features)

    def logits(self, sims: torch.Tensor) -> torch.Tensor:
        if sims.shape[-1] != self.in_features:
            raise ShapeError(f"meta input length {sims.shape[-1]} != {self.in_features}")
        return self.linear(sims)

    def forward(self, sims: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(sims), dim=-1)


def meta_weights(sims: torch.Tensor, meta: MetaWeightGenerator) -> torch.Tensor:
    return meta(sims)


class DriftAdaptor(nn.Module):
    """Pairs -> NTN scores -> meta layer -> fusion weights."""

    def __init__(self, K: int, C_e: int, N_s: int = 5, share_xy: bool = False):
        super().__init__()
        if K < 1:
            raise ConfigurationError(f"the drift adaptor needs K >= 1, got {K}")
        self.K = K
        self.share_xy = share_xy
        self.ntn_x = NeuralTensorNetwork(C_e, N_s)
        self.ntn_y = None if share_xy else NeuralTensorNetwork(C_e, N_s)
        self.ntn_xy = NeuralTensorNetwork(2 * C_e, N_s)
        self.meta = MetaWeightGenerator(K, N_s)

    def ntn_for(self, kind: str) -> NeuralTensorNetwork:
        if kind == "x" or (kind == "y" and self.share_xy):
            return self.ntn_x
        return self.ntn_y if kind == "y" else self.ntn_xy

    def similarities(self, Z_list: Sequence[torch.Tensor]) -> torch.Tensor:
        pairs = build_pairs(Z_list, self.K)
        sims = [self.ntn_for(kind)(left, right) for (left, right), kind in zip(pairs.pairs, pairs.kinds)]
        return torch.cat(sims, dim=-1)

    def forward(self, Z_list: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.meta(self.similarities(Z_list))


class StaticFusionWeights(nn.Module):
    """A learnable weight vector shared by every sample, initialised uniform."""

    def __init__(self, n: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((n,), 1.0 / n))

    def forward(self, batch_shape: torch.Size) -> torch.Tensor:
        return self.weight.expand(*batch_shape, -1)


class EmbeddingMetaWeights(nn.Module):
    """Weights from an affine map on the node- and segment-pooled embeddings."""

    def __init__(self, C_e: int, n: int):
        super().__init__()
        self.in_features = C_e
        self.linear = nn.Linear(C_e, n)

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        # E: (..., 2K+1, N, C_e)
        return torch.softmax(self.linear(E.mean(dim=(-3, -2))), dim=-1)


def fuse(H: Sequence[torch.Tensor] | torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """``sum_i W[..., i] * H[i]`` with one scalar weight per entry.

    ``H`` is a list of ``(..., N, C_e)`` tensors or one stacked
    ``(..., n, N, C_e)`` tensor; ``W`` is ``(..., n)``.
    """
    if not isinstance(H, torch.Tensor):
        if len(H) != W.shape[-1]:
            raise ShapeError(f"{len(H)} embeddings but {W.shape[-1]} weights")
        H = torch.stack(list(H), dim=-3)
    if H.shape[-3] != W.shape[-1]:
        raise ShapeError(f"{H.shape[-3]} embeddings but {W.shape[-1]} weights")
    return (W[..., :, None, None] * H).sum(dim=-3)
