"""Prototype memory queried by softmax attention."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ShapeError


class PatternMemory(nn.Module):
    """``L`` trainable ``D``-dimensional prototypes.

    Each ``C_e``-wide row of the query tensor is projected to ``D``, scored
    against every prototype by a raw dot product, and the softmax-weighted
    prototype mix is projected back to ``C_e``.
    """

    def __init__(self, L: int, D: int, C_e: int, seed: int | None = None):
        super().__init__()
        if min(L, D, C_e) <= 0:
            raise ValueError(f"L, D and C_e must be positive, got {(L, D, C_e)}")
        self.L, self.D, self.C_e = L, D, C_e
        self.M = nn.Parameter(torch.empty(L, D))
        self.W_Q = nn.Parameter(torch.empty(C_e, D))
        self.b_Q = nn.Parameter(torch.empty(D))
        self.W_V = nn.Parameter(torch.empty(D, C_e))
        self.b_V = nn.Parameter(torch.empty(C_e))
        self.frozen = False
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
        for param, fan_in in (
            (self.M, self.D),
            (self.W_Q, self.C_e),
            (self.b_Q, self.C_e),
            (self.W_V, self.D),
            (self.b_V, self.D),
        ):
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                param.copy_(torch.rand(param.shape, generator=gen, dtype=param.dtype) * 2 * bound - bound)

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        for param in self.parameters():
            param.requires_grad_(not frozen)

    def attention(self, E: torch.Tensor) -> torch.Tensor:
        if E.shape[-1] != self.C_e:
            raise ShapeError(f"query width {E.shape[-1]} != C_e={self.C_e}")
        Q = E @ self.W_Q + self.b_Q
        return torch.softmax(Q @ self.M.T, dim=-1)

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        phi = self.attention(E)
        return (phi @ self.M) @ self.W_V + self.b_V


def pm_init(L: int, D: int, C_e: int, seed: int = 0) -> PatternMemory:
    return PatternMemory(L, D, C_e, seed)


def pm_query(pm: PatternMemory, E_seg: torch.Tensor) -> torch.Tensor:
    """Query with a ``(N, C_e)`` segment embedding (or any batch of them)."""
    return pm(E_seg)
