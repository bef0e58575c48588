"""Multi-resolution hash-grid encoding with trilinear interpolation."""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

DIAGNOSTICS: Counter = Counter()

# Spatial-hash primes from the instant-ngp grid; the first axis is left unscaled.
PRIMES = (1, 2654435761, 805459861)

_CORNERS = torch.tensor(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=torch.int64
)


class HashGridEncoding(nn.Module):
    """Encode points of the unit cube as ``n_levels * features`` values.

    Level ``l`` has resolution ``floor(min_res * b**l)`` with the growth
    factor ``b`` chosen so the last level reaches ``max_res``. Levels whose
    vertex count fits in the table are indexed densely, the rest through the
    spatial hash (collisions are tolerated).
    """

    def __init__(
        self,
        n_levels: int = 6,
        features: int = 4,
        log2_table_size: int = 14,
        min_res: int = 16,
        max_res: int = 256,
        init_scale: float = 1e-4,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if n_levels < 1 or features < 1:
            raise ValueError("n_levels and features must be positive")
        self.n_levels = n_levels
        self.features = features
        self.table_size = 2**log2_table_size
        if n_levels == 1:
            res = [min_res]
        else:
            growth = np.exp((np.log(max_res) - np.log(min_res)) / (n_levels - 1))
            res = [int(np.floor(min_res * growth**level + 1e-9)) for level in range(n_levels)]
        self.resolutions = res
        self.register_buffer("_res", torch.tensor(res, dtype=torch.float64), persistent=False)
        self.register_buffer(
            "_dense", torch.tensor([(r + 1) ** 3 <= self.table_size for r in res]), persistent=False
        )
        table = torch.empty(n_levels * self.table_size, features)
        table.uniform_(-init_scale, init_scale, generator=generator)
        self.table = nn.Parameter(table)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.features

    def corner_indices(self, cells: torch.Tensor) -> torch.Tensor:
        """Flat table indices of integer vertices, cells shaped (L, N, 8, 3)."""
        res = self._res.to(torch.int64).view(-1, 1, 1) + 1
        dense = cells[..., 0] + cells[..., 1] * res + cells[..., 2] * res * res
        hashed = (cells[..., 0] * PRIMES[0]) ^ (cells[..., 1] * PRIMES[1]) ^ (cells[..., 2] * PRIMES[2])
        idx = torch.where(self._dense.view(-1, 1, 1), dense, hashed) % self.table_size
        offset = torch.arange(self.n_levels, dtype=torch.int64).view(-1, 1, 1) * self.table_size
        return idx + offset

    def _level_indices(self, level: int, base: torch.Tensor) -> torch.Tensor:
        """(N, 8) indices for cells with lower corner ``base``; corner c = x + 2y + 4z."""
        r1 = self.resolutions[level] + 1
        if bool(self._dense[level]):
            axes = [(base[:, a, None] + torch.arange(2)) * r1**a for a in range(3)]
            idx = axes[2].view(-1, 2, 1, 1) + axes[1].view(-1, 1, 2, 1) + axes[0].view(-1, 1, 1, 2)
        else:
            axes = [(base[:, a, None] + torch.arange(2)) * PRIMES[a] for a in range(3)]
            idx = axes[2].view(-1, 2, 1, 1) ^ axes[1].view(-1, 1, 2, 1) ^ axes[0].view(-1, 1, 1, 2)
            idx = idx & (self.table_size - 1)
        return idx.reshape(-1, 8) + level * self.table_size

    def forward(self, x: torch.Tensor, frozen_copy: bool = False):
        """Encode ``x``; with ``frozen_copy`` also return the encoding under a detached table.

        The frozen copy still carries gradients with respect to ``x``, which
        is what a consumer that must not train the table but must stay
        differentiable in position (pose refinement) needs.
        """
        if x.shape[-1] != 3:
            raise ValueError(f"expected (..., 3) positions, got {tuple(x.shape)}")
        lead = x.shape[:-1]
        x = x.reshape(-1, 3)
        outside = (x < 0) | (x > 1)
        if bool(outside.any()):
            n_out = int(outside.any(dim=1).sum())
            DIAGNOSTICS["clamped_positions"] += n_out
            x = x.clamp(0.0, 1.0)
        outs, frozen = [], []
        for level, r in enumerate(self.resolutions):
            scaled = x * r
            base = torch.floor(scaled.detach()).clamp_max(r - 1)
            frac = scaled - base
            idx = self._level_indices(level, base.to(torch.int64))
            wa = [torch.stack([1 - frac[:, a], frac[:, a]], dim=1) for a in range(3)]
            w = (wa[2].view(-1, 2, 1, 1) * wa[1].view(-1, 1, 2, 1) * wa[0].view(-1, 1, 1, 2)).reshape(-1, 8, 1)
            vals = self.table.index_select(0, idx.reshape(-1)).view(-1, 8, self.features)
            outs.append((w * vals).sum(dim=1))
            if frozen_copy:
                frozen.append((w * vals.detach()).sum(dim=1))
        enc = torch.cat(outs, dim=-1).reshape(*lead, self.output_dim)
        if not frozen_copy:
            return enc
        return enc, torch.cat(frozen, dim=-1).reshape(*lead, self.output_dim)
