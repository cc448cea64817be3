import math

import numpy as np
import torch
import torch.nn as nn


def fourier_embed(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """concat(sin(2πWx), cos(2πWx)) for x (B, in_dim) and W (fourier_dim / 2, in_dim)."""
    proj = 2.0 * math.pi * x @ table.T
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class GaussianFourierEmbedding(nn.Module):
    """Random Fourier features with a frozen Gaussian frequency table."""

    def __init__(self, in_dim: int, fourier_dim: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("table", torch.randn(fourier_dim // 2, in_dim) * scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x[:, None]
        return fourier_embed(x.to(self.table.dtype), self.table)


def _sincos_1d(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(embed_dim // 2, dtype=np.float64)
    omega /= embed_dim / 2.0
    omega = 1.0 / 10000**omega
    out = np.einsum("m,d->md", pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d_table(embed_dim: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """(grid_h * grid_w, embed_dim) fixed 2D sine-cosine positions, row-major over the grid."""
    gy, gx = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(embed_dim // 2, gy), _sincos_1d(embed_dim // 2, gx)], axis=1)
    return torch.from_numpy(emb).float()
