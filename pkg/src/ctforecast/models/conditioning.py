"""Conditioning pathways: shared MLP encodings, FiLM modulation, and
sinusoidal timestep embeddings."""

import math

import torch
import torch.nn as nn


class ConditioningMLP(nn.Module):
    """Small shared MLP projecting a conditioning vector to an embedding."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class FiLM(nn.Module):
    """Channel-wise feature modulation: x * (1 + dgamma) + beta.

    The head predicts (dgamma, beta) from the conditioning embedding; with a
    zeroed head the layer is the identity, so a modulated residual block
    degrades gracefully to its unconditioned form.
    """

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.head = nn.Linear(embed_dim, 2 * channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        dgamma, beta = self.head(emb).chunk(2, dim=-1)
        dgamma = dgamma[:, :, None, None]
        beta = beta[:, :, None, None]
        return x * (1.0 + dgamma) + beta


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos positional embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb
