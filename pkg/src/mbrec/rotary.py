"""Rotary position transforms for attention queries and keys, including the
behavior-modulated variant: each consecutive coordinate pair (2j, 2j+1) is
rotated by angle position * theta_j, and optionally both components of pair j
are scaled by a strictly positive behavior-dependent factor. Per-pair real
scaling commutes with the pair rotation, so attention logits built from two
modulated vectors depend on positions only through their difference.
"""

from __future__ import annotations

import torch
from torch import nn


def pair_frequencies(d_k: int, base: float = 10000.0) -> torch.Tensor:
    """theta_j = base^(-2j / d_k) for j in [0, d_k/2)."""
    if d_k % 2 != 0:
        raise ValueError(f"rotary dimension must be even, got {d_k}")
    j = torch.arange(0, d_k, 2, dtype=torch.float64)
    return base ** (-j / d_k)


def rotate_pairs(x: torch.Tensor, positions: torch.Tensor, freqs: torch.Tensor,
                 scales: torch.Tensor | None = None) -> torch.Tensor:
    """Rotate coordinate pairs of x by positions * freqs.

    x: (..., d_k); positions broadcastable to x.shape[:-1]; freqs: (d_k/2,).
    scales, if given, multiplies both components of pair j and must
    broadcast to (..., d_k/2). Norm-preserving when scales is None.
    """
    angles = positions.to(x.dtype).unsqueeze(-1) * freqs.to(x.dtype)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    if scales is not None:
        r_even = r_even * scales
        r_odd = r_odd * scales
    return torch.stack((r_even, r_odd), dim=-1).flatten(-2)


class BehaviorRotary(nn.Module):
    """Rotary transform with per-head, per-pair behavior scaling.

    The scale net maps a behavior embedding (dimension d_model) to
    heads * d_k/2 factors, made strictly positive by softplus.
    """

    def __init__(self, d_model: int, heads: int, d_k: int, base: float = 10000.0):
        super().__init__()
        self.heads = heads
        self.d_k = d_k
        self.register_buffer("freqs", pair_frequencies(d_k, base), persistent=False)
        self.scale_net = nn.Sequential(
            nn.Linear(d_model, d_model),
            nn.SiLU(),
            nn.Linear(d_model, heads * (d_k // 2)),
        )

    def behavior_scales(self, behavior_emb: torch.Tensor) -> torch.Tensor:
        """behavior_emb: (B, L, d_model) -> positive scales (B, heads, L, d_k/2)."""
        B, L, _ = behavior_emb.shape
        raw = self.scale_net(behavior_emb).view(B, L, self.heads, self.d_k // 2)
        return torch.nn.functional.softplus(raw).permute(0, 2, 1, 3)

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                behavior_emb: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, heads, L, d_k); positions: (L,) or broadcastable.

        With behavior_emb None this is the plain rotary transform.
        """
        scales = None
        if behavior_emb is not None:
            scales = self.behavior_scales(behavior_emb)
        return rotate_pairs(x, positions, self.freqs, scales)
