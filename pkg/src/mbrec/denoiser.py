"""Conditioned noise-prediction networks for the latent diffusion stage.

The main denoiser stacks residual blocks that inject the behavior-agnostic
latent by concatenation, modulate normalized activations with six vectors
derived from timestep and behavior embeddings, and route tokens through a
hard-gated mixture of shared and per-behavior private experts. Two ablation
variants share the call signature: a flat MLP over concatenated inputs and a
block variant whose expert mixture is replaced by a single feed-forward net.

All variants predict the noise component and are exact zero maps at
initialization (zero-initialized modulation nets and output heads).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .data import ConfigError

DENOISER_KINDS = ("moe", "adaln", "mlp")


def timestep_features(t: torch.Tensor, d: int) -> torch.Tensor:
    """Raw sinusoidal features (B, d), interleaved (sin, cos) pairs at
    geometric frequencies. t = 0 gives the alternating (0, 1, 0, 1, ...) row.
    """
    if d % 2 != 0:
        raise ConfigError(f"timestep feature dimension {d} must be even")
    half = torch.arange(d // 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * 2.0 * half / d)
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    feats = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return feats.flatten(-2)


class TimestepEmbed(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.net = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(timestep_features(t, self.d).to(
            self.net[0].weight.dtype))


def _expert(d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))


class MoE(nn.Module):
    """Mixture with m_s shared experts plus m_p private experts per behavior.

    The behavior id is a hard router: behavior b mixes the shared experts and
    only b's private group; the null id (== num_behaviors) renormalizes the
    gate over the shared entries and never evaluates a private expert.
    """

    def __init__(self, d: int, num_behaviors: int, m_s: int, m_p: int):
        super().__init__()
        if m_s < 1:
            raise ConfigError("need at least one shared expert")
        if m_p < 0:
            raise ConfigError("negative private expert count")
        self.num_behaviors = num_behaviors
        self.m_s = m_s
        self.m_p = m_p
        self.gate = nn.Linear(d, m_s + m_p, bias=False)
        self.shared = nn.ModuleList(_expert(d) for _ in range(m_s))
        self.private = nn.ModuleList(
            nn.ModuleList(_expert(d) for _ in range(m_p))
            for _ in range(num_behaviors))

    def forward(self, x: torch.Tensor, behavior: torch.Tensor) -> torch.Tensor:
        B, d = x.shape
        logits = self.gate(x)
        is_null = behavior == self.num_behaviors
        shared_w = torch.softmax(logits[:, :self.m_s], dim=-1)
        full_w = torch.softmax(logits, dim=-1)
        # (B, m_s + m_p) weights; null rows put everything on the shared part
        weights = torch.where(is_null[:, None],
                              torch.cat([shared_w,
                                         torch.zeros(B, self.m_p,
                                                     dtype=x.dtype)], dim=-1),
                              full_w)
        out = torch.zeros_like(x)
        for j, expert in enumerate(self.shared):
            out = out + weights[:, j:j + 1] * expert(x)
        if self.m_p == 0:
            return out
        for b in range(self.num_behaviors):
            rows = (behavior == b).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            xb = x[rows]
            for j, expert in enumerate(self.private[b]):
                w = weights[rows, self.m_s + j:self.m_s + j + 1]
                out = out.index_add(0, rows, w * expert(xb))
        return out


class Modulation(nn.Module):
    """Maps the summed timestep/behavior embedding to six d-vectors; the
    final linear layer starts at zero so every block is the identity at init.
    """

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.net[1].weight)
        nn.init.zeros_(self.net[1].bias)

    def forward(self, c: torch.Tensor):
        return self.net(c).chunk(6, dim=-1)


class MCGLNBlock(nn.Module):
    def __init__(self, d: int, num_behaviors: int, m_s: int, m_p: int,
                 routed: bool = True):
        super().__init__()
        self.modulation = Modulation(d)
        self.norm_cond = nn.LayerNorm(2 * d, elementwise_affine=False)
        self.cond_in = nn.Linear(2 * d, d)
        self.cond_out = nn.Sequential(nn.SiLU(), nn.Linear(d, d))
        self.norm_mix = nn.LayerNorm(d, elementwise_affine=False)
        self.mix = (MoE(d, num_behaviors, m_s, m_p) if routed
                    else _expert(d))
        self.routed = routed

    def forward(self, x, z_cond, c, behavior):
        g_s, b_s, a_s, g_t, b_t, a_t = self.modulation(c)
        h = self.cond_in(self.norm_cond(torch.cat([x, z_cond], dim=-1)))
        h = self.cond_out(h * g_s + b_s)
        x = x + a_s * h
        v = self.norm_mix(x) * g_t + b_t
        y = self.mix(v, behavior) if self.routed else self.mix(v)
        return x + a_t * y


class MCGLNDenoiser(nn.Module):
    def __init__(self, d: int, num_behaviors: int, depth: int = 2,
                 m_s: int = 1, m_p: int = 1, routed: bool = True):
        super().__init__()
        if depth < 1:
            raise ConfigError("need at least one denoiser block")
        self.d = d
        self.num_behaviors = num_behaviors
        self.time_embed = TimestepEmbed(d)
        self.behavior_cond = nn.Embedding(num_behaviors + 1, d)
        nn.init.normal_(self.behavior_cond.weight, 0.0, 0.02)
        self.blocks = nn.ModuleList(
            MCGLNBlock(d, num_behaviors, m_s, m_p, routed)
            for _ in range(depth))
        self.head = nn.Linear(d, d)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def null_behavior(self) -> int:
        return self.num_behaviors

    def _check_behavior(self, behavior: torch.Tensor) -> None:
        if bool(((behavior < 0) | (behavior > self.num_behaviors)).any()):
            raise ValueError("behavior id outside 0..num_behaviors (null)")

    def conditioning(self, t: torch.Tensor,
                     behavior: torch.Tensor) -> torch.Tensor:
        self._check_behavior(behavior)
        return self.time_embed(t) + self.behavior_cond(behavior)

    def forward(self, z_t, t, z_cond, behavior):
        c = self.conditioning(t, behavior)
        x = z_t
        for block in self.blocks:
            x = block(x, z_cond, c, behavior)
        return self.head(x)


class MLPDenoiser(nn.Module):
    """Flat feed-forward ablation over concat(z_t, z_cond, e_t, e_b)."""

    def __init__(self, d: int, num_behaviors: int, hidden: int | None = None):
        super().__init__()
        self.d = d
        self.num_behaviors = num_behaviors
        h = 4 * d if hidden is None else hidden
        self.time_embed = TimestepEmbed(d)
        self.behavior_cond = nn.Embedding(num_behaviors + 1, d)
        nn.init.normal_(self.behavior_cond.weight, 0.0, 0.02)
        self.net = nn.Sequential(
            nn.Linear(4 * d, h), nn.SiLU(),
            nn.Linear(h, h), nn.SiLU(),
            nn.Linear(h, d))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    @property
    def null_behavior(self) -> int:
        return self.num_behaviors

    def forward(self, z_t, t, z_cond, behavior):
        if bool(((behavior < 0) | (behavior > self.num_behaviors)).any()):
            raise ValueError("behavior id outside 0..num_behaviors (null)")
        e_t = self.time_embed(t)
        e_b = self.behavior_cond(behavior)
        return self.net(torch.cat([z_t, z_cond, e_t, e_b], dim=-1))


def build_denoiser(kind: str, d: int, num_behaviors: int, depth: int = 2,
                   m_s: int = 1, m_p: int = 1) -> nn.Module:
    if kind == "moe":
        return MCGLNDenoiser(d, num_behaviors, depth, m_s, m_p, routed=True)
    if kind == "adaln":
        return MCGLNDenoiser(d, num_behaviors, depth, m_s, m_p, routed=False)
    if kind == "mlp":
        return MLPDenoiser(d, num_behaviors)
    raise ConfigError(f"unknown denoiser kind {kind!r}; "
                      f"expected one of {DENOISER_KINDS}")


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
