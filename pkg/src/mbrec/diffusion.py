"""Gaussian diffusion in latent space.

A linear noise schedule corrupts a clean latent toward an isotropic Gaussian;
sampling runs the learned reverse process, either ancestral (one step per
timestep) or deterministic with a strided timestep grid. Guidance mixes the
behavior-conditioned and behavior-null noise predictions.

Schedule arrays are float64 and indexed by timestep directly: index 0 is the
clean distribution (cumulative signal fraction 1), indices 1..T follow the
beta sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: torch.Tensor        # (T+1,) float64, betas[0] unused and zero
    alphas: torch.Tensor       # (T+1,) float64, 1 - betas
    alpha_bars: torch.Tensor   # (T+1,) float64 cumulative product, [0] == 1

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"need T >= 1, got {self.T}")


def make_schedule(T: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over timesteps 1..T, endpoints inclusive."""
    if T < 1:
        raise ConfigError(f"need T >= 1, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ConfigError("betas must lie in (0, 1)")
    betas = torch.zeros(T + 1, dtype=torch.float64)
    betas[1:] = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def _gather(table: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Pick table[t] and shape it to broadcast against `like`."""
    if isinstance(t, int):
        return table[t].to(like.dtype)
    out = table[t].to(like.dtype)
    return out.view(-1, *([1] * (like.dim() - 1)))


def forward_sample(schedule: NoiseSchedule, z0: torch.Tensor, t,
                   eps: torch.Tensor) -> torch.Tensor:
    """Corrupt z0 to timestep t (int or per-example long tensor) using eps."""
    ab = _gather(schedule.alpha_bars, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def ddpm_step(schedule: NoiseSchedule, z_t: torch.Tensor, t: int,
              eps_hat: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """One ancestral reverse step t -> t-1.

    The posterior deviation at t=1 is zero because the cumulative signal
    fraction at index 0 is one, so the final step is deterministic and the
    provided noise is ignored there.
    """
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"timestep {t} outside 1..{schedule.T}")
    beta = schedule.betas[t]
    alpha = schedule.alphas[t]
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1]
    mean = (z_t - (beta / torch.sqrt(1.0 - ab_t)).to(z_t.dtype) * eps_hat) \
        / torch.sqrt(alpha).to(z_t.dtype)
    sigma = torch.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta).to(z_t.dtype)
    return mean + sigma * noise


def ddim_step(schedule: NoiseSchedule, z_t: torch.Tensor, t: int, t_prev: int,
              eps_hat: torch.Tensor) -> torch.Tensor:
    """Deterministic jump t -> t_prev via the implied clean-latent estimate."""
    if not 0 <= t_prev < t <= schedule.T:
        raise ConfigError(f"bad jump {t} -> {t_prev} for T={schedule.T}")
    ab_t = schedule.alpha_bars[t].to(z_t.dtype)
    ab_p = schedule.alpha_bars[t_prev].to(z_t.dtype)
    z0_hat = (z_t - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
    return torch.sqrt(ab_p) * z0_hat + torch.sqrt(1.0 - ab_p) * eps_hat


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
                omega: float) -> torch.Tensor:
    """Guided noise estimate (1 + w) * cond - w * uncond."""
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def time_grid(T: int, stride: int) -> list[int]:
    """Descending grid T, T-stride, ..., 0; the stride must divide T."""
    if stride < 1 or T % stride != 0:
        raise ConfigError(f"stride {stride} does not divide T={T}")
    return list(range(T, -1, -stride))


def sample_timesteps(n: int, T: int,
                     generator: torch.Generator) -> torch.Tensor:
    """Uniform training timesteps over 1..T inclusive, shape (n,)."""
    return torch.randint(1, T + 1, (n,), generator=generator)


def null_mask(n: int, prob: float, generator: torch.Generator) -> torch.Tensor:
    """Bernoulli(prob) mask (n,) marking examples trained unconditionally."""
    return torch.rand(n, generator=generator) < prob


@torch.no_grad()
def sample(schedule: NoiseSchedule, denoiser, z_cond: torch.Tensor,
           behavior: torch.Tensor, omega: float, stride: int,
           generator: torch.Generator | None = None,
           z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Draw behavior-specific latents by deterministic strided denoising.

    Starts from a standard Gaussian (drawn from `generator`, or supplied as
    `z_init` when the caller manages noise streams), then walks the strided
    grid applying guidance at every step. The agnostic latent z_cond stays
    attached in the unconditional branch; only the behavior index is replaced
    by the null row.
    """
    grid = time_grid(schedule.T, stride)
    if z_init is None:
        if generator is None:
            raise ConfigError("sample needs a generator or an explicit z_init")
        z = torch.randn(z_cond.shape, generator=generator, dtype=z_cond.dtype)
    else:
        z = z_init.to(z_cond.dtype)
    null_b = torch.full_like(behavior, denoiser.null_behavior)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        t_vec = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = denoiser(z, t_vec, z_cond, behavior)
        if omega != 0.0:
            eps_un = denoiser(z, t_vec, z_cond, null_b)
            eps = cfg_combine(eps, eps_un, omega)
        z = ddim_step(schedule, z, t, t_prev, eps)
    return z
