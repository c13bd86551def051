"""2.5D residual diffusion: a UNet denoiser over the center-slice residual,
conditioned on a context encoding of the input slice triplet plus additive
per-block embeddings of timestep, dose increment, and clinical covariates.

The residual r = target - input lives in [-1, 1] natively, which is the
denoiser's working range; predictions reconstruct the target slice as
input + r_hat, clamped back to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .conditioning import sinusoidal_embedding
from .generators import GeneratorSpec


@dataclass
class NoiseSchedule:
    """Linear variance schedule beta_1..beta_T with cached cumulative products."""

    steps: int = 250
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: torch.Tensor = field(init=False, repr=False)
    alphas: torch.Tensor = field(init=False, repr=False)
    alpha_bars: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(f"betas must satisfy 0 < start <= end < 1, got [{self.beta_start}, {self.beta_end}]")
        self.betas = torch.linspace(self.beta_start, self.beta_end, self.steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        if self.steps > 1 and not (self.alpha_bars[1:] < self.alpha_bars[:-1]).all():
            raise ValueError("cumulative alpha products must be strictly decreasing")

    def alpha_bar(self, t: torch.Tensor) -> torch.Tensor:
        """t is 1-indexed (1..steps)."""
        return self.alpha_bars[t.long() - 1]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        return cls(**doc)


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    abar = schedule.alpha_bar(t).to(x0.dtype)[:, None, None, None]
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


class AdditiveResBlock(nn.Module):
    """Residual block with an additive per-channel conditioning bias."""

    def __init__(self, in_channels: int, out_channels: int, embed_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(embed_dim, out_channels)
        self.norm2 = nn.GroupNorm(min(groups, out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class ContextEncoder(nn.Module):
    """Extracts full-resolution anatomical context from the input triplet."""

    def __init__(self, in_channels: int, context_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, context_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(context_channels, context_channels, 3, padding=1),
        )

    def forward(self, triplet: torch.Tensor) -> torch.Tensor:
        return self.net(triplet)


class DenoiserCore(nn.Module):
    """UNet predicting the noise added to the residual, conditioned per block."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        c = spec.base_channels
        e = spec.embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.dose_proj = nn.Sequential(nn.Linear(1, e), nn.SiLU(), nn.Linear(e, e))
        self.clinical_proj = nn.Sequential(nn.Linear(spec.cond_dim - 1, e), nn.SiLU(), nn.Linear(e, e))
        self.embed_dim = e

        self.in_conv = nn.Conv2d(1 + spec.context_channels, c, 3, padding=1)
        self.down1 = AdditiveResBlock(c, c, e)
        self.downsample1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = AdditiveResBlock(2 * c, 2 * c, e)
        self.downsample2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid1 = AdditiveResBlock(4 * c, 4 * c, e)
        self.mid2 = AdditiveResBlock(4 * c, 4 * c, e)
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(4 * c, 2 * c, 3, padding=1))
        self.up_block1 = AdditiveResBlock(4 * c, 2 * c, e)
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * c, c, 3, padding=1))
        self.up_block2 = AdditiveResBlock(2 * c, c, e)
        self.out = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(), nn.Conv2d(c, 1, 3, padding=1))

    def embedding(self, t: torch.Tensor, dose: torch.Tensor, clinical: torch.Tensor) -> torch.Tensor:
        return (
            self.time_mlp(sinusoidal_embedding(t, self.embed_dim))
            + self.dose_proj(dose)
            + self.clinical_proj(clinical)
        )

    def forward(self, r_noisy, context, t, dose, clinical):
        _, _, height, width = r_noisy.shape
        if height % 4 or width % 4:
            raise ValueError(f"input spatial dims must be divisible by 4, got {height}x{width}")
        emb = self.embedding(t, dose, clinical)
        h0 = self.in_conv(torch.cat([r_noisy, context], dim=1))
        d1 = self.down1(h0, emb)
        d2 = self.down2(self.downsample1(d1), emb)
        m = self.mid2(self.mid1(self.downsample2(d2), emb), emb)
        u1 = self.up_block1(torch.cat([self.up1(m), d2], dim=1), emb)
        u2 = self.up_block2(torch.cat([self.up2(u1), d1], dim=1), emb)
        return self.out(u2)


class ResidualDenoiser(nn.Module):
    """Context encoder + conditional UNet; exposes the two-phase API used by
    sampling and profiling (context once, denoiser per step)."""

    def __init__(self, spec: GeneratorSpec, schedule: NoiseSchedule):
        super().__init__()
        if spec.cond_dim < 2:
            raise ValueError("diffusion conditioning needs a clinical block and a dose component")
        self.spec = spec
        self.schedule = schedule
        self.context_encoder = ContextEncoder(spec.in_channels, spec.context_channels)
        self.core = DenoiserCore(spec)

    def context(self, triplet: torch.Tensor) -> torch.Tensor:
        return self.context_encoder(triplet)

    def forward(self, r_noisy, context, t, h):
        """h is the full conditioning vector; its last component is the
        normalized dose increment, the rest the clinical block."""
        dose = h[:, -1:]
        clinical = h[:, :-1]
        return self.core(r_noisy, context, t, dose, clinical)


def build_diffusion_model(spec: GeneratorSpec, schedule: NoiseSchedule) -> ResidualDenoiser:
    if spec.in_channels != 3:
        raise ValueError("the 2.5D denoiser consumes slice triplets (3 input channels)")
    return ResidualDenoiser(spec, schedule)


@torch.no_grad()
def sample_residual(
    model: ResidualDenoiser,
    triplet: torch.Tensor,
    h: torch.Tensor,
    seed: int = 0,
) -> torch.Tensor:
    """Ancestral sampling of the residual field, deterministic given seed.

    Returns r_hat in [-1, 1] with the same spatial shape as one slice.
    """
    schedule = model.schedule
    gen = torch.Generator(device="cpu").manual_seed(int(seed) & 0xFFFFFFFF)
    batch, _, height, width = triplet.shape
    context = model.context(triplet)
    x = torch.randn((batch, 1, height, width), generator=gen)
    for step in range(schedule.steps, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long)
        eps_hat = model(x, context, t, h)
        beta = schedule.betas[step - 1].float()
        alpha = schedule.alphas[step - 1].float()
        abar = schedule.alpha_bars[step - 1].float()
        mean = (x - beta / (1.0 - abar).sqrt() * eps_hat) / alpha.sqrt()
        if step > 1:
            abar_prev = schedule.alpha_bars[step - 2].float()
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            x = mean + var.sqrt() * torch.randn(x.shape, generator=gen)
        else:
            x = mean
    return x.clamp(-1.0, 1.0)
