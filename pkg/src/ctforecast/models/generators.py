"""Conditional 2D translation networks: a ResNet encoder-bottleneck-decoder
generator whose bottleneck blocks are FiLM-modulated by the conditioning
vector, and an unconditional PatchGAN discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .conditioning import ConditioningMLP, FiLM

DOWNSAMPLE_FACTOR = 4  # two stride-2 stages


@dataclass
class GeneratorSpec:
    family: str  # paired_gan | cycle_gan | diffusion_25d
    cond_dim: int
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 32
    n_res_blocks: int = 4
    embed_dim: int = 64
    context_channels: int = 16  # diffusion triplet encoder width

    def __post_init__(self):
        if self.family not in ("paired_gan", "cycle_gan", "diffusion_25d"):
            raise ValueError(f"unknown model family {self.family!r}")
        if min(self.in_channels, self.out_channels, self.base_channels, self.cond_dim) < 1:
            raise ValueError("channel and conditioning dims must be >= 1")


def weights_init_normal(m):
    classname = m.__class__.__name__
    if "Conv" in classname and hasattr(m, "weight") and m.weight is not None:
        nn.init.normal_(m.weight.data, 0.0, 0.02)
        if m.bias is not None:
            nn.init.constant_(m.bias.data, 0.0)


class FilmResidualBlock(nn.Module):
    """Residual block with channel-wise conditioning applied before the skip."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(channels)
        self.film = FiLM(channels, embed_dim)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x, emb):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        h = self.film(h, emb)
        return x + h


class ResNetGenerator(nn.Module):
    """Encoder -> FiLM-modulated residual bottleneck -> decoder; maps a slice
    in [0, 1] to a predicted slice in [0, 1]."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self.embed = ConditioningMLP(spec.cond_dim, spec.embed_dim)
        self.encoder = nn.Sequential(
            nn.Conv2d(spec.in_channels, c, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.ReLU(inplace=True),
        )
        self.bottleneck = nn.ModuleList(FilmResidualBlock(4 * c, spec.embed_dim) for _ in range(spec.n_res_blocks))
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, spec.out_channels, 7, padding=3, padding_mode="reflect"),
            nn.Sigmoid(),
        )
        self.apply(weights_init_normal)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        _, _, height, width = x.shape
        if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"input spatial dims must be divisible by {DOWNSAMPLE_FACTOR}, got {height}x{width}"
            )
        emb = self.embed(h)
        feat = self.encoder(x)
        for block in self.bottleneck:
            feat = block(feat, emb)
        return self.decoder(feat)


class PatchGanDiscriminator(nn.Module):
    """Unconditional patch-level real/fake map (no conditioning pathway).

    For a 64x64 input the map is 6x6: 64 ->32 ->16 ->8 (stride 2), then two
    stride-1 4x4 convs give 7 then 6.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1),
            nn.InstanceNorm2d(8 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * c, 1, 4, stride=1, padding=1),
        )
        self.apply(weights_init_normal)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_paired_generator(spec: GeneratorSpec) -> ResNetGenerator:
    return ResNetGenerator(spec)


def build_patchgan_discriminator(spec: GeneratorSpec) -> PatchGanDiscriminator:
    return PatchGanDiscriminator(in_channels=spec.out_channels, base_channels=spec.base_channels)


def cycle_conditioning(h: torch.Tensor, direction: float) -> torch.Tensor:
    """Append the translation direction bit (0 forward, 1 backward); the dose
    magnitude itself is shared by both directions."""
    flag = torch.full((*h.shape[:-1], 1), float(direction), dtype=h.dtype, device=h.device)
    return torch.cat([h, flag], dim=-1)


def build_cycle_pair(spec: GeneratorSpec):
    """Two conditioned generators (forward: treat, backward: un-treat) and two
    unconditional discriminators. Generators consume the conditioning vector
    extended with a direction bit."""
    gen_spec = GeneratorSpec(
        family=spec.family,
        cond_dim=spec.cond_dim + 1,
        in_channels=spec.in_channels,
        out_channels=spec.out_channels,
        base_channels=spec.base_channels,
        n_res_blocks=spec.n_res_blocks,
        embed_dim=spec.embed_dim,
    )
    g_forward = ResNetGenerator(gen_spec)
    g_backward = ResNetGenerator(gen_spec)
    d_input = PatchGanDiscriminator(spec.in_channels, spec.base_channels)
    d_target = PatchGanDiscriminator(spec.out_channels, spec.base_channels)
    return g_forward, g_backward, d_input, d_target
