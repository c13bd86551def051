"""Training objectives: mean-L1 reconstruction, diffusion noise L1, the
tumor-focused masked L1, least-squares adversarial terms, and cycle
consistency, combined as  total = main + lambda * tumor.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import EmptyMaskError


@dataclass
class LossConfig:
    lambda_tumor: float = 1.0
    adversarial_weight: float = 1.0
    l1_weight: float = 100.0
    cycle_weight: float = 10.0

    def __post_init__(self):
        for name in ("lambda_tumor", "adversarial_weight", "l1_weight", "cycle_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def l1_mean(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all positions."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def noise_l1(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between predicted and true diffusion noise."""
    return l1_mean(eps_pred, eps_true)


def tumor_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 normalized by the mask voxel count, restricted to the CTV.

    An all-zero mask raises instead of silently returning 0: a vanished mask
    means the data pipeline broke, not that the tumor term is satisfied.
    """
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}"
        )
    if not torch.isin(mask.detach(), torch.tensor([0.0, 1.0], dtype=mask.dtype, device=mask.device)).all():
        raise ValueError("mask must be binary")
    count = mask.sum()
    if count.item() == 0:
        raise EmptyMaskError("tumor loss requested over an all-zero mask")
    return ((pred - target).abs() * mask).sum() / count


def composite(main: torch.Tensor, tumor: torch.Tensor, lambda_tumor: float) -> torch.Tensor:
    """total = main + lambda * tumor."""
    if lambda_tumor < 0:
        raise ValueError("lambda_tumor must be >= 0")
    return main + lambda_tumor * tumor


def generator_adversarial(disc_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator term: mean((D(fake) - 1)^2) over the patch map."""
    return ((disc_fake - 1.0) ** 2).mean()


def discriminator_adversarial(disc_real: torch.Tensor, disc_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator term: 0.5 [mean((D(real)-1)^2) + mean(D(fake)^2)]."""
    return 0.5 * (((disc_real - 1.0) ** 2).mean() + (disc_fake**2).mean())


def adversarial_terms(disc_real: torch.Tensor, disc_fake: torch.Tensor, role: str) -> torch.Tensor:
    if role == "generator":
        return generator_adversarial(disc_fake)
    if role == "discriminator":
        return discriminator_adversarial(disc_real, disc_fake)
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def cycle_term(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """L1 between an image and its round-trip reconstruction."""
    return l1_mean(x, x_reconstructed)
