from .conditioning import ConditioningMLP, FiLM, sinusoidal_embedding
from .diffusion import NoiseSchedule, ResidualDenoiser, build_diffusion_model, q_sample, sample_residual
from .generators import (
    GeneratorSpec,
    PatchGanDiscriminator,
    ResNetGenerator,
    build_cycle_pair,
    build_paired_generator,
    build_patchgan_discriminator,
    cycle_conditioning,
)

__all__ = [
    "ConditioningMLP",
    "FiLM",
    "GeneratorSpec",
    "NoiseSchedule",
    "PatchGanDiscriminator",
    "ResNetGenerator",
    "ResidualDenoiser",
    "build_cycle_pair",
    "build_diffusion_model",
    "build_paired_generator",
    "build_patchgan_discriminator",
    "cycle_conditioning",
    "q_sample",
    "sample_residual",
    "sinusoidal_embedding",
]
