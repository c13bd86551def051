"""Analytic compute accounting: multiply-accumulate and parameter counts.

Convolutions count (Cin/groups) * Cout * kh * kw * Hout * Wout MACs, dense
layers n_in * n_out per output position; normalization, activation, pooling,
and resampling layers count zero. Training cost per sample is the MACs of one
optimizer step's forward passes times 3 (one forward plus a backward
approximated as two forwards); the convention is stated in the report header.
Diffusion inference costs one context encoding plus T denoiser passes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch
import torch.nn as nn

from .errors import UnsupportedLayerError

BACKWARD_FACTOR = 3  # forward + ~2x forward for the backward pass
REPORT_HEADER_NOTE = (
    "training MACs per sample = 3 x forward-pass MACs of one optimizer step "
    "(backward approximated as 2 x forward); normalization/activation ops excluded"
)

_ZERO_MAC_TYPES = (
    nn.ReLU,
    nn.LeakyReLU,
    nn.SiLU,
    nn.Sigmoid,
    nn.Tanh,
    nn.Identity,
    nn.Dropout,
    nn.Flatten,
    nn.Upsample,
    nn.GroupNorm,
    nn.InstanceNorm1d,
    nn.InstanceNorm2d,
    nn.InstanceNorm3d,
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.BatchNorm3d,
    nn.LayerNorm,
    nn.MaxPool2d,
    nn.AvgPool2d,
)


def _leaf_macs(module: nn.Module, output: torch.Tensor, name: str) -> int:
    if isinstance(module, nn.Conv2d):
        _, c_out, h_out, w_out = output.shape
        kh, kw = module.kernel_size
        return (module.in_channels // module.groups) * c_out * kh * kw * h_out * w_out
    if isinstance(module, nn.ConvTranspose2d):
        _, c_out, h_out, w_out = output.shape
        kh, kw = module.kernel_size
        return (module.in_channels // module.groups) * c_out * kh * kw * h_out * w_out
    if isinstance(module, nn.Linear):
        positions = output.numel() // output.shape[-1]
        return module.in_features * module.out_features * positions
    if isinstance(module, _ZERO_MAC_TYPES):
        return 0
    raise UnsupportedLayerError(f"cannot count MACs for layer {name!r} of type {type(module).__name__}")


def count_macs(model: nn.Module, *args, **kwargs) -> int:
    """Analytic MAC count of one forward pass of `model(*args, **kwargs)`.

    Output spatial shapes come from forward hooks on leaf modules; the
    per-layer arithmetic is closed-form. Raises UnsupportedLayerError on any
    leaf type without a counting rule.
    """
    totals: list[int] = []
    handles = []

    def register(name, module):
        def hook(mod, hook_args, output):
            out = output[0] if isinstance(output, tuple) else output
            totals.append(_leaf_macs(mod, out, name))

        handles.append(module.register_forward_hook(hook))

    for name, module in model.named_modules():
        if len(list(module.children())) == 0:
            register(name or type(module).__name__, module)
    try:
        with torch.no_grad():
            model(*args, **kwargs)
    finally:
        for handle in handles:
            handle.remove()
    return int(sum(totals))


def count_params(model: nn.Module) -> int:
    """Exact parameter tally from a walk over the module tree."""
    total = 0
    for module in model.modules():
        for param in module.parameters(recurse=False):
            total += param.numel()
    return total


@dataclass
class MacsReport:
    model_id: str
    params: int
    train_gmacs_per_sample: float
    infer_gmacs_per_output: float

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.infer_gmacs_per_output / self.train_gmacs_per_sample)


GIGA = 1e9


def profile_paired_gan(generator, discriminator, slice_hw, cond_dim) -> MacsReport:
    """One optimizer step runs the generator once and the discriminator three
    times (real, detached fake, fake); inference is one generator pass."""
    h, w = slice_hw
    x = torch.zeros(1, 1, h, w)
    cond = torch.zeros(1, cond_dim)
    g = count_macs(generator, x, cond)
    d = count_macs(discriminator, x)
    train = BACKWARD_FACTOR * (g + 3 * d)
    return MacsReport("paired_gan", count_params(generator) + count_params(discriminator), train / GIGA, g / GIGA)


def profile_cycle_gan(g_forward, g_backward, d_input, d_target, slice_hw, cond_dim) -> MacsReport:
    """One step: both generators twice each (translation + cycle), each
    discriminator three times; inference is one forward-generator pass."""
    h, w = slice_hw
    x = torch.zeros(1, 1, h, w)
    cond = torch.zeros(1, cond_dim + 1)
    gf = count_macs(g_forward, x, cond)
    gb = count_macs(g_backward, x, cond)
    di = count_macs(d_input, x)
    dt = count_macs(d_target, x)
    train = BACKWARD_FACTOR * (2 * gf + 2 * gb + 3 * di + 3 * dt)
    params = sum(count_params(m) for m in (g_forward, g_backward, d_input, d_target))
    return MacsReport("cycle_gan", params, train / GIGA, gf / GIGA)


def profile_diffusion(model, slice_hw, cond_dim) -> MacsReport:
    """One training step: one context encoding plus one denoiser pass.
    Inference: one context encoding plus T denoiser passes (exactly T times
    the per-step cost)."""
    h, w = slice_hw
    triplet = torch.zeros(1, 3, h, w)
    ctx = model.context(triplet)
    ctx_macs = count_macs(model.context_encoder, triplet)
    step_macs = count_macs(model, torch.zeros(1, 1, h, w), ctx, torch.tensor([1]), torch.zeros(1, cond_dim))
    train = BACKWARD_FACTOR * (ctx_macs + step_macs)
    infer = ctx_macs + model.schedule.steps * step_macs
    return MacsReport("diffusion_25d", count_params(model), train / GIGA, infer / GIGA)


COST_FIELDS = ["model", "params", "train_gmacs", "infer_gmacs", "reduction_percent"]


def emit_cost_report(
    reports: list[MacsReport],
    delta_v_by_model: dict[str, float] | None,
    out_dir: str | os.PathLike,
) -> dict[str, str]:
    """Fixed-column cost table plus the accuracy-vs-cost bubble chart
    (log-scale cost axis, bubble radius proportional to parameter count,
    darker bubbles for training and lighter for inference)."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"table": os.path.join(out_dir, "compute_costs.csv")}
    with open(paths["table"], "w", newline="") as fh:
        fh.write(f"# {REPORT_HEADER_NOTE}\n")
        writer = csv.DictWriter(fh, fieldnames=COST_FIELDS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(
                {
                    "model": rep.model_id,
                    "params": rep.params,
                    "train_gmacs": repr(rep.train_gmacs_per_sample),
                    "infer_gmacs": repr(rep.infer_gmacs_per_output),
                    "reduction_percent": repr(rep.reduction_percent),
                }
            )

    if delta_v_by_model:
        fig, ax = plt.subplots(figsize=(6, 4.5))
        max_params = max(rep.params for rep in reports)
        colors = plt.cm.tab10.colors
        for i, rep in enumerate(reports):
            if rep.model_id not in delta_v_by_model:
                continue
            y = delta_v_by_model[rep.model_id]
            size = 2000.0 * rep.params / max_params
            color = colors[i % len(colors)]
            ax.scatter([rep.train_gmacs_per_sample], [y], s=size, color=color, alpha=0.85, edgecolors="black")
            ax.scatter([rep.infer_gmacs_per_output], [y], s=size, color=color, alpha=0.35, edgecolors="black")
            ax.annotate(rep.model_id, (rep.train_gmacs_per_sample, y), fontsize=8, xytext=(4, 6), textcoords="offset points")
        ax.set_xscale("log")
        ax.set_xlabel("GMACs per sample (dark: training, light: inference)")
        ax.set_ylabel("mean |dV| (%)")
        fig.tight_layout()
        paths["plot"] = os.path.join(out_dir, "cost_vs_accuracy.png")
        fig.savefig(paths["plot"], dpi=110, metadata={"Software": "ctforecast"})
        plt.close(fig)
    return paths
