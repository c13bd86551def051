"""Tumor-focused volumetric evaluation.

Tumor extent on scans without annotations is estimated by Otsu thresholding
inside a patient-specific Local ROI (the baseline CTV bounding box); the
brighter class is the tumor. Predicted and real volumes are compared with
the relative discrepancy |dV| = 100 |V_pred - V_real| / V_real, aggregated
into 10-Gy dose bins centered at 10..60 Gy; discrepancies within 25% count
as clinically acceptable.

Emitted files (per ``emit_report``):
  volumetrics.csv      one row per (model, patient, dose increment)
  dose_bins.csv        per-model per-bin mean/sd and acceptability rate
  delta_v_vs_dose.png  |dV| vs dose-bin line plot, one curve per model
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import ndimage

from .volume import Mask, Volume

BIN_CENTERS = (10, 20, 30, 40, 50, 60)
BIN_HALF_WIDTH = 5.0
ACCEPTABILITY_THRESHOLD_PERCENT = 25.0
OTSU_BINS = 256


@dataclass
class LocalROI:
    """Inclusive voxel bounds of the evaluation region."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int
    slice_min: int
    slice_max: int

    @classmethod
    def from_mask(cls, mask: Mask, pad: int = 0) -> "LocalROI":
        idx = np.argwhere(mask.data > 0)
        if idx.size == 0:
            raise ValueError("cannot derive an ROI from an empty mask")
        lo = np.maximum(idx.min(axis=0) - pad, 0)
        hi = np.minimum(idx.max(axis=0) + pad, np.array(mask.shape) - 1)
        return cls(int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]), int(lo[2]), int(hi[2]))

    def extract(self, data: np.ndarray) -> np.ndarray:
        if self.row_max >= data.shape[0] or self.col_max >= data.shape[1] or self.slice_max >= data.shape[2]:
            raise ValueError(f"ROI {self} exceeds grid {data.shape}")
        return data[
            self.row_min : self.row_max + 1,
            self.col_min : self.col_max + 1,
            self.slice_min : self.slice_max + 1,
        ]


def otsu_argmax_counts(counts) -> int:
    """Histogram boundary index k (classes [0,k) vs [k,bins)) maximizing the
    between-class variance, ties resolved toward the lowest candidate.

    The score sigma_b(k) = (m0*w1 - m1*w0)^2 / (w0*w1) is compared in exact
    integer arithmetic (counts and bin indices are integers, and the argmax
    is invariant to the affine index -> intensity map), so empty-bin ties
    break deterministically.
    """
    counts = [int(c) for c in counts]
    bins = len(counts)
    total_w = sum(counts)
    total_m = sum(i * c for i, c in enumerate(counts))
    best_k = None
    best_num, best_den = -1, 1
    w0 = 0
    m0 = 0
    for k in range(1, bins):
        w0 += counts[k - 1]
        m0 += (k - 1) * counts[k - 1]
        w1 = total_w - w0
        if w0 == 0 or w1 == 0:
            continue
        m1 = total_m - m0
        num = (m0 * w1 - m1 * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_num, best_den, best_k = num, den, k
    if best_k is None:
        raise ValueError("histogram has fewer than two occupied bins: no threshold exists")
    return best_k


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Threshold maximizing between-class variance over a `bins`-bin histogram.

    Returns the bin boundary realizing the maximum; raises on constant input,
    where no threshold exists.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("need at least two samples for a threshold")
    vmin = float(values.min())
    vmax = float(values.max())
    if vmin == vmax:
        raise ValueError("constant region: no threshold exists")
    counts, edges = np.histogram(values, bins=bins, range=(vmin, vmax))
    return float(edges[otsu_argmax_counts(counts)])


def tumor_volume_otsu(volume: Volume, roi: LocalROI, largest_component: bool = False) -> float:
    """Tumor volume in mm^3: above-threshold voxel count inside the ROI times
    the voxel volume. `largest_component` optionally keeps only the biggest
    connected above-threshold region."""
    sample = roi.extract(volume.data)
    threshold = otsu_threshold(sample)
    fg = sample > threshold
    if largest_component and fg.any():
        labels, n = ndimage.label(fg)
        if n > 1:
            sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
            fg = labels == (int(np.argmax(sizes)) + 1)
    return float(fg.sum()) * volume.voxel_volume_mm3


def delta_v_percent(v_pred: float, v_real: float) -> float:
    """|dV| = 100 |V_pred - V_real| / V_real, undefined for V_real = 0."""
    if v_real <= 0:
        raise ValueError(f"relative discrepancy undefined for V_real = {v_real}")
    return 100.0 * abs(v_pred - v_real) / v_real


def is_acceptable(delta_v: float) -> bool:
    return delta_v <= ACCEPTABILITY_THRESHOLD_PERCENT


def dose_bin_center(delta_gy: float) -> int | None:
    """Half-open decade bins [c-5, c+5) centered at 10..60 Gy; None outside."""
    if not (BIN_CENTERS[0] - BIN_HALF_WIDTH <= delta_gy < BIN_CENTERS[-1] + BIN_HALF_WIDTH):
        return None
    return int(math.floor((delta_gy + BIN_HALF_WIDTH) / (2 * BIN_HALF_WIDTH)) * 2 * BIN_HALF_WIDTH)


@dataclass
class VolumetricsEntry:
    model_id: str
    patient_id: str
    delta_gy: float
    v_real_mm3: float | None
    v_pred_mm3: float
    delta_v_percent: float | None
    acceptable: bool | None
    note: str = ""


@dataclass
class BinSummary:
    center_gy: int
    mean: float
    sd: float
    n: int
    acceptability_rate: float


def make_entry(model_id, patient_id, delta_gy, v_pred, v_real) -> VolumetricsEntry:
    try:
        dv = delta_v_percent(v_pred, v_real)
        return VolumetricsEntry(model_id, patient_id, delta_gy, v_real, v_pred, dv, is_acceptable(dv))
    except ValueError as exc:
        return VolumetricsEntry(model_id, patient_id, delta_gy, v_real, v_pred, None, None, note=str(exc))


def dose_binned_curve(entries: list[VolumetricsEntry]) -> dict[int, BinSummary]:
    """Per-bin mean/sd of |dV| (population sd; single-entry bins report 0).
    Empty bins are absent from the result."""
    grouped: dict[int, list[float]] = {}
    for entry in entries:
        if entry.delta_v_percent is None:
            continue
        center = dose_bin_center(entry.delta_gy)
        if center is None:
            continue
        grouped.setdefault(center, []).append(entry.delta_v_percent)
    out = {}
    for center in sorted(grouped):
        vals = np.asarray(grouped[center])
        out[center] = BinSummary(
            center_gy=center,
            mean=float(vals.mean()),
            sd=float(vals.std()),
            n=len(vals),
            acceptability_rate=float(np.mean([v <= ACCEPTABILITY_THRESHOLD_PERCENT for v in vals])),
        )
    return out


@dataclass
class VolumetricsReport:
    entries: list[VolumetricsEntry]

    def models(self) -> list[str]:
        return sorted({e.model_id for e in self.entries})

    def for_model(self, model_id: str) -> list[VolumetricsEntry]:
        return [e for e in self.entries if e.model_id == model_id]

    def binned(self) -> dict[str, dict[int, BinSummary]]:
        return {m: dose_binned_curve(self.for_model(m)) for m in self.models()}

    def mean_delta_v(self, model_id: str, max_delta_gy: float | None = None) -> float:
        vals = [
            e.delta_v_percent
            for e in self.for_model(model_id)
            if e.delta_v_percent is not None and (max_delta_gy is None or e.delta_gy <= max_delta_gy)
        ]
        if not vals:
            raise ValueError(f"no defined discrepancies for model {model_id!r}")
        return float(np.mean(vals))


ENTRY_FIELDS = list(VolumetricsEntry.__dataclass_fields__)
BIN_FIELDS = ["model_id"] + list(BinSummary.__dataclass_fields__)


def emit_report(report: VolumetricsReport, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write the per-entry table, the per-bin table, and the dose-curve plot.
    Re-emission with the same report produces identical bytes."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "entries": os.path.join(out_dir, "volumetrics.csv"),
        "bins": os.path.join(out_dir, "dose_bins.csv"),
        "plot": os.path.join(out_dir, "delta_v_vs_dose.png"),
    }

    with open(paths["entries"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ENTRY_FIELDS)
        writer.writeheader()
        for entry in report.entries:
            writer.writerow(asdict(entry))

    binned = report.binned()
    with open(paths["bins"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BIN_FIELDS)
        writer.writeheader()
        for model_id, bins in binned.items():
            for summary in bins.values():
                row = {"model_id": model_id, **asdict(summary)}
                writer.writerow(row)

    if report.entries:
        fig, ax = plt.subplots(figsize=(6, 4))
        for model_id, bins in binned.items():
            centers = sorted(bins)
            means = [bins[c].mean for c in centers]
            sds = [bins[c].sd for c in centers]
            ax.errorbar(centers, means, yerr=sds, marker="o", capsize=3, label=model_id)
        ax.axhline(ACCEPTABILITY_THRESHOLD_PERCENT, color="gray", linestyle="--", linewidth=1, label="acceptability")
        ax.set_xlabel("dose increment bin (Gy)")
        ax.set_ylabel("|dV| (%)")
        ax.set_xticks(list(BIN_CENTERS))
        ax.legend()
        fig.tight_layout()
        fig.savefig(paths["plot"], dpi=110, metadata={"Software": "ctforecast"})
        plt.close(fig)
    else:
        paths.pop("plot")
    return paths


def render_slice_grid(
    columns: list[tuple[str, dict[str, np.ndarray]]],
    row_order: list[str],
    mask_slices: dict[str, np.ndarray] | None,
    out_path: str | os.PathLike,
) -> str:
    """Qualitative grid: one column per dose level, one row per source
    (ground truth first, then each model), with the CTV contour drawn in red.

    `columns` is [(column label, {row label: 2-D slice})]; `mask_slices`
    optionally maps column labels to binary CTV slices for the overlay.
    """
    out_path = os.fspath(out_path)
    n_rows = len(row_order)
    n_cols = len(columns)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.2 * n_rows), squeeze=False)
    for c, (label, per_row) in enumerate(columns):
        for r, row_label in enumerate(row_order):
            ax = axes[r][c]
            ax.set_axis_off()
            if row_label not in per_row:
                continue
            ax.imshow(per_row[row_label], cmap="gray", vmin=0.0, vmax=1.0)
            if mask_slices and label in mask_slices and mask_slices[label].max() > 0:
                ax.contour(mask_slices[label], levels=[0.5], colors="red", linewidths=0.8)
            if r == 0:
                ax.set_title(label, fontsize=9)
            if c == 0:
                ax.text(-0.08, 0.5, row_label, transform=ax.transAxes, fontsize=8, rotation=90, va="center")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110, metadata={"Software": "ctforecast"})
    plt.close(fig)
    return out_path
