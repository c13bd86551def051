"""Input validation helpers used at public API boundaries."""

import numpy as np


def ensure_finite(data: np.ndarray, name: str = "array") -> None:
    """Raise ValueError naming the first offending voxel index."""
    finite = np.isfinite(data)
    if not finite.all():
        idx = np.argwhere(~finite)[0]
        raise ValueError(f"{name} contains a non-finite value at voxel index {tuple(int(i) for i in idx)}")


def ensure_same_shape(a: np.ndarray, b: np.ndarray, names: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names} must have equal shapes, got {a.shape} vs {b.shape}")


def ensure_binary(mask: np.ndarray, name: str = "mask") -> None:
    if not np.isin(mask, (0, 1)).all():
        bad = np.unique(mask[~np.isin(mask, (0, 1))])[:5]
        raise ValueError(f"{name} must contain only 0/1 values, found {bad}")


def ensure_positive_spacing(spacing, name: str = "spacing") -> None:
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"{name} must be three positive components, got {spacing}")
