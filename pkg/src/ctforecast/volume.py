"""3D scalar grids with physical spacing, and their portable on-disk format.

A volume is stored as a raw little-endian float32 grid (C order, axes
H x W x D with D the axial direction) next to a small text header
``<path>.hdr`` carrying shape, spacing (mm/voxel), origin (mm) and dtype.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import VolumeParseError
from .validation import ensure_binary, ensure_finite, ensure_positive_spacing

HEADER_MAGIC = "ctforecast-volume v1"


@dataclass
class Volume:
    """H x W x D scalar grid with voxel spacing and world origin in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume grid must be 3-D with all dims >= 1, got shape {self.data.shape}")
        ensure_positive_spacing(self.spacing)
        ensure_finite(self.data, "volume")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def copy_with(self, data: np.ndarray, origin=None) -> "Volume":
        return Volume(data=data, spacing=self.spacing, origin=self.origin if origin is None else origin)


@dataclass
class Mask(Volume):
    """Binary grid sharing the spacing/origin contract of its paired volume."""

    data: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        super().__post_init__()
        ensure_binary(self.data, "mask")

    def voxel_count(self) -> int:
        return int(self.data.sum())


def save_volume(volume: Volume, path: str | os.PathLike) -> None:
    """Write raw little-endian f32 payload plus the text header sidecar."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    volume.data.astype("<f4").tofile(path)
    h, w, d = volume.shape
    sx, sy, sz = volume.spacing
    ox, oy, oz = volume.origin
    header = (
        f"{HEADER_MAGIC}\n"
        f"shape: {h} {w} {d}\n"
        f"spacing: {sx!r} {sy!r} {sz!r}\n"
        f"origin: {ox!r} {oy!r} {oz!r}\n"
        f"dtype: float32\n"
    )
    with open(path + ".hdr", "w") as fh:
        fh.write(header)


def _parse_header(hdr_path: str) -> dict:
    with open(hdr_path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HEADER_MAGIC:
        raise VolumeParseError(f"{hdr_path}: bad magic on line 1 (expected {HEADER_MAGIC!r})")
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if ":" not in line:
            raise VolumeParseError(f"{hdr_path}: malformed header line {lineno}: {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    for required in ("shape", "spacing", "origin", "dtype"):
        if required not in fields:
            raise VolumeParseError(f"{hdr_path}: missing header field {required!r}")
    if fields["dtype"] != "float32":
        raise VolumeParseError(f"{hdr_path}: unsupported dtype {fields['dtype']!r}")
    try:
        shape = tuple(int(t) for t in fields["shape"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        origin = tuple(float(t) for t in fields["origin"].split())
    except ValueError as exc:
        raise VolumeParseError(f"{hdr_path}: unparseable numeric field: {exc}") from exc
    if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeParseError(f"{hdr_path}: shape/spacing/origin must each have 3 components")
    return {"shape": shape, "spacing": spacing, "origin": origin}


def load_volume(path: str | os.PathLike) -> Volume:
    """Load a raw f32 volume; truncated or oversized payloads raise, never
    yield a partial Volume."""
    path = os.fspath(path)
    hdr = _parse_header(path + ".hdr")
    expected = int(np.prod(hdr["shape"])) * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise VolumeParseError(
            f"{path}: payload size mismatch at offset {min(actual, expected)} "
            f"(expected {expected} bytes for shape {hdr['shape']}, found {actual})"
        )
    data = np.fromfile(path, dtype="<f4").reshape(hdr["shape"])
    return Volume(data=data, spacing=hdr["spacing"], origin=hdr["origin"])


def load_mask(path: str | os.PathLike) -> Mask:
    vol = load_volume(path)
    return Mask(data=vol.data, spacing=vol.spacing, origin=vol.origin)
