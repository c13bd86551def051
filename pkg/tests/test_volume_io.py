import numpy as np
import pytest

from ctforecast.errors import VolumeParseError
from ctforecast.volume import Mask, Volume, load_volume, save_volume


def test_round_trip_bit_identical(tmp_path, rng):
    data = rng.standard_normal((9, 7, 5)).astype(np.float32)
    vol = Volume(data=data, spacing=(0.7, 1.1, 2.5), origin=(-3.0, 4.5, 0.0))
    path = tmp_path / "vol.raw"
    save_volume(vol, path)
    back = load_volume(path)
    assert np.array_equal(back.data, data)
    assert back.spacing == vol.spacing
    assert back.origin == vol.origin


def test_axial_spacing_preserved(tmp_path):
    vol = Volume(data=np.zeros((4, 4, 3), dtype=np.float32), spacing=(1.0, 1.0, 3.0))
    save_volume(vol, tmp_path / "v.raw")
    assert load_volume(tmp_path / "v.raw").spacing == (1.0, 1.0, 3.0)


def test_truncated_payload_raises_without_partial_volume(tmp_path, rng):
    vol = Volume(data=rng.random((6, 6, 6)).astype(np.float32))
    path = tmp_path / "trunc.raw"
    save_volume(vol, path)
    payload = path.read_bytes()
    path.write_bytes(payload[: len(payload) // 2])
    with pytest.raises(VolumeParseError, match="offset"):
        load_volume(path)


def test_corrupt_header_raises(tmp_path):
    vol = Volume(data=np.zeros((2, 2, 2), dtype=np.float32))
    path = tmp_path / "bad.raw"
    save_volume(vol, path)
    hdr = path.with_suffix(".raw.hdr")
    hdr.write_text("not a volume header\n")
    with pytest.raises(VolumeParseError):
        load_volume(path)


def test_header_shape_mismatch_raises(tmp_path):
    vol = Volume(data=np.zeros((2, 3, 4), dtype=np.float32))
    path = tmp_path / "mismatch.raw"
    save_volume(vol, path)
    hdr = path.with_suffix(".raw.hdr")
    hdr.write_text(hdr.read_text().replace("shape: 2 3 4", "shape: 2 3 5"))
    with pytest.raises(VolumeParseError, match="size mismatch"):
        load_volume(path)


def test_volume_invariants():
    with pytest.raises(ValueError, match="non-finite"):
        Volume(data=np.array([[[np.nan]]], dtype=np.float32))
    with pytest.raises(ValueError):
        Volume(data=np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume(data=np.zeros((2, 2)))


def test_mask_must_be_binary():
    Mask(data=np.ones((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="0/1"):
        Mask(data=np.full((2, 2, 2), 0.5, dtype=np.float32))
