import gzip

import numpy as np
import pytest

from jointseg import nifti
from jointseg.errors import FormatError, ShapeError
from jointseg.volume import LabelMap, LesionMask, Volume


def test_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(
        data=rng.normal(size=(4, 4, 4)).astype(np.float32),
        spacing=(1.0, 1.25, 2.0),
        origin=(-3.0, 4.0, 0.5),
    )
    path = tmp_path / "vol.nii"
    nifti.save_volume(path, v)
    loaded, meta = nifti.load_volume(path)
    assert (loaded.data == v.data).all()
    assert loaded.spacing == pytest.approx(v.spacing)
    assert loaded.origin == pytest.approx(v.origin)
    assert meta["datatype"] == 16


def test_gzip_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    v = Volume(data=rng.normal(size=(5, 6, 7)).astype(np.float32))
    path = tmp_path / "vol.nii.gz"
    nifti.save_volume(path, v)
    with open(path, "rb") as fh:
        assert fh.read(2) == b"\x1f\x8b"
    loaded, _ = nifti.load_volume(path)
    assert (loaded.data == v.data).all()


def test_unit_spacing_preserved(tmp_path):
    v = Volume(data=np.zeros((4, 4, 4), dtype=np.float32) + 1.5, spacing=(1, 1, 1))
    path = tmp_path / "s.nii"
    nifti.save_volume(path, v)
    assert nifti.load_volume(path)[0].spacing == (1.0, 1.0, 1.0)


def test_truncated_file_is_format_error(tmp_path):
    v = Volume(data=np.ones((4, 4, 4), dtype=np.float32))
    path = tmp_path / "t.nii"
    nifti.save_volume(path, v)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        nifti.load_volume(path)


def test_bad_magic_is_format_error(tmp_path):
    v = Volume(data=np.ones((4, 4, 4), dtype=np.float32))
    path = tmp_path / "m.nii"
    nifti.save_volume(path, v)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"xxxx"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        nifti.load_volume(path)


def test_not_a_nifti_at_all(tmp_path):
    path = tmp_path / "junk.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(FormatError):
        nifti.load_volume(path)


def test_non_3d_payload_is_shape_error(tmp_path):
    import struct

    v = Volume(data=np.ones((4, 4, 4), dtype=np.float32))
    path = tmp_path / "4d.nii"
    nifti.save_volume(path, v)
    raw = bytearray(path.read_bytes())
    # rewrite dim[] to claim a 4D payload with 2 time points
    struct.pack_into("<8h", raw, 40, 4, 4, 4, 2, 2, 1, 1, 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(ShapeError):
        nifti.load_volume(path)


def test_trailing_singleton_dim_squeezed(tmp_path):
    import struct

    v = Volume(data=np.arange(64, dtype=np.float32).reshape(4, 4, 4))
    path = tmp_path / "4d1.nii"
    nifti.save_volume(path, v)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<8h", raw, 40, 4, 4, 4, 4, 1, 1, 1, 1)
    path.write_bytes(bytes(raw))
    loaded, _ = nifti.load_volume(path)
    assert loaded.data.shape == (4, 4, 4)
    assert (loaded.data == v.data).all()


def test_labelmap_and_mask_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    y = LabelMap(data=rng.integers(0, 8, size=(6, 6, 6)).astype(np.int16))
    m = LesionMask(data=(rng.random((6, 6, 6)) < 0.3).astype(np.uint8))
    nifti.save_labelmap(tmp_path / "y.nii.gz", y)
    nifti.save_mask(tmp_path / "m.nii.gz", m)
    assert (nifti.load_labelmap(tmp_path / "y.nii.gz").data == y.data).all()
    assert (nifti.load_mask(tmp_path / "m.nii.gz").data == m.data).all()


def test_array_container_round_trip(tmp_path):
    arrs = {"soft": np.random.default_rng(0).random((8, 4, 4, 4)).astype(np.float32)}
    nifti.save_arrays(tmp_path / "c.npz", **arrs)
    loaded = nifti.load_arrays(tmp_path / "c.npz")
    assert (loaded["soft"] == arrs["soft"]).all()
