import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tumorsim.errors import NonFiniteError, ShapeMismatchError, VolumeFormatError
from tumorsim.volume import (BinaryMask, Volume, as_mask, check_same_dims, mean_intensity,
                             nifti_header_bytes, read_nifti, read_nifti_header, read_pgm, read_raw,
                             read_volume, render_slice, write_nifti, write_raw, write_volume)


def _vol(shape=(5, 4, 3), spacing=(1.0, 2.0, 0.5), seed=0):
    data = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    return Volume(data, spacing)


def test_volume_is_readonly_copy():
    a = np.zeros((2, 2, 2), np.float32)
    v = Volume(a, (1, 1, 1))
    a[0, 0, 0] = 5
    assert v.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_volume_rejects_nonfinite_with_index():
    a = np.zeros((3, 3, 3), np.float32)
    a[1, 2, 0] = np.nan
    with pytest.raises(NonFiniteError) as err:
        Volume(a, (1, 1, 1))
    assert err.value.index == np.ravel_multi_index((1, 2, 0), (3, 3, 3), order="F")


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1)])
def test_volume_rejects_bad_spacing(spacing):
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), np.float32), spacing)


def test_check_same_dims():
    check_same_dims(_vol(), _vol(seed=1))
    with pytest.raises(ShapeMismatchError):
        check_same_dims(_vol(), _vol((5, 4, 4)))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_roundtrip_bit_exact(tmp_path, suffix):
    v = _vol()
    p = tmp_path / f"a{suffix}"
    write_nifti(v, p)
    w = read_nifti(p)
    assert w.dims == v.dims
    assert w.spacing == v.spacing
    assert np.array_equal(w.data, v.data)


def test_nifti_layout_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(4, 3, 2)
    p = tmp_path / "a.nii"
    write_nifti(Volume(data, (1, 1, 1)), p)
    raw = p.read_bytes()
    hdr = raw[:348]
    assert struct.unpack("<i", hdr[:4])[0] == 348
    assert struct.unpack("<8h", hdr[40:56])[:4] == (3, 4, 3, 2)
    assert struct.unpack("<h", hdr[70:72])[0] == 16
    assert struct.unpack("<f", hdr[108:112])[0] == 352.0
    assert hdr[344:348] == b"n+1\0"
    body = np.frombuffer(raw[352:], dtype="<f4")
    assert np.array_equal(body, data.ravel(order="F"))


def test_nifti_gzip_is_deterministic(tmp_path):
    v = _vol()
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes()) == _nifti_bytes(v, tmp_path)


def _nifti_bytes(v, tmp_path):
    write_nifti(v, tmp_path / "plain.nii")
    return (tmp_path / "plain.nii").read_bytes()


def test_nifti_header_fields(tmp_path):
    write_nifti(_vol(spacing=(0.7, 0.8, 2.5)), tmp_path / "a.nii")
    h = read_nifti_header(tmp_path / "a.nii")
    assert h.dims == (5, 4, 3)
    assert h.spacing == pytest.approx((0.7, 0.8, 2.5))
    assert len(nifti_header_bytes((5, 4, 3), (1, 1, 1))) == 348


def _patch(path, offset, fmt, value):
    raw = bytearray(path.read_bytes())
    struct.pack_into(fmt, raw, offset, value)
    path.write_bytes(bytes(raw))


def test_nifti_scaling_applied(tmp_path):
    p = tmp_path / "a.nii"
    v = _vol()
    write_nifti(v, p)
    _patch(p, 112, "<f", 2.0)   # scl_slope
    _patch(p, 116, "<f", 1.0)   # scl_inter
    w = read_nifti(p)
    assert np.allclose(w.data, 2.0 * v.data + 1.0)


@pytest.mark.parametrize("offset,fmt,value", [
    (344, "<4s", b"ni1\0"),    # detached header
    (70, "<h", 64),            # float64: unsupported
    (40, "<h", 4),             # 4D
])
def test_nifti_rejects_unsupported(tmp_path, offset, fmt, value):
    p = tmp_path / "a.nii"
    write_nifti(_vol(), p)
    _patch(p, offset, fmt, value)
    with pytest.raises(VolumeFormatError):
        read_nifti(p)


def test_nifti_truncated(tmp_path):
    p = tmp_path / "a.nii"
    write_nifti(_vol(), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        read_nifti(p)


def test_nifti_nonfinite_rejected(tmp_path):
    p = tmp_path / "a.nii"
    write_nifti(_vol(), p)
    _patch(p, 352 + 4 * 7, "<f", float("inf"))
    with pytest.raises(NonFiniteError) as err:
        read_nifti(p)
    assert err.value.index == 7


def test_raw_roundtrip(tmp_path):
    v = _vol(spacing=(1.5, 1.0, 3.0))
    write_raw(v, tmp_path / "a.raw", tmp_path / "a.json")
    side = json.loads((tmp_path / "a.json").read_text())
    assert side["dims"] == [5, 4, 3]
    assert side["dtype"] == "float32"
    w = read_raw(tmp_path / "a.raw", tmp_path / "a.json")
    assert np.array_equal(w.data, v.data) and w.spacing == v.spacing
    assert np.array_equal(np.fromfile(tmp_path / "a.raw", "<f4"), v.data.ravel(order="F"))


def test_raw_size_mismatch(tmp_path):
    write_raw(_vol(), tmp_path / "a.raw", tmp_path / "a.json")
    (tmp_path / "a.raw").write_bytes(b"\0" * 12)
    with pytest.raises(VolumeFormatError):
        read_raw(tmp_path / "a.raw", tmp_path / "a.json")


@pytest.mark.parametrize("name", ["v.nii", "v.nii.gz", "v.raw"])
def test_dispatch_roundtrip(tmp_path, name):
    v = _vol()
    write_volume(v, tmp_path / name)
    assert np.array_equal(read_volume(tmp_path / name).data, v.data)


def test_mask_roundtrip_via_volume(tmp_path):
    m = BinaryMask(np.random.default_rng(0).random((6, 5, 4)) > 0.5, (1, 1, 1))
    write_volume(m, tmp_path / "m.nii")
    back = as_mask(read_volume(tmp_path / "m.nii"))
    assert np.array_equal(back.data, m.data)


def test_mean_intensity_region():
    data = np.zeros((4, 4, 4), np.float32)
    data[:2] = 3.0
    region = BinaryMask(data > 0, (1, 1, 1))
    v = Volume(data, (1, 1, 1))
    assert mean_intensity(v) == pytest.approx(1.5)
    assert mean_intensity(v, region) == 3.0
    with pytest.raises(ValueError):
        mean_intensity(v, BinaryMask.empty((4, 4, 4)))


def test_render_slice_window_and_orientation(tmp_path):
    data = np.zeros((4, 3, 2), np.float32)
    data[3, 0, 1] = 10.0
    data[0, 2, 1] = 5.0
    img = render_slice(Volume(data, (1, 1, 1)), "axial", 1, (0.0, 10.0))
    # rows follow y, columns follow x
    assert img.pixels.shape == (3, 4)
    assert img.pixels[0, 3] == 255
    assert img.pixels[2, 0] == 128  # 127.5 rounds half to even
    img.write_pgm(tmp_path / "s.pgm")
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "s.pgm"), img.pixels)


def test_render_slice_errors():
    v = _vol()
    with pytest.raises(IndexError):
        render_slice(v, "axial", 3, (0, 1))
    with pytest.raises(ValueError):
        render_slice(v, "axial", 0, (1, 1))
    with pytest.raises(ValueError):
        render_slice(v, "oblique", 0, (0, 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.125, 5.0, width=32)] * 3))
def test_nifti_roundtrip_property(tmp_path_factory, data, spacing):
    p = tmp_path_factory.mktemp("h") / "a.nii"
    v = Volume(data, spacing)
    write_nifti(v, p)
    w = read_nifti(p)
    assert np.array_equal(w.data, v.data)
    assert w.spacing == v.spacing
