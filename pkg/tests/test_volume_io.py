import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from stretchq.exceptions import DataError, NiftiError
from stretchq.volume_io import (
    HEADER_DTYPE,
    Volume4D,
    export_slice_pgm,
    nifti_bytes,
    read_fit,
    read_nifti,
    read_pgm,
    summarize_maps,
    write_csv,
    write_fit,
    write_nifti,
)

AFFINE = np.array([
    [0.0, -2.5, 0.0, 91.3],
    [2.5, 0.0, 0.0, -126.7],
    [0.0, 0.0, 2.0, -72.1],
    [0.0, 0.0, 0.0, 1.0],
])


def volume(shape=(2, 2, 2, 3), seed=0):
    rng = np.random.default_rng(seed)
    return Volume4D(rng.normal(1e6, 3e5, shape), AFFINE, header={"descrip": "test"})


def patch_header(raw, **fields):
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE).copy()
    for k, v in fields.items():
        hdr[k] = v
    return hdr.tobytes() + raw[348:]


def test_minimal_file(tmp_path):
    p = tmp_path / "v.nii"
    write_nifti(volume(), p)
    raw = p.read_bytes()
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    assert hdr["sizeof_hdr"] == 348 and hdr["magic"] == b"n+1"
    assert list(hdr["dim"][:5]) == [4, 2, 2, 2, 3] and hdr["datatype"] == 16
    assert read_nifti(p).dims == (2, 2, 2, 3)


def test_float64_roundtrip_identity(tmp_path):
    v = volume((3, 4, 2, 5))
    p = tmp_path / "v.nii"
    write_nifti(v, p, "float64")
    r = read_nifti(p)
    assert_array_equal(r.data, v.data)
    assert_array_equal(r.affine, v.affine)
    assert_array_equal(r.voxel_size, v.voxel_size)
    assert r.header["descrip"] == "test"


def test_float32_within_ulp(tmp_path):
    v = volume()
    p = tmp_path / "v.nii"
    write_nifti(v, p)
    r = read_nifti(p)
    assert np.all(np.abs(r.data - v.data) <= np.spacing(np.abs(v.data).astype(np.float32)))
    assert_array_equal(r.affine, AFFINE)


def test_scl_scaling(tmp_path):
    raw = nifti_bytes(Volume4D(np.zeros((1, 1, 1))))
    off = len(raw) - 4
    raw = patch_header(raw[:off], datatype=4, bitpix=16, scl_slope=2.0, scl_inter=1.0)
    p = tmp_path / "s.nii"
    p.write_bytes(raw + np.array([3], "<i2").tobytes())
    assert read_nifti(p).data.ravel()[0] == 7.0


@pytest.mark.parametrize("dt,code", [("u1", 2), ("i2", 4), ("i4", 8)])
def test_integer_datatypes(tmp_path, dt, code):
    vals = np.array([[[1, 2], [3, 4]]], dtype=dt)
    raw = nifti_bytes(Volume4D(np.zeros(vals.shape)))
    off = len(raw) - vals.size * 4
    raw = patch_header(raw[:off], datatype=code, bitpix=8 * np.dtype(dt).itemsize)
    p = tmp_path / "i.nii"
    p.write_bytes(raw + vals.astype("<" + dt if dt != "u1" else dt).tobytes(order="F"))
    assert_array_equal(read_nifti(p).data[..., 0], vals)


def test_bad_magic(tmp_path):
    p = tmp_path / "b.nii"
    p.write_bytes(patch_header(nifti_bytes(volume()), magic=b"xyz\x00"))
    with pytest.raises(NiftiError, match="xyz"):
        read_nifti(p)


def test_unsupported_datatype(tmp_path):
    p = tmp_path / "b.nii"
    p.write_bytes(patch_header(nifti_bytes(volume()), datatype=32))
    with pytest.raises(NiftiError, match="datatype"):
        read_nifti(p)


def test_truncated(tmp_path):
    p = tmp_path / "t.nii"
    raw = nifti_bytes(volume())
    p.write_bytes(raw[:-10])
    with pytest.raises(NiftiError, match="truncated"):
        read_nifti(p)
    p.write_bytes(raw[:100])
    with pytest.raises(NiftiError, match="truncated"):
        read_nifti(p)


def test_endianness_transparent(tmp_path):
    v = volume()
    a, b = tmp_path / "le.nii", tmp_path / "be.nii"
    write_nifti(v, a, "float64", "<")
    write_nifti(v, b, "float64", ">")
    assert a.read_bytes() != b.read_bytes()
    ra, rb = read_nifti(a), read_nifti(b)
    assert_array_equal(ra.data, rb.data)
    assert_array_equal(ra.affine, rb.affine)


def test_gzip(tmp_path):
    v = volume()
    p = tmp_path / "v.nii.gz"
    write_nifti(v, p, "float64")
    assert p.read_bytes()[:2] == b"\x1f\x8b"
    assert_array_equal(read_nifti(p).data, v.data)
    write_nifti(v, tmp_path / "w.nii.gz", "float64")
    assert (tmp_path / "w.nii.gz").read_bytes() == p.read_bytes()
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(NiftiError):
        read_nifti(p)


def test_independent_parser(tmp_path):
    nib = pytest.importorskip("nibabel")
    v = volume((3, 2, 2, 4))
    p = tmp_path / "v.nii"
    write_nifti(v, p, "float32")
    img = nib.load(str(p))
    assert img.shape == (3, 2, 2, 4)
    assert_allclose(img.affine, AFFINE, atol=1e-5)
    assert_allclose(img.get_fdata(), v.data.astype(np.float32), rtol=0)
    assert_allclose(img.header.get_zooms()[:3], [2.5, 2.5, 2.0])
    # and the reverse direction
    q = tmp_path / "nib.nii"
    nib.save(nib.Nifti1Image(v.data.astype(np.float32), AFFINE), str(q))
    r = read_nifti(q)
    assert_allclose(r.data, v.data.astype(np.float32), rtol=0)
    assert_allclose(r.affine, AFFINE, atol=1e-5)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=4, max_dims=4, max_side=3),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_roundtrip_property(arr):
    v = Volume4D(arr, AFFINE)
    buf = nifti_bytes(v, "float64")
    import os
    import tempfile

    fd, name = tempfile.mkstemp(suffix=".nii")
    try:
        os.write(fd, buf)
        os.close(fd)
        assert_array_equal(read_nifti(name).data, arr)
    finally:
        os.unlink(name)


def test_volume_validation():
    with pytest.raises(DataError):
        Volume4D(np.zeros((2, 2)))
    assert Volume4D(np.zeros((2, 2, 2))).dims == (2, 2, 2, 1)


class TestPgm:
    def test_constant_midpoint(self):
        img = read_pgm(export_slice_pgm(np.full((4, 3, 1), 5.0), 2, 0, (4.0, 6.0)))
        assert img.shape == (3, 4)
        assert np.all((img == 127) | (img == 128))
        assert np.all(img == 128)  # 127.5 rounds half up

    def test_auto_ramp(self):
        ramp = np.linspace(0, 1, 101).reshape(101, 1, 1)
        img = read_pgm(export_slice_pgm(ramp, 2, 0))
        assert img.min() == 0 and img.max() == 255
        assert np.all(np.diff(img[0].astype(int)) >= 0)

    def test_nan_black(self):
        a = np.full((2, 2, 1), 10.0)
        a[0, 0, 0] = np.nan
        img = read_pgm(export_slice_pgm(a, 2, 0, (0, 10)))
        assert img[-1, 0] == 0 and img[0, 1] == 255

    def test_orientation(self):
        a = np.zeros((3, 2, 1))
        a[2, 1, 0] = 1.0
        img = read_pgm(export_slice_pgm(a, 2, 0, (0, 1)))
        assert img[0, 2] == 255 and img.sum() == 255

    def test_errors(self):
        with pytest.raises(IndexError):
            export_slice_pgm(np.zeros((2, 2, 2)), 2, 5)
        with pytest.raises(ValueError):
            export_slice_pgm(np.zeros((2, 2, 2)), 2, 0, (1, 1))
        with pytest.raises(DataError):
            read_pgm(b"P2\n1 1\n255\n\x00")


def test_csv_format(small_phantom):
    from stretchq.qspace import QMaps

    _, _, truth = small_phantom
    qm = QMaps(truth.rtop, truth.qmsd, truth.qmfd, {"estimator": "direct", "shell_b": 1000.0})
    rows = summarize_maps(qm, {"all": np.ones(truth.rtop.shape, bool), "wm": truth.labels == 0})
    buf = io.StringIO()
    write_csv(rows, buf)
    text = buf.getvalue()
    lines = text.split("\n")
    assert lines[0] == "region,measure,estimator,shell_b,mean,median,p05,p95"
    assert "\r" not in text and len(lines) == 1 + 6 + 1
    first = lines[1].split(",")
    assert first[:4] == ["all", "rtop", "direct", "1000.0"]
    assert_allclose(float(first[4]), truth.rtop.mean(), rtol=1e-15)


def test_fit_container_roundtrip(tmp_path, small_phantom):
    from stretchq.acquisition import group_shells, match_directions
    from stretchq.fitting import fit_stretched_volume

    spec, vol, _ = small_phantom
    bundles = match_directions(spec.scheme, group_shells(spec.scheme))
    fit = fit_stretched_volume(vol.data, spec.scheme, bundles)
    p = tmp_path / "f.sqfit"
    write_fit(fit, p, "stretchq test", AFFINE)
    back, meta = read_fit(p, with_metadata=True)
    for key in ("D", "alpha", "rss", "n_iter", "flags", "s0", "mask", "directions", "members", "shell_b"):
        assert_array_equal(getattr(back, key), getattr(fit, key))
    assert back.tau == fit.tau and meta["software"] == "stretchq test"
    assert_array_equal(np.array(meta["affine"]).reshape(4, 4), AFFINE)
    write_fit(back, tmp_path / "g.sqfit", "stretchq test", AFFINE)
    assert (tmp_path / "g.sqfit").read_bytes() == p.read_bytes()
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated"):
        read_fit(p)
    p.write_bytes(b"NOTAFIT!" + bytes(20))
    with pytest.raises(DataError, match="magic"):
        read_fit(p)
