import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cellpol.bulk import BulkField, harmonic_extend, radial_mesh
from cellpol.errors import FieldFormatError
from cellpol.fileio import read_pbf1, read_psf1, write_pbf1, write_psf1
from cellpol.spectral import SurfaceField, sphere_grid


@pytest.fixture
def field6():
    grid = sphere_grid(6)
    return SurfaceField(grid, np.random.default_rng(0).standard_normal(grid.ncoef))


def test_psf1_round_trip_is_exact(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    back = read_psf1(path)
    assert np.array_equal(back.coeffs, field6.coeffs)


def test_psf1_layout(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    data = path.read_bytes()
    assert data[:4] == b"PSF1"
    assert struct.unpack("<3I", data[4:16]) == (6, 7, 14)
    assert len(data) == 16 + 8 * (7 * 14 + 49)
    vals = np.frombuffer(data[16 : 16 + 8 * 98], dtype="<f8").reshape(7, 14)
    assert_allclose(vals, field6.values)
    assert_allclose(np.frombuffer(data[16 + 8 * 98 :], dtype="<f8"), field6.coeffs)


def test_psf1_rejects_bad_magic(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FieldFormatError):
        read_psf1(path)


def test_psf1_checksum_detects_edited_value(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    data = bytearray(path.read_bytes())
    data[16:24] = struct.pack("<d", 123.0)
    path.write_bytes(bytes(data))
    with pytest.raises(FieldFormatError):
        read_psf1(path)
    assert read_psf1(path, check=False).L == 6


def test_psf1_rejects_truncation_and_nan(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FieldFormatError):
        read_psf1(path)
    path.write_bytes(data[:10])
    with pytest.raises(FieldFormatError):
        read_psf1(path)
    bad = bytearray(data)
    bad[-8:] = struct.pack("<d", float("nan"))
    path.write_bytes(bytes(bad))
    with pytest.raises(FieldFormatError):
        read_psf1(path)


def test_psf1_rejects_mismatched_grid(tmp_path, field6):
    path = tmp_path / "f.psf1"
    write_psf1(path, field6)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(FieldFormatError):
        read_psf1(path)


def test_pbf1_round_trip(tmp_path, field6):
    w = harmonic_extend(field6, 16)
    path = tmp_path / "w.pbf1"
    write_pbf1(path, w)
    back = read_pbf1(path)
    assert np.array_equal(back.profiles, w.profiles)
    assert back.mesh.nr == 16


def test_pbf1_trace_extrapolation_exact_for_linear_profiles(tmp_path):
    grid = sphere_grid(2)
    mesh = radial_mesh(10)
    prof = np.outer(np.arange(1.0, grid.ncoef + 1), 0.5 + 2.0 * mesh.r)
    path = tmp_path / "w.pbf1"
    write_pbf1(path, BulkField(grid, mesh, prof, prof[:, -1]))
    assert_allclose(read_pbf1(path).boundary, np.arange(1.0, grid.ncoef + 1) * 2.5, rtol=1e-13)


def test_pbf1_rejects_bad_files(tmp_path, field6):
    path = tmp_path / "w.pbf1"
    write_pbf1(path, harmonic_extend(field6, 8))
    data = path.read_bytes()
    path.write_bytes(b"PSF1" + data[4:])
    with pytest.raises(FieldFormatError):
        read_pbf1(path)
    path.write_bytes(data[:-1])
    with pytest.raises(FieldFormatError):
        read_pbf1(path)
