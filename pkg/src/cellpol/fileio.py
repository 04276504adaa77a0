"""Binary field files.

``PSF1`` (surface field): magic ``b"PSF1"``, little-endian uint32 ``L``,
``nlat``, ``nlon``, then ``nlat*nlon`` float64 grid values (latitude-major)
and ``(L+1)**2`` float64 coefficients in ``(l, m)`` lexicographic order.

``PBF1`` (bulk field): magic ``b"PBF1"``, uint32 ``L``, ``nlat``, ``nlon``,
``nr``, then ``(L+1)**2 * nr`` float64 radial profiles, mode-major.
"""

from __future__ import annotations

import struct

import numpy as np

from .bulk import BulkField, radial_mesh
from .errors import FieldFormatError
from .spectral import SurfaceField, sphere_grid

_F8 = np.dtype("<f8")


def write_psf1(path, field_: SurfaceField) -> None:
    grid = field_.grid
    with open(path, "wb") as fh:
        fh.write(b"PSF1")
        fh.write(struct.pack("<3I", grid.L, grid.nlat, grid.nlon))
        fh.write(np.ascontiguousarray(field_.values, dtype=_F8).tobytes())
        fh.write(np.ascontiguousarray(field_.coeffs, dtype=_F8).tobytes())


def read_psf1(path, check: bool = True, rtol: float = 1e-9) -> SurfaceField:
    """Read a PSF1 file.

    With ``check`` set the stored grid values must match the synthesis of
    the stored coefficients; this acts as a checksum.

    Raises
    ------
    FieldFormatError
        Bad magic, inconsistent sizes, non-finite data or a checksum mismatch.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"PSF1":
        raise FieldFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FieldFormatError(f"{path}: truncated header")
    L, nlat, nlon = struct.unpack("<3I", data[4:16])
    if L < 1:
        raise FieldFormatError(f"{path}: invalid degree {L}")
    grid = sphere_grid(L)
    if (nlat, nlon) != grid.shape:
        raise FieldFormatError(f"{path}: grid {nlat}x{nlon} does not match degree {L}")
    nv = nlat * nlon
    nc = (L + 1) ** 2
    if len(data) != 16 + 8 * (nv + nc):
        raise FieldFormatError(f"{path}: expected {16 + 8 * (nv + nc)} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype=_F8, offset=16)
    values = body[:nv].reshape(nlat, nlon)
    coeffs = body[nv:].copy()
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(coeffs))):
        raise FieldFormatError(f"{path}: non-finite data")
    field_ = SurfaceField(grid, coeffs)
    if check:
        scale = max(1.0, float(np.abs(values).max()))
        err = float(np.abs(field_.values - values).max())
        if err > rtol * scale:
            raise FieldFormatError(f"{path}: grid values disagree with coefficients (max diff {err:.3e})")
    return field_


def write_pbf1(path, w: BulkField) -> None:
    grid = w.grid
    with open(path, "wb") as fh:
        fh.write(b"PBF1")
        fh.write(struct.pack("<4I", grid.L, grid.nlat, grid.nlon, w.mesh.nr))
        fh.write(np.ascontiguousarray(w.profiles, dtype=_F8).tobytes())


def read_pbf1(path) -> BulkField:
    """Read a PBF1 file.

    The format stores interior profiles only; the trace at ``r = 1`` is
    rebuilt by second-order extrapolation from the last two cells.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"PBF1":
        raise FieldFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise FieldFormatError(f"{path}: truncated header")
    L, nlat, nlon, nr = struct.unpack("<4I", data[4:20])
    grid = sphere_grid(L)
    if (nlat, nlon) != grid.shape or nr < 2:
        raise FieldFormatError(f"{path}: inconsistent header")
    n = grid.ncoef * nr
    if len(data) != 20 + 8 * n:
        raise FieldFormatError(f"{path}: expected {20 + 8 * n} bytes, found {len(data)}")
    prof = np.frombuffer(data, dtype=_F8, offset=20).reshape(grid.ncoef, nr).copy()
    if not np.all(np.isfinite(prof)):
        raise FieldFormatError(f"{path}: non-finite data")
    boundary = 1.5 * prof[:, -1] - 0.5 * prof[:, -2]
    return BulkField(grid, radial_mesh(nr), prof, boundary)
