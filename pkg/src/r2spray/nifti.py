"""Minimal NIfTI-1 single-file (.nii) reader and writer.

Covers the uncompressed little-endian subset the pipeline needs: 3-D scalar
volumes plus 4-D stacks (multi-echo series, displacement fields). Reading
honours qform or sform affines and scl_slope/scl_inter rescaling; writing
emits an sform affine and stores float data bit-exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    GridMismatchError,
    TruncatedFileError,
    UnsupportedDatatypeError,
)
from .volume import Volume3D

__all__ = ["read_nifti", "write_nifti", "read_nifti_stack", "write_nifti_stack"]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_HEADER_DTD = [
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(_HEADER_DTD)

# datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] == -1 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _read_header_and_data(path: str) -> tuple[np.void, np.ndarray, tuple[int, ...]]:
    size = os.path.getsize(path)
    if size < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {size} bytes, header needs {HEADER_SIZE}")
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
        hdr = np.frombuffer(raw, dtype=HEADER_DTYPE, count=1)[0]
        if bytes(hdr["magic"]) not in (MAGIC, b"n+1"):
            raise BadMagicError(f"{path}: magic {bytes(hdr['magic'])!r}, expected {MAGIC!r}")
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise BadMagicError(
                f"{path}: sizeof_hdr = {int(hdr['sizeof_hdr'])} (big-endian or not NIfTI-1)"
            )
        code = int(hdr["datatype"])
        if code not in _DTYPES:
            raise UnsupportedDatatypeError(f"{path}: datatype code {code}")
        dtype = _DTYPES[code]

        ndim = int(hdr["dim"][0])
        if not 1 <= ndim <= 7:
            raise DataError(f"{path}: dim[0] = {ndim} outside [1, 7]")
        shape = tuple(int(n) for n in hdr["dim"][1 : ndim + 1])
        if any(n < 1 for n in shape):
            raise DataError(f"{path}: non-positive dimension in {shape}")

        offset = int(hdr["vox_offset"])
        n_items = int(np.prod(shape))
        need = offset + n_items * dtype.itemsize
        if size < need:
            raise TruncatedFileError(f"{path}: {size} bytes, data section needs {need}")
        fh.seek(offset)
        data = np.frombuffer(fh.read(n_items * dtype.itemsize), dtype=dtype)
    # x-fastest on disk
    return hdr, data.reshape(shape, order="F"), shape


def _affine_from_header(hdr) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
        return affine
    if int(hdr["qform_code"]) > 0:
        return _quaternion_affine(hdr)
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def _apply_scaling(data: np.ndarray, hdr) -> np.ndarray:
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        return data.astype(np.float64) * slope + inter
    return data


def read_nifti(path: str) -> Volume3D:
    """Read a 3-D volume (trailing singleton dimensions are squeezed)."""
    hdr, data, shape = _read_header_and_data(path)
    while data.ndim > 3:
        if data.shape[-1] != 1:
            raise DataError(f"{path}: expected a 3-D volume, got shape {shape}")
        data = data[..., 0]
    if data.ndim < 3:
        data = data.reshape(data.shape + (1,) * (3 - data.ndim), order="F")
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume3D(
        data=np.asarray(_apply_scaling(data, hdr), dtype=np.float64),
        spacing=spacing,
        affine=_affine_from_header(hdr),
    )


def read_nifti_stack(path: str) -> list[Volume3D]:
    """Read a 4-D file as a list of volumes sharing one grid."""
    hdr, data, shape = _read_header_and_data(path)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    if data.ndim != 4:
        raise DataError(f"{path}: expected a 3-D or 4-D file, got shape {shape}")
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    affine = _affine_from_header(hdr)
    data = _apply_scaling(data, hdr)
    return [
        Volume3D(data=np.asarray(data[..., t], dtype=np.float64), spacing=spacing, affine=affine)
        for t in range(data.shape[3])
    ]


def _build_header(vol: Volume3D, shape: tuple[int, ...], dtype: np.dtype) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dims = np.ones(8, dtype=np.int16)
    dims[0] = len(shape)
    dims[1 : 1 + len(shape)] = shape
    hdr["dim"] = dims
    hdr["datatype"] = _DTYPE_CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = vol.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = float(VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    hdr["magic"] = MAGIC
    return hdr


def _write(path: str, hdr: np.ndarray, payload: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00\x00\x00\x00")  # extension flag
        fh.write(payload.tobytes(order="F"))


def write_nifti(vol: Volume3D, path: str, dtype=np.float32) -> None:
    """Write a single 3-D volume; float32/float64 data round-trips bit-exactly."""
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {dt}")
    _write(path, _build_header(vol, vol.dims, dt), np.asfortranarray(vol.data.astype(dt)))


def write_nifti_stack(vols: list[Volume3D], path: str, dtype=np.float32) -> None:
    """Write volumes sharing one grid as a 4-D file (dim[4] = len(vols))."""
    if not vols:
        raise DataError("empty volume stack")
    first = vols[0]
    for v in vols[1:]:
        if not first.same_grid(v):
            raise GridMismatchError("stack volumes must share one grid")
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {dt}")
    stack = np.stack([v.data for v in vols], axis=3).astype(dt)
    shape = first.dims + (len(vols),)
    _write(path, _build_header(first, shape, dt), np.asfortranarray(stack))
