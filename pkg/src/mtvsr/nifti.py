"""Single-file NIfTI-1 reading and writing (.nii, .nii.gz).

Covers the scalar subset used here: dim/pixdim, datatype, scl_slope and
scl_inter scaling, and the sform/qform transforms. Volumes are written as
float32 with sform_code 2 and magic ``n+1``; gzip members carry a fixed
mtime so identical volumes produce identical bytes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import Volume

__all__ = ["load_volume", "save_volume"]

_HDR_FMT = "i10s18sihcc8h3f4h8f3fhcc4f2i80s24s2h6f4f4f4f16s4s"
_HDR_SIZE = 348

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
    1280: np.dtype(np.uint64),
}


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as gz:
                return gz.read()
        return f.read()


def _qform_affine(quatern, qoffset, pixdim) -> np.ndarray:
    b, c, d = (float(q) for q in quatern)
    a = np.sqrt(max(0.0, 1.0 - b * b - c * c - d * d))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scales = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scales
    affine[:3, 3] = qoffset
    return affine


def load_volume(path) -> Volume:
    """Read a NIfTI-1 file into a Volume.

    Intensities are returned with scl_slope/scl_inter applied; the affine
    is taken from the sform when set, the qform otherwise, and a diagonal
    pixdim transform as a last resort.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < _HDR_SIZE:
        raise ValueError(f"{path}: file too short for a NIfTI-1 header")

    for order in ("<", ">"):
        sizeof_hdr = struct.unpack(order + "i", raw[:4])[0]
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")

    fields = struct.unpack(order + _HDR_FMT, raw[:_HDR_SIZE])
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = fields[30]
    scl_slope, scl_inter = fields[31], fields[32]
    qform_code, sform_code = fields[44], fields[45]
    quatern = fields[46:49]
    qoffset = fields[49:52]
    srow = np.array(fields[52:64], dtype=np.float64).reshape(3, 4)
    magic = fields[65]

    if magic[:3] not in (b"n+1", b"ni1"):
        raise ValueError(f"{path}: unrecognized magic {magic!r}")

    ndim = int(dim[0])
    if ndim < 1 or ndim > 7:
        raise ValueError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(1, int(n)) for n in dim[1 : ndim + 1]]
    if any(n != 1 for n in shape[3:]):
        raise ValueError(f"{path}: 4D+ volumes are not supported (dim={shape})")
    shape = (shape + [1, 1, 1])[:3]

    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(order)

    count = int(np.prod(shape))
    offset = int(round(vox_offset)) if vox_offset >= _HDR_SIZE else _HDR_SIZE
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)

    slope = float(scl_slope) if np.isfinite(scl_slope) and scl_slope != 0 else 1.0
    inter = float(scl_inter) if np.isfinite(scl_inter) else 0.0
    if slope != 1.0 or inter != 0.0:
        data = data * slope + inter

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = srow
    elif qform_code > 0:
        affine = _qform_affine(quatern, qoffset, pixdim)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

    return Volume(data, affine)


def save_volume(v: Volume, path) -> None:
    """Write a Volume as single-file NIfTI-1, float32, sform_code 2."""
    path = Path(path)
    affine = np.asarray(v.affine, dtype=np.float64)
    pixdim = [1.0] + [float(s) for s in v.voxel_size] + [0.0] * 4
    srow = affine[:3, :].astype(np.float32).ravel()

    header = struct.pack(
        "<" + _HDR_FMT,
        _HDR_SIZE,
        b"",
        b"",
        0,
        0,
        b"r",
        b"\x00",
        3, *v.shape, 1, 1, 1, 1,          # dim
        0.0, 0.0, 0.0,                     # intent_p*
        0, 16, 32, 0,                      # intent_code, datatype, bitpix, slice_start
        *pixdim,
        352.0, 1.0, 0.0,                   # vox_offset, scl_slope, scl_inter
        0, b"\x00", b"\x02",               # slice_end, slice_code, xyzt_units (mm)
        0.0, 0.0, 0.0, 0.0,                # cal_max, cal_min, slice_duration, toffset
        0, 0,
        b"mtvsr",
        b"",
        0, 2,                              # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,      # quaternion + qoffset
        *srow[:4], *srow[4:8], *srow[8:12],
        b"",
        b"n+1\x00",
    )
    payload = header + b"\x00\x00\x00\x00" + v.data.astype(np.float32).tobytes(order="F")

    if path.suffix == ".gz":
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
