"""Minimal NIfTI-1 single-file volume IO.

Supports reading and writing `.nii` / `.nii.gz` files containing one 3D
scalar image, which is all this package needs. Arrays are exchanged in
(D, H, W) C-order; on disk the first NIfTI dimension is the fastest-varying
one, so dim[1:4] is stored as (W, H, D) and the raw bytes are the C-order
bytes of the (D, H, W) array. gzip streams are written with mtime=0 so
identical volumes produce identical files.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (unscaled, native layout)
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


def _open_maybe_gz(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return gzip.GzipFile(str(path), mode, mtime=0)
    return open(path, mode)


def is_nifti_path(path: str | Path) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_nifti(path: str | Path) -> np.ndarray:
    """Read a 3D NIfTI-1 volume as a float32 (D, H, W) array."""
    path = Path(path)
    try:
        with _open_maybe_gz(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VolumeError(f"cannot read NIfTI file {path}: {exc}") from exc
    if len(blob) < HEADER_SIZE:
        raise VolumeError(f"{path}: truncated NIfTI header ({len(blob)} bytes)")

    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    if sizeof_hdr == 348:
        end = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == 348:
        end = ">"
    else:
        raise VolumeError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from(end + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4 : 1 + max(ndim, 3)]):
        raise VolumeError(f"{path}: only single 3D volumes are supported (dim={dim})")
    nx, ny, nz = dim[1], dim[2], dim[3]

    datatype = struct.unpack_from(end + "h", blob, 70)[0]
    if datatype not in _DTYPES:
        raise VolumeError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(end)

    vox_offset = int(struct.unpack_from(end + "f", blob, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(end + "2f", blob, 112)

    count = nx * ny * nz
    data = blob[vox_offset : vox_offset + count * dtype.itemsize]
    if len(data) < count * dtype.itemsize:
        raise VolumeError(f"{path}: data section truncated")
    flat = np.frombuffer(data, dtype=dtype)
    # File order is x-fastest; our convention is (D, H, W) with W fastest.
    arr = flat.reshape((nz, ny, nx)).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * np.float32(slope) + np.float32(scl_inter)
    return arr


def write_nifti(path: str | Path, volume: np.ndarray) -> None:
    """Write a 3D array to `path` as a float32 NIfTI-1 volume."""
    path = Path(path)
    arr = np.ascontiguousarray(volume, dtype="<f4")
    if arr.ndim != 3:
        raise VolumeError(f"expected a 3D array, got shape {arr.shape}")
    d, h, w = arr.shape

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, 1.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, 1.0, 0.0)
    hdr[344:348] = MAGIC

    with _open_maybe_gz(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(arr.tobytes(order="C"))
