"""Volume container, intensity normalization, and on-disk volume formats.

Two file formats are understood: NIfTI-1 (`.nii` / `.nii.gz`) and headerless
raw little-endian float32 (any other suffix; the (D, H, W) shape must then be
declared by the manifest).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import VolumeError
from ..nifti import is_nifti_path, read_nifti, write_nifti

ZSCORE_TOL = 1e-3


@dataclass(frozen=True)
class Volume:
    """One 3D scalar image. Immutable after construction."""

    voxels: np.ndarray
    normalized: bool = False
    shape: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite voxels")
        if self.normalized:
            mean = float(arr.mean(dtype=np.float64))
            std = float(arr.std(dtype=np.float64))
            if abs(mean) > ZSCORE_TOL or abs(std - 1.0) > ZSCORE_TOL:
                raise VolumeError(
                    f"normalized volume has mean={mean:.2e}, std={std:.6f}"
                )
        arr = arr.copy() if arr is self.voxels else arr
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "shape", tuple(int(n) for n in arr.shape))


def zscore_array(voxels: np.ndarray) -> np.ndarray:
    """Shift/scale voxels to mean 0, population std 1 (computed in float64)."""
    arr = np.asarray(voxels, dtype=np.float64)
    std = float(arr.std())
    if std == 0.0:
        raise VolumeError("cannot z-score a constant volume (zero variance)")
    out = (arr - arr.mean()) / std
    return out.astype(np.float32)


def zscore(volume: Volume) -> Volume:
    return Volume(zscore_array(volume.voxels), normalized=True)


def load_volume_file(path: str | Path, shape=None) -> np.ndarray:
    """Load one volume as float32 (D, H, W).

    Raw files need `shape`; NIfTI files carry their own and, when `shape`
    is also declared, the two must agree.
    """
    path = Path(path)
    if not path.is_file():
        raise VolumeError(f"volume file not found: {path}")
    if is_nifti_path(path):
        arr = read_nifti(path)
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise VolumeError(
                f"{path}: declared shape {tuple(shape)} != stored shape {arr.shape}"
            )
        return arr
    if shape is None:
        raise VolumeError(f"{path}: raw volume needs a declared shape")
    shape = tuple(int(n) for n in shape)
    expected = int(np.prod(shape)) * 4
    blob = path.read_bytes()
    if len(blob) != expected:
        raise VolumeError(
            f"{path}: raw file is {len(blob)} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)


def save_volume_file(path: str | Path, voxels: np.ndarray) -> None:
    """Write float32 voxels to `path`, NIfTI or raw depending on suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if is_nifti_path(path):
        write_nifti(path, voxels)
    else:
        arr = np.ascontiguousarray(voxels, dtype="<f4")
        path.write_bytes(arr.tobytes(order="C"))
