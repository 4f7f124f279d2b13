"""Geometric augmentation for volumetric inputs.

Small rigid perturbations only: an optional axis flip, integer voxel shifts
with zero fill, and small rotations about the volume center. Draws come from
the supplied generator (or one seeded from the spec), so a fixed stream
fixes the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from ..errors import ConfigError


@dataclass(frozen=True)
class AugmentSpec:
    max_rotation_deg: float = 4.0
    max_shift_voxels: int = 4
    flip_axis: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise ConfigError(
                f"max_rotation_deg must be >= 0, got {self.max_rotation_deg}"
            )
        if self.max_shift_voxels < 0:
            raise ConfigError(
                f"max_shift_voxels must be >= 0, got {self.max_shift_voxels}"
            )
        if self.flip_axis is not None and self.flip_axis not in (0, 1, 2):
            raise ConfigError(f"flip_axis must be 0, 1, 2, or None, got {self.flip_axis}")


def flip_volume(voxels: np.ndarray, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.flip(voxels, axis=axis))


def shift_volume(voxels: np.ndarray, shift: tuple[int, int, int]) -> np.ndarray:
    """Integer translation; voxels shifted past the boundary are lost and
    vacated voxels are zero-filled."""
    out = np.zeros_like(voxels)
    src, dst = [], []
    for size, s in zip(voxels.shape, shift):
        if abs(s) >= size:
            return out
        if s >= 0:
            src.append(slice(0, size - s))
            dst.append(slice(s, size))
        else:
            src.append(slice(-s, size))
            dst.append(slice(0, size + s))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_volume(
    voxels: np.ndarray, angles_deg: tuple[float, float, float]
) -> np.ndarray:
    """Trilinear rotation about the volume center, zero fill outside."""
    rot = _rotation_matrix(np.deg2rad(np.asarray(angles_deg, dtype=np.float64)))
    center = (np.asarray(voxels.shape, dtype=np.float64) - 1.0) / 2.0
    # affine_transform maps output coords through (matrix, offset) to input
    # coords, so the inverse rotation goes in the matrix slot.
    inv = rot.T
    offset = center - inv @ center
    out = affine_transform(
        voxels.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0
    )
    return out.astype(voxels.dtype)


def augment_volume(
    voxels: np.ndarray, spec: AugmentSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Apply one random flip/shift/rotate draw to a single volume."""
    if spec.max_shift_voxels >= min(voxels.shape):
        raise ConfigError(
            f"max_shift_voxels {spec.max_shift_voxels} must be smaller than the "
            f"smallest extent of shape {voxels.shape}"
        )
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    out = voxels
    if spec.flip_axis is not None and rng.integers(0, 2) == 1:
        out = flip_volume(out, spec.flip_axis)
    if spec.max_shift_voxels > 0:
        lo, hi = -spec.max_shift_voxels, spec.max_shift_voxels + 1
        shift = tuple(int(s) for s in rng.integers(lo, hi, size=3))
        out = shift_volume(out, shift)
    if spec.max_rotation_deg > 0:
        angles = tuple(
            float(a)
            for a in rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg, size=3)
        )
        out = rotate_volume(out, angles)
    return out


def augment_pair(
    first: np.ndarray,
    second: np.ndarray,
    spec: AugmentSpec,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Augment both members of a visit pair with independent draws.

    Independent perturbations mean shared structure must be carried by the
    representation rather than by voxel-exact alignment.
    """
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    return augment_volume(first, spec, rng), augment_volume(second, spec, rng)
