"""Synthetic longitudinal benchmark with known static and dynamic factors.

Each subject is a fixed sum of random Gaussian blobs (the static identity).
Diseased subjects additionally carry a hard spherical lesion at the volume
center that is absent at the first visit and grows linearly with visit index
(the dynamic factor). Because the baseline visit is lesion-free, any lesion
trace in a static code corrupts cross-reconstruction of that visit, so the
benchmark genuinely separates the two factors. Per-visit Gaussian noise is
added on top. Every subject's stream is seeded independently, so the cohort
is reproducible volume-for-volume.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .manifest import SubjectRecord, Visit, write_manifest
from .volumes import save_volume_file


@dataclass(frozen=True)
class PhantomConfig:
    n_subjects: int = 40
    visits_per_subject: int = 3
    shape: tuple[int, int, int] = (16, 16, 16)
    identity_feature_count: int = 4
    lesion_growth_rate: float = 2.4
    noise_std: float = 0.01
    disease_fraction: float = 0.5
    rng_seed: int = 0
    lesion_radius0: float = 0.0
    lesion_amplitude: float = 3.0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ConfigError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.visits_per_subject < 2:
            raise ConfigError(
                f"visits_per_subject must be >= 2, got {self.visits_per_subject}"
            )
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ConfigError(f"shape must be 3 extents each >= 8, got {self.shape}")
        if self.identity_feature_count < 1:
            raise ConfigError(
                f"identity_feature_count must be >= 1, got {self.identity_feature_count}"
            )
        if self.lesion_growth_rate < 0:
            raise ConfigError(
                f"lesion_growth_rate must be >= 0, got {self.lesion_growth_rate}"
            )
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.disease_fraction <= 1.0:
            raise ConfigError(
                f"disease_fraction must lie in [0, 1], got {self.disease_fraction}"
            )
        if self.lesion_radius0 < 0:
            raise ConfigError(f"lesion_radius0 must be >= 0, got {self.lesion_radius0}")
        if self.lesion_amplitude <= 0:
            raise ConfigError(
                f"lesion_amplitude must be > 0, got {self.lesion_amplitude}"
            )
        max_radius = self.lesion_radius0 + self.lesion_growth_rate * (
            self.visits_per_subject - 1
        )
        bound = (min(self.shape) - 1) / 2.0 - 1.0
        if max_radius > bound:
            raise ConfigError(
                f"largest lesion radius {max_radius:.2f} exceeds volume bound "
                f"{bound:.2f} for shape {self.shape}; shrink lesion_radius0 or "
                f"lesion_growth_rate"
            )

    def lesion_radius(self, visit_index: int) -> float:
        return self.lesion_radius0 + self.lesion_growth_rate * visit_index


@dataclass(frozen=True)
class TruthRow:
    subject_id: str
    visit_index: int
    disease_label: int
    lesion_radius: float


@dataclass(frozen=True)
class PhantomResult:
    config: PhantomConfig
    records: tuple[SubjectRecord, ...]
    volumes: dict[str, np.ndarray]
    truth: tuple[TruthRow, ...]


def lesion_mask(shape: tuple[int, int, int], radius: float) -> np.ndarray:
    """Boolean ball of the given radius about the volume center."""
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    grid = np.indices(shape).astype(np.float64)
    dist2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
    return dist2 <= radius * radius


def _is_diseased(index: int, fraction: float) -> bool:
    # Bresenham-style interleaving: exact counts, stable per index.
    return math.floor((index + 1) * fraction) > math.floor(index * fraction)


def _identity_field(shape: tuple[int, int, int], n_blobs: int, rng) -> np.ndarray:
    grid = np.indices(shape).astype(np.float64)
    extent = np.asarray(shape, dtype=np.float64)
    total = np.zeros(shape, dtype=np.float64)
    for _ in range(n_blobs):
        center = rng.uniform(0.15, 0.85, size=3) * (extent - 1.0)
        sigma = rng.uniform(min(shape) / 6.0, min(shape) / 3.0)
        amplitude = rng.uniform(0.5, 1.0)
        dist2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
        total += amplitude * np.exp(-dist2 / (2.0 * sigma * sigma))
    peak = np.abs(total).max()
    if peak > 0:
        total /= peak
    return total


def synthesize_phantoms(config: PhantomConfig) -> PhantomResult:
    records = []
    volumes: dict[str, np.ndarray] = {}
    truth = []
    for i in range(config.n_subjects):
        subject_id = f"S{i:03d}"
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([config.rng_seed, i]))
        )
        identity = _identity_field(config.shape, config.identity_feature_count, rng)
        diseased = _is_diseased(i, config.disease_fraction)
        visits = []
        for v in range(config.visits_per_subject):
            vol = identity.copy()
            radius = 0.0
            if diseased:
                radius = config.lesion_radius(v)
                if radius > 0:
                    vol[lesion_mask(config.shape, radius)] += config.lesion_amplitude
            if config.noise_std > 0:
                vol += rng.normal(0.0, config.noise_std, size=config.shape)
            path = f"{subject_id}_visit{v}.nii"
            volumes[path] = vol.astype(np.float32)
            visits.append(Visit(index=v, time=float(v), path=path, shape=config.shape))
            truth.append(TruthRow(subject_id, v, int(diseased), radius))
        records.append(
            SubjectRecord(subject_id=subject_id, visits=tuple(visits), label=int(diseased))
        )
    return PhantomResult(
        config=config,
        records=tuple(records),
        volumes=volumes,
        truth=tuple(truth),
    )


def write_phantom(result: PhantomResult, out_dir: str | Path) -> Path:
    """Write volumes, manifest, and ground-truth table; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rel_path, vol in result.volumes.items():
        save_volume_file(out_dir / rel_path, vol)
    manifest_path = out_dir / "manifest.json"
    write_manifest(result.records, manifest_path)
    with open(out_dir / "ground_truth.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "visit_index", "disease_label", "lesion_radius"])
        for row in result.truth:
            writer.writerow(
                [row.subject_id, row.visit_index, row.disease_label, f"{row.lesion_radius:g}"]
            )
    with open(out_dir / "phantom_config.json", "w") as f:
        json.dump(
            {
                "n_subjects": result.config.n_subjects,
                "visits_per_subject": result.config.visits_per_subject,
                "shape": list(result.config.shape),
                "identity_feature_count": result.config.identity_feature_count,
                "lesion_growth_rate": result.config.lesion_growth_rate,
                "noise_std": result.config.noise_std,
                "disease_fraction": result.config.disease_fraction,
                "rng_seed": result.config.rng_seed,
                "lesion_radius0": result.config.lesion_radius0,
                "lesion_amplitude": result.config.lesion_amplitude,
            },
            f,
            indent=2,
        )
        f.write("\n")
    return manifest_path
