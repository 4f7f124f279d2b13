"""Longitudinal dataset manifests.

A manifest is a JSON document:

    {"subjects": [
        {"id": "s000", "label": 0, "visits": [
            {"index": 0, "time": 0.0, "path": "vols/s000_v0.nii", "shape": [16, 16, 16]},
            ...
        ]},
        ...
    ]}

`label` is optional (null for unlabeled pretraining subjects), `shape` is
optional for NIfTI volumes and mandatory for raw ones. Volume paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ManifestError, VolumeError
from .volumes import load_volume_file


@dataclass(frozen=True)
class Visit:
    index: int
    time: float
    path: str
    shape: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    visits: tuple[Visit, ...]
    label: int | None = None

    def __post_init__(self):
        if len(self.visits) < 1:
            raise ManifestError(f"subject {self.subject_id} has no visits")
        indices = [v.index for v in self.visits]
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ManifestError(
                f"subject {self.subject_id}: visit indices not strictly increasing: {indices}"
            )
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ManifestError(
                f"subject {self.subject_id}: acquisition times not strictly increasing: {times}"
            )


def _parse_visit(subject_id: str, raw: dict, base_dir: Path) -> Visit:
    try:
        index = int(raw["index"])
        time = float(raw["time"])
        path = str(raw["path"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"subject {subject_id}: malformed visit entry {raw!r}") from exc
    shape = raw.get("shape")
    if shape is not None:
        shape = tuple(int(n) for n in shape)
        if len(shape) != 3 or any(n <= 0 for n in shape):
            raise ManifestError(f"subject {subject_id}: bad visit shape {shape}")
    return Visit(index=index, time=time, path=str(base_dir / path), shape=shape)


def load_dataset(manifest_path: str | Path, validate_volumes: bool = True) -> list[SubjectRecord]:
    """Parse and validate a manifest; returns records sorted by subject id.

    With `validate_volumes` every referenced file is opened once and checked
    against its declared shape and the dataset-wide shape.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "subjects" not in doc:
        raise ManifestError(f"{manifest_path}: expected a top-level 'subjects' list")

    base_dir = manifest_path.parent
    records = []
    seen = set()
    for raw in doc["subjects"]:
        subject_id = str(raw.get("id"))
        if subject_id in seen:
            raise ManifestError(f"duplicate subject id {subject_id!r}")
        seen.add(subject_id)
        label = raw.get("label")
        visits = [_parse_visit(subject_id, v, base_dir) for v in raw.get("visits", [])]
        visits.sort(key=lambda v: v.index)
        records.append(
            SubjectRecord(
                subject_id=subject_id,
                visits=tuple(visits),
                label=None if label is None else int(label),
            )
        )
    records.sort(key=lambda r: r.subject_id)

    if validate_volumes:
        dataset_shape = None
        for record in records:
            for visit in record.visits:
                try:
                    arr = load_volume_file(visit.path, visit.shape)
                except VolumeError as exc:
                    raise VolumeError(
                        f"subject {record.subject_id} visit {visit.index}: {exc}"
                    ) from exc
                if dataset_shape is None:
                    dataset_shape = arr.shape
                elif arr.shape != dataset_shape:
                    raise ManifestError(
                        f"subject {record.subject_id} visit {visit.index}: "
                        f"shape {arr.shape} != dataset shape {dataset_shape}"
                    )
    return records


def load_volumes(records: list[SubjectRecord]) -> dict[str, np.ndarray]:
    """Eagerly load every referenced volume, keyed by resolved path."""
    out: dict[str, np.ndarray] = {}
    for record in records:
        for visit in record.visits:
            if visit.path not in out:
                out[visit.path] = load_volume_file(visit.path, visit.shape)
    return out


def write_manifest(records: list[SubjectRecord], manifest_path: str | Path) -> None:
    """Serialize records to JSON with volume paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent.resolve()
    subjects = []
    for record in records:
        visits = []
        for visit in record.visits:
            path = Path(visit.path)
            try:
                rel = str(path.resolve().relative_to(base))
            except ValueError:
                rel = str(path)
            entry = {"index": visit.index, "time": visit.time, "path": rel}
            if visit.shape is not None:
                entry["shape"] = list(visit.shape)
            visits.append(entry)
        subjects.append({"id": record.subject_id, "label": record.label, "visits": visits})
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps({"subjects": subjects}, indent=2) + "\n")
