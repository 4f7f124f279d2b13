"""Attribution maps over input volumes, plus embedding export.

Channel-weighted activation maps use the last encoder block's pre-pool
activations; raw input-gradient maps expose the exact quantity the training
penalty shrinks.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data.manifest import SubjectRecord
from .data.volumes import zscore_array
from .errors import MetricError, ModelError
from .evaluation import EmbeddingTable, encode_dataset
from .model import ClassifierHead, CrossEncoder, select_block
from .nifti import write_nifti


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    method: str
    target: int | str

    def __post_init__(self):
        if self.method not in ("gradcam", "input_grad"):
            raise MetricError(f"unknown saliency method {self.method!r}")
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise MetricError(f"saliency map must be 3D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise MetricError("saliency map contains non-finite values")
        if (values < 0).any():
            raise MetricError("saliency map contains negative values")
        peak = float(values.max()) if values.size else 0.0
        if peak > 0 and abs(peak - 1.0) > 1e-5:
            raise MetricError(
                f"saliency map must be max-normalized to 1 (or all zero), "
                f"peak is {peak}"
            )
        object.__setattr__(self, "values", values)


def _normalized(raw: torch.Tensor) -> np.ndarray:
    values = raw.detach().numpy().astype(np.float32)
    peak = values.max() if values.size else 0.0
    if peak > 0:
        values = values / peak
    return values


def _as_input(volume: np.ndarray, normalize: bool) -> torch.Tensor:
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3:
        raise ModelError(f"expected a 3D volume, got shape {volume.shape}")
    if normalize:
        volume = zscore_array(volume)
    return torch.from_numpy(volume)[None, None]


def gradcam(
    volume: np.ndarray,
    model: CrossEncoder,
    head: ClassifierHead,
    target_class: int = 1,
    normalize_input: bool = True,
) -> SaliencyMap:
    """Rectified channel combination of the last encoder block's pre-pool
    activations, weighted by spatially averaged logit gradients, upsampled
    trilinearly to input shape and max-normalized.

    A target logit with zero gradient everywhere yields an all-zero map.
    """
    if target_class not in range(head.cspec.n_classes):
        raise ModelError(
            f"target_class {target_class} out of range for {head.cspec.n_classes} classes"
        )
    model.eval()
    head.eval()
    # grad flows to the activations via the input, so frozen encoders work too
    x = _as_input(volume, normalize_input).requires_grad_(True)
    code, acts = model.encode_with_activations(x)
    logits = head(select_block(code, head.cspec.input))
    (grads,) = torch.autograd.grad(
        logits[0, target_class], acts, allow_unused=True
    )
    if grads is None:
        grads = torch.zeros_like(acts)
    weights = grads.mean(dim=(2, 3, 4), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(volume.shape), mode="trilinear", align_corners=False)
    return SaliencyMap(values=_normalized(cam[0, 0]), method="gradcam", target=target_class)


def input_saliency(
    volume: np.ndarray,
    model: CrossEncoder,
    normalize_input: bool = True,
) -> SaliencyMap:
    """|d(sum of dynamic components)/d(input)| per voxel, max-normalized."""
    model.eval()
    x = _as_input(volume, normalize_input).requires_grad_(True)
    code = model.encode(x)
    total = code.d.sum()
    if total.requires_grad:
        (g,) = torch.autograd.grad(total, x, allow_unused=True)
    else:
        g = None  # constant encoder: no graph back to the input
    if g is None:
        g = torch.zeros_like(x)
    return SaliencyMap(
        values=_normalized(g[0, 0].abs()), method="input_grad", target="dynamic_sum"
    )


def saliency_compactness(smap: SaliencyMap, threshold: float) -> float:
    """Fraction of voxels at or above the normalized threshold."""
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"threshold must lie in (0, 1), got {threshold}")
    return float((smap.values >= threshold).mean())


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_saliency(
    smap: SaliencyMap,
    path: str | Path,
    checkpoint_hash: str | None = None,
) -> Path:
    """Write the map as a NIfTI volume with a JSON sidecar naming the method,
    target, and source checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(path, smap.values)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps(
            {
                "method": smap.method,
                "target": smap.target,
                "checkpoint_sha256": checkpoint_hash,
            },
            indent=2,
        )
        + "\n"
    )
    return path


def export_embeddings(
    model: CrossEncoder,
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    block: str,
    path: str | Path,
    already_normalized: bool = False,
) -> Path:
    """One CSV row per volume: subject_id, visit_index, label, then the
    chosen latent block's components."""
    if block not in ("d", "s", "z"):
        raise ModelError(f'embedding block must be "d", "s", or "z", got {block!r}')
    table: EmbeddingTable = encode_dataset(
        model, records, volumes, already_normalized=already_normalized
    )
    matrix = table.block(block)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["subject_id", "visit_index", "label"]
            + [f"{block}{i}" for i in range(matrix.shape[1])]
        )
        for row_i in range(matrix.shape[0]):
            label = table.labels[row_i]
            writer.writerow(
                [
                    table.subject_ids[row_i],
                    table.visit_indices[row_i],
                    "" if label is None else label,
                ]
                + [f"{v:.8e}" for v in matrix[row_i]]
            )
    return path
