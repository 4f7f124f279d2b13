"""Probes, classifier evaluation, and the ablation / dynamic-size harness."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import RidgeClassifier
from sklearn.preprocessing import StandardScaler

from .data.manifest import SubjectRecord
from .data.pairs import rng_for
from .errors import ProbeError
from .metrics import ConfusionCounts, accuracy, balanced_accuracy, confusion_counts
from .model import ClassifierHead, ClassifierSpec, CrossEncoder, ModelSpec, select_block
from .training import (
    ClassifierResult,
    FinetuneConfig,
    PretrainConfig,
    TrainState,
    build_model_from_state,
    load_checkpoint,
    pretrain,
    prepare_volumes,
    train_classifier,
)

_PROBE_SPLIT = 11


@dataclass(frozen=True)
class EmbeddingTable:
    subject_ids: tuple[str, ...]
    visit_indices: tuple[int, ...]
    labels: tuple[int | None, ...]
    d: np.ndarray
    s: np.ndarray

    def block(self, which: str) -> np.ndarray:
        if which in ("d", "dynamic"):
            return self.d
        if which in ("s", "static"):
            return self.s
        if which in ("z", "full"):
            return np.concatenate([self.d, self.s], axis=1)
        raise ProbeError(f"unknown latent block {which!r}")


def encode_dataset(
    model: CrossEncoder,
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    batch_size: int = 64,
    already_normalized: bool = False,
) -> EmbeddingTable:
    """Eval-mode latent codes for every visit volume, one row per visit."""
    volumes = volumes if already_normalized else prepare_volumes(volumes)
    rows = [
        (rec.subject_id, visit.index, rec.label, visit.path)
        for rec in sorted(records, key=lambda r: r.subject_id)
        for visit in rec.visits
    ]
    model.eval()
    d_parts, s_parts = [], []
    with torch.no_grad():
        for i in range(0, len(rows), batch_size):
            chunk = rows[i : i + batch_size]
            x = torch.from_numpy(
                np.stack([volumes[r[3]] for r in chunk])
            ).float().unsqueeze(1)
            code = model.encode(x)
            d_parts.append(code.d.numpy())
            s_parts.append(code.s.numpy())
    return EmbeddingTable(
        subject_ids=tuple(r[0] for r in rows),
        visit_indices=tuple(r[1] for r in rows),
        labels=tuple(r[2] for r in rows),
        d=np.concatenate(d_parts, axis=0),
        s=np.concatenate(s_parts, axis=0),
    )


@dataclass(frozen=True)
class ProbeReport:
    probe_target: str
    feature_block: str
    metric: float
    chance: float

    def __post_init__(self):
        if not 0.0 <= self.metric <= 1.0:
            raise ProbeError(f"probe metric must lie in [0, 1], got {self.metric}")


def _group_split(groups: np.ndarray, labels: np.ndarray, test_fraction: float, rng):
    """80/20 split over groups, stratified by the group's label."""
    unique = {}
    for g, y in zip(groups, labels):
        unique.setdefault(g, y)
    by_label: dict[object, list] = {}
    for g, y in unique.items():
        by_label.setdefault(y, []).append(g)
    test_groups = set()
    for y in sorted(by_label, key=repr):
        members = sorted(by_label[y], key=repr)
        order = rng.permutation(len(members))
        n_test = max(1, round(test_fraction * len(members)))
        if n_test >= len(members):
            n_test = len(members) - 1
        if n_test < 1:
            raise ProbeError(
                f"cannot split groups of class {y!r}: only {len(members)} group(s)"
            )
        test_groups.update(members[i] for i in order[:n_test])
    test_mask = np.array([g in test_groups for g in groups])
    return ~test_mask, test_mask


def _within_group_split(groups: np.ndarray, rng):
    """Hold out one sample per group; the rest train. Every group appears on
    both sides, as identity probes require."""
    train_mask = np.ones(len(groups), dtype=bool)
    indices: dict[object, list[int]] = {}
    for i, g in enumerate(groups):
        indices.setdefault(g, []).append(i)
    for g, idx in sorted(indices.items(), key=lambda kv: repr(kv[0])):
        if len(idx) < 2:
            raise ProbeError(
                f"group {g!r} has {len(idx)} sample(s); identity probes need >= 2"
            )
        held = idx[int(rng.integers(len(idx)))]
        train_mask[held] = False
    return train_mask, ~train_mask


def linear_probe(
    features: np.ndarray,
    labels,
    target: str,
    groups=None,
    seed: int = 0,
    feature_block: str = "d",
    test_fraction: float = 0.2,
) -> ProbeReport:
    """Ridge probe with a held-out split; BACC for binary targets, top-1
    accuracy for identity targets.

    Binary targets split at the group (subject) level when groups are given.
    The subject_id target splits within groups so each identity is present
    on both sides.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ProbeError(
            f"features must be (n_samples, n_features) aligned with labels, "
            f"got {features.shape} vs {len(labels)} labels"
        )
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ProbeError(f"probe target {target!r} has a single class")
    rng = rng_for(seed, _PROBE_SPLIT)

    if target == "subject_id":
        train_mask, test_mask = _within_group_split(labels, rng)
    elif groups is not None:
        train_mask, test_mask = _group_split(np.asarray(groups), labels, test_fraction, rng)
    else:
        order = rng.permutation(len(labels))
        n_test = max(1, round(test_fraction * len(labels)))
        test_mask = np.zeros(len(labels), dtype=bool)
        test_mask[order[:n_test]] = True
        train_mask = ~test_mask

    y_train, y_test = labels[train_mask], labels[test_mask]
    if len(np.unique(y_train)) < len(classes) or len(np.unique(y_test)) < 2:
        raise ProbeError(
            f"degenerate probe split for target {target!r}: a class is missing "
            f"from one side"
        )
    scaler = StandardScaler()
    x_train = scaler.fit_transform(features[train_mask])
    x_test = scaler.transform(features[test_mask])
    clf = RidgeClassifier(alpha=1e-3)
    clf.fit(x_train, y_train)
    pred = clf.predict(x_test)

    if len(classes) == 2:
        to_int = {classes[0]: 0, classes[1]: 1}
        counts = confusion_counts(
            [to_int[p] for p in pred], [to_int[y] for y in y_test]
        )
        metric = balanced_accuracy(counts)
        chance = 0.5
    else:
        metric = float(np.mean(pred == y_test))
        chance = 1.0 / len(classes)
    return ProbeReport(
        probe_target=target, feature_block=feature_block, metric=metric, chance=chance
    )


def disentanglement_report(
    model: CrossEncoder,
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    seed: int = 0,
    already_normalized: bool = False,
) -> list[ProbeReport]:
    """Four probes showing where disease and identity live in the latent:
    d->disease, s->disease, d->subject_id, s->subject_id."""
    table = encode_dataset(
        model, records, volumes, already_normalized=already_normalized
    )
    if any(label is None for label in table.labels):
        raise ProbeError("disentanglement probes need a disease label per subject")
    labels = np.asarray(table.labels, dtype=int)
    subjects = np.asarray(table.subject_ids)
    reports = []
    for block in ("d", "s"):
        reports.append(
            linear_probe(
                table.block(block), labels, "disease",
                groups=subjects, seed=seed, feature_block=block,
            )
        )
    for block in ("d", "s"):
        reports.append(
            linear_probe(
                table.block(block), subjects, "subject_id",
                seed=seed, feature_block=block,
            )
        )
    return reports


@dataclass(frozen=True)
class EvalReport:
    counts: ConfusionCounts
    bacc: float
    acc: float
    headline: str  # "accuracy" on class-balanced sets, else "bacc"
    n_samples: int


def evaluate_classifier(
    model: CrossEncoder,
    head: ClassifierHead,
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    cspec: ClassifierSpec | None = None,
    batch_size: int = 64,
    already_normalized: bool = False,
) -> EvalReport:
    """Confusion counts and accuracy metrics for every visit volume."""
    cspec = cspec if cspec is not None else head.cspec
    volumes = volumes if already_normalized else prepare_volumes(volumes)
    table_rows = [
        (visit.path, int(rec.label))
        for rec in sorted(records, key=lambda r: r.subject_id)
        for visit in rec.visits
    ]
    model.eval()
    head.eval()
    preds, labels = [], []
    with torch.no_grad():
        for i in range(0, len(table_rows), batch_size):
            chunk = table_rows[i : i + batch_size]
            x = torch.from_numpy(
                np.stack([volumes[p] for p, _ in chunk])
            ).float().unsqueeze(1)
            logits = head(select_block(model.encode(x), cspec.input))
            preds.extend((logits[:, 1] > logits[:, 0]).long().tolist())
            labels.extend(y for _, y in chunk)
    counts = confusion_counts(preds, labels)
    n_pos = counts.tp + counts.fn
    n_neg = counts.tn + counts.fp
    return EvalReport(
        counts=counts,
        bacc=balanced_accuracy(counts),
        acc=accuracy(counts),
        headline="accuracy" if n_pos == n_neg else "bacc",
        n_samples=counts.total,
    )


ABLATION_ROWS = (
    ("full", True, True),
    ("no_cl", False, True),
    ("no_grad", True, False),
    ("no_both", False, False),
)


def _train_cell(args) -> dict:
    """One (configuration, seed) cell: pretrain then both classifier modes."""
    (records, volumes, pre_config, mspec, fin_config, cspec, seed, cache_dir) = args
    cache = Path(cache_dir) if cache_dir else None
    best_state = None
    max_cl = max_grad = 0.0
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        ckpt = cache / "pretrain_best.pt"
        if ckpt.exists():
            best_state = load_checkpoint(ckpt)
    if best_state is None:
        result = pretrain(
            records, volumes, pre_config, mspec, seed=seed,
            out_dir=cache, already_normalized=True,
        )
        best_state = result.best_state
        max_cl = max((abs(r["cl"]) for r in result.step_rows), default=0.0)
        max_grad = max((abs(r["grad"]) for r in result.step_rows), default=0.0)
    cell = {"max_abs_cl": max_cl, "max_abs_grad": max_grad}
    for mode in ("frozen", "finetune"):
        clf = train_classifier(
            best_state,
            records,
            volumes,
            replace(fin_config, mode=mode),
            cspec=cspec,
            seed=seed,
            already_normalized=True,
        )
        cell[mode] = clf.best_val_bacc
    return cell


def _aggregate(cells: list[dict]) -> dict:
    out = {}
    for mode in ("frozen", "finetune"):
        values = [c[mode] for c in cells]
        out[f"{mode}_bacc_mean"] = float(np.mean(values))
        out[f"{mode}_bacc_std"] = float(np.std(values))
        out[f"{mode}_bacc_values"] = tuple(values)
    out["max_abs_cl"] = max(c["max_abs_cl"] for c in cells)
    out["max_abs_grad"] = max(c["max_abs_grad"] for c in cells)
    return out


def _limit_worker_threads() -> None:
    torch.set_num_threads(1)


def _run_cells(cell_args: list, jobs: int) -> list[dict]:
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_limit_worker_threads
        ) as pool:
            return list(pool.map(_train_cell, cell_args))
    return [_train_cell(a) for a in cell_args]


def run_ablation_suite(
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    pre_config: PretrainConfig,
    mspec: ModelSpec,
    fin_config: FinetuneConfig,
    cspec: ClassifierSpec | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    jobs: int = 1,
    cache_dir: str | Path | None = None,
) -> list[dict]:
    """Train the four loss configurations under identical seeds and report
    frozen / fine-tune balanced accuracy per row, mean and std over seeds."""
    if len(seeds) < 1:
        raise ProbeError("ablation suite needs at least one seed")
    cspec = cspec if cspec is not None else ClassifierSpec()
    volumes = prepare_volumes(volumes)
    rows = []
    for name, use_cl, use_grad in ABLATION_ROWS:
        row_config = replace(pre_config, use_cl=use_cl, use_grad=use_grad)
        cell_args = [
            (
                records, volumes, row_config, mspec, fin_config, cspec, seed,
                Path(cache_dir) / f"{name}-seed{seed}" if cache_dir else None,
            )
            for seed in seeds
        ]
        cells = _run_cells(cell_args, jobs)
        rows.append(
            {"row": name, "use_cl": use_cl, "use_grad": use_grad, "seeds": tuple(seeds), **_aggregate(cells)}
        )
    return rows


def run_dsize_sweep(
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    sizes: list[int],
    pre_config: PretrainConfig,
    mspec: ModelSpec,
    fin_config: FinetuneConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    jobs: int = 1,
    cache_dir: str | Path | None = None,
) -> list[dict]:
    """Classifier quality per dynamic-block size, plus static-only and
    full-latent classifier rows trained on the base model."""
    for size in sizes:
        if not 0 < size < mspec.latent_dim:
            raise ProbeError(
                f"dynamic size {size} invalid: the static block must be "
                f"non-empty (latent_dim {mspec.latent_dim})"
            )
    volumes = prepare_volumes(volumes)

    pretrained: dict[int, list[TrainState]] = {}

    def states_for(dsize: int) -> list[TrainState]:
        if dsize not in pretrained:
            spec = replace(mspec, dynamic_dim=dsize)
            states = []
            for seed in seeds:
                cell_dir = Path(cache_dir) / f"d{dsize}-seed{seed}" if cache_dir else None
                ckpt = cell_dir / "pretrain_best.pt" if cell_dir else None
                if ckpt is not None and ckpt.exists():
                    states.append(load_checkpoint(ckpt))
                else:
                    states.append(
                        pretrain(
                            records, volumes, pre_config, spec, seed=seed,
                            out_dir=cell_dir, already_normalized=True,
                        ).best_state
                    )
            pretrained[dsize] = states
        return pretrained[dsize]

    def classify_row(name: str, dsize: int, input_block: str) -> dict:
        states = states_for(dsize)
        cells = []
        for seed, state in zip(seeds, states):
            cell = {"max_abs_cl": 0.0, "max_abs_grad": 0.0}
            for mode in ("frozen", "finetune"):
                clf = train_classifier(
                    state, records, volumes, replace(fin_config, mode=mode),
                    cspec=ClassifierSpec(input=input_block),
                    seed=seed, already_normalized=True,
                )
                cell[mode] = clf.best_val_bacc
            cells.append(cell)
        agg = _aggregate(cells)
        agg.pop("max_abs_cl")
        agg.pop("max_abs_grad")
        return {"row": name, "dynamic_dim": dsize, "classifier_input": input_block, "seeds": tuple(seeds), **agg}

    rows = [classify_row(f"d{size}", size, "dynamic") for size in sizes]
    rows.append(classify_row("s_only", mspec.dynamic_dim, "static"))
    rows.append(classify_row("full", mspec.dynamic_dim, "full"))
    return rows


def write_table_csv(path: str | Path, rows: list[dict]) -> Path:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_table_text(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(rows[0].keys()) if rows else []
    cells = [[_fmt_cell(r.get(k)) for k in fieldnames] for r in rows]
    widths = [
        max(len(name), *(len(row[i]) for row in cells)) if cells else len(name)
        for i, name in enumerate(fieldnames)
    ]
    lines = [
        "  ".join(name.ljust(w) for name, w in zip(fieldnames, widths)).rstrip()
    ]
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, tuple):
        return "/".join(_fmt_cell(v) for v in value)
    return str(value)


def write_probe_reports(path: str | Path, reports: list[ProbeReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "probe_target": r.probe_target,
            "feature_block": r.feature_block,
            "metric": r.metric,
            "chance": r.chance,
        }
        for r in reports
    ]
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
