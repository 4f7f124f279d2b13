"""Pretraining and classifier-training loops with checkpoint round-trips.

All stochastic choices (splits, batch order, pair sampling, augmentation)
derive from stateless seed streams, so a run can be resumed or repeated and
produce the same sequence of batches.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data.augment import AugmentSpec, augment_volume
from .data.manifest import SubjectRecord
from .data.pairs import VisitPair, make_batches, make_pairs, rng_for
from .data.volumes import zscore_array
from .errors import CheckpointError, TrainingError
from .losses import LossBreakdown, LossError, LossWeights, total_loss, weighted_bce
from .metrics import accuracy, balanced_accuracy, confusion_counts
from .model import (
    ClassifierHead,
    ClassifierSpec,
    CrossEncoder,
    ModelSpec,
    classifier_input_dim,
    select_block,
)

# Seed stream tags; each consumer owns one so streams never collide.
_SPLIT, _BATCH, _AUG, _CLF_SPLIT, _CLF_BATCH = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    use_cl: bool = True
    use_grad: bool = True
    grad_mode: str = "surrogate"
    plateau_factor: float = 10.0
    plateau_patience: int = 5
    val_fraction: float = 0.1
    augment: AugmentSpec | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.grad_mode not in ("surrogate", "exact"):
            raise TrainingError(f"grad_mode must be surrogate or exact, got {self.grad_mode!r}")
        if self.plateau_factor <= 1:
            raise TrainingError(f"plateau_factor must be > 1, got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise TrainingError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0 < self.val_fraction < 1:
            raise TrainingError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class FinetuneConfig:
    mode: str = "frozen"
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    pos_weight: float = 1.5
    val_fraction: float = 0.2

    def __post_init__(self):
        normalized = {"frozen": "frozen", "fine-tune": "finetune", "finetune": "finetune"}
        if self.mode not in normalized:
            raise TrainingError(f'mode must be "frozen" or "finetune", got {self.mode!r}')
        object.__setattr__(self, "mode", normalized[self.mode])
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pos_weight <= 0:
            raise TrainingError(f"pos_weight must be > 0, got {self.pos_weight}")
        if not 0 < self.val_fraction < 1:
            raise TrainingError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


class ReduceOnPlateau:
    """Drop the learning rate by `factor` once the monitored value fails to
    improve for `patience` consecutive epochs. Never increases the rate."""

    def __init__(self, optimizer, factor: float = 10.0, patience: int = 5):
        if factor <= 1:
            raise TrainingError(f"factor must be > 1, got {factor}")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0
        self.n_reductions = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                for group in self.optimizer.param_groups:
                    group["lr"] = group["lr"] / self.factor
                self.bad_epochs = 0
                self.n_reductions += 1
        return self.lr

    def state_dict(self) -> dict:
        return {
            "best": self.best,
            "bad_epochs": self.bad_epochs,
            "n_reductions": self.n_reductions,
            "factor": self.factor,
            "patience": self.patience,
        }

    def load_state_dict(self, state: dict) -> None:
        self.best = state["best"]
        self.bad_epochs = state["bad_epochs"]
        self.n_reductions = state["n_reductions"]
        self.factor = state["factor"]
        self.patience = state["patience"]


@dataclass
class TrainState:
    kind: str
    model_spec: ModelSpec
    model_state: dict
    optimizer_state: dict
    scheduler_state: dict
    epoch: int
    global_step: int
    rng_state: dict
    best_validation_metric: float
    classifier_spec: ClassifierSpec | None = None
    classifier_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _clone_state_dict(state: dict) -> dict:
    return {
        k: v.detach().clone() if isinstance(v, torch.Tensor) else copy.deepcopy(v)
        for k, v in state.items()
    }


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint does not exist: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"failed to load checkpoint {path}: {exc}") from exc
    if not isinstance(state, TrainState):
        raise CheckpointError(
            f"checkpoint {path} does not contain a training state "
            f"(got {type(state).__name__})"
        )
    return state


def _tree_equal(a, b) -> bool:
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return (
            isinstance(a, torch.Tensor)
            and isinstance(b, torch.Tensor)
            and a.shape == b.shape
            and a.dtype == b.dtype
            and torch.equal(a, b)
        )
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray)
            and isinstance(b, np.ndarray)
            and a.shape == b.shape
            and np.array_equal(a, b)
        )
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_tree_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_tree_equal(x, y) for x, y in zip(a, b))
    return a == b


def checkpoint_states_equal(a: TrainState, b: TrainState) -> bool:
    return _tree_equal(vars(a), vars(b))


def build_model_from_state(state: TrainState) -> CrossEncoder:
    model = CrossEncoder(state.model_spec)
    model.load_state_dict(state.model_state)
    model.eval()
    return model


def build_classifier_from_state(state: TrainState) -> tuple[CrossEncoder, ClassifierHead]:
    if state.classifier_spec is None or state.classifier_state is None:
        raise CheckpointError("checkpoint holds no classifier head")
    model = build_model_from_state(state)
    head = ClassifierHead(classifier_input_dim(state.model_spec, state.classifier_spec), state.classifier_spec)
    head.load_state_dict(state.classifier_state)
    head.eval()
    return model, head


def _append_csv(path: Path | None, row: dict, fieldnames: list[str]) -> None:
    if path is None:
        return
    new_file = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        if new_file:
            writer.writeheader()
        writer.writerow(row)


def prepare_volumes(volumes: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Z-score every volume once, ahead of batching."""
    return {path: zscore_array(vol) for path, vol in volumes.items()}


def split_subjects(
    records: Iterable[SubjectRecord],
    val_fraction: float,
    seed: int,
    stream: int = _SPLIT,
    stratify: bool = False,
) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
    """Subject-level train/val split; never splits visits of one subject."""
    records = sorted(records, key=lambda r: r.subject_id)
    if len(records) < 2:
        raise TrainingError(f"need at least 2 subjects to split, got {len(records)}")
    rng = rng_for(seed, stream)
    if stratify:
        groups: dict[object, list[SubjectRecord]] = {}
        for rec in records:
            groups.setdefault(rec.label, []).append(rec)
        train, val = [], []
        for label in sorted(groups, key=repr):
            members = groups[label]
            order = rng.permutation(len(members))
            n_val = max(1, round(val_fraction * len(members)))
            if n_val >= len(members):
                n_val = len(members) - 1
            chosen = [members[i] for i in order]
            val.extend(chosen[:n_val])
            train.extend(chosen[n_val:])
    else:
        order = rng.permutation(len(records))
        n_val = max(1, round(val_fraction * len(records)))
        if n_val >= len(records):
            n_val = len(records) - 1
        chosen = [records[i] for i in order]
        val, train = chosen[:n_val], chosen[n_val:]
    train.sort(key=lambda r: r.subject_id)
    val.sort(key=lambda r: r.subject_id)
    if not train or not val:
        raise TrainingError("degenerate subject split: one side is empty")
    return train, val


def _pair_tensors(
    batch: list[VisitPair],
    volumes: dict[str, np.ndarray],
    augment: AugmentSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    first, second = [], []
    for pair in batch:
        a = volumes[pair.earlier.path]
        b = volumes[pair.later.path]
        if augment is not None:
            a = augment_volume(a, augment, rng)
            b = augment_volume(b, augment, rng)
        first.append(a)
        second.append(b)
    x1 = torch.from_numpy(np.stack(first)).float().unsqueeze(1)
    x2 = torch.from_numpy(np.stack(second)).float().unsqueeze(1)
    return x1, x2


@dataclass
class PretrainResult:
    model: CrossEncoder
    best_state: TrainState
    last_state: TrainState
    epoch_rows: list[dict]
    step_rows: list[dict]
    best_val: float
    best_path: Path | None = None
    last_path: Path | None = None


def _capture_pretrain_state(
    model, optimizer, scheduler, epoch, global_step, best_val, seed, config, kind="pretrain"
) -> TrainState:
    return TrainState(
        kind=kind,
        model_spec=model.spec,
        model_state=_clone_state_dict(model.state_dict()),
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        scheduler_state=copy.deepcopy(scheduler.state_dict()),
        epoch=epoch,
        global_step=global_step,
        rng_state={"seed": seed, "torch": torch.get_rng_state()},
        best_validation_metric=best_val,
        meta={"config": config},
    )


def _validation_pairs(records: list[SubjectRecord]) -> list[VisitPair]:
    # Fixed first/last pair per subject keeps the monitored loss comparable
    # across epochs.
    return [VisitPair(r.subject_id, r.visits[0], r.visits[-1]) for r in records]


def _eval_pretrain_loss(
    model: CrossEncoder,
    pairs: list[VisitPair],
    volumes: dict[str, np.ndarray],
    config: PretrainConfig,
) -> dict[str, float]:
    was_training = model.training
    model.eval()
    sums = {"recon": 0.0, "cl": 0.0, "grad": 0.0, "total": 0.0}
    count = 0
    for i in range(0, len(pairs), config.batch_size):
        chunk = pairs[i : i + config.batch_size]
        x1, x2 = _pair_tensors(chunk, volumes)
        breakdown = total_loss(
            x1,
            x2,
            model,
            config.weights,
            use_cl=config.use_cl,
            use_grad=config.use_grad,
            grad_mode=config.grad_mode,
            create_graph=False,
        )
        for key, value in breakdown.as_floats().items():
            sums[key] += value * len(chunk)
        count += len(chunk)
    if was_training:
        model.train()
    return {k: v / count for k, v in sums.items()}


def pretrain(
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    config: PretrainConfig,
    mspec: ModelSpec,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume_from: TrainState | str | Path | None = None,
    already_normalized: bool = False,
) -> PretrainResult:
    """Train the cross-encoder on all visit pairs of the training subjects.

    Volumes are z-scored up front unless already_normalized is set. A 10%
    subject-level validation split drives the plateau scheduler and the
    best-checkpoint choice.
    """
    eligible = [r for r in records if len(r.visits) >= 2]
    if len(eligible) < 2:
        raise TrainingError(
            f"pretraining needs >= 2 subjects with >= 2 visits, got {len(eligible)}"
        )
    volumes = volumes if already_normalized else prepare_volumes(volumes)
    train_records, val_records = split_subjects(eligible, config.val_fraction, seed)
    train_pairs = [p for r in train_records for p in make_pairs(r)]
    val_pairs = _validation_pairs(val_records)

    out_dir = Path(out_dir) if out_dir is not None else None
    step_log = out_dir / "pretrain_steps.csv" if out_dir else None
    epoch_log = out_dir / "pretrain_epochs.csv" if out_dir else None
    best_path = out_dir / "pretrain_best.pt" if out_dir else None
    last_path = out_dir / "pretrain_last.pt" if out_dir else None

    torch.manual_seed(seed)
    model = CrossEncoder(mspec)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = ReduceOnPlateau(
        optimizer, factor=config.plateau_factor, patience=config.plateau_patience
    )

    start_epoch = 0
    global_step = 0
    best_val = float("inf")
    best_state: TrainState | None = None
    if resume_from is not None:
        state = (
            resume_from
            if isinstance(resume_from, TrainState)
            else load_checkpoint(resume_from)
        )
        if state.kind != "pretrain":
            raise CheckpointError(f"cannot resume pretraining from a {state.kind!r} checkpoint")
        if state.model_spec != mspec:
            raise CheckpointError("checkpoint model spec does not match the requested spec")
        model.load_state_dict(state.model_state)
        optimizer.load_state_dict(state.optimizer_state)
        scheduler.load_state_dict(state.scheduler_state)
        torch.set_rng_state(state.rng_state["torch"])
        start_epoch = state.epoch
        global_step = state.global_step
        best_val = state.best_validation_metric
        if best_path is not None and Path(best_path).exists():
            best_state = load_checkpoint(best_path)
        elif best_val < float("inf"):
            best_state = state

    step_fields = ["epoch", "step", "recon", "cl", "grad", "total", "lr"]
    epoch_fields = ["epoch", "split", "recon", "cl", "grad", "total", "lr"]
    epoch_rows: list[dict] = []
    step_rows: list[dict] = []
    last_state: TrainState | None = None

    model.train()
    for epoch in range(start_epoch, config.epochs):
        batches = make_batches(train_pairs, config.batch_size, rng_for(seed, _BATCH, epoch))
        train_sums = {"recon": 0.0, "cl": 0.0, "grad": 0.0, "total": 0.0}
        n_pairs = 0
        for bi, batch in enumerate(batches):
            aug_rng = rng_for(seed, _AUG, epoch, bi) if config.augment else None
            x1, x2 = _pair_tensors(batch, volumes, config.augment, aug_rng)
            breakdown = total_loss(
                x1,
                x2,
                model,
                config.weights,
                use_cl=config.use_cl and len(batch) >= 2,
                use_grad=config.use_grad,
                grad_mode=config.grad_mode,
            )
            try:
                breakdown.assert_finite()
            except LossError as exc:
                raise TrainingError(
                    f"aborting pretraining at epoch {epoch} step {global_step}: {exc}"
                ) from exc
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            global_step += 1
            row = {
                "epoch": epoch,
                "step": global_step,
                **breakdown.as_floats(),
                "lr": scheduler.lr,
            }
            step_rows.append(row)
            _append_csv(step_log, row, step_fields)
            for key, value in breakdown.as_floats().items():
                train_sums[key] += value * len(batch)
            n_pairs += len(batch)

        train_row = {
            "epoch": epoch,
            "split": "train",
            **{k: v / n_pairs for k, v in train_sums.items()},
            "lr": scheduler.lr,
        }
        val_metrics = _eval_pretrain_loss(model, val_pairs, volumes, config)
        lr_after = scheduler.step(val_metrics["total"])
        val_row = {"epoch": epoch, "split": "val", **val_metrics, "lr": lr_after}
        for row in (train_row, val_row):
            epoch_rows.append(row)
            _append_csv(epoch_log, row, epoch_fields)

        state = _capture_pretrain_state(
            model, optimizer, scheduler, epoch + 1, global_step, best_val, seed, config
        )
        if val_metrics["total"] < best_val:
            best_val = val_metrics["total"]
            state.best_validation_metric = best_val
            best_state = state
            if best_path:
                save_checkpoint(state, best_path)
        if last_path:
            state.best_validation_metric = best_val
            save_checkpoint(state, last_path)
        last_state = state
        last_state.best_validation_metric = best_val

    if last_state is None:
        # Resumed from an already-finished run: nothing left to train.
        last_state = _capture_pretrain_state(
            model, optimizer, scheduler, start_epoch, global_step, best_val, seed, config
        )
    if best_state is None:
        best_state = last_state
    model.eval()
    return PretrainResult(
        model=model,
        best_state=best_state,
        last_state=last_state,
        epoch_rows=epoch_rows,
        step_rows=step_rows,
        best_val=best_val,
        best_path=best_path,
        last_path=last_path,
    )


@dataclass
class ClassifierResult:
    encoder: CrossEncoder
    head: ClassifierHead
    best_state: TrainState
    last_state: TrainState
    epoch_rows: list[dict]
    best_val_bacc: float
    encoder_fingerprints: list[str]
    best_path: Path | None = None
    last_path: Path | None = None


def _visit_samples(records: list[SubjectRecord]) -> list[tuple[str, int, str, int]]:
    """(subject_id, visit_index, path, label) for every visit."""
    samples = []
    for rec in records:
        if rec.label not in (0, 1):
            raise TrainingError(
                f"subject {rec.subject_id} has non-binary label {rec.label!r}"
            )
        for visit in rec.visits:
            samples.append((rec.subject_id, visit.index, visit.path, int(rec.label)))
    return samples


def _classifier_pass(
    model: CrossEncoder,
    head: ClassifierHead,
    samples: list[tuple[str, int, str, int]],
    volumes: dict[str, np.ndarray],
    cspec: ClassifierSpec,
    pos_weight: float,
    batch_size: int,
) -> dict[str, float]:
    model.eval()
    head.eval()
    losses, preds, labels = [], [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            x = torch.from_numpy(
                np.stack([volumes[s[2]] for s in chunk])
            ).float().unsqueeze(1)
            y = torch.tensor([s[3] for s in chunk], dtype=torch.float32)
            logits = head(select_block(model.encode(x), cspec.input))
            losses.append(float(weighted_bce(logits, y, pos_weight)) * len(chunk))
            preds.extend((logits[:, 1] > logits[:, 0]).long().tolist())
            labels.extend(int(v) for v in y.tolist())
    counts = confusion_counts(preds, labels)
    return {
        "loss": sum(losses) / len(samples),
        "bacc": balanced_accuracy(counts),
        "acc": accuracy(counts),
    }


def train_classifier(
    pretrained: TrainState | str | Path,
    records: list[SubjectRecord],
    volumes: dict[str, np.ndarray],
    config: FinetuneConfig,
    cspec: ClassifierSpec = ClassifierSpec(),
    seed: int = 0,
    out_dir: str | Path | None = None,
    already_normalized: bool = False,
) -> ClassifierResult:
    """Train the MLP head (and optionally the encoder) for disease status.

    Frozen mode keeps every encoder parameter and buffer bit-identical; the
    per-epoch fingerprints in the result prove it. Best checkpoint is the
    highest validation balanced accuracy.
    """
    state = (
        pretrained
        if isinstance(pretrained, TrainState)
        else load_checkpoint(pretrained)
    )
    labels_present = {r.label for r in records}
    if not labels_present <= {0, 1} or len(labels_present) < 2:
        raise TrainingError(
            f"classification needs binary subject labels 0/1 with both classes "
            f"present, got {sorted(labels_present, key=repr)}"
        )
    volumes = volumes if already_normalized else prepare_volumes(volumes)

    torch.manual_seed(seed)
    model = CrossEncoder(state.model_spec)
    model.load_state_dict(state.model_state)
    head = ClassifierHead(classifier_input_dim(state.model_spec, cspec), cspec)

    frozen = config.mode == "frozen"
    if frozen:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        trainable = list(head.parameters())
    else:
        model.train()
        trainable = list(head.parameters()) + list(model.encoder_parameters())
    optimizer = torch.optim.Adam(trainable, lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)

    train_records, val_records = split_subjects(
        records, config.val_fraction, seed, stream=_CLF_SPLIT, stratify=True
    )
    train_samples = _visit_samples(train_records)
    val_samples = _visit_samples(val_records)

    out_dir = Path(out_dir) if out_dir is not None else None
    epoch_log = out_dir / "classifier_epochs.csv" if out_dir else None
    best_path = out_dir / "classifier_best.pt" if out_dir else None
    last_path = out_dir / "classifier_last.pt" if out_dir else None
    epoch_fields = ["epoch", "split", "loss", "bacc", "acc", "lr"]

    def capture(epoch: int, step: int, best: float) -> TrainState:
        return TrainState(
            kind="classifier",
            model_spec=state.model_spec,
            model_state=_clone_state_dict(model.state_dict()),
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            scheduler_state=copy.deepcopy(scheduler.state_dict()),
            epoch=epoch,
            global_step=step,
            rng_state={"seed": seed, "torch": torch.get_rng_state()},
            best_validation_metric=best,
            classifier_spec=cspec,
            classifier_state=_clone_state_dict(head.state_dict()),
            meta={"config": config, "mode": config.mode},
        )

    epoch_rows: list[dict] = []
    fingerprints: list[str] = []
    best_val_bacc = -1.0
    best_state: TrainState | None = None
    global_step = 0
    for epoch in range(config.epochs):
        order = rng_for(seed, _CLF_BATCH, epoch).permutation(len(train_samples))
        shuffled = [train_samples[i] for i in order]
        head.train()
        if not frozen:
            model.train()
        for i in range(0, len(shuffled), config.batch_size):
            chunk = shuffled[i : i + config.batch_size]
            x = torch.from_numpy(
                np.stack([volumes[s[2]] for s in chunk])
            ).float().unsqueeze(1)
            y = torch.tensor([s[3] for s in chunk], dtype=torch.float32)
            if frozen:
                with torch.no_grad():
                    features = select_block(model.encode(x), cspec.input)
            else:
                features = select_block(model.encode(x), cspec.input)
            loss = weighted_bce(head(features), y, config.pos_weight)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"aborting classifier training at epoch {epoch}: non-finite loss"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1
        scheduler.step()
        fingerprints.append(model.encoder_fingerprint())

        train_metrics = _classifier_pass(
            model, head, train_samples, volumes, cspec, config.pos_weight, config.batch_size
        )
        val_metrics = _classifier_pass(
            model, head, val_samples, volumes, cspec, config.pos_weight, config.batch_size
        )
        lr_now = scheduler.get_last_lr()[0]
        for split, metrics in (("train", train_metrics), ("val", val_metrics)):
            row = {"epoch": epoch, "split": split, **metrics, "lr": lr_now}
            epoch_rows.append(row)
            _append_csv(epoch_log, row, epoch_fields)

        snapshot = capture(epoch + 1, global_step, best_val_bacc)
        if val_metrics["bacc"] > best_val_bacc:
            best_val_bacc = val_metrics["bacc"]
            snapshot.best_validation_metric = best_val_bacc
            best_state = snapshot
            if best_path:
                save_checkpoint(snapshot, best_path)
        if last_path:
            snapshot.best_validation_metric = best_val_bacc
            save_checkpoint(snapshot, last_path)
        last_state = snapshot
        last_state.best_validation_metric = best_val_bacc

    if best_state is None:
        best_state = last_state
    model.eval()
    head.eval()
    return ClassifierResult(
        encoder=model,
        head=head,
        best_state=best_state,
        last_state=last_state,
        epoch_rows=epoch_rows,
        best_val_bacc=best_val_bacc,
        encoder_fingerprints=fingerprints,
        best_path=best_path,
        last_path=last_path,
    )
