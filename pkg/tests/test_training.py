"""Training-loop behavior: plateau scheduling, subject-level splits,
checkpoint round-trips, resume determinism, ablation flags, and the frozen
encoder contract."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from longidis.data import PhantomConfig, synthesize_phantoms
from longidis.errors import CheckpointError, TrainingError
from longidis.model import ClassifierSpec, ModelSpec, select_block
from longidis.training import (
    FinetuneConfig,
    PretrainConfig,
    ReduceOnPlateau,
    build_classifier_from_state,
    build_model_from_state,
    checkpoint_states_equal,
    load_checkpoint,
    prepare_volumes,
    pretrain,
    save_checkpoint,
    split_subjects,
    train_classifier,
)

from conftest import rand_batch


def _sgd(lr=1e-3):
    param = torch.nn.Parameter(torch.zeros(1))
    return torch.optim.SGD([param], lr=lr)


# ---------------------------------------------------------------- scheduler

def test_plateau_flat_signal_drops_once_per_patience_window():
    opt = _sgd(1e-3)
    sched = ReduceOnPlateau(opt, factor=10.0, patience=5)
    sched.step(1.0)  # establishes the best value
    for _ in range(4):
        assert sched.step(1.0) == pytest.approx(1e-3)
    # fifth non-improving epoch exhausts the patience window
    assert sched.step(1.0) == pytest.approx(1e-4)
    assert sched.n_reductions == 1


def test_plateau_improvement_resets_patience():
    opt = _sgd(1e-3)
    sched = ReduceOnPlateau(opt, factor=10.0, patience=3)
    sched.step(1.0)
    sched.step(1.0)
    sched.step(1.0)
    sched.step(0.5)  # improvement: counter resets
    for _ in range(2):
        sched.step(0.5)
    assert sched.lr == pytest.approx(1e-3)
    assert sched.step(0.5) == pytest.approx(1e-4)


@settings(max_examples=50, deadline=None)
@given(
    values=st.lists(
        st.floats(min_value=0.0, max_value=10.0, allow_nan=False), min_size=1, max_size=60
    ),
    patience=st.integers(min_value=1, max_value=10),
)
def test_plateau_never_increases_and_bounds_reduction_count(values, patience):
    opt = _sgd(1e-3)
    sched = ReduceOnPlateau(opt, factor=10.0, patience=patience)
    prev = sched.lr
    for v in values:
        lr = sched.step(v)
        assert lr <= prev
        prev = lr
    assert sched.n_reductions <= len(values) // patience


def test_plateau_state_round_trip():
    opt = _sgd(1e-3)
    sched = ReduceOnPlateau(opt, factor=10.0, patience=2)
    for v in (3.0, 3.0, 3.0, 2.0):
        sched.step(v)
    clone = ReduceOnPlateau(_sgd(sched.lr), factor=2.0, patience=9)
    clone.load_state_dict(sched.state_dict())
    assert clone.best == sched.best
    assert clone.bad_epochs == sched.bad_epochs
    assert clone.n_reductions == sched.n_reductions
    assert clone.patience == sched.patience


def test_plateau_rejects_shrink_factor_below_one():
    with pytest.raises(TrainingError):
        ReduceOnPlateau(_sgd(), factor=1.0, patience=5)


# -------------------------------------------------------------------- splits

def test_split_is_deterministic_and_subject_level(small_phantom):
    a_train, a_val = split_subjects(small_phantom.records, 0.25, seed=7)
    b_train, b_val = split_subjects(small_phantom.records, 0.25, seed=7)
    assert [r.subject_id for r in a_train] == [r.subject_id for r in b_train]
    assert [r.subject_id for r in a_val] == [r.subject_id for r in b_val]
    overlap = {r.subject_id for r in a_train} & {r.subject_id for r in a_val}
    assert overlap == set()
    assert len(a_train) + len(a_val) == len(small_phantom.records)


def test_split_changes_with_seed(small_phantom):
    picks = {
        tuple(sorted(r.subject_id for r in split_subjects(small_phantom.records, 0.25, seed=s)[1]))
        for s in range(10)
    }
    assert len(picks) > 1


def test_stratified_split_keeps_both_classes(small_phantom):
    train, val = split_subjects(small_phantom.records, 0.25, seed=0, stratify=True)
    assert {r.label for r in val} == {0, 1}
    assert {r.label for r in train} == {0, 1}


def test_split_rejects_single_subject(small_phantom):
    with pytest.raises(TrainingError):
        split_subjects(small_phantom.records[:1], 0.5, seed=0)


# --------------------------------------------------------------- checkpoints

def _tiny_pretrain(tmp_path, small_phantom, tiny8, epochs=2, seed=0, out=True, **kw):
    cfg = PretrainConfig(
        epochs=epochs, lr=1e-3, batch_size=4, val_fraction=0.25,
        plateau_patience=50, **kw,
    )
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    return pretrain(
        small_phantom.records, vols, cfg, tiny8, seed=seed,
        out_dir=tmp_path if out else None, already_normalized=True,
    )


def test_checkpoint_round_trip_preserves_state(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec)
    path_a = tmp_path / "a.pt"
    path_b = tmp_path / "b.pt"
    save_checkpoint(result.last_state, path_a)
    loaded = load_checkpoint(path_a)
    save_checkpoint(loaded, path_b)
    assert checkpoint_states_equal(result.last_state, loaded)
    assert checkpoint_states_equal(load_checkpoint(path_a), load_checkpoint(path_b))


def _full_code(model, x):
    with torch.no_grad():
        code = model.encode(x)
    return torch.cat([code.d, code.s], dim=1)


def test_checkpoint_round_trip_is_bit_identical_in_eval(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec)
    x = rand_batch(3, seed=11)
    result.model.eval()
    before = _full_code(result.model, x)
    restored = build_model_from_state(load_checkpoint(result.last_path))
    after = _full_code(restored, x)
    assert torch.equal(before, after)


def test_load_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "nope.pt")


def test_load_checkpoint_corrupt_file(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="bad.pt"):
        load_checkpoint(bad)


def test_load_checkpoint_rejects_foreign_payload(tmp_path):
    path = tmp_path / "tensor.pt"
    torch.save({"weights": torch.ones(3)}, path)
    with pytest.raises(CheckpointError, match="training state"):
        load_checkpoint(path)


def test_resume_reproduces_uninterrupted_run(tmp_path, small_phantom, tiny_model_spec):
    full = _tiny_pretrain(tmp_path / "full", small_phantom, tiny_model_spec, epochs=4)

    half = _tiny_pretrain(tmp_path / "half", small_phantom, tiny_model_spec, epochs=2)
    cfg = PretrainConfig(epochs=4, lr=1e-3, batch_size=4, val_fraction=0.25,
                         plateau_patience=50)
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    resumed = pretrain(
        small_phantom.records, vols, cfg, tiny_model_spec, seed=0,
        out_dir=tmp_path / "resumed", resume_from=half.last_path,
        already_normalized=True,
    )

    x = rand_batch(3, seed=13)
    assert torch.equal(_full_code(full.model, x), _full_code(resumed.model, x))


def test_resume_rejects_wrong_spec(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec)
    other = ModelSpec(
        input_shape=(8, 8, 8), latent_dim=8, dynamic_dim=2,
        encoder_channels=(2, 2, 2, 2), decoder_channels=(2, 2, 2, 2),
    )
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    cfg = PretrainConfig(epochs=3, batch_size=4, val_fraction=0.25)
    with pytest.raises(CheckpointError, match="spec"):
        pretrain(small_phantom.records, vols, cfg, other, seed=0,
                 resume_from=result.last_path, already_normalized=True)


# ----------------------------------------------------------------- pretrain

def test_pretrain_requires_two_longitudinal_subjects(small_phantom, tiny_model_spec):
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    cfg = PretrainConfig(epochs=1, batch_size=4)
    with pytest.raises(TrainingError, match=">= 2 subjects"):
        pretrain(small_phantom.records[:1], vols, cfg, tiny_model_spec,
                 already_normalized=True)


def test_pretrain_logs_and_checkpoints(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec, epochs=3)
    assert (tmp_path / "pretrain_steps.csv").exists()
    assert (tmp_path / "pretrain_epochs.csv").exists()
    assert (tmp_path / "pretrain_best.pt").exists()
    assert (tmp_path / "pretrain_last.pt").exists()
    # two rows per epoch: train and val
    assert len(result.epoch_rows) == 6
    splits = [row["split"] for row in result.epoch_rows]
    assert splits == ["train", "val"] * 3
    header = (tmp_path / "pretrain_epochs.csv").read_text().splitlines()[0]
    assert header == "epoch,split,recon,cl,grad,total,lr"
    assert result.best_val <= min(
        row["total"] for row in result.epoch_rows if row["split"] == "val"
    ) + 1e-12


def test_ablation_flags_zero_logged_terms(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(
        tmp_path, small_phantom, tiny_model_spec, use_cl=False, use_grad=False
    )
    for row in result.epoch_rows + result.step_rows:
        assert row["cl"] == 0.0
        assert row["grad"] == 0.0


def test_same_seed_runs_agree(tmp_path, small_phantom, tiny_model_spec):
    a = _tiny_pretrain(tmp_path / "a", small_phantom, tiny_model_spec, epochs=3, seed=5)
    b = _tiny_pretrain(tmp_path / "b", small_phantom, tiny_model_spec, epochs=3, seed=5)
    fa = [r["total"] for r in a.epoch_rows if r["split"] == "train"][-1]
    fb = [r["total"] for r in b.epoch_rows if r["split"] == "train"][-1]
    assert abs(fa - fb) / abs(fa) < 1e-5


def test_pretrain_aborts_on_divergence(small_phantom, tiny_model_spec):
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    cfg = PretrainConfig(epochs=20, lr=1e9, batch_size=4, val_fraction=0.25,
                         plateau_patience=50)
    with pytest.raises(TrainingError, match="aborting pretraining"):
        pretrain(small_phantom.records, vols, cfg, tiny_model_spec, seed=0,
                 already_normalized=True)


def test_loss_decreases_on_small_phantom(tmp_path, small_phantom, tiny_model_spec):
    result = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec, epochs=5)
    train_totals = [r["total"] for r in result.epoch_rows if r["split"] == "train"]
    assert train_totals[-1] < train_totals[0]


# --------------------------------------------------------------- classifier

def _quick_classifier(tmp_path, small_phantom, tiny8, mode, epochs=3, **kw):
    pre = _tiny_pretrain(tmp_path / "pre", small_phantom, tiny8)
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    cfg = FinetuneConfig(mode=mode, epochs=epochs, batch_size=4,
                         val_fraction=0.25, **kw)
    return train_classifier(
        pre.last_state, small_phantom.records, vols, cfg,
        ClassifierSpec(input="dynamic"), seed=0,
        out_dir=tmp_path / "clf", already_normalized=True,
    )


def test_frozen_mode_never_touches_encoder(tmp_path, small_phantom, tiny_model_spec):
    result = _quick_classifier(tmp_path, small_phantom, tiny_model_spec, "frozen")
    assert len(set(result.encoder_fingerprints)) == 1
    assert result.encoder_fingerprints[0] == result.encoder.encoder_fingerprint()


def test_finetune_mode_updates_encoder(tmp_path, small_phantom, tiny_model_spec):
    result = _quick_classifier(tmp_path, small_phantom, tiny_model_spec, "fine-tune")
    assert len(set(result.encoder_fingerprints)) > 1


def test_cosine_schedule_reaches_zero(tmp_path, small_phantom, tiny_model_spec):
    result = _quick_classifier(tmp_path, small_phantom, tiny_model_spec, "frozen", epochs=4)
    final_lr = [row["lr"] for row in result.epoch_rows][-1]
    assert final_lr == pytest.approx(0.0, abs=1e-9)


def test_classifier_checkpoint_restores_head(tmp_path, small_phantom, tiny_model_spec):
    result = _quick_classifier(tmp_path, small_phantom, tiny_model_spec, "frozen")
    encoder, head = build_classifier_from_state(load_checkpoint(result.last_path))
    x = rand_batch(4, seed=3)
    with torch.no_grad():
        want = result.head(select_block(result.encoder.encode(x), "dynamic"))
        got = head(select_block(encoder.encode(x), "dynamic"))
    assert torch.equal(want, got)


def test_classifier_requires_both_classes(tmp_path, small_phantom, tiny_model_spec):
    pre = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec)
    vols = prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
    sick_only = [r for r in small_phantom.records if r.label == 1]
    with pytest.raises(TrainingError, match="binary"):
        train_classifier(pre.last_state, sick_only, vols,
                         FinetuneConfig(epochs=1, batch_size=4),
                         already_normalized=True)


def test_classifier_rejects_pretrain_free_checkpoint(tmp_path, small_phantom, tiny_model_spec):
    pre = _tiny_pretrain(tmp_path, small_phantom, tiny_model_spec)
    with pytest.raises(CheckpointError, match="classifier"):
        build_classifier_from_state(pre.last_state)
