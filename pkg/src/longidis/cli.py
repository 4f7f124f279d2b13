"""Command-line entry point: synth, pretrain, train-clf, eval, attribute."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config, save_config_snapshot
from .data.manifest import load_dataset, load_volumes
from .data.phantom import synthesize_phantoms, write_phantom
from .errors import ConfigError, LongidisError
from .evaluation import (
    disentanglement_report,
    evaluate_classifier,
    run_ablation_suite,
    run_dsize_sweep,
    write_probe_reports,
    write_table_csv,
    write_table_text,
)
from .interpret import (
    file_sha256,
    gradcam,
    input_saliency,
    saliency_compactness,
    save_saliency,
)
from .model import ClassifierSpec
from .training import (
    build_classifier_from_state,
    build_model_from_state,
    load_checkpoint,
    pretrain,
    train_classifier,
)

_FEATURE_NAMES = {"d": "dynamic", "s": "static", "full": "full"}


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig(output_dir=Path("runs/default").resolve())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
        config = replace(config, phantom=replace(config.phantom, rng_seed=args.seed))
    if args.output is not None:
        config = replace(config, output_dir=Path(args.output).resolve())
    return config


def _start_run(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(config, out_dir / "resolved_config.yaml")


def _dataset(config: RunConfig, manifest: Path | None = None):
    manifest = manifest or config.data.manifest
    if manifest is None:
        raise ConfigError("no dataset manifest configured (data.manifest)")
    records = load_dataset(manifest)
    return records, load_volumes(records)


def _cache_dir(default: Path) -> Path:
    env = os.environ.get("LONGIDIS_CACHE")
    return Path(env) if env else default


def cmd_synth(args) -> int:
    config = _load_run_config(args)
    out_dir = config.output_dir
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigError(
            f"output directory {out_dir} is not empty; pass --force to overwrite"
        )
    _start_run(config, out_dir)
    result = synthesize_phantoms(config.phantom)
    manifest = write_phantom(result, out_dir)
    print(f"wrote {len(result.volumes)} volumes and {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_run_config(args)
    pre = config.pretrain
    if args.ablation:
        flags = {
            "full": (True, True),
            "no-cl": (False, True),
            "no-grad": (True, False),
            "no-both": (False, False),
        }[args.ablation]
        pre = replace(pre, use_cl=flags[0], use_grad=flags[1])
        config = replace(config, pretrain=pre)
    out_dir = config.output_dir
    _start_run(config, out_dir)
    records, volumes = _dataset(config)
    resume_from = None
    if args.resume:
        last = out_dir / "pretrain_last.pt"
        if last.exists():
            resume_from = last
    result = pretrain(
        records,
        volumes,
        pre,
        config.model,
        seed=config.seed,
        out_dir=out_dir,
        resume_from=resume_from,
    )
    print(
        f"pretraining done: best validation loss {result.best_val:.4f}, "
        f"checkpoints in {out_dir}"
    )
    return 0


def cmd_train_clf(args) -> int:
    config = _load_run_config(args)
    if args.mode:
        config = replace(config, finetune=replace(config.finetune, mode=args.mode))
    if args.features:
        config = replace(
            config, classifier=replace(config.classifier, input=_FEATURE_NAMES[args.features])
        )
    checkpoint = Path(args.checkpoint) if args.checkpoint else config.eval.pretrain_checkpoint
    if checkpoint is None:
        raise ConfigError("train-clf needs a pretraining checkpoint (--checkpoint)")
    out_dir = config.output_dir
    _start_run(config, out_dir)
    records, volumes = _dataset(config)
    state = load_checkpoint(checkpoint)
    encoder_before = build_model_from_state(state).encoder_fingerprint()
    (out_dir / "encoder_hash_pre.txt").write_text(encoder_before + "\n")
    result = train_classifier(
        state,
        records,
        volumes,
        config.finetune,
        cspec=config.classifier,
        seed=config.seed,
        out_dir=out_dir,
    )
    (out_dir / "encoder_hash_post.txt").write_text(
        result.encoder.encoder_fingerprint() + "\n"
    )
    print(
        f"classifier training done ({config.finetune.mode}, input="
        f"{config.classifier.input}): best validation BACC {result.best_val_bacc:.4f}"
    )
    return 0


def _eval_report_payload(report) -> dict:
    return {
        "counts": {
            "tp": report.counts.tp,
            "fp": report.counts.fp,
            "tn": report.counts.tn,
            "fn": report.counts.fn,
        },
        "bacc": report.bacc,
        "accuracy": report.acc,
        "headline": report.headline,
        "n_samples": report.n_samples,
    }


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    out_dir = config.output_dir
    _start_run(config, out_dir)
    wrote_anything = False

    checkpoint = (
        Path(args.checkpoint) if args.checkpoint else config.eval.classifier_checkpoint
    )
    if checkpoint is not None:
        records, volumes = _dataset(config, config.eval.manifest)
        model, head = build_classifier_from_state(load_checkpoint(checkpoint))
        report = evaluate_classifier(model, head, records, volumes)
        path = out_dir / "eval_report.json"
        path.write_text(json.dumps(_eval_report_payload(report), indent=2) + "\n")
        print(f"{report.headline}: bacc={report.bacc:.4f} acc={report.acc:.4f} -> {path}")
        wrote_anything = True
        if args.zero_shot:
            zs_records = load_dataset(Path(args.zero_shot))
            zs_volumes = load_volumes(zs_records)
            zs = evaluate_classifier(model, head, zs_records, zs_volumes)
            zs_path = out_dir / "zero_shot_report.json"
            zs_path.write_text(json.dumps(_eval_report_payload(zs), indent=2) + "\n")
            print(f"zero-shot: bacc={zs.bacc:.4f} acc={zs.acc:.4f} -> {zs_path}")

    pretrain_ckpt = (
        Path(args.pretrain_checkpoint)
        if args.pretrain_checkpoint
        else config.eval.pretrain_checkpoint
    )
    if args.probes:
        if pretrain_ckpt is None:
            raise ConfigError("--probes needs a pretraining checkpoint")
        records, volumes = _dataset(config, config.eval.manifest)
        model = build_model_from_state(load_checkpoint(pretrain_ckpt))
        reports = disentanglement_report(model, records, volumes, seed=config.seed)
        path = write_probe_reports(out_dir / "probe_reports.json", reports)
        for r in reports:
            print(
                f"probe {r.feature_block}->{r.probe_target}: {r.metric:.4f} "
                f"(chance {r.chance:.4f})"
            )
        print(f"probe reports -> {path}")
        wrote_anything = True

    if args.run_ablation or args.sweep_dsize:
        records, volumes = _dataset(config, config.eval.manifest)
        cache = _cache_dir(out_dir / "cache")
        seeds = tuple(config.eval.seeds)
        if args.run_ablation:
            rows = run_ablation_suite(
                records, volumes, config.pretrain, config.model, config.finetune,
                cspec=config.classifier, seeds=seeds, jobs=args.jobs,
                cache_dir=cache / "ablation",
            )
            write_table_csv(out_dir / "ablation.csv", rows)
            write_table_text(out_dir / "ablation.txt", rows)
            print(f"ablation table -> {out_dir / 'ablation.csv'}")
            wrote_anything = True
        if args.sweep_dsize:
            sizes = [int(s) for s in args.sweep_dsize.split(",") if s]
            rows = run_dsize_sweep(
                records, volumes, sizes, config.pretrain, config.model,
                config.finetune, seeds=seeds, jobs=args.jobs,
                cache_dir=cache / "dsize",
            )
            write_table_csv(out_dir / "dsize_sweep.csv", rows)
            write_table_text(out_dir / "dsize_sweep.txt", rows)
            print(f"dynamic-size sweep -> {out_dir / 'dsize_sweep.csv'}")
            wrote_anything = True

    if not wrote_anything:
        raise ConfigError(
            "nothing to evaluate: provide a classifier checkpoint, --probes, "
            "--run-ablation, or --sweep-dsize"
        )
    return 0


def cmd_attribute(args) -> int:
    config = _load_run_config(args)
    out_dir = config.output_dir
    _start_run(config, out_dir)
    attr = config.attribute

    clf_ckpt = (
        Path(args.checkpoint) if args.checkpoint else attr.classifier_checkpoint
    )
    pre_ckpt = attr.pretrain_checkpoint or clf_ckpt
    model = head = None
    if clf_ckpt is not None:
        state = load_checkpoint(clf_ckpt)
        if state.classifier_state is not None:
            model, head = build_classifier_from_state(state)
        else:
            model = build_model_from_state(state)
    if model is None:
        if pre_ckpt is None:
            raise ConfigError("attribute needs a checkpoint")
        model = build_model_from_state(load_checkpoint(pre_ckpt))

    if attr.volumes:
        volume_paths = [Path(p) for p in attr.volumes]
        from .data.volumes import load_volume_file

        named = [(p.name, load_volume_file(p)) for p in volume_paths]
    else:
        records, volumes = _dataset(config)
        named = [
            (Path(v.path).name, volumes[v.path])
            for rec in records
            for v in rec.visits
        ]

    ckpt_hash = file_sha256(clf_ckpt or pre_ckpt)
    rows = []
    maps_dir = out_dir / "maps"
    for name, vol in named:
        stem = Path(name).stem.replace(".nii", "")
        for method in attr.methods:
            if method == "gradcam":
                if head is None:
                    raise ConfigError(
                        "gradcam needs a classifier checkpoint (attribute.classifier_checkpoint)"
                    )
                smap = gradcam(vol, model, head, target_class=attr.target_class)
            else:
                smap = input_saliency(vol, model)
            path = save_saliency(smap, maps_dir / f"{stem}_{method}.nii", ckpt_hash)
            rows.append(
                {
                    "volume": name,
                    "method": method,
                    "map": str(path),
                    "compactness": saliency_compactness(smap, attr.threshold),
                }
            )
    write_table_csv(out_dir / "compactness.csv", rows)
    print(f"wrote {len(rows)} saliency maps -> {maps_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longidis",
        description=(
            "Self-supervised disentanglement of longitudinal volumetric images: "
            "synthesize benchmarks, pretrain the cross-encoder, train and "
            "evaluate classifiers, and export attribution maps."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--output", type=Path, default=None, help="override output dir")
        p.add_argument("--force", action="store_true", help="overwrite non-empty outputs")
        p.add_argument("--resume", action="store_true", help="resume from last checkpoint")
        p.add_argument("--jobs", type=int, default=1, help="parallel suite cells")

    p_synth = sub.add_parser("synth", help="write a synthetic benchmark dataset")
    add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_pre = sub.add_parser("pretrain", help="pretrain the cross-encoder")
    add_common(p_pre)
    p_pre.add_argument(
        "--ablation",
        choices=["full", "no-cl", "no-grad", "no-both"],
        help="loss-term ablation preset",
    )
    p_pre.set_defaults(func=cmd_pretrain)

    p_clf = sub.add_parser("train-clf", help="train the classifier head")
    add_common(p_clf)
    p_clf.add_argument("--checkpoint", type=Path, help="pretraining checkpoint")
    p_clf.add_argument("--mode", choices=["frozen", "finetune"], help="encoder handling")
    p_clf.add_argument(
        "--features", choices=["d", "s", "full"], help="latent block fed to the classifier"
    )
    p_clf.set_defaults(func=cmd_train_clf)

    p_eval = sub.add_parser("eval", help="evaluate checkpoints and run suites")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", type=Path, help="classifier checkpoint")
    p_eval.add_argument("--pretrain-checkpoint", type=Path, help="pretraining checkpoint")
    p_eval.add_argument("--zero-shot", type=Path, help="second manifest, no training")
    p_eval.add_argument("--probes", action="store_true", help="run latent probes")
    p_eval.add_argument("--run-ablation", action="store_true", help="loss ablation table")
    p_eval.add_argument("--sweep-dsize", help="comma-separated dynamic sizes")
    p_eval.set_defaults(func=cmd_eval)

    p_attr = sub.add_parser("attribute", help="write saliency maps")
    add_common(p_attr)
    p_attr.add_argument("--checkpoint", type=Path, help="classifier checkpoint")
    p_attr.set_defaults(func=cmd_attribute)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LongidisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
