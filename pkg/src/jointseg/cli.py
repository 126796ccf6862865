"""Command-line surface.

Subcommands cover the full pipeline: synth-data, pretrain, meta-train,
pseudolabel, joint-train, infer, evaluate, experiment and report. Every
run writes an immutable run manifest next to its artifacts. Exit codes:
0 success, 1 runtime failure, 2 usage error, 3 config validation error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from dataclasses import asdict, fields, replace

import numpy as np
import yaml

from . import datasets, experiments, nifti, report, training
from .adapt import AdaptConfig, EnsembleSpec, infer_ensemble
from .errors import ConfigError, JointsegError
from .manifest import RunManifest, config_hash, file_sha256, write_run_manifest
from .networks import ExtractorConfig
from .phantom import PhantomConfig, RandomFillSpec
from .training import TrainConfig

DEFAULT_FILLS = (-5.0, -2.0, -1.0, 1.0, 2.0, 5.0)


def _load_yaml(path):
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def build_train_config(config_path=None, **overrides) -> TrainConfig:
    raw = _load_yaml(config_path) if config_path else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if "extractor" in raw and isinstance(raw["extractor"], dict):
        raw["extractor"] = ExtractorConfig(**raw["extractor"])
    if "fill_values" in raw:
        raw["fill_spec"] = RandomFillSpec(tuple(float(v) for v in raw.pop("fill_values")))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _adapt_config(args, cfg: TrainConfig | None = None) -> AdaptConfig:
    patch = cfg.patch_size if cfg else getattr(args, "patch_size", 32)
    return AdaptConfig(
        steps=getattr(args, "steps", 10),
        lr=getattr(args, "adapt_lr", 1e-4),
        fill_values=tuple(getattr(args, "fills", None) or DEFAULT_FILLS),
        patch_size=patch,
        patch_overlap=getattr(args, "overlap", 8),
    )


def _write_manifest(out_dir, stage, seed, cfg_obj, data_dir=None, lineage=(), metrics=(), artifacts=(), t0=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(
        stage=stage,
        seed=seed,
        config_hash=config_hash(cfg_obj if isinstance(cfg_obj, dict) else asdict(cfg_obj)),
        dataset_manifest_hash=(
            file_sha256(os.path.join(data_dir, datasets.MANIFEST_NAME)) if data_dir else ""
        ),
        checkpoint_lineage=[str(p) for p in lineage],
        metric_files=[str(p) for p in metrics],
        artifacts=[str(p) for p in artifacts],
        wall_clock_s=(time.time() - t0) if t0 else 0.0,
    )
    base = os.path.join(out_dir, f"manifest_{stage}")
    path = f"{base}.json"
    k = 1
    while os.path.exists(path):
        path = f"{base}_{k}.json"
        k += 1
    return write_run_manifest(path, manifest)


def _sup_pair(args):
    if getattr(args, "sup_t1", None):
        t1, _ = nifti.load_volume(args.sup_t1)
        seg = nifti.load_labelmap(args.sup_seg)
        return t1.data.astype(np.float32), seg.data
    subs = datasets.load_subjects(args.data, provenance="lesion-free", split="train")
    if not subs:
        raise ConfigError("no lesion-free training subjects for supervision anchor")
    return subs[0].t1, subs[0].anatomy


def cmd_synth_data(args):
    t0 = time.time()
    cfg = PhantomConfig(grid_size=args.grid)
    manifest_path = datasets.synthesize_dataset(
        args.out,
        n_anatomy=args.anatomy,
        n_lesion=args.lesion,
        cfg=cfg,
        seed=args.seed,
        anatomy_val=args.anatomy_val,
        anatomy_test=args.anatomy_test,
        lesion_test=args.lesion_test,
    )
    _write_manifest(args.out, "synth-data", args.seed, asdict(cfg) | {"n_anatomy": args.anatomy, "n_lesion": args.lesion}, data_dir=args.out, artifacts=[manifest_path], t0=t0)
    print(f"dataset written to {args.out}")
    return 0


def cmd_pretrain(args):
    t0 = time.time()
    cfg = build_train_config(args.config, seed=args.seed, pretrain_epochs=args.epochs)
    artifacts = []
    if args.branch in ("anatomy", "both"):
        train = datasets.load_subjects(args.data, "lesion-free", "train")
        val = datasets.load_subjects(args.data, "lesion-free", "val")
        res = training.pretrain_anatomy(train, val, cfg, args.out)
        artifacts.append(res.checkpoint)
        print(f"anatomy pretraining done: {res.checkpoint} (val loss {res.extra['val_loss']:.4f})")
    fold_assignments = {}
    if args.branch in ("lesion", "both"):
        lcfg = cfg if args.lesion_epochs is None else replace(cfg, pretrain_epochs=args.lesion_epochs)
        pool = datasets.load_subjects(args.data, "lesioned", "train")
        results, fold_assignments = training.pretrain_lesion(pool, lcfg, args.out)
        artifacts.extend(r.checkpoint for r in results)
        for k, r in enumerate(results):
            print(f"lesion fold {k}: {r.checkpoint} (val dice {r.extra['val_dice']:.4f})")
    _write_manifest(
        args.out, f"pretrain-{args.branch}", cfg.seed, cfg, data_dir=args.data,
        artifacts=artifacts, t0=t0,
    )
    if fold_assignments:
        with open(os.path.join(args.out, "fold_assignments.json"), "w") as fh:
            json.dump(fold_assignments, fh, indent=2, sort_keys=True)
    return 0


def cmd_meta_train(args):
    t0 = time.time()
    cfg = build_train_config(args.config, seed=args.seed, meta_epochs=args.epochs)
    anatomy = datasets.load_subjects(args.data, "lesion-free", "train")
    lesion = datasets.load_subjects(args.data, "lesioned", "train")
    res = training.meta_cotrain(
        args.checkpoint, anatomy, lesion, cfg, args.out,
        inner_enabled=not args.no_inner, name=args.name,
    )
    _write_manifest(
        args.out, "meta-train", cfg.seed, cfg, data_dir=args.data,
        lineage=[args.checkpoint], artifacts=[res.checkpoint], t0=t0,
    )
    print(f"co-trained checkpoint: {res.checkpoint}")
    return 0


def cmd_pseudolabel(args):
    t0 = time.time()
    cfg = build_train_config(args.config, seed=args.seed)
    adapt_cfg = _adapt_config(args, cfg)
    lesion = datasets.load_subjects(args.data, "lesioned", "train")
    sup = datasets.load_subjects(args.data, "lesion-free", "train")
    out = training.generate_pseudolabels(args.checkpoint, lesion, sup, cfg, adapt_cfg, args.out)
    index_path = os.path.join(args.out, "pseudolabels.json")
    with open(index_path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    _write_manifest(
        args.out, "pseudolabel", cfg.seed, cfg, data_dir=args.data,
        lineage=[args.checkpoint], artifacts=[index_path], t0=t0,
    )
    print(f"pseudolabels for {len(out['targets'])} subjects (excluded: {out['excluded']})")
    return 0


def _load_pseudolabels(path):
    if os.path.isdir(path):
        path = os.path.join(path, "pseudolabels.json")
    with open(path) as fh:
        return json.load(fh)["targets"]


def cmd_joint_train(args):
    t0 = time.time()
    cfg = build_train_config(args.config, seed=args.seed, joint_epochs=args.epochs)
    lesion = datasets.load_subjects(args.data, "lesioned", "train")
    sup = datasets.load_subjects(args.data, "lesion-free", "train")
    targets = _load_pseudolabels(args.pseudolabels)
    res = training.joint_train(
        args.checkpoint, args.lesion_checkpoint, lesion, targets, sup, cfg,
        args.out, mask_source=args.mask_source,
    )
    _write_manifest(
        args.out, "joint-train", cfg.seed, cfg, data_dir=args.data,
        lineage=[args.checkpoint, args.lesion_checkpoint], artifacts=[res.checkpoint], t0=t0,
    )
    print(f"joint checkpoint: {res.checkpoint}")
    return 0


def cmd_infer(args):
    t0 = time.time()
    adapt_cfg = _adapt_config(args)
    t1, _ = nifti.load_volume(args.t1)
    flair, _ = nifti.load_volume(args.flair)
    sup = _sup_pair(args)
    spec = EnsembleSpec(
        checkpoints=tuple(args.checkpoint), fill_values=tuple(args.fills or DEFAULT_FILLS)
    )
    os.makedirs(args.out_dir, exist_ok=True)
    ens = infer_ensemble(
        spec, t1.data.astype(np.float32), flair.data.astype(np.float32), sup, adapt_cfg,
        out_dir=os.path.join(args.out_dir, "members"), subject_id=args.subject_id,
    )
    base = os.path.join(args.out_dir, args.subject_id)
    nifti.save_labelmap(f"{base}_joint.nii.gz", ens.y_joint)
    nifti.save_labelmap(f"{base}_anatomy.nii.gz", ens.y_anatomy)
    nifti.save_mask(f"{base}_lesion.nii.gz", ens.members[0].y_lesion)
    trace_path = f"{base}_adaptation_trace.csv"
    with open(trace_path, "w") as fh:
        fh.write("member,step,inner_loss\n")
        for mid, m in zip(ens.member_ids, ens.members):
            for k, v in enumerate(m.trace):
                fh.write(f"{mid},{k},{v:.8f}\n")
    _write_manifest(
        args.out_dir, "infer", 0, {"checkpoints": list(spec.checkpoints), "fills": list(spec.fill_values)},
        lineage=list(spec.checkpoints),
        artifacts=[f"{base}_joint.nii.gz", f"{base}_anatomy.nii.gz", f"{base}_lesion.nii.gz", trace_path],
        t0=t0,
    )
    print(f"wrote predictions under {args.out_dir}")
    return 0


def cmd_evaluate(args):
    t0 = time.time()
    adapt_cfg = _adapt_config(args)
    spec = adapt_cfg.patch_spec
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    if args.stage == "pretrained-anatomy":
        subs = datasets.load_subjects(args.data, "lesion-free", "test")
        res = experiments.evaluate_pretrained_anatomy(args.checkpoint[0], subs, spec, out_csv=args.out)
        print(json.dumps(res["per_class_mean"], indent=2))
    elif args.stage == "pretrained-lesion":
        subs = datasets.load_subjects(args.data, "lesioned", "test")
        res = experiments.evaluate_lesion_branch(args.checkpoint, subs, spec, out_csv=args.out)
        print(f"fold-vote lesion dice: {res['vote_dice']:.4f} (folds: {res['fold_dice']})")
    elif args.stage == "cotrained":
        subs = datasets.load_subjects(args.data, "lesioned", "test", with_full_gt=True)
        res = experiments.evaluate_cotrained(
            args.checkpoint[0], args.lesion_checkpoint, subs, adapt_cfg,
            _sup_pair(args), args.seed, out_csv=args.out,
        )
        print(json.dumps(res["per_class_mean"], indent=2))
    else:
        subs = datasets.load_subjects(args.data, "lesioned", "test", with_full_gt=True)
        res = experiments.evaluate_joint(
            args.checkpoint, subs, adapt_cfg, _sup_pair(args),
            tuple(args.fills or DEFAULT_FILLS), out_csv=args.out, stage="joint",
        )
        print(json.dumps(res["per_class_mean"], indent=2))
    _write_manifest(
        os.path.dirname(args.out) or ".", f"evaluate-{args.stage}", args.seed,
        {"stage": args.stage, "checkpoints": list(args.checkpoint)},
        data_dir=args.data, metrics=[args.out], t0=t0,
    )
    return 0


def cmd_experiment(args):
    t0 = time.time()
    cfg = build_train_config(args.config, seed=args.seed)
    adapt_cfg = _adapt_config(args, cfg)
    sup = _sup_pair(args)
    if args.kind == "degradation":
        subs = datasets.load_subjects(args.data, "lesioned", "test", with_full_gt=True)
        res = experiments.run_degradation_study(
            args.checkpoint, args.lesion_checkpoint, subs,
            tuple(args.fractions), adapt_cfg, sup, cfg.seed, args.out,
        )
        print(json.dumps(res["anatomy_means"], indent=2))
    elif args.kind == "adaptation":
        subs = datasets.load_subjects(args.data, "lesioned", "test", with_full_gt=True)
        res = experiments.run_adaptation_study(
            args.checkpoint, subs, sup, adapt_cfg, cfg.seed, args.out,
        )
        print(
            f"loss decreased for {res['loss_decreased']}/{res['n']}; "
            f"held-out-fill consistency improved for {res['consistency_improved']}/{res['n']}"
        )
    elif args.kind == "ablation":
        anatomy_train = datasets.load_subjects(args.data, "lesion-free", "train")
        lesion_train = datasets.load_subjects(args.data, "lesioned", "train")
        batch = experiments.build_pseudo_eval_batch(
            datasets.load_subjects(args.data, "lesion-free", "test"),
            datasets.load_subjects(args.data, "lesioned", "test"),
            args.batch, cfg.seed,
        )
        res = experiments.run_inner_loop_ablation(
            args.pretrained_checkpoint, anatomy_train, lesion_train, batch,
            cfg, adapt_cfg, sup, args.out, meta_ckpt=args.checkpoint,
        )
        print(f"meta wins {res['wins']}/{res['n']} (meta {res['meta_mean']:.4f} vs control {res['control_mean']:.4f})")
    elif args.kind == "meta-benefit":
        batch = experiments.build_pseudo_eval_batch(
            datasets.load_subjects(args.data, "lesion-free", "test"),
            datasets.load_subjects(args.data, "lesioned", "test"),
            args.batch, cfg.seed,
        )
        res = experiments.evaluate_meta_benefit(
            args.pretrained_checkpoint, args.checkpoint, batch, adapt_cfg.patch_spec,
            out_csv=os.path.join(args.out, "meta_benefit.csv"),
        )
        print(
            f"lesion-region anatomy dice: pretrained {res['pretrained_mean']:.4f} "
            f"vs cotrained {res['cotrained_mean']:.4f}"
        )
    else:  # mask-source
        lesion_train = datasets.load_subjects(args.data, "lesioned", "train")
        lesion_test = datasets.load_subjects(args.data, "lesioned", "test", with_full_gt=True)
        sup_subjects = datasets.load_subjects(args.data, "lesion-free", "train")
        targets = _load_pseudolabels(args.pseudolabels)
        res = experiments.run_mask_source_study(
            args.checkpoint, args.lesion_checkpoint, lesion_train, targets,
            sup_subjects, lesion_test, cfg, adapt_cfg, args.out,
        )
        print(f"table written to {res['csv']}")
    _write_manifest(
        args.out, f"experiment-{args.kind}", cfg.seed, cfg, data_dir=args.data, t0=t0
    )
    return 0


def cmd_report(args):
    written = report.render_report(args.metrics_dir, args.out_dir)
    for path in written:
        print(path)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="jointseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate phantom datasets")
    s.add_argument("--out", required=True)
    s.add_argument("--anatomy", type=int, default=26)
    s.add_argument("--lesion", type=int, default=24)
    s.add_argument("--grid", type=int, default=48)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--anatomy-val", type=int, default=2)
    s.add_argument("--anatomy-test", type=int, default=6)
    s.add_argument("--lesion-test", type=int, default=6)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", help="task-specific pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--branch", choices=("anatomy", "lesion", "both"), default="both")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lesion-epochs", type=int, default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("meta-train", help="co-training with meta updates")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-inner", action="store_true", help="ablation control: outer loss only")
    s.add_argument("--name", default="cotrained")
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("pseudolabel", help="soft targets from the adapted anatomy branch")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--adapt-lr", type=float, default=1e-4)
    s.add_argument("--overlap", type=int, default=8)
    s.set_defaults(func=cmd_pseudolabel)

    s = sub.add_parser("joint-train", help="train fusion against soft targets")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True, help="co-trained T1-branch checkpoint")
    s.add_argument("--lesion-checkpoint", required=True)
    s.add_argument("--pseudolabels", required=True)
    s.add_argument("--mask-source", choices=("gt", "predicted"), default="gt")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_joint_train)

    s = sub.add_parser("infer", help="adapt and predict one subject")
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--t1", required=True)
    s.add_argument("--flair", required=True)
    s.add_argument("--data", help="dataset dir for the supervision anchor")
    s.add_argument("--sup-t1")
    s.add_argument("--sup-seg")
    s.add_argument("--fills", type=float, nargs="+")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--adapt-lr", type=float, default=1e-4)
    s.add_argument("--patch-size", type=int, default=32)
    s.add_argument("--overlap", type=int, default=8)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--subject-id", default="subject")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="stagewise evaluation to metrics CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", required=True,
                   choices=("pretrained-anatomy", "pretrained-lesion", "cotrained", "joint"))
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--lesion-checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--fills", type=float, nargs="+")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--adapt-lr", type=float, default=1e-4)
    s.add_argument("--patch-size", type=int, default=32)
    s.add_argument("--overlap", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser(
        "experiment",
        help="studies: degradation, ablation, mask-source, adaptation, meta-benefit",
    )
    s.add_argument(
        "kind",
        choices=("degradation", "ablation", "mask-source", "adaptation", "meta-benefit"),
    )
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="co-trained checkpoint (meta model)")
    s.add_argument("--pretrained-checkpoint")
    s.add_argument("--lesion-checkpoint")
    s.add_argument("--pseudolabels")
    s.add_argument("--fractions", type=float, nargs="+", default=(1.0, 0.5, 0.25))
    s.add_argument("--batch", type=int, default=10)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--adapt-lr", type=float, default=1e-4)
    s.add_argument("--overlap", type=int, default=8)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="tables and figures from metric CSVs")
    s.add_argument("--metrics-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except JointsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
