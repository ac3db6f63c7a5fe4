"""Command-line entry point.

Subcommands cover the full workflow: synthetic-suite generation, training
and MIM pretraining, volume prediction, evaluation, and plot emission.
Every run writes its resolved configuration before any compute so results
are attributable to an exact setting.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .canvas import default_value_pool
from .data import (
    ManifestError,
    build_synthetic_suite,
    load_manifest,
    write_dataset,
)
from .infer import predict_volume, write_predictions
from .metrics import MetricReport, generation_report, segmentation_report, write_csv
from .net import load_checkpoint
from .train import (
    NonFiniteLossError,
    TrainConfig,
    dump_resolved_config,
    fit,
    load_run_config,
    pretrain_mim,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TASK_ALIASES = {
    "seg": "segmentation", "segmentation": "segmentation",
    "denoise": "denoising", "denoising": "denoising",
    "synthesis": "synthesis", "synth": "synthesis",
    "inpaint": "inpainting", "inpainting": "inpainting",
}


def _out_path(raw: str) -> Path:
    """Resolve an output path, honoring the ICGEN_OUT_ROOT override."""
    p = Path(raw)
    root = os.environ.get("ICGEN_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _run_layout(out: Path) -> Path:
    for sub in ("checkpoints", "predictions", "reports", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    task = TASK_ALIASES[args.task]
    ds = build_synthetic_suite(
        task,
        n_instances=args.instances,
        seed=args.seed,
        image_size=args.size,
        class_count=args.classes,
        slice_range=(args.slices_min, args.slices_max),
        noise_sigma=args.noise_sigma,
        transform_id=args.transform,
        name=args.name or f"synthetic-{task}",
    )
    manifest = write_dataset(ds, _out_path(args.out))
    print(f"wrote {len(ds.volumes)} instances to {manifest}")
    return EXIT_OK


def _load_datasets(paths: list[str]):
    datasets = []
    for i, p in enumerate(paths, start=1):
        p = Path(p)
        if p.is_dir():
            p = p / "manifest.json"
        datasets.append(load_manifest(p).to_dataset(dataset_id=i))
    return datasets


def _resolved_configs(args):
    overrides = {
        k: getattr(args, k)
        for k in ("seed", "epochs", "steps_per_epoch", "batch_size", "peak_lr", "mask_ratio")
        if getattr(args, k, None) is not None
    }
    if args.config:
        return load_run_config(args.config, overrides)
    train_cfg = TrainConfig(**{k: v for k, v in overrides.items()})
    from .net import ModelConfig
    return train_cfg, ModelConfig(), {}


def cmd_train(args) -> int:
    train_cfg, model_cfg, extras = _resolved_configs(args)
    out = _run_layout(_out_path(args.out))
    scheme = args.scheme or extras.get("scheme", "random")
    (out / "config.txt").write_text(
        dump_resolved_config(train_cfg, model_cfg, {**extras, "scheme": scheme})
    )
    datasets = _load_datasets(args.data)
    ckpt, log = fit(
        train_cfg, datasets, out, model_cfg=model_cfg,
        default_scheme=scheme, resume=args.resume,
        init_from=args.init_from,
    )
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {log}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    train_cfg, model_cfg, extras = _resolved_configs(args)
    out = _run_layout(_out_path(args.out))
    (out / "config.txt").write_text(dump_resolved_config(train_cfg, model_cfg, extras))
    datasets = _load_datasets(args.data)
    slices = np.concatenate([v.slices for ds in datasets for v in ds.volumes])
    ckpt, log = pretrain_mim(train_cfg, slices, out, model_cfg=model_cfg)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    test_manifest = load_manifest(args.manifest)
    if test_manifest.task_kind == "segmentation" and not args.scheme:
        raise ManifestError("segmentation manifests require --scheme")
    prompt_manifest = (
        load_manifest(args.prompt_manifest) if args.prompt_manifest else test_manifest
    )
    prompt_ds = prompt_manifest.to_dataset()
    rng = np.random.default_rng(args.seed)
    if args.prompt_instance:
        matches = [v for v in prompt_ds.volumes if v.instance_id == args.prompt_instance]
        if not matches:
            raise ManifestError(f"prompt instance {args.prompt_instance!r} not in manifest")
        train_vol = matches[0]
    else:
        train_vol = prompt_ds.volumes[int(rng.integers(len(prompt_ds.volumes)))]
    print(f"prompt instance: {train_vol.instance_id}")

    out = _out_path(args.out)
    test_ds = test_manifest.to_dataset()
    shared_palette = None
    for vol in test_ds.volumes:
        outputs, extras = predict_volume(
            model, vol, train_vol,
            scheme=args.scheme if test_ds.task_kind == "segmentation" else None,
            mode=args.mode, palette=shared_palette,
            class_count=test_ds.class_count, seed=args.seed,
            keep_canvases=args.scheme == "random" or args.scheme == "predefined",
        )
        shared_palette = extras.get("palette") or shared_palette
        write_predictions(out, vol, outputs, extras, args.scheme,
                          canvases=extras.get("canvases"))
    print(f"predictions: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import read_png16

    manifest = load_manifest(args.manifest)
    pred_root = _out_path(args.pred)
    seg = manifest.task_kind == "segmentation"
    preds, refs = [], []
    n_vol = 0
    for idx, inst in enumerate(manifest.instances):
        vol_dir = pred_root / str(inst["instance_id"])
        if not vol_dir.is_dir():
            continue
        vol = manifest.volume(idx)
        n_vol += 1
        pattern = "label_*.png" if seg else "canvas_*.png"
        files = sorted(vol_dir.glob(pattern))
        if len(files) != len(vol):
            raise ManifestError(
                f"instance {inst['instance_id']}: {len(files)} predictions "
                f"for {len(vol)} reference slices"
            )
        for i, f in enumerate(files):
            preds.append(read_png16(f, is_label=seg))
            refs.append(vol.labels[i] if seg else vol.targets[i])
    if n_vol == 0:
        raise ManifestError(f"no prediction directories under {pred_root}")

    if seg:
        report = segmentation_report(
            preds, refs, list(range(1, manifest.class_count + 1)),
            dataset=manifest.name, volumes=n_vol,
        )
    else:
        report = generation_report(preds, refs, manifest.name, manifest.task_kind, volumes=n_vol)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"{manifest.name}.json")
    write_csv([report], out / f"{manifest.name}.csv")
    headline = f"mIoU {report.miou:.4f}" if seg else (
        f"MAE {report.mae:.4f} PSNR {report.psnr:.2f} SSIM {report.ssim:.4f}")
    print(f"{manifest.name}: {headline}")
    print(f"reports: {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = [MetricReport.from_json(p) for p in args.reports]
    metric = args.metric
    values = [getattr(r, metric) for r in reports]
    if any(v is None for v in values):
        raise ManifestError(f"metric {metric!r} missing from one or more reports")
    labels = args.labels.split(",") if args.labels else [r.dataset for r in reports]
    if len(labels) != len(reports):
        raise ManifestError("label count must match report count")

    fig, ax = plt.subplots(figsize=(6, 4))
    if args.kind == "line":
        ax.plot(labels, values, marker="o")
    else:
        ax.bar(labels, values)
    ax.set_ylabel(metric)
    ax.set_title(args.title or metric)
    fig.tight_layout()
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"plot: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icgen",
        description="In-context image-to-image generalist: one model, prompt-defined tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a deterministic synthetic dataset")
    p.add_argument("--task", required=True, choices=sorted(TASK_ALIASES))
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--slices-min", type=int, default=8)
    p.add_argument("--slices-max", type=int, default=20)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--transform", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("pretrain", cmd_pretrain)):
        p = sub.add_parser(name, help=f"run {name} from a flat key=value config")
        p.add_argument("--config", default=None)
        p.add_argument("--data", nargs="+", required=True,
                       help="dataset manifests (or dirs containing manifest.json)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--peak-lr", dest="peak_lr", type=float, default=None)
        p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)
        if name == "train":
            p.add_argument("--scheme", choices=["binary", "predefined", "random"], default=None)
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
            p.add_argument("--init-from", dest="init_from", default=None,
                           help="checkpoint whose weights initialize the model")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="sweep volumes with prompt-matched inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompt-manifest", default=None)
    p.add_argument("--prompt-instance", default=None)
    p.add_argument("--scheme", choices=["binary", "predefined", "random"], default=None)
    p.add_argument("--mode", choices=["ar", "mim"], default="ar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render bar/line charts from metric reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--metric", default="miou")
    p.add_argument("--labels", default=None)
    p.add_argument("--kind", choices=["bar", "line"], default="bar")
    p.add_argument("--title", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
