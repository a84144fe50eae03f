"""``bmdsr`` command line: synth, train, decompose, infer, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import fileio
from .checkpoint import file_hash, load_model, read_checkpoint
from .data_pipeline import DataError, ToySuiteSpec, build_dataset, load_manifest
from .evaluation import decompose, evaluate, predict
from .training import TrainConfig, TrainingAborted, run_ablation, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("bmdsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_structured(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)  # YAML is a superset of JSON
    if not isinstance(data, dict):
        raise DataError(f"{path} must contain a mapping")
    return data


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.source is None and args.toy_spec is None:
        raise UsageError("synth: one of --source or --toy-spec is required")
    if args.toy_spec is not None:
        spec = {} if args.toy_spec == "default" else _load_structured(args.toy_spec)
        if args.seed is not None:
            spec["seed"] = args.seed
        source = ToySuiteSpec.from_dict(spec)
    else:
        source = Path(args.source)
    manifest = build_dataset(source, args.out, scale=args.scale, stride=args.stride,
                             workers=args.workers, test_fraction=args.test_fraction)
    n_train, n_test = len(manifest.subset("train")), len(manifest.subset("test"))
    print(f"wrote {len(manifest.samples)} samples ({n_train} train / {n_test} test, "
          f"{len(manifest.skipped)} skipped) to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


_TRAIN_FLAGS = {
    "variant": "variant", "scale": "scale", "steps": "max_steps", "epochs": "epochs",
    "batch_size": "batch_size", "patch": "patch", "lr": "lr", "multiplier": "channel_multiplier",
    "seed": "seed", "extractor": "extractor", "checkpoint_every": "checkpoint_every",
    "val_every": "val_every", "workers": "workers", "grad_clip": "grad_clip",
    "lr_schedule": "lr_schedule",
}


def _train_config(args, manifest) -> TrainConfig:
    cfg = {}
    if args.desk:
        cfg = TrainConfig.desk(scale=args.scale or manifest.scale).to_dict()
    if args.config:
        cfg.update(_load_structured(args.config))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if args.no_grad_clip:
        cfg["grad_clip"] = None
    cfg.setdefault("scale", manifest.scale)
    if args.desk and "patch" not in cfg:
        cfg["patch"] = None
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _train_config(args, manifest)
    _seed_everything(cfg.seed)
    result = train(manifest, cfg, args.out, resume_from=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.variant} x{cfg.scale} for {result.state.step} steps; "
          f"final total loss {last.get('total', float('nan')):.6f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _model_from(path):
    try:
        return load_model(path)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_decompose(args) -> int:
    model = _model_from(args.checkpoint)
    if model.bmdnet is None:
        raise DataError(f"checkpoint variant {model.variant.value} has no BMDNet; "
                        f"decomposition needs C, FC or FCB")
    blur = fileio.read_image(args.input, np.float64)
    frames = decompose(model, blur)
    out = Path(args.out)
    written = []
    for i, f in enumerate(frames):
        fileio.write_png(out / f"sharp_{i + 1}.png", f)
        written.append(out / f"sharp_{i + 1}.png")
    fileio.write_png(out / "grid.png", fileio.make_grid([list(frames)]))
    reblur = np.abs(frames.mean(axis=0) - blur).mean()
    per_frame = [float(np.abs(f - blur).mean()) for f in frames]
    report = {"reblur_l1": float(reblur), "frame_l1": per_frame,
              "mean_frame_l1": float(np.mean(per_frame))}
    fileio.atomic_write_json(out / "decompose_report.json", report)
    print(f"wrote {len(written)} frames and grid.png to {out}")
    print(f"re-blur L1 {reblur:.6f} vs per-frame L1 " + " ".join(f"{v:.6f}" for v in per_frame))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _model_from(args.checkpoint)
    img = fileio.read_image(args.input, np.float64)
    hr = predict(model, img)
    fileio.write_png(args.out, hr)
    print(f"{img.shape[1]}x{img.shape[0]} -> {hr.shape[1]}x{hr.shape[0]} written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("eval: give exactly one of --checkpoint or --pred-dir")
    manifest = load_manifest(args.manifest)
    model, digest = None, None
    if args.checkpoint:
        model = _model_from(args.checkpoint)
        digest = file_hash(args.checkpoint)
    try:
        report = evaluate(manifest, args.split, model=model, pred_dir=args.pred_dir,
                          checkpoint_hash=digest, grid_path=args.grid, limit=args.limit)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    report.write(args.out)
    agg = report.aggregate
    print(f"{agg['n']} samples: mean PSNR {agg['mean_psnr']:.4f} dB, mean SSIM {agg['mean_ssim']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifests = {}
    for item in args.data:
        scale, _, root = item.partition("=")
        if not root:
            raise UsageError("ablate: --data expects SCALE=DATASET_ROOT")
        manifests[int(scale)] = load_manifest(root)
    cfg = TrainConfig.desk(scale=min(manifests))
    if args.config:
        d = cfg.to_dict()
        d.update(_load_structured(args.config))
        cfg = TrainConfig.from_dict(d)
    if args.steps is not None:
        d = cfg.to_dict()
        d["max_steps"] = args.steps
        cfg = TrainConfig.from_dict(d)
    report = run_ablation(manifests, cfg, args.out, variants=args.variants, seeds=args.seeds)
    print(report.format_table())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bmdsr", description="Blind motion-deblurring super-resolution toolkit.")
    p.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="synthesize a blur/sharp LR/HR dataset")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--source", help="directory of frame directories (one per video)")
    src.add_argument("--toy-spec", help="toy-suite recipe file (JSON/YAML) or 'default'")
    s.add_argument("--scale", type=int, choices=(2, 3, 4), required=True, help="downsampling factor N")
    s.add_argument("--stride", type=int, default=7, help="sliding-window step (default 7)")
    s.add_argument("--out", required=True, help="dataset root to write")
    s.add_argument("--seed", type=int, default=None, help="toy generator seed override")
    s.add_argument("--workers", type=int, default=1, help="synthesis processes")
    s.add_argument("--test-fraction", type=float, default=1.0 / 3.0,
                   help="fraction of videos held out when no train/test dirs exist")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--manifest", required=True, help="dataset root (or manifest.json)")
    t.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    t.add_argument("--config", help="TrainConfig file (JSON/YAML); flags override it")
    t.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
    t.add_argument("--variant", choices=("SRNET", "C", "FC", "FCB"), help="model variant")
    t.add_argument("--scale", type=int, choices=(2, 3, 4), help="upscaling factor N")
    t.add_argument("--steps", type=int, help="stop after this many steps")
    t.add_argument("--epochs", type=int, help="epochs when --steps is not given")
    t.add_argument("--batch-size", type=int, help="patches per step")
    t.add_argument("--patch", type=int, help="HR patch side in pixels")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--lr-schedule", choices=("cosine",), help="optional decay (default constant)")
    t.add_argument("--multiplier", type=float, help="channel width multiplier in (0, 1]")
    t.add_argument("--extractor", help="perceptual extractor id")
    t.add_argument("--checkpoint-every", type=int, help="write last.pt every this many steps")
    t.add_argument("--val-every", type=int, help="validation cadence in epochs (0 = off)")
    t.add_argument("--grad-clip", type=float, help="global gradient-norm clip")
    t.add_argument("--no-grad-clip", action="store_true", help="disable gradient clipping")
    t.add_argument("--workers", type=int, help="batch prefetch threads")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--seed", type=int, help="seed for weights and patch sampling")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decompose", help="recover the seven sharp frames of a blurry image")
    d.add_argument("--checkpoint", required=True, help="trained checkpoint (.pt)")
    d.add_argument("--input", required=True, help="blurry LR image")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--seed", type=int, default=0, help="torch seed")
    d.set_defaults(func=cmd_decompose)

    i = sub.add_parser("infer", help="super-resolve one blurry LR image")
    i.add_argument("--checkpoint", required=True, help="trained checkpoint (.pt)")
    i.add_argument("--input", required=True, help="blurry LR image")
    i.add_argument("--out", required=True, help="output PNG")
    i.add_argument("--seed", type=int, default=0, help="torch seed")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM over a dataset split")
    e.add_argument("--manifest", required=True, help="dataset root (or manifest.json)")
    e.add_argument("--checkpoint", help="model to run on the split")
    e.add_argument("--pred-dir", help="directory of <sample_id>.png predictions")
    e.add_argument("--split", default="test", choices=("train", "test"), help="split to score")
    e.add_argument("--out", required=True, help="EvalReport JSON path")
    e.add_argument("--grid", help="optional input | prediction | ground-truth mosaic")
    e.add_argument("--limit", type=int, help="score only the first K samples")
    e.add_argument("--seed", type=int, default=0, help="torch seed")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the four variants per scale")
    a.add_argument("--data", action="append", required=True, help="SCALE=DATASET_ROOT, repeatable")
    a.add_argument("--out", required=True, help="directory for runs and ablation.json")
    a.add_argument("--config", help="TrainConfig overrides (JSON/YAML)")
    a.add_argument("--steps", type=int, help="steps per cell")
    a.add_argument("--variants", nargs="+", default=["SRNET", "C", "FC", "FCB"],
                   help="variants to train")
    a.add_argument("--seeds", nargs="+", type=int, default=[0], help="seeds per cell")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None:
        _seed_everything(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as runtime failure
        log.exception("unexpected failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
