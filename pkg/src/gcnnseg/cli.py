"""Command-line entry point: ``gcnnseg {prepare,train,eval,equivcheck,stability}``.

Exit codes: 0 success, 1 user/configuration error, 2 invariant-suite failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import groups as G
from .equivcheck import run_suite
from .model import ArchitectureConfig, ConfigurationError, build, load_model
from .tensor import CorruptFileError, write_checkpoint
from .train import ConfigError, DiceCounter, TrainConfig, evaluate, stability_report, subsample_regime, train

OUT_ENV = "GCNNSEG_OUT"
log = logging.getLogger("gcnnseg")


class UserError(Exception):
    pass


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UserError(f"config file {path} not found") from None
    except json.JSONDecodeError as err:
        raise UserError(f"config file {path} is not valid JSON: {err}") from None
    unknown = set(cfg) - {"architecture", "train", "data"}
    if unknown:
        raise UserError(f"unknown config sections {sorted(unknown)}")
    return cfg


def _merge(section: dict, cls, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UserError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged) if cls is not D.SyntheticTaskConfig else D.SyntheticTaskConfig.from_dict(merged)
    except (TypeError, ValueError) as err:
        raise UserError(f"invalid {cls.__name__}: {err}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dtype(args):
    return np.float64 if getattr(args, "f64", False) else np.float32


# --------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _load_config(args.config)
    data_cfg = _merge(cfg.get("data", {}), D.SyntheticTaskConfig,
                      {"seed": args.seed, "num_images": args.num_images, "image_size": args.size,
                       "model_depth": args.depth})
    out = _out_dir(args, "data")
    synth = D.generate_synthetic(data_cfg)
    manifest = D.write_dataset(out, synth, data_cfg)
    counts = {s: synth.splits.count(s) for s in D.SPLITS}
    print(f"wrote {len(synth.splits)} images to {out} ({counts})")
    _write_json(out / "prepare_report.json", {"manifest": str(manifest.name), "counts": counts})
    return 0


def _arch_from(args, cfg) -> ArchitectureConfig:
    return _merge(cfg.get("architecture", {}), ArchitectureConfig,
                  {"group": args.group, "depth": args.depth, "base_width": args.base_width})


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    arch = _arch_from(args, cfg)
    tcfg = _merge(cfg.get("train", {}), TrainConfig,
                  {"seed": args.seed, "data_regime_fraction": args.regime, "epochs": args.epochs,
                   "batches_per_epoch": args.batches_per_epoch, "batch_size": args.batch_size})
    manifest = Path(args.data) / "manifest.jsonl"
    if not manifest.exists():
        raise UserError(f"no dataset at {args.data} (missing manifest.jsonl); run 'prepare' first")
    dtype = _dtype(args)
    train_set = D.load_split(manifest, "train", dtype)
    val_set = D.load_split(manifest, "val", dtype)
    out = _out_dir(args, f"train-{arch.group}-seed{tcfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"architecture": asdict(arch), "train": asdict(tcfg), "data": {"path": str(args.data)},
                "f64": bool(args.f64)}
    _write_json(out / "config.json", resolved)
    model = build(arch, seed=tcfg.seed, dtype=dtype)
    try:
        result = train(model, train_set, val_set, tcfg, out)
    except (ConfigError, ConfigurationError) as err:
        raise UserError(str(err)) from None
    n_used = len(subsample_regime(train_set, tcfg.data_regime_fraction, tcfg.seed))
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
               "n_train_available": len(train_set), "n_train_used": n_used}
    _write_json(out / "summary.json", summary)
    print(f"trained {arch.group} on {n_used}/{len(train_set)} images; best epoch {result.best_epoch} "
          f"val loss {result.best_val_loss:.4f}; checkpoint {out / 'best.gunt'}")
    return 0


def _load_checkpoint(path, dtype=None):
    try:
        return load_model(path, dtype=dtype)
    except FileNotFoundError:
        raise UserError(f"checkpoint {path} not found") from None
    except (CorruptFileError, ConfigurationError) as err:
        raise UserError(f"cannot load checkpoint {path}: {err}") from None


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint, _dtype(args) if args.f64 else None)
    if args.group and args.group != model.config.group:
        raise UserError(f"checkpoint was trained with group {model.config.group}, not {args.group}")
    manifest = Path(args.data) / "manifest.jsonl"
    if not manifest.exists():
        raise UserError(f"no dataset at {args.data}")
    split = D.load_split(manifest, args.split, model.dtype)
    if len(split) == 0:
        raise UserError(f"split {args.split!r} is empty")
    if args.oracle_predictions:
        counter = DiceCounter()
        counter.update(split.masks == 1, split.masks == 1)
        report = {"dsc": counter.micro, "dsc_per_image": counter.mean_per_image, "per_image": counter.per_image}
    else:
        try:
            metrics = evaluate(model, split)
        except ConfigurationError as err:
            raise UserError(str(err)) from None
        counter = DiceCounter()
        for i in range(len(split)):
            counter.update(model.forward(split.images[i : i + 1]).argmax(axis=1) == 1, split.masks[i : i + 1] == 1)
        report = {"loss": metrics["loss"], "dsc": metrics["dsc"], "dsc_per_image": metrics["dsc_per_image"],
                  "per_image": counter.per_image}
    report.update({"split": args.split, "n_images": len(split), "group": model.config.group})
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"eval_{args.split}.json", report)
    print(f"{args.split}: micro DSC {report['dsc']:.4f}, mean per-image DSC {report['dsc_per_image']:.4f} "
          f"over {len(split)} images")
    return 0


def cmd_equivcheck(args) -> int:
    dtype = _dtype(args)
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint, dtype)
    else:
        cfg = _load_config(args.config)
        arch = _arch_from(args, cfg)
        model = build(arch, seed=args.seed or 0, dtype=dtype)
    results = run_suite(model.group, model=model, seed=args.seed or 0, gradients=not args.skip_gradients)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    report = {"group": model.group.name, "dtype": str(np.dtype(dtype)), "checks": [r.as_dict() for r in results],
              "passed": not failed}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "equivcheck.json", report)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


def _render(path: Path, arr: np.ndarray, scale: float = 1.0) -> None:
    D.save_image(path, np.clip(np.round(arr * scale * 255), 0, 255).astype(np.uint8))


def cmd_stability(args) -> int:
    model = _load_checkpoint(args.checkpoint, _dtype(args) if args.f64 else None)
    try:
        img = D.load_image(args.image)
    except FileNotFoundError:
        raise UserError(f"image {args.image} not found") from None
    if img.ndim != 3:
        raise UserError("stability expects an RGB image")
    x = D.to_model_input(img[None], model.dtype)
    try:
        rep = stability_report(model, x, args.transforms or "p4m")
    except ConfigurationError as err:
        raise UserError(str(err)) from None
    out = _out_dir(args, "stability")
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "stability.gunt", {"mean": rep.mean, "std": rep.std})
    _render(out / "mean.png", rep.mean)
    _render(out / "std.png", rep.std, args.std_scale)
    summary = {**rep.summary(), "group": model.config.group, "transforms": args.transforms or "p4m",
               "std_render_scale": args.std_scale}
    _write_json(out / "stability.json", summary)
    print(f"max std {rep.max_std:.3e}, mean std {rep.mean_std:.3e}; maps in {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcnnseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_flags=True):
        sp.add_argument("--config", help="JSON config with 'architecture', 'train' and 'data' sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        sp.add_argument("--f64", action="store_true", help="64-bit arithmetic")
        if model_flags:
            sp.add_argument("--group", choices=sorted(G.GROUPS))
            sp.add_argument("--depth", type=int)
            sp.add_argument("--base-width", type=int)

    sp = sub.add_parser("prepare", help="generate the synthetic dataset")
    common(sp, model_flags=False)
    sp.add_argument("--num-images", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--depth", type=int, help="model depth the image size must suit")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a (G)U-Net")
    common(sp)
    sp.add_argument("--data", required=True, help="prepared dataset directory")
    sp.add_argument("--regime", type=float, help="fraction of the training split to use")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batches-per-epoch", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="Dice report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=D.SPLITS)
    sp.add_argument("--oracle-predictions", action="store_true", help="score ground truth against itself")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("equivcheck", help="run the invariant suite")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--skip-gradients", action="store_true")
    sp.set_defaults(func=cmd_equivcheck)

    sp = sub.add_parser("stability", help="prediction spread under roto-reflections")
    common(sp, model_flags=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--transforms", choices=sorted(G.GROUPS), help="transformations to apply (default p4m)")
    sp.add_argument("--std-scale", type=float, default=10.0, help="brightness factor for the std map")
    sp.set_defaults(func=cmd_stability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigurationError, ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
