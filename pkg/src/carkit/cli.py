"""Command-line interface: ``carkit {train,downscale,upscale,eval,gradcheck,viz,identity}``.

Every command exits 0 on success. Failures print one ``error: ...`` line to
stderr and exit 1, or 2 for configuration/usage errors. Files are written to a
temporary name and renamed, so a failed command leaves no partial output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cubic, gradcheck, viz
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .image import ImageError, list_pngs, load_png, save_png
from .metrics import aggregate, evaluate_bicubic_baseline, evaluate_pair
from .resampler import ResampleError
from .trainer import ConfigError, TrainConfig, Trainer, TrainingDiverged, build_model, identity_checkpoint

PATH_KEYS = ("train_dir", "val_dir", "out_dir")


class UsageError(Exception):
    """Bad configuration or arguments; exit status 2."""


class CommandError(Exception):
    """Runtime failure with a user-facing message; exit status 1."""


def _emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: str | None, overrides: dict) -> tuple[TrainConfig, dict]:
    """Merge the JSON config file with flag overrides; returns the config and the paths."""
    raw: dict = {}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {config_path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {config_path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    paths = {k: raw.pop(k, None) for k in PATH_KEYS}
    try:
        cfg = TrainConfig.from_dict(raw)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    except TypeError as e:
        raise UsageError(f"bad config value: {e}") from None
    return cfg, paths


def _load_dir(directory: str) -> list[tuple[str, np.ndarray]]:
    files = list_pngs(directory)
    if not files:
        raise CommandError(f"no PNG images in {directory}")
    return [(p.name, load_png(p)) for p in files]


def _ckpt_model(path: str):
    try:
        return build_model(load_checkpoint(path))
    except OSError as e:
        raise CommandError(f"cannot read checkpoint {path}: {e.strerror}") from None


def _divisible(img: np.ndarray, s: int, what: str) -> None:
    H, W = img.shape[:2]
    if H % s or W % s:
        raise CommandError(f"{what} is {H}x{W}, not divisible by scale {s}; "
                           f"crop it to {H - H % s}x{W - W % s} first")


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    overrides.update(train_dir=args.train_dir, val_dir=args.val_dir, out_dir=args.out)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    cfg, paths = resolve_config(args.config, overrides)
    for key in ("train_dir", "out_dir"):
        if not paths[key]:
            raise UsageError(f"missing required setting {key!r}")
    out = Path(paths["out_dir"])
    train_set = [img for _, img in _load_dir(paths["train_dir"])]
    val_set = [img for _, img in _load_dir(paths["val_dir"])] if paths["val_dir"] else []
    out.mkdir(parents=True, exist_ok=True)

    effective = {**cfg.to_dict(), **{k: v for k, v in paths.items() if v is not None}}
    _atomic_write_text(out / "config.json", json.dumps(effective, indent=2, sort_keys=True) + "\n")
    _emit({"config": effective})

    log_lines: list[str] = []

    def on_record(rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        log_lines.append(line)
        if not args.quiet:
            print(line, flush=True)

    resume = load_checkpoint(args.resume) if args.resume else None
    trainer = Trainer(cfg, train_set, val_set, resume=resume, on_record=on_record)
    try:
        best = trainer.run()
    except TrainingDiverged as e:
        save_checkpoint(e.last_good, out / "last_good.ckpt")
        raise CommandError(f"{e}; last good state saved to {out / 'last_good.ckpt'}") from None
    save_checkpoint(trainer.checkpoint(), out / "last.ckpt")
    save_checkpoint(best, out / "model.ckpt")
    _atomic_write_text(out / "log.jsonl", "".join(line + "\n" for line in log_lines))
    _emit({"checkpoint": str(out / "model.ckpt"), "steps": trainer.step_count, "best_val_psnr": trainer.best_val})
    return 0


def cmd_downscale(args) -> int:
    model = _ckpt_model(args.ckpt)
    img = load_png(args.input)
    _divisible(img, model.geom.scale, args.input)
    save_png(model.downscale(img, quantize=True), args.output)
    return 0


def cmd_upscale(args) -> int:
    img = load_png(args.input)
    if args.bicubic:
        if not args.scale:
            raise UsageError("--bicubic needs --scale")
        sr = cubic.bicubic_upscale(img, args.scale)
    else:
        sr = _ckpt_model(args.ckpt).upscale(img)
    save_png(np.asarray(sr, dtype=np.float64), args.output)
    return 0


def cmd_eval(args) -> int:
    if args.ckpt is None and not args.scale:
        raise UsageError("eval needs --ckpt, or --scale for the bicubic baseline")
    model = _ckpt_model(args.ckpt) if args.ckpt else None
    s = model.geom.scale if model else args.scale
    upscaler = None if args.upscaler == "auto" else args.upscaler
    reports = []
    lines = []
    for name, hr in _load_dir(args.hr_dir):
        if args.crop:
            hr = hr[:hr.shape[0] - hr.shape[0] % s, :hr.shape[1] - hr.shape[1] % s]
        _divisible(hr, s, name)
        r = evaluate_pair(hr, model, upscaler, name) if model else evaluate_bicubic_baseline(hr, s, name)
        reports.append(r)
        lines.append(r.to_json())
        print(lines[-1], flush=True)
    lines.append(json.dumps(aggregate(reports), sort_keys=True))
    print(lines[-1], flush=True)
    if args.out:
        _atomic_write_text(Path(args.out), "".join(line + "\n" for line in lines))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, size=args.size, corrupt=args.corrupt)
    for r in results:
        _emit({"check": r.name, "instances": r.instances, "max_rel_error": r.max_error, "passed": r.passed})
    failed = [r.name for r in results if not r.passed]
    _emit({"summary": "fail" if failed else "pass", "failed": failed, "tolerance": gradcheck.TOLERANCE})
    return 1 if failed else 0


def cmd_viz(args) -> int:
    model = _ckpt_model(args.ckpt)
    img = load_png(args.input)
    _divisible(img, model.geom.scale, args.input)
    K, dX, dY = model.fields(img[None])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    written = []
    for (i, j), m in viz.central_kernel_maps(K[0]):
        path = out / f"{stem}_kernel_{i}_{j}.png"
        save_png(m, path)
        written.append(str(path))
    path = out / f"{stem}_offsets.png"
    save_png(viz.offset_map(dX[0], dY[0], model.geom.offset_cap), path)
    written.append(str(path))
    _emit({"written": written})
    return 0


def cmd_identity(args) -> int:
    save_checkpoint(identity_checkpoint(), args.out)
    _emit({"checkpoint": args.out})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carkit", description="Content-adaptive image downscaling toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and info to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a downscaler on a directory of PNGs")
    t.add_argument("--config", help="JSON config file (TrainConfig fields plus train_dir/val_dir/out_dir)")
    t.add_argument("--train-dir")
    t.add_argument("--val-dir")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (JSON value)")
    t.add_argument("--quiet", action="store_true", help="do not echo log records")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("downscale", help="CAR-downscale one PNG (quantised export path)")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", dest="output", required=True)
    d.set_defaults(func=cmd_downscale)

    u = sub.add_parser("upscale", help="upscale one PNG")
    g = u.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--bicubic", action="store_true")
    u.add_argument("--scale", type=int, help="scale for --bicubic")
    u.add_argument("--in", dest="input", required=True)
    u.add_argument("--out", dest="output", required=True)
    u.set_defaults(func=cmd_upscale)

    e = sub.add_parser("eval", help="PSNR/SSIM over a directory of HR PNGs")
    e.add_argument("--ckpt", help="omit to evaluate the bicubic-down/bicubic-up baseline")
    e.add_argument("--scale", type=int, help="scale for the baseline")
    e.add_argument("--hr-dir", required=True)
    e.add_argument("--upscaler", choices=("auto", "bicubic", "learned"), default="auto")
    e.add_argument("--crop", action="store_true", help="crop images to a multiple of the scale")
    e.add_argument("--out", help="also write the report stream to this file")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz", help="export kernel and offset maps for one PNG")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_viz)

    i = sub.add_parser("identity", help="write a scale-1 delta-kernel debug checkpoint")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_identity)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CommandError, ImageError, CheckpointError, ResampleError, ValueError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
