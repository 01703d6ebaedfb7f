"""Command line entry point: ``mosaic-sr {gen-data,train,eval,sr,gradcheck}``.

Every command writes its resolved configuration as one JSON line to stdout,
followed by JSON-line progress/results; a short human summary goes to stderr.

Exit codes: 0 success, 1 usage error or missing input, 2 runtime failure,
3 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .io import DatasetManifest, load_mosaic_pgm, pairs_from_hr_dir, save_mosaic_pgm, synthesize_dataset
from .metrics import EvalReport, evaluate_mosaic
from .model import VARIANTS, ModelConfig, build_model, variant_config
from .mosaic import bicubic_upscale_mosaic, get_pattern
from .training import Checkpoint, TrainConfig, load_checkpoint, predict_mosaic, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or inconsistent inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, default=_json_default), flush=True)


def _json_default(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _finite(v):
    return "inf" if v == math.inf else v


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--dims must look like HxW, got {text!r}") from None
    return h, w


def _require_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _thread_limit():
    raw = os.environ.get("MOSAIC_SR_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MOSAIC_SR_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    pat = get_pattern(args.pattern)
    if args.input_format is None:
        # Bayer's two greens share a wavelength, so cubes add nothing over the raw mosaic
        args.input_format = "mosaic" if pat.name == "bayer" else "zero_padded_cube"
    splits = None
    if args.val or args.test:
        n_train = args.n - args.val - args.test
        if n_train < 0:
            raise UsageError(f"--val + --test exceeds --n={args.n}")
        splits = {"train": n_train, "val": args.val, "test": args.test}
    resolved = {"command": "gen-data", "out": args.out, "pattern": pat.name, "input_format": args.input_format,
                "scale": args.scale, "seed": args.seed}
    if args.from_hr:
        hr_dir = Path(args.from_hr)
        if not hr_dir.is_dir():
            raise FileNotFoundError(f"--from-hr directory not found: {hr_dir}")
        resolved["from_hr"] = str(hr_dir)
        _emit(resolved)
        manifest = pairs_from_hr_dir(hr_dir, pat, args.out, args.input_format, args.scale, args.seed)
    else:
        h, w = _parse_dims(args.dims)
        mult_h, mult_w = args.scale * pat.tile_h, args.scale * pat.tile_w
        if h <= 0 or w <= 0 or h % mult_h or w % mult_w:
            raise UsageError(f"--dims {h}x{w} must be positive multiples of {mult_h}x{mult_w} "
                             f"for pattern {pat.name} at scale {args.scale}")
        resolved.update(n=args.n, dims=[h, w], splits=splits)
        _emit(resolved)
        manifest = synthesize_dataset(args.n, (h, w), pat, args.seed, args.out, args.input_format,
                                      args.scale, splits)
    path = Path(args.out) / "manifest.json"
    _emit({"event": "done", "manifest": str(path), "pairs": len(manifest.pairs)})
    _say(f"wrote {len(manifest.pairs)} pairs and {path}")
    return EXIT_OK


# ---------------------------------------------------------------- train

_MODEL_FLAGS = ("width", "n_rg", "n_rb", "ca_reduction", "in_channels")
_TRAIN_FLAGS = ("epochs", "batch_size", "lr0", "halve_every", "crop_lr", "seed", "val_every")


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "--config")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {p}: invalid JSON ({exc})") from None
    if not isinstance(d, dict) or set(d) - {"variant", "model", "train"}:
        raise UsageError(f"--config {p}: expected an object with keys 'variant', 'model', 'train'")
    return d


def resolve_train_configs(args, manifest: DatasetManifest) -> tuple[ModelConfig, TrainConfig]:
    """Variant defaults, then config file, then explicit flags."""
    file_cfg = _load_config_file(args.config)
    variant = args.variant or file_cfg.get("variant", "pyrrcan+lstmA")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    model_over = dict(file_cfg.get("model", {}))
    train_over = dict(file_cfg.get("train", {}))
    for name in _MODEL_FLAGS:
        if getattr(args, name) is not None:
            model_over[name] = getattr(args, name)
    for name in _TRAIN_FLAGS:
        if getattr(args, name) is not None:
            train_over[name] = getattr(args, name)
    model_over.setdefault("in_channels", manifest.in_channels)
    model_over.setdefault("scale", manifest.scale)
    try:
        mcfg = variant_config(variant, **model_over)
        tcfg = TrainConfig.from_dict(train_over)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if mcfg.in_channels != manifest.in_channels:
        raise UsageError(f"config in_channels={mcfg.in_channels} but manifest input_format "
                         f"{manifest.input_format!r} supplies {manifest.in_channels} channels")
    if mcfg.scale != manifest.scale:
        raise UsageError(f"config scale={mcfg.scale} but manifest scale={manifest.scale}")
    return mcfg, tcfg


def _check_data_meta(ck: Checkpoint, manifest: DatasetManifest, what: str) -> None:
    meta = ck.data or {}
    if not meta:
        return
    if meta.get("cell_map") != manifest.cell_map or meta.get("input_format") != manifest.input_format:
        raise UsageError(f"{what} was trained on pattern {meta.get('pattern')!r} "
                         f"({meta.get('input_format')}) but manifest uses {manifest.pattern!r} "
                         f"({manifest.input_format})")


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(_require_file(args.manifest, "--manifest"))
    resume = None
    if args.resume:
        resume = load_checkpoint(_require_file(args.resume, "--resume"))
        _check_data_meta(resume, manifest, "--resume checkpoint")
        mcfg = resume.model_config
        tcfg = resume.train_config or TrainConfig()
        over = {n: getattr(args, n) for n in _TRAIN_FLAGS if getattr(args, n) is not None}
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), **over})
    else:
        mcfg, tcfg = resolve_train_configs(args, manifest)
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"--out directory does not exist: {out.parent}")
    _emit({"command": "train", "manifest": args.manifest, "out": str(out), "resume": args.resume,
           "model": mcfg.to_dict(), "train": tcfg.to_dict(), "max_steps": args.max_steps})

    model = build_model(mcfg, seed=tcfg.seed)
    _say(f"training {model.num_parameters()} parameters for {tcfg.epochs} epochs "
         f"on {len(manifest.split('train'))} pairs")

    ck = train(model, manifest, tcfg, resume=resume, log_fn=lambda rec: _emit({"event": "epoch", **rec}),
               max_steps=args.max_steps)
    save_checkpoint(ck, out)
    _emit({"event": "checkpoint", "path": str(out), "epoch": ck.epoch, "step": ck.step,
           "best_val_psnr": ck.best_val_psnr, "interrupted": ck.interrupted})
    if ck.interrupted:
        _say(f"interrupted: saved state after epoch {ck.epoch} to {out}")
        return EXIT_RUNTIME
    _say(f"saved {out} (epoch {ck.epoch}, step {ck.step})")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(_require_file(args.manifest, "--manifest"))
    sources = [s for s in (args.ckpt, args.baseline, args.pred_dir) if s]
    if len(sources) != 1:
        raise UsageError("give exactly one of --ckpt, --baseline bicubic, --pred-dir")
    pairs = manifest.split(args.split)
    if not pairs:
        raise UsageError(f"manifest has no {args.split!r} pairs")
    pat = manifest.mosaic_pattern
    model, method = None, None
    if args.ckpt:
        ck = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
        _check_data_meta(ck, manifest, "--ckpt")
        if ck.model_config.in_channels != manifest.in_channels:
            raise UsageError(f"checkpoint expects {ck.model_config.in_channels} input channels, "
                             f"manifest supplies {manifest.in_channels}")
        model = ck.build_model(best=True)
        method = f"checkpoint:{Path(args.ckpt).name}"
    elif args.baseline:
        method = "bicubic"
    else:
        pred_dir = Path(args.pred_dir)
        if not pred_dir.is_dir():
            raise FileNotFoundError(f"--pred-dir not found: {pred_dir}")
        method = f"dir:{pred_dir}"
    _emit({"command": "eval", "manifest": args.manifest, "split": args.split, "method": method,
           "n_pairs": len(pairs)})

    report = EvalReport(method=method)
    for entry in pairs:
        lr, hr = manifest.load_pair(entry)
        if model is not None:
            pred = predict_mosaic(model, lr, manifest)
        elif args.baseline:
            pred = np.clip(bicubic_upscale_mosaic(lr, pat, manifest.scale), 0.0, 1.0)
        else:
            pred_path = Path(args.pred_dir) / Path(entry.hr).name
            pred = load_mosaic_pgm(_require_file(str(pred_path), "prediction"))
        m = evaluate_mosaic(pred, hr, pat)
        report.add(Path(entry.hr).stem, m["psnr"], m["ssim"])
        _emit({"event": "image", "name": Path(entry.hr).stem, "psnr": _finite(m["psnr"]), "ssim": m["ssim"]})
        if m["psnr"] == math.inf:
            _say(f"warning: {entry.hr}: prediction identical to ground truth (PSNR = inf)")

    summary = report.to_dict()
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n")
    if args.csv_out:
        Path(args.csv_out).write_text(report.to_csv())
    _emit({"event": "summary", "psnr": summary["psnr"], "ssim": summary["ssim"], "n_images": summary["n_images"]})
    p = summary["psnr"]["mean"]
    _say(f"{method}: PSNR {p if isinstance(p, str) else f'{p:.3f}'} dB, "
         f"SSIM {summary['ssim']['mean']:.4f} over {summary['n_images']} images")
    return EXIT_OK


# ---------------------------------------------------------------- sr

def cmd_sr(args) -> int:
    ck = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
    src = _require_file(args.input, "--input")
    meta = ck.data or {}
    pattern_name = args.pattern or meta.get("pattern")
    input_format = args.input_format or meta.get("input_format")
    if pattern_name is None or input_format is None:
        raise UsageError("checkpoint carries no data description; pass --pattern and --input-format")
    cell_map = meta.get("cell_map") if pattern_name == meta.get("pattern") else None
    pat = get_pattern(pattern_name, cell_map)
    manifest = DatasetManifest(pattern=pat.name, input_format=input_format, scale=ck.model_config.scale,
                               cell_map=pat.to_json())
    if ck.model_config.in_channels != manifest.in_channels:
        raise UsageError(f"checkpoint expects {ck.model_config.in_channels} input channels, "
                         f"{input_format!r} with pattern {pat.name} gives {manifest.in_channels}")
    lr = load_mosaic_pgm(src)
    h, w = lr.shape
    if h % pat.tile_h or w % pat.tile_w:
        raise UsageError(f"input {src} is {h}x{w}; need multiples of the {pat.tile_h}x{pat.tile_w} tile")
    _emit({"command": "sr", "ckpt": args.ckpt, "input": str(src), "output": args.output, "pattern": pat.name,
           "input_format": input_format, "lr_shape": [h, w]})
    model = ck.build_model(best=True)
    pred = predict_mosaic(model, lr, manifest)
    save_mosaic_pgm(pred, args.output)
    _emit({"event": "done", "output": args.output, "hr_shape": list(pred.shape)})
    _say(f"wrote {args.output} ({pred.shape[0]}x{pred.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    if args.tol is not None and not args.tol > 0:
        raise UsageError("--tol must be positive")
    _emit({"command": "gradcheck", "scope": args.scope, "seed": args.seed, "tol": args.tol,
           "inject_fault": args.inject_fault})
    results = run_suite(args.scope, seed=args.seed, inject_fault=args.inject_fault)
    failed = []
    for name, rep in results:
        tol = rep.tol if args.tol is None else args.tol
        passed = rep.max_rel_err <= tol
        _emit({"event": "check", "name": name, "max_rel_err": rep.max_rel_err, "tol": tol,
               "n_checked": rep.n_checked, "passed": passed})
        if not passed:
            failed.append(name)
    _say(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed"
         + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mosaic-sr", description="Mosaic super-resolution with a pyramid ConvLSTM RCAN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize HR/LR mosaic pairs and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--pattern", default="ms4x4", choices=["bayer", "ms4x4"])
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--dims", default="216x216", help="HR size HxW")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=int, default=3)
    g.add_argument("--input-format", choices=["zero_padded_cube", "mosaic"],
                   help="default: mosaic for bayer, zero_padded_cube for ms4x4")
    g.add_argument("--val", type=int, default=0, help="pairs labelled val")
    g.add_argument("--test", type=int, default=0, help="pairs labelled test")
    g.add_argument("--from-hr", help="derive pairs from HR .pgm files in this directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="JSON with optional 'variant', 'model', 'train' sections")
    t.add_argument("--variant", help=f"one of {', '.join(sorted(VARIANTS))}")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--max-steps", type=int)
    for name in _MODEL_FLAGS:
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    for name in _TRAIN_FLAGS:
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float if name == "lr0" else int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint, the bicubic baseline or a prediction directory")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--baseline", choices=["bicubic"])
    e.add_argument("--pred-dir")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--json-out")
    e.add_argument("--csv-out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sr", help="super-resolve one LR mosaic PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", "--input", dest="input", required=True, help="LR mosaic PGM")
    s.add_argument("--out", "--output", dest="output", required=True, help="HR mosaic PGM to write")
    s.add_argument("--pattern", choices=["bayer", "ms4x4"])
    s.add_argument("--input-format", choices=["zero_padded_cube", "mosaic"])
    s.set_defaults(func=cmd_sr)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", default="all", choices=["op", "layer", "model", "all"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, help="override the per-suite tolerance (1e-5 ops/layers, 1e-4 model)")
    c.add_argument("--inject-fault", action="store_true", help="add an op with a deliberately wrong gradient")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        _say("interrupted")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        _say(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
