"""Command-line entry point: ``span-sr {train,infer,eval,gradcheck,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Set ``SPAN_SR_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck, io
from .metrics import evaluate
from .model import (PRESETS as MODEL_PRESETS, fuse_model, flop_estimate, init_model,
                    parameter_count, span_forward, with_variant)
from .tensor import ShapeError, Xoshiro256
from .train import TRAIN_PRESETS, NumericError, TrainState, train

log = logging.getLogger("span_sr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

WEIGHTS_NAME = "weights.spanw"
CHECKPOINT_NAME = "checkpoint.spanckpt"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; route that to exit 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _require_dir(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    if not path.is_dir():
        raise DataError(f"{what} is not a directory: {path}")
    return path


def _load_weights(path: Path):
    if not path.is_file():
        raise DataError(f"weight file not found: {path}")
    return io.load_weights(path)


def _png_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataError(f"no .png files in {path}")
        return files
    if path.is_file():
        return [path]
    raise DataError(f"input not found: {path}")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.config is not None:
        if not args.config.is_file():
            raise DataError(f"config file not found: {args.config}")
        model_cfg, train_cfg = io.load_config(args.config)
    else:
        model_cfg, train_cfg = MODEL_PRESETS[io.CONFIG_PRESETS[args.preset][0]], \
            TRAIN_PRESETS[io.CONFIG_PRESETS[args.preset][1]]
    if args.variant:
        model_cfg = with_variant(model_cfg, args.variant)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.iterations is not None:
        train_cfg = replace(train_cfg, iterations=args.iterations)
    spec = io.DatasetSpec(_require_dir(args.data, "dataset"))
    images = [img for _, img in io.load_hr_images(spec)]

    state = None
    if args.resume is not None:
        if not args.resume.is_file():
            raise DataError(f"checkpoint not found: {args.resume}")
        model, state = io.load_checkpoint(args.resume)
        if model.config != model_cfg:
            raise DataError(f"checkpoint {args.resume} was trained with a different model config")
        if model.fused:
            raise DataError("cannot resume training from a fused model")
    else:
        model = init_model(model_cfg, train_cfg.seed)

    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / LOG_NAME
    append = state is not None and log_path.exists()
    with open(log_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["iteration", "loss", "lr", "wallclock_ms"])

        def on_log(row):
            it, loss, lr, ms = row
            writer.writerow([it, repr(loss), repr(lr), f"{ms:.1f}"])
            fh.flush()
            if args.verbose:
                print(f"iter {it:7d}  loss {loss:.6f}  lr {lr:.3g}")

        result = train(model, images, train_cfg, state=state, stop_at=args.until, on_log=on_log)

    (args.out / CONFIG_NAME).write_text(json.dumps(io.config_to_dict(model_cfg, train_cfg),
                                                   indent=2) + "\n")
    _write_atomic(args.out / WEIGHTS_NAME, io.weights_to_bytes(model))
    _write_atomic(args.out / CHECKPOINT_NAME, io.checkpoint_to_bytes(model, result.state))
    done = result.state.stage * train_cfg.iterations + result.state.iteration
    last = f", last loss {result.losses[-1]:.6f}" if result.losses else ""
    status = "finished" if result.finished else "stopped"
    print(f"train {status} at iteration {done}{last}; "
          f"params {model.num_params():,}; wrote {args.out / WEIGHTS_NAME}")
    return EXIT_OK


def _upscale(model, lr: np.ndarray) -> np.ndarray:
    return span_forward(lr, model)[0]


def cmd_infer(args) -> int:
    model = _load_weights(args.weights)
    if args.scale is not None and args.scale != model.config.scale:
        raise DataError(f"requested scale x{args.scale} but {args.weights} is a "
                        f"x{model.config.scale} model")
    inputs = _png_inputs(args.input)
    if args.fuse and not model.fused:
        model = fuse_model(model)
    args.out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        lr = io.load_png(path)
        sr = _upscale(model, lr)
        dest = args.out / f"{path.stem}.png"
        io.save_png(sr, dest)
        print(f"{path.name}: {lr.shape[3]}x{lr.shape[2]} -> {sr.shape[3]}x{sr.shape[2]}  {dest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_weights(args.weights)
    if args.fuse and not model.fused:
        model = fuse_model(model)
    r = model.config.scale
    spec = io.DatasetSpec(_require_dir(args.data, "dataset"), degrade=args.degrade)
    pairs = io.load_pairs(spec, r)
    report = evaluate(model, pairs, r, border=args.border)
    if not report.rows:
        raise DataError("no image pair could be evaluated")
    if args.report is not None:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.report)
    if args.json is not None:
        args.json.write_text(report.to_json() + "\n")
    for row in report.rows:
        print(f"{row.image:24s} psnr {row.psnr_db:7.3f}  ssim {row.ssim:.4f}  "
              f"bicubic {row.bicubic_psnr_db:7.3f}/{row.bicubic_ssim:.4f}  {row.ms:8.1f} ms")
    print(f"{'mean':24s} psnr {report.mean_psnr:7.3f}  ssim {report.mean_ssim:.4f}  "
          f"bicubic {report.mean_bicubic_psnr:7.3f}/{report.mean_bicubic_ssim:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.precision != 64:
        raise UsageError("gradcheck runs at 64-bit only (--precision 64)")

    def show(res):
        if args.verbose:
            print(f"  {res.name}: {res.max_error:.3e} ({res.seconds:.1f}s)", flush=True)

    hook = gradcheck.corrupted_backward() if args.corrupt_backward else nullcontext()
    with hook:
        report = gradcheck.run_suite(args.seed, quick=args.quick, on_result=show)
    print(report.table())
    worst = report.worst
    print(f"worst: {worst.name} {worst.max_error:.3e} (tol {worst.tolerance:.0e})")
    if not report.passed:
        print("gradcheck FAILED")
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.weights is not None:
        model = _load_weights(args.weights)
    else:
        model = init_model(MODEL_PRESETS[args.preset], 0)
    if args.fuse and not model.fused:
        model = fuse_model(model)
    h, w = args.size
    rng = Xoshiro256(args.seed)
    x = rng.uniform_array(3 * h * w).reshape(1, 3, h, w).astype(model.dtype)
    for _ in range(args.warmup):
        _upscale(model, x)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        _upscale(model, x)
        times.append((time.perf_counter() - t0) * 1000.0)
    flops = flop_estimate(model.config, model.fused, h, w)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    print(f"model x{model.config.scale} C'={model.config.channels} B={model.config.blocks} "
          f"{'fused' if model.fused else 'unfused'}")
    print(f"input {h}x{w}  runs {args.runs}  warmup {args.warmup}")
    print(f"params {parameter_count(model.config, model.fused):,}")
    print(f"flops {flops / 1e9:.3f} G (multiply-add = 2)")
    print(f"time mean {statistics.fmean(times):.2f} ms  std {std:.2f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="span-sr", description="SPAN super-resolution on numpy.")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed accumulation order; implies --threads 1 unless given")
    p.add_argument("--threads", type=_positive, default=None,
                   help="BLAS/OpenMP thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    t = sub.add_parser("train", help="train a model on root/HR/*.png")
    t.add_argument("--config", type=Path, help="JSON run configuration")
    t.add_argument("--preset", choices=sorted(io.CONFIG_PRESETS), default="desk",
                   help="used when --config is absent (default: desk)")
    t.add_argument("--variant", choices=["span", "nores", "noatt", "empty"])
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--seed", type=_non_negative)
    t.add_argument("--iterations", type=_non_negative, help="override iterations per stage")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--until", type=_non_negative,
                   help="stop after this many global iterations and checkpoint")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="upscale PNG files")
    i.add_argument("--weights", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True, help="PNG file or directory")
    i.add_argument("--out", type=Path, required=True, help="output directory")
    i.add_argument("--fuse", action="store_true", help="fuse rep branches first")
    i.add_argument("--scale", type=int, help="expected model scale")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM report against bicubic")
    e.add_argument("--weights", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="root with HR/ and LR/X<r>/")
    e.add_argument("--report", type=Path, help="CSV report path")
    e.add_argument("--json", type=Path, help="also write a JSON report")
    e.add_argument("--border", type=_non_negative, help="pixels cropped per side (default: scale)")
    e.add_argument("--degrade", action="store_true",
                   help="always synthesize LR from HR by bicubic downscaling")
    e.add_argument("--fuse", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=_non_negative, default=0)
    g.add_argument("--precision", type=int, default=64)
    g.add_argument("--quick", action="store_true", help="skip the model variant checks")
    g.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time the forward pass")
    b.add_argument("--weights", type=Path)
    b.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="span-x4",
                   help="architecture when --weights is absent")
    b.add_argument("--size", type=_parse_size, default=(64, 64), help="LR input HxW")
    b.add_argument("--runs", type=_positive, default=5)
    b.add_argument("--warmup", type=_non_negative, default=1)
    b.add_argument("--fuse", action="store_true")
    b.add_argument("--seed", type=_non_negative, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SPAN_SR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    threads = args.threads if args.threads is not None else (1 if args.deterministic else None)
    limit = threadpool_limits(limits=threads) if threads is not None else nullcontext()
    try:
        with limit:
            return args.func(args)
    except (UsageError, io.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, io.WeightFileError, io.ImageFormatError, ShapeError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures stem from inputs (e.g. images smaller than the patch)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
