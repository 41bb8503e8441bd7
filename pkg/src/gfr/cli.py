"""Command-line front end: gen / train / eval / params / diag.

GFR_THREADS caps BLAS parallelism (default 1 so runs are deterministic);
it must take effect before numpy loads, hence the env setup ahead of
the package imports below.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    n = os.environ.get("GFR_THREADS", "1")
    if not n.isdigit() or int(n) < 1:
        raise SystemExit(f"GFR_THREADS must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


_cap_threads()

import numpy as np  # noqa: E402

from .config import RunConfig, apply_overrides, load_config, save_config  # noqa: E402
from .diagnostics import write_diagnostics  # noqa: E402
from .evaluation import evaluate, run_detector  # noqa: E402
from .heads import detections_to_jsonl  # noqa: E402
from .model import Detector, count_params, params_csv  # noqa: E402
from .synth import generate_dataset, load_dataset, normalize_size_mix, save_dataset  # noqa: E402
from .training import NanLossError, load_checkpoint, loss_curve_csv, save_checkpoint, train  # noqa: E402


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise SystemExit(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_size_mix(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        if "=" not in part:
            raise SystemExit(f"--size-mix entries must be bucket=weight, got {part!r}")
        key, val = part.split("=", 1)
        try:
            mix[key.strip()] = float(val)
        except ValueError:
            raise SystemExit(f"--size-mix weight must be a number, got {val!r}") from None
    try:
        normalize_size_mix(mix)
    except ValueError as err:
        raise SystemExit(str(err)) from err
    return mix


def _effective_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    try:
        return apply_overrides(config, overrides)
    except ValueError as err:
        raise SystemExit(str(err)) from err


def cmd_gen(args) -> int:
    out = _prepare_out(args.out, args.force)
    mix = _parse_size_mix(args.size_mix)
    scenes = generate_dataset(
        seed=args.seed,
        count=args.count,
        size_mix=mix,
        input_size=args.input_size,
        num_classes=args.num_classes,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
    )
    save_dataset(out, scenes)
    echo = [
        f"seed = {args.seed}",
        f"count = {args.count}",
        f"size_mix = {args.size_mix or 'uniform'}",
        f"input_size = {args.input_size}",
        f"num_classes = {args.num_classes}",
        f"min_objects = {args.min_objects}",
        f"max_objects = {args.max_objects}",
    ]
    (out / "generate.txt").write_text("\n".join(echo) + "\n")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _effective_config(args)
    data_dir = Path(args.data)
    if not (data_dir / "annotations.jsonl").is_file():
        raise SystemExit(f"no dataset at {data_dir}")
    out = _prepare_out(args.out, args.force)
    scenes = load_dataset(data_dir)
    save_config(config, out / "config.txt")

    def progress(it: int, loss: float, lr: float) -> None:
        if args.log_every and (it % args.log_every == 0 or it == config.iterations - 1):
            print(f"iter {it:5d}  loss {loss:.5f}  lr {lr:g}", flush=True)

    try:
        result = train(config, scenes, progress=progress)
    except NanLossError as err:
        (out / "nan_dump.txt").write_text(err.dump)
        print(f"aborted: {err} (dump at {out / 'nan_dump.txt'})", file=sys.stderr)
        return 3
    (out / "loss.csv").write_text(loss_curve_csv(result.curve))
    save_checkpoint(out / "checkpoint.bin", result.model)
    print(f"finished {config.iterations} iterations, final loss {result.final_loss():.5f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    if not (data_dir / "annotations.jsonl").is_file():
        raise SystemExit(f"no dataset at {data_dir}")
    scenes = load_dataset(data_dir)
    out = _prepare_out(args.report, args.force)
    save_config(model.config, out / "config.txt")
    if not scenes:
        print("warning: empty dataset, mAP undefined", file=sys.stderr)
    report = evaluate(model, scenes, iou_thresh=args.iou)
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    det_lines = []
    for img_id, scene in enumerate(scenes):
        dets, _ = run_detector(model, scene)
        block = detections_to_jsonl(img_id, dets)
        if block:
            det_lines.append(block)
    (out / "detections.jsonl").write_text("\n".join(det_lines) + ("\n" if det_lines else ""))
    shown = "null" if report.map is None else f"{report.map:.4f}"
    print(f"mAP@{args.iou:g} = {shown} over {report.num_images} images")
    return 0


def cmd_params(args) -> int:
    config = _effective_config(args)
    model = Detector.create(config, np.random.default_rng(config.seed))
    csv = params_csv(count_params(model))
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote {args.out}")
    else:
        print(csv, end="")
    return 0


def cmd_diag(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.gates is None:
        raise SystemExit("checkpoint was trained without gates; nothing to diagnose")
    data_dir = Path(args.data)
    if not (data_dir / "annotations.jsonl").is_file():
        raise SystemExit(f"no dataset at {data_dir}")
    scenes = load_dataset(data_dir)
    out = _prepare_out(args.out, args.force)
    save_config(model.config, out / "config.txt")
    write_diagnostics(model, scenes, out)
    print(f"diagnostics written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfr", description="Gated feature-reuse detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.add_argument("--size-mix", default=None, help="e.g. small=0.5,large=0.5 (default uniform)")
    p.add_argument("--input-size", type=int, default=320)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", default=None, help="key=value config file (defaults used when omitted)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="print the per-tensor parameter-count table")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("diag", help="dump gate-attention diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
