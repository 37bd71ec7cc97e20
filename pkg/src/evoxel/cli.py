"""``evoxel`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("evoxel")

SUBCOMMANDS = ("simulate", "convert", "represent", "train", "infer", "eval", "sweep", "export")


def _threads(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get("EVOXEL_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ValueError(f"EVOXEL_THREADS must be an integer, got {env!r}") from None
        else:
            value = 1
    if value < 1:
        raise ValueError("--threads must be >= 1")
    return value


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--threads", type=int, default=None, help="worker cap (default: $EVOXEL_THREADS or 1)")
    g.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="stderr log level")


def _sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset root (<split>/<category>/<id>.evb)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to evaluate")
    p.add_argument("--sweep", default="0.15:0.50:0.01", help="threshold grid as min:max:step")
    p.add_argument("--objective", default="miou", choices=("miou", "fscore"), help="quantity maximised by p*")
    p.add_argument("--f-average", default="macro", choices=("macro", "micro"), help="F-Score aggregation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoxel", description="Event streams to voxel reconstructions.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("simulate", help="synthesize event scans of voxel objects")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="master seed (required without --config)")
    p.add_argument("--preset", choices=("desk", "paper"), help="preset used without --config")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--resolution", type=int, help="voxel grid edge D")
    p.add_argument("--family", help="write one object of this shape family instead of a dataset")
    p.add_argument("--category", help="write one object of this category instead of a dataset")
    p.add_argument("--count", type=int, help="objects per category for a dataset tree")
    p.add_argument("--split-ratios", type=_ratios, help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    _common(p)

    p = sub.add_parser("convert", help="convert between .evb/.evt event files or rewrite a voxel label")
    p.add_argument("--in", dest="src", required=True, help="input .evb, .evt or .vox.json")
    p.add_argument("--out", required=True, help="output path; format follows the suffix")
    _common(p)

    p = sub.add_parser("represent", help="render an event file into a frame stack container")
    p.add_argument("--config", help="run config JSON (representation section)")
    p.add_argument("--in", dest="src", required=True, help="input .evb or .evt")
    p.add_argument("--out", required=True, help="output frame stack container")
    p.add_argument("--mode", choices=("pos", "neg", "last", "any", "sep"), help="event frame mode")
    p.add_argument("--sobel", action=argparse.BooleanOptionalAction, default=None, help="apply the Sobel Event Frame")
    p.add_argument("--window", type=float, help="time window length in seconds")
    p.add_argument("--frames", type=int, help="number of windows (default: cover the stream)")
    p.add_argument("--size", type=int, help="output plane edge (downsampling only)")
    p.add_argument("--normalization", choices=("per_plane", "global"), help="Sobel rescaling")
    _common(p)

    p = sub.add_parser("train", help="train the network on a dataset tree")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--preset", choices=("desk", "paper"), help="preset used without --config")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, help="total epochs (overrides the config)")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N epochs")
    _common(p)

    p = sub.add_parser("infer", help="predict voxel logits for one event file")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--in", dest="src", required=True, help="input .evb or .evt")
    p.add_argument("--out", required=True, help="logit grid container")
    p.add_argument("--voxels", help="also write the binarized grid here (.vox.json)")
    p.add_argument("--threshold", type=float, help="binarization threshold (default: the checkpoint's probe threshold)")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the threshold sweep")
    _sweep_flags(p)
    p.add_argument("--report", required=True, help="output report JSON")
    _common(p)

    p = sub.add_parser("sweep", help="print the per-threshold mIoU / F-Score table")
    _sweep_flags(p)
    p.add_argument("--csv", help="also write the table as CSV")
    _common(p)

    p = sub.add_parser("export", help="write a binarized grid as PLY / OBJ / PNG")
    p.add_argument("--voxels", help="grid to export (.vox.json); alternative to --checkpoint/--in")
    p.add_argument("--checkpoint", help="checkpoint directory for predicting the grid")
    p.add_argument("--in", dest="src", help="event file to predict from")
    p.add_argument("--threshold", type=float, help="binarization threshold for predictions")
    p.add_argument("--label", help="ground-truth .vox.json; colours voxels green (correct) or red (incorrect)")
    p.add_argument("--ply", help="PLY output path")
    p.add_argument("--obj", help="OBJ output path")
    p.add_argument("--png", help="PNG output path")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _log_config(cfg) -> None:
    log.info("seed %d, resolved config: %s", cfg.seed, json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")))


def cmd_simulate(args) -> None:
    from .config import resolve
    from .io import write_events, write_voxels
    from .synth import FAMILIES, ScanConfig, build_dataset, generate_category_object, generate_object, simulate_scan

    cfg = resolve(args.config, args.seed, args.preset)
    changes = {"resolution": args.resolution, "count": args.count, "split_ratios": args.split_ratios}
    cfg = cfg.with_section("simulation", **changes)
    sim = cfg.simulation
    _log_config(cfg)
    out = Path(args.out_dir)
    if args.family or args.category:
        if args.family and args.category:
            raise ValueError("pass either --family or --category, not both")
        if args.family:
            if args.family not in FAMILIES:
                raise ValueError(f"unknown family {args.family!r}; expected one of {FAMILIES}")
            name = f"{args.family}_{cfg.seed}"
            grid = generate_object(cfg.seed, sim.resolution, args.family, object_id=name)
        else:
            name = f"{args.category}_{cfg.seed}"
            grid = generate_category_object(cfg.seed, sim.resolution, args.category, name)
        stream = simulate_scan(ScanConfig(seed=cfg.seed, object=grid, **sim.scan_kwargs()))
        out.mkdir(parents=True, exist_ok=True)
        write_events(stream, out / f"{name}.evb")
        write_voxels(grid, out / f"{name}.vox.json")
        print(f"wrote {name}: {len(stream)} events, {grid.count} occupied voxels")
        return
    totals = build_dataset(out, sim.count, cfg.seed, sim.resolution, sim.split_ratios, sim.categories,
                           workers=_threads(args.threads), **sim.scan_kwargs())
    print("wrote " + ", ".join(f"{k}={v}" for k, v in totals.items()))


def _is_voxel_path(path: str) -> bool:
    return path.endswith((".vox.json", ".vox.bin"))


def cmd_convert(args) -> None:
    from .io import read_events, read_voxels, write_events, write_voxels

    if _is_voxel_path(args.src) != _is_voxel_path(args.out):
        raise ValueError("convert maps events to events or voxels to voxels")
    if _is_voxel_path(args.src):
        grid = read_voxels(args.src)
        write_voxels(grid, args.out)
        print(f"wrote {args.out}: {grid.resolution}^3, {grid.count} occupied")
        return
    stream = read_events(args.src)
    write_events(stream, args.out)
    print(f"wrote {args.out}: {len(stream)} events")


def cmd_represent(args) -> None:
    from .config import RunConfig
    from .io import read_events
    from .representation import RepresentationConfig, represent, write_stack

    if args.config:
        rep = RunConfig.load(args.config).representation
    else:
        rep = RepresentationConfig(window_count=None, size=None)
    changes = {"mode": args.mode, "sobel": args.sobel, "window_length": args.window,
               "window_count": args.frames, "size": args.size, "normalization": args.normalization}
    rep = replace(rep, **{k: v for k, v in changes.items() if v is not None})
    stream = read_events(args.src)
    size = rep.size
    if size is not None and size > min(stream.sensor_width, stream.sensor_height):
        raise ValueError(f"--size {size} exceeds the {stream.sensor_width}x{stream.sensor_height} sensor")
    log.info("representation: %s", rep)
    stack = represent(stream, rep.window_length, rep.mode, rep.sobel, size, rep.normalization, rep.window_count)
    write_stack(stack, args.out)
    print(f"wrote {args.out}: {stack.frames.shape[0]} planes of {stack.frames.shape[1]}x{stack.frames.shape[2]}")


def cmd_train(args) -> None:
    from .config import resolve
    from .io import scan_dataset
    from .neural.train import train

    cfg = resolve(args.config, args.seed, args.preset)
    cfg = cfg.with_section("training", epochs=args.epochs)
    _log_config(cfg)
    manifest = scan_dataset(args.data)
    log.info("dataset %s: %s (%d skipped)", args.data, manifest.counts, manifest.skipped)
    t = cfg.training
    ckpt = train(manifest, cfg.network, t.epochs, t.batch_size, cfg.seed, representation=cfg.representation,
                 settings=t, out_dir=args.out, resume=args.resume, checkpoint_every=args.checkpoint_every)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained {ckpt.epoch} epochs -> {args.out}" + (f" (final loss {last['loss']:.6g})" if last else ""))


def cmd_infer(args) -> None:
    from .evaluation import binarize
    from .io import read_events, write_array, write_voxels
    from .neural.train import load_checkpoint, predict
    from .voxels import VoxelGrid

    ckpt = load_checkpoint(args.checkpoint)
    stream = read_events(args.src)
    x = ckpt.representation.tensor(stream)[None].astype(ckpt.network.dtype)
    logits = predict(ckpt.network, x)[0]
    write_array(args.out, {"format": "EVLOGIT1", "resolution": int(logits.shape[0])}, logits)
    msg = f"wrote {args.out}: {logits.shape[0]}^3 logits"
    if args.voxels:
        p = ckpt.settings.probe_threshold if args.threshold is None else args.threshold
        grid = VoxelGrid(binarize(logits, p), stream.category_label, stream.object_id)
        write_voxels(grid, args.voxels)
        msg += f"; {grid.count} voxels above p={p}"
    print(msg)


def _run_sweep(args):
    from .evaluation import ThresholdSweepConfig, evaluate_split
    from .io import scan_dataset

    sweep = ThresholdSweepConfig.parse(args.sweep, objective=args.objective, f_average=args.f_average)
    manifest = scan_dataset(args.data)
    log.info("dataset %s: %s; sweep %s", args.data, manifest.counts, sweep)
    return evaluate_split(args.checkpoint, manifest, sweep, args.split)


def cmd_eval(args) -> None:
    report = _run_sweep(args)
    report.save(args.report)
    print(f"p* = {report.p_star:.2f}  mIoU = {report.miou:.4f}  F-Score = {report.fscore:.4f}  "
          f"({len(report.thresholds)} thresholds) -> {args.report}")


def cmd_sweep(args) -> None:
    report = _run_sweep(args)
    rows = [(f"{p:.2f}", f"{m:.4f}", f"{f:.4f}") for p, m, f in zip(report.thresholds, report.miou_curve, report.fscore_curve)]
    print(f"{'p':>5} {'mIoU':>7} {'F-Score':>8}")
    for i, (p, m, f) in enumerate(rows):
        print(f"{p:>5} {m:>7} {f:>8}" + ("  *" if i == report.best_index else ""))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p", "miou", "fscore"])
            w.writerows(rows)


def cmd_export(args) -> None:
    from .evaluation import binarize, export
    from .io import read_events, read_voxels
    from .neural.train import load_checkpoint, predict

    if not (args.ply or args.obj or args.png):
        raise ValueError("nothing to export: pass --ply, --obj and/or --png")
    if args.voxels:
        pred = read_voxels(args.voxels).occupancy
    elif args.checkpoint and args.src:
        ckpt = load_checkpoint(args.checkpoint)
        x = ckpt.representation.tensor(read_events(args.src))[None].astype(ckpt.network.dtype)
        p = ckpt.settings.probe_threshold if args.threshold is None else args.threshold
        pred = binarize(predict(ckpt.network, x)[0], p)
    else:
        raise ValueError("pass --voxels, or --checkpoint together with --in")
    gt = read_voxels(args.label).occupancy if args.label else None
    for fmt in ("ply", "obj", "png"):
        path = getattr(args, fmt)
        if path:
            export(path, pred, gt, fmt)
            print(f"wrote {path}")


COMMANDS = {
    "simulate": cmd_simulate,
    "convert": cmd_convert,
    "represent": cmd_represent,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export": cmd_export,
}


def _origin(exc: BaseException) -> str:
    """Name of the innermost evoxel module in the traceback."""
    pkg = Path(__file__).resolve().parent
    name = "evoxel"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename).resolve()
        if pkg in path.parents:
            name = "evoxel." + ".".join(path.relative_to(pkg).with_suffix("").parts)
    return name


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad input
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        _threads(args.threads)
        COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"evoxel {args.command}: error: [{_origin(e)}] {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
