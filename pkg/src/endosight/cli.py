"""``endosight`` command line.

Machine-readable outputs always go to files; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import imaging as im
from . import metrics as mt
from . import supervisor as sv
from .inference import Detection, SceneSpec
from .pipeline import (FULL_FRAME, ROI, SIMULATED, WALL, PipelineConfig, demo_scene, iter_frame_dir,
                       run_pipeline, scene_frames)


class CliError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get("ENDOSIGHT_OUT", "."))


def _out(path, default_name: str) -> Path:
    p = Path(path) if path else out_root() / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _warn(msg: str) -> None:
    print(f"endosight: {msg}", file=sys.stderr)


# -- dataset commands -----------------------------------------------------

def cmd_split(args) -> None:
    if args.ids:
        ids = [ln.strip() for ln in Path(args.ids).read_text().splitlines() if ln.strip()]
    else:
        ids = ds.build_manifest(args.data).ids
    split = ds.deterministic_split(ids, seed=args.seed)
    _out(args.out, "split.json").write_text(split.to_json())


def cmd_labels(args) -> None:
    raw = Path(args.bbox).read_bytes()
    records, errors = ds.parse_bbox_json(raw)
    for e in errors:
        _warn(f"rejected record: {e}")
    dims = ds.bbox_dims(raw)
    if args.data:
        dims.update(ds.build_manifest(args.data).dims())
    labels = ds.emit_yolo_labels(records, dims)
    ds.write_yolo_labels(labels, args.out or out_root() / "labels")


def cmd_stats(args) -> None:
    manifest = ds.build_manifest(args.data)
    stats = ds.dataset_stats(manifest, args.sample, args.seed)
    _out(args.out, "stats.json").write_text(stats.to_json())


# -- evaluation -----------------------------------------------------------

def _pair_files(pred_dir, gt_dir, suffixes):
    def index(d):
        d = Path(d)
        if not d.is_dir():
            raise CliError(f"not a directory: {d}")
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in suffixes}
    preds, gts = index(pred_dir), index(gt_dir)
    for stem in sorted(set(preds) - set(gts)):
        _warn(f"prediction {stem!r} has no ground truth; skipped")
    if not gts:
        raise CliError(f"no ground-truth files in {gt_dir}")
    return [(stem, preds.get(stem), gts[stem]) for stem in sorted(gts)]


def _write_report(report: mt.EvaluationReport, out_dir: Path, columns: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    primary = mt.primary_metric(report.kind)
    with open(out_dir / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *columns, "category"])
        for r in report.rows:
            vals = ["" if r[c] is None else f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns]
            w.writerow([r["id"], *vals, mt.categorize(r[primary], report.kind)])


def cmd_eval_seg(args) -> None:
    rows = []
    for stem, pred_path, gt_path in _pair_files(args.pred, args.gt, im.IMAGE_SUFFIXES):
        gt = im.read_mask(gt_path, args.threshold)
        pred = im.read_mask(pred_path, args.threshold) if pred_path else np.zeros_like(gt)
        if pred.shape != gt.shape:
            raise CliError(f"{stem}: prediction {pred.shape[::-1]} and ground truth {gt.shape[::-1]} sizes differ")
        rows.append(mt.segmentation_scores(pred, gt, stem))
    report = mt.build_report(rows, "seg")
    _write_report(report, Path(args.out or out_root() / "eval-seg"),
                  ["dice", "iou", "pixel_accuracy", "sensitivity", "specificity"])


def _read_boxes(path, with_conf):
    if path is None:
        return []
    rows = ds.parse_yolo_labels(Path(path).read_text(), with_confidence=with_conf)
    return [(im.NormalizedBox(*r[:4]), r[4] if with_conf else None) for r in rows]


def cmd_eval_det(args) -> None:
    rows = []
    for stem, pred_path, gt_path in _pair_files(args.pred, args.gt, (".txt",)):
        gts = [b for b, _ in _read_boxes(gt_path, False)]
        preds = [Detection(b, c) for b, c in _read_boxes(pred_path, True)]
        kept = [d for d in preds if d.confidence >= args.conf]
        row = mt.detection_scores(kept, gts, stem, args.iou)
        # AP sweeps every confidence, not only those above the operating threshold
        full = mt.match_detections(preds, gts, args.iou)
        row["ap50"] = mt.average_precision(full.ranked, full.n_gt)
        rows.append(row)
    report = mt.build_report(rows, "det")
    _write_report(report, Path(args.out or out_root() / "eval-det"),
                  ["precision", "recall", "ap50", "tp", "fp", "fn"])


# -- pipeline -------------------------------------------------------------

def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.override(detector=args.detector, segmenter=args.segmenter, conf_threshold=args.conf,
                        nms_iou=args.nms_iou, mode=args.mode, clock=args.clock)


def cmd_run(args) -> None:
    cfg = _pipeline_config(args)
    scene = SceneSpec.load(args.scene) if args.scene else None
    if args.frames:
        frames = iter_frame_dir(args.frames)
    elif scene is not None:
        frames = scene_frames(scene, args.n_frames)
    else:
        raise CliError("run needs --frames DIR or --scene FILE")
    run_pipeline(frames, cfg, Path(args.out) if args.out else out_root() / "run", scene)


def cmd_demo(args) -> None:
    cfg = _pipeline_config(args)
    scene = demo_scene(args.frames)
    out = Path(args.out) if args.out else out_root() / "demo"
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(json.dumps(scene.to_json(), indent=2) + "\n")
    run_pipeline(scene_frames(scene, args.frames), cfg, out, scene)


# -- supervision ----------------------------------------------------------

def cmd_supervise(args) -> None:
    policy = sv.ThermalPolicy.load(args.policy) if args.policy else sv.ThermalPolicy()
    command = [c for c in args.command if c != "--"]
    if command:
        job = sv.CommandJob(command, steps_per_epoch=args.steps_per_epoch or 1)
    else:
        job = sv.DemoJob(steps_per_epoch=args.steps_per_epoch or 20)
    telemetry = sv.load_telemetry(args.telemetry)
    clock = sv.SimulatedClock() if args.simulate else sv.WallClock()
    log_path = _out(args.log, "supervisor.jsonl")
    with open(log_path, "w") as sink:
        log = sv.run_chunked(args.epochs, policy, job, telemetry, clock, sink=sink)
    if log.failed:
        raise CliError(f"job failed; see {log_path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endosight", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command_name", required=True, metavar="COMMAND")

    s = sub.add_parser("split", help="seeded 70/15/15 train/val/test split")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset root with images/ and masks/")
    src.add_argument("--ids", help="text file with one image id per line")
    s.add_argument("--seed", type=int, default=ds.DEFAULT_SEED)
    s.add_argument("--out", help="split manifest path (default $ENDOSIGHT_OUT/split.json)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("labels", help="bounding-boxes.json to YOLO label files")
    s.add_argument("--bbox", required=True)
    s.add_argument("--data", help="dataset root, for image sizes missing from the JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_labels)

    s = sub.add_parser("stats", help="image dimension statistics over a seeded sample")
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, default=100)
    s.add_argument("--seed", type=int, default=ds.DEFAULT_SEED)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("eval-seg", help="segmentation metrics over mask directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_seg)

    s = sub.add_parser("eval-det", help="detection metrics over YOLO label directories")
    s.add_argument("--pred", required=True, help="files of 'cls xc yc w h conf' rows")
    s.add_argument("--gt", required=True, help="files of 'cls xc yc w h' rows")
    s.add_argument("--conf", type=float, default=0.5)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_det)

    for name, func, help_ in (("run", cmd_run, "run the detect-then-segment pipeline"),
                              ("demo", cmd_demo, "synthetic scene through the full pipeline")):
        s = sub.add_parser(name, help=help_)
        if name == "run":
            s.add_argument("--frames", help="directory of frame images, processed in name order")
            s.add_argument("--scene", help="stub scene JSON; also used to synthesize frames")
            s.add_argument("--n-frames", type=int, default=100)
        else:
            s.add_argument("--frames", type=int, default=100)
        s.add_argument("--config")
        s.add_argument("--detector")
        s.add_argument("--segmenter")
        s.add_argument("--conf", type=float)
        s.add_argument("--nms-iou", type=float)
        s.add_argument("--mode", choices=(ROI, FULL_FRAME))
        s.add_argument("--clock", choices=(SIMULATED, WALL))
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("supervise", help="thermal-aware chunked job supervision")
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--policy")
    s.add_argument("--telemetry", default="nvidia-smi",
                   help="'nvidia-smi', a scripted .json, or a CSV replay file")
    s.add_argument("--steps-per-epoch", type=int)
    s.add_argument("--simulate", action="store_true", help="simulated clock: pauses take no real time")
    s.add_argument("--log")
    s.add_argument("command", nargs=argparse.REMAINDER, help="-- COMMAND... run once per step")
    s.set_defaults(func=cmd_supervise)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, OSError, ValueError, LookupError, RuntimeError) as exc:
        _warn(str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
