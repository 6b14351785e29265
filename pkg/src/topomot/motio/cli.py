"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..assoc import Models, Tracker
from ..graphcon import BoundingBox, Detection
from ..numkit import DimensionError, make_rng
from ..simgen import ScenarioConfig, export_mot, generate
from .config import ConfigError, RunConfig, load_config
from .metrics import evaluate
from .params import ParamsError, load_params, merge, save_params
from .records import GroundTruthFilter, MotFormatError, group_by_frame, read_descriptors, read_mot, write_mot

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- input helpers -----------------------------------------------------------

def _frame_size(det_path: Path, width: Optional[float], height: Optional[float]) -> tuple[float, float]:
    if width and height:
        return float(width), float(height)
    for cand in (det_path.parent.parent / "seqinfo.ini", det_path.parent / "seqinfo.ini"):
        if cand.exists():
            ini = configparser.ConfigParser()
            ini.read(cand)
            seq = ini["Sequence"]
            return float(seq.get("imWidth", 1920)), float(seq.get("imHeight", 1080))
    return 1920.0, 1080.0


def load_detections(det_path, desc_path, width=None, height=None) -> list[list[Detection]]:
    """Detection frames 1..last, pairing each MOT row with its sidecar descriptor."""
    det_path = Path(det_path)
    fw, fh = _frame_size(det_path, width, height)
    records = read_mot(det_path, "detections")
    descs = read_descriptors(desc_path)
    by_frame = group_by_frame(records)
    last = max(by_frame, default=0)
    frames: list[list[Detection]] = []
    for f in range(1, last + 1):
        dets = []
        for idx, r in enumerate(by_frame.get(f, [])):
            vec = descs.get((f, idx))
            if vec is None:
                raise DataError(f"{desc_path}: no descriptor for frame {f}, detection {idx}")
            try:
                box = BoundingBox(r.left, r.top, r.width, r.height, fw, fh)
            except ValueError as exc:
                raise DataError(f"{det_path}: frame {f}, detection {idx}: {exc}") from None
            dets.append(Detection(box, vec, r.conf, f))
        frames.append(dets)
    dims = {d.descriptor.size for fr in frames for d in fr}
    if len(dims) > 1:
        raise DataError(f"{desc_path}: descriptors of different lengths {sorted(dims)}")
    return frames


def _sequences(args) -> list[list[list[Detection]]]:
    if len(args.inputs) != len(args.desc):
        raise UsageError("each --in needs a matching --desc")
    return [load_detections(d, s, args.width, args.height) for d, s in zip(args.inputs, args.desc)]


def _feature_dim(seqs) -> int:
    dims = {d.descriptor.size for seq in seqs for fr in seq for d in fr}
    if not dims:
        raise DataError("no detections in the training input")
    if len(dims) > 1:
        raise DataError(f"descriptor lengths differ across inputs: {sorted(dims)}")
    return dims.pop()


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else int(cfg.seed)


def _write_trace(path, rows: list[dict]) -> None:
    if not path:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _models(path, cfg: RunConfig) -> Models:
    models = load_params(path)
    if models.providers is None:
        raise DataError(f"{path}: parameter file holds no appearance/motion models")
    if cfg.tracker.uses_topology and models.gnn is None:
        raise DataError(f"{path}: configuration uses topology weights but the file holds no GNN")
    if models.gnn is not None and models.gnn.num_layers != cfg.layers and cfg.tracker.uses_topology:
        raise DataError(f"{path}: GNN has {models.gnn.num_layers} layers, configuration expects {cfg.layers}")
    return models


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    overrides = {}
    if args.scenario:
        try:
            overrides.update(json.loads(Path(args.scenario).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.scenario}: invalid JSON ({exc})") from None
    flags = {
        "num_agents": args.agents, "num_frames": args.frames, "camera_pan_amplitude": args.pan,
        "occlusion_threshold": args.occlusion, "descriptor_noise": args.noise, "miss_rate": args.miss,
        "fp_rate": args.fp, "box_jitter": args.jitter,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    overrides["seed"] = args.seed if args.seed is not None else overrides.get("seed", load_config(None).seed)
    try:
        cfg = ScenarioConfig(**overrides)
    except TypeError as exc:
        raise DataError(f"bad scenario settings: {exc}") from None
    paths = export_mot(generate(cfg), args.out, args.name)
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return EXIT_OK


def cmd_train_providers(args) -> int:
    from ..pipeline import fit_providers, init_providers

    cfg = load_config(args.config)
    seqs = _sequences(args)
    rng = make_rng(_seed(args, cfg))
    providers = init_providers(_feature_dim(seqs), rng, cfg.provider_hidden)
    steps = args.steps if args.steps is not None else cfg.provider_steps
    lr = args.lr if args.lr is not None else cfg.provider_lr
    providers, trace = fit_providers(providers, seqs, rng, steps, lr, cfg.window, cfg.v_max)
    base = load_params(args.params) if args.params else Models(None)
    save_params(args.out, merge(base, Models(providers)))
    _write_trace(args.trace, trace)
    if trace:
        print(f"steps={len(trace)} j1 first={trace[0]['j1']:.4f} last={trace[-1]['j1']:.4f}")
    return EXIT_OK


def cmd_train_gnn(args) -> int:
    from ..pipeline import fit_gnn

    cfg = load_config(args.config)
    seqs = _sequences(args)
    rng = make_rng(_seed(args, cfg))
    steps = args.steps if args.steps is not None else cfg.gnn_steps
    lr = args.lr if args.lr is not None else cfg.gnn_lr
    stack, edge, history = fit_gnn(_feature_dim(seqs), seqs, cfg.gnn_dims, cfg.graph_strategy, rng, steps, lr,
                                   cfg.augment, cfg.loss, cfg.gnn_nonlinear)
    base = load_params(args.params) if args.params else Models(None)
    save_params(args.out, merge(base, Models(None, stack, edge)))
    _write_trace(args.trace, history)
    if history:
        print(f"steps={len(history)} j2 first={history[0]['j2']:.4f} last={history[-1]['j2']:.4f}")
    return EXIT_OK


def _run_tracker(args, record_scores: bool):
    cfg = load_config(args.config)
    models = _models(args.params, cfg)
    frames = load_detections(args.inputs, args.desc, args.width, args.height)
    if frames and models.providers.matcher.feature_dim != _feature_dim([frames]):
        raise DataError("descriptor length does not match the trained appearance model")
    tcfg = cfg.tracker
    if not tcfg.uses_topology:
        models = Models(models.providers)
    tracker = Tracker(models, tcfg, record_scores=record_scores)
    records, per_frame = [], []
    for k, dets in enumerate(frames):
        _, recs = tracker.step(k + 1, dets)
        records.extend(recs)
        per_frame.append((k + 1, dets, recs))
    return records, per_frame, tracker


def cmd_track(args) -> int:
    records, _, _ = _run_tracker(args, record_scores=False)
    write_mot(args.out, records)
    print(f"wrote {len(records)} records for {len({r.track_id for r in records})} tracks to {args.out}")
    return EXIT_OK


def cmd_export_plot(args) -> int:
    _, per_frame, tracker = _run_tracker(args, record_scores=True)
    scores = {entry["frame"]: entry for entry in tracker.score_log}
    out_frames = []
    for frame, dets, recs in per_frame:
        entry = {
            "frame": frame,
            "detections": [list(d.box.tlwh()) for d in dets],
            "tracks": [{"id": r.track_id, "box": list(r.box.tlwh())} for r in recs],
        }
        if frame in scores:
            entry["track_ids"] = scores[frame]["track_ids"]
            entry["fused"] = np.round(scores[frame]["fused"], 6).tolist()
        out_frames.append(entry)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"frames": out_frames}, indent=1))
    print(f"wrote overlay data for {len(out_frames)} frames to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    flt = GroundTruthFilter(cfg.gt_require_active, tuple(cfg.gt_classes) if cfg.gt_classes is not None else None,
                            cfg.gt_min_visibility)
    gt = read_mot(args.gt, "groundtruth", flt)
    pred = read_mot(args.pred, "tracks")
    iou = args.iou if args.iou is not None else cfg.iou_threshold
    report = evaluate(gt, pred, iou, args.name or Path(args.pred).stem)
    text = report.to_json()
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(text + "\n")
        print(report.table())
    else:
        print(text)
        print(report.table(), file=sys.stderr)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_common(p, params_required: bool):
    p.add_argument("--in", dest="inputs", required=True, help="MOT detection file")
    p.add_argument("--desc", required=True, help="descriptor sidecar for --in")
    p.add_argument("--params", required=params_required, help="parameter file")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--width", type=float, help="frame width in pixels (default: seqinfo.ini or 1920)")
    p.add_argument("--height", type=float, help="frame height in pixels (default: seqinfo.ini or 1080)")


def _add_training(p):
    p.add_argument("--in", dest="inputs", action="append", required=True, help="MOT detection file (repeatable)")
    p.add_argument("--desc", action="append", required=True, help="descriptor sidecar, one per --in")
    p.add_argument("--params", help="existing parameter file to extend")
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--trace", help="loss trace CSV")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="overrides the config seed and TOPOMOT_SEED")
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topomot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic scenario in MOT layout")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", help="sequence directory name")
    p.add_argument("--scenario", help="JSON file with simulator settings")
    p.add_argument("--seed", type=int, help="overrides TOPOMOT_SEED")
    p.add_argument("--agents", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--pan", type=float, help="camera pan amplitude")
    p.add_argument("--occlusion", type=float, help="visibility below which detections drop")
    p.add_argument("--noise", type=float, help="descriptor noise")
    p.add_argument("--miss", type=float, help="miss rate")
    p.add_argument("--fp", type=float, help="false positives per agent and frame")
    p.add_argument("--jitter", type=float, help="relative box jitter")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-providers", help="train the appearance matcher and motion scorer")
    _add_training(p)
    p.set_defaults(func=cmd_train_providers)

    p = sub.add_parser("train-gnn", help="train the topology GCN")
    _add_training(p)
    p.set_defaults(func=cmd_train_gnn)

    p = sub.add_parser("track", help="track detections and write MOT results")
    _add_common(p, params_required=True)
    p.add_argument("--out", required=True, help="MOT result file")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="IDF1 / MOTA / IDSW against ground truth",
                       description="CLEAR-MOT and identity metrics. HOTA is not computed; "
                                   "use the official TrackEval tooling for it.")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, help="IoU match threshold (default 0.5)")
    p.add_argument("--json", help="write the report here instead of stdout")
    p.add_argument("--name", help="sequence name in the report")
    p.add_argument("--config", help="JSON run configuration (ground-truth filter, IoU)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-plot", help="per-frame boxes, ids and fused scores as JSON")
    _add_common(p, params_required=True)
    p.add_argument("--out", required=True, help="JSON output")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"topomot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"topomot: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MotFormatError, ParamsError, ConfigError, DimensionError, OSError, ValueError) as exc:
        print(f"topomot: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
