"""Command-line front end.

Subcommands: simulate, dataset, train, track, evaluate, plot. Every command
accepts --seed / --config / --out and drops a ``manifest.json`` next to its
outputs with the resolved configuration, so any run can be reproduced from
the manifest alone.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(unparseable or invariant-breaking input), 4 internal error.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    FormatError,
    GeotrackError,
    InvariantViolationError,
    ParseError,
    SceneTooShortError,
    SchemaError,
)
from .evaluation import (
    GeoCriterion,
    greedy_match,
    mot_metrics,
    pr_curve,
    pr_curve_svg,
    translation_error_stats,
)
from .geometry import WORLD, Pose5D
from .matching import (
    Matcher,
    MatcherConfig,
    load_checkpoint,
    save_checkpoint,
    train_matcher,
)
from .scene import (
    atomic_write_text,
    gt_mot_entries,
    load_scene,
    read_mot,
    save_scene,
    write_mot,
)
from .simulator import SimConfig, generate_scene, make_matching_dataset, world_objects
from .tracker import geolocation_report, track_scene

USAGE_ERROR = 2
DATA_ERROR = 3
INTERNAL_ERROR = 4

_DATA_ERRORS = (ParseError, SchemaError, FormatError, InvariantViolationError,
                SceneTooShortError)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}")


def _read_json(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} (line {exc.lineno})")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}")


def _write_manifest(out_dir, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    atomic_write_text(
        Path(out_dir) / "manifest.json",
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ------------------------------------------------------------------


def cmd_simulate(args):
    started = time.time()
    doc = _load_config_file(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    for name in ("n_frames", "n_objects"):
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    base = SimConfig.from_dict(doc)
    out = _out_dir(args)
    outputs = []
    for i in range(args.scenes):
        config = SimConfig.from_dict({**base.as_dict(), "seed": base.seed + i})
        scene = generate_scene(config, scene_id=f"scene-{config.seed:08d}")
        path = out / f"{scene.scene_id}.json"
        save_scene(scene, path)
        outputs.append(path)
    _write_manifest(out, "simulate", base.as_dict(), base.seed,
                    [args.config] if args.config else [], outputs, started)
    print(f"wrote {len(outputs)} scene(s) to {out}")
    return 0


def cmd_dataset(args):
    started = time.time()
    out = _out_dir(args)
    scene_paths = sorted(Path(args.scenes).glob("*.json"))
    scene_paths = [p for p in scene_paths if p.name != "manifest.json"]
    if not scene_paths:
        raise ConfigError(f"no scene files under {args.scenes}")
    seed = args.seed if args.seed is not None else 0
    doc = {
        "format": 1,
        "scenes": [str(p) for p in scene_paths],
        "n_max": args.n_max,
        "pairs_per_scene": args.pairs_per_scene,
        "seed": seed,
    }
    index = out / "pairs.json"
    atomic_write_text(index, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "dataset", doc, seed, scene_paths, [index], started)
    print(f"indexed {len(scene_paths)} scene(s) into {index}")
    return 0


def _load_dataset(index_path):
    doc = _read_json(index_path)
    if doc.get("format") != 1:
        raise SchemaError(f"unsupported dataset format {doc.get('format')!r}")
    scenes = [load_scene(p) for p in doc["scenes"]]
    return doc, scenes


def cmd_train(args):
    started = time.time()
    out = _out_dir(args)
    doc, scenes = _load_dataset(args.dataset)
    cfg_doc = _load_config_file(args.config)
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    if args.epochs is not None:
        cfg_doc["epochs"] = args.epochs
    if args.lam is not None:
        cfg_doc["lam"] = args.lam
    if args.softmax_axis is not None:
        cfg_doc["softmax_axis"] = args.softmax_axis
    for key in ("scorer_hidden", "pose_hidden", "center_scale"):
        if key in cfg_doc:
            cfg_doc[key] = tuple(cfg_doc[key])
    config = MatcherConfig(**cfg_doc)
    samples = make_matching_dataset(
        scenes, doc["n_max"], doc["pairs_per_scene"], doc["seed"],
        capacity=config.capacity,
    )
    params = load_checkpoint(args.resume) if args.resume else None
    if params is not None:
        config = params.config
    params, history = train_matcher(samples, config, params=params)
    ckpt = out / "checkpoint.json"
    save_checkpoint(params, ckpt)
    metrics = out / "metrics.csv"
    lines = ["epoch,affinity_loss,pose_loss,accuracy"]
    for row in history:
        lines.append(
            f"{row.epoch},{row.affinity!r},{row.pose!r},{row.accuracy!r}"
        )
    atomic_write_text(metrics, "\n".join(lines) + "\n")
    _write_manifest(out, "train", asdict(config), config.seed,
                    [args.dataset], [ckpt, metrics], started)
    print(
        f"trained {len(history)} epoch(s); final affinity loss "
        f"{history[-1].affinity:.4f}, accuracy {history[-1].accuracy:.3f}"
    )
    return 0


def cmd_track(args):
    started = time.time()
    out = _out_dir(args)
    scene = load_scene(args.scene)
    params = load_checkpoint(args.checkpoint)
    state, entries = track_scene(
        scene, Matcher(params), aggregate=args.aggregate,
        score_threshold=args.score_threshold,
    )
    hyp_path = out / f"{scene.scene_id}.hyp.txt"
    write_mot(entries, hyp_path)
    geo_path = out / f"{scene.scene_id}.geo.json"
    report = geolocation_report(state, min_instances=args.min_instances)
    atomic_write_text(geo_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "track", {"aggregate": args.aggregate,
                                   "min_instances": args.min_instances,
                                   "score_threshold": args.score_threshold},
                    args.seed, [args.scene, args.checkpoint],
                    [hyp_path, geo_path], started)
    print(f"tracked {len(scene.frames)} frame(s); "
          f"{len(report['objects'])} geo-located object(s)")
    return 0


def _criterion_from_args(args):
    semi = tuple(float(x) for x in args.semi_axes.split(","))
    if len(semi) != 3:
        raise ConfigError("--semi-axes needs three comma-separated values")
    return GeoCriterion(
        kind=args.criterion,
        radius=args.radius,
        limit=args.limit,
        semi_axes=semi,
        rotation_gate_deg=args.rotation_gate,
    )


def cmd_evaluate(args):
    started = time.time()
    out = _out_dir(args)
    scene = load_scene(args.scene)
    gt_entries = gt_mot_entries(scene)
    report = {}
    inputs = [args.scene]
    points = []
    if args.tracks:
        hyp_entries = read_mot(args.tracks)
        mot = mot_metrics(gt_entries, hyp_entries, iou_threshold=args.iou)
        report["mot"] = mot.as_dict()
        inputs.append(args.tracks)
    if args.geoloc:
        geo = _read_json(args.geoloc)
        predictions = [
            (Pose5D(np.array(obj["translation"]), np.array(obj["rotation"]), WORLD),
             float(obj["instances"]))
            for obj in geo["objects"]
        ]
        gts = list(world_objects(scene).values())
        criterion = _criterion_from_args(args)
        points = pr_curve(predictions, gts, criterion)
        _, pairs, _ = greedy_match(predictions, gts, criterion)
        report["pr"] = [
            {"precision": p, "recall": r, "threshold": t} for p, r, t in points
        ]
        report["recall"] = points[-1][1] if points else 0.0
        report["precision"] = points[-1][0] if points else 0.0
        if pairs:
            te = translation_error_stats(
                [(predictions[i][0], gts[j]) for i, j in pairs]
            )
            report["translation_error"] = te.as_dict()
        inputs.append(args.geoloc)
    report_path = out / "report.json"
    atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    csv_path = out / "report.csv"
    csv_lines = ["metric,value"]
    for key, value in sorted(report.items()):
        if isinstance(value, (int, float)):
            csv_lines.append(f"{key},{value!r}")
        elif key == "mot":
            csv_lines.extend(f"mot.{k},{v!r}" for k, v in sorted(value.items()))
        elif key == "translation_error":
            for stat in ("mean", "median", "std"):
                for axis, v in zip("xyz", value[stat]):
                    csv_lines.append(f"te.{stat}.{axis},{v!r}")
    atomic_write_text(csv_path, "\n".join(csv_lines) + "\n")
    outputs = [report_path, csv_path]
    _write_manifest(out, "evaluate", {"criterion": args.criterion,
                                      "radius": args.radius,
                                      "limit": args.limit,
                                      "semi_axes": args.semi_axes,
                                      "rotation_gate": args.rotation_gate,
                                      "iou": args.iou},
                    args.seed, inputs, outputs, started)
    print(f"wrote {report_path}")
    return 0


def cmd_plot(args):
    started = time.time()
    out = _out_dir(args)
    report = _read_json(args.report)
    points = [
        (row["precision"], row["recall"], row["threshold"])
        for row in report.get("pr", [])
    ]
    svg_path = out / "pr_curve.svg"
    atomic_write_text(svg_path, pr_curve_svg(points))
    _write_manifest(out, "plot", {}, args.seed, [args.report], [svg_path], started)
    print(f"wrote {svg_path}")
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured random seed")
    common.add_argument("--config", default=None,
                        help="JSON configuration file")
    common.add_argument("--out", default="out",
                        help="output directory (created if missing)")

    parser = argparse.ArgumentParser(
        prog="geotrack",
        description="Static-object geo-localization pipeline: simulate, train, "
                    "track, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="generate synthetic geo-located scenes")
    p.add_argument("--scenes", type=int, default=1, help="number of scenes")
    p.add_argument("--n-frames", dest="n_frames", type=int, default=None)
    p.add_argument("--n-objects", dest="n_objects", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", parents=[common],
                       help="index scenes into a matching-pair dataset")
    p.add_argument("--scenes", required=True, help="directory of scene JSON files")
    p.add_argument("--n-max", dest="n_max", type=int, default=35,
                   help="maximum frame separation of a pair")
    p.add_argument("--pairs-per-scene", dest="pairs_per_scene", type=int, default=32)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train the object matcher")
    p.add_argument("--dataset", required=True, help="pairs.json from `dataset`")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="pose-loss weight (0 disables the pose contribution)")
    p.add_argument("--softmax-axis", dest="softmax_axis",
                   choices=("per-object", "literal"), default=None,
                   help="null-augmented normalization axis")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="track one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--min-instances", dest="min_instances", type=int, default=2)
    p.add_argument("--aggregate", choices=("median", "mean", "idw"),
                   default="median")
    p.add_argument("--score-threshold", dest="score_threshold", type=float,
                   default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score tracking and geo-localization outputs")
    p.add_argument("--scene", required=True, help="scene JSON with ground truth")
    p.add_argument("--tracks", default=None, help="hypothesis tracking CSV")
    p.add_argument("--geoloc", default=None, help="geolocation JSON from `track`")
    p.add_argument("--criterion", choices=("euclidean", "mahalanobis"),
                   default="euclidean")
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--limit", type=float, default=3.0)
    p.add_argument("--semi-axes", dest="semi_axes", default="0.4,0.39,3.84")
    p.add_argument("--rotation-gate", dest="rotation_gate", type=float, default=None)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common],
                       help="render a PR report as a standalone SVG")
    p.add_argument("--report", required=True, help="report.json from `evaluate`")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except GeotrackError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
