"""Command-line entry points: privatize, track, refine, attack, metrics, experiment."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import KINDS, AttackSpec, apply_attack
from .dcrf import DcrfParams, refine
from .experiment import ExperimentConfig, format_value, run_experiment, write_csv
from .ingest import MOTParseError, read_mot, write_mot
from .metrics import scenario_report
from .ncp import NcpParams, weight_scenario
from .privacy import CalibrationError, PrivacyBudget, privatize_scenario
from .tracker import TrackerConfig, run_tracker, tracks_from_scenario, tracks_to_scenario

logger = logging.getLogger("privtrack")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _pair(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected DX,DY, got {text!r}")
    return parts[0], parts[1]


def _label_map(text: str) -> dict[int, int]:
    out = {}
    for item in text.split(","):
        src, _, dst = item.partition(":")
        out[int(src)] = int(dst)
    return out


def _add_ncp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ncp-lambda", type=float, default=NcpParams.sensitive_boost,
                   help="extra noise multiplier for sensitive classes (default %(default)s)")
    p.add_argument("--ncp-floor", type=float, default=NcpParams.stability_floor,
                   help="lower bound on class stability in the unary weight (default %(default)s)")
    p.add_argument("--sensitive-classes", type=_int_list, default=(1,),
                   help="comma-separated sensitive class ids (default 1)")


def _read(path, args, **kw):
    return read_mot(path, sensitive_classes=args.sensitive_classes, **kw)


def cmd_privatize(args) -> int:
    scenario = _read(args.inp, args)
    budget = PrivacyBudget(args.eps, args.delta, args.sensitivity, args.cost)
    weights = weight_scenario(scenario, scenario.sensitive_classes, NcpParams(args.ncp_lambda, args.ncp_floor))
    out = privatize_scenario(scenario, budget, weights, np.random.default_rng(args.seed))
    write_mot(out, args.out)
    return 0


def cmd_track(args) -> int:
    scenario = _read(args.inp, args)
    # the tracker is deterministic; --seed is accepted for a uniform interface
    config = TrackerConfig(gate=args.gate, max_misses=args.max_misses, init_frames=args.init_frames)
    tracks = run_tracker(scenario, config)
    write_mot(tracks_to_scenario(tracks, scenario.frame_count, name=scenario.name), args.out)
    return 0


def cmd_refine(args) -> int:
    dets = _read(args.det, args)
    track_scn = _read(args.inp, args)
    tracks = tracks_from_scenario(track_scn, dets)
    weights = weight_scenario(dets, dets.sensitive_classes, NcpParams(args.ncp_lambda, args.ncp_floor))
    params = DcrfParams(observation_noise=args.noise_sigma)
    refined = refine(tracks, dets, weights, params, window_len=args.window, stride=args.stride)
    write_mot(tracks_to_scenario(refined, max(dets.frame_count, track_scn.frame_count), name=track_scn.name), args.out)
    return 0


def cmd_attack(args) -> int:
    scenario = _read(args.inp, args)
    spec = AttackSpec(args.kind, args.target, args.onset, args.drift, args.label_map)
    write_mot(apply_attack(scenario, spec), args.out)
    return 0


def cmd_metrics(args) -> int:
    original = _read(args.original, args)
    sanitized = _read(args.sanitized, args)
    if all(d.track_id is not None for d in original.detections):
        original = replace(original, ground_truth=original.detections)
    tracks = tracks_from_scenario(_read(args.tracks, args)) if args.tracks else None
    report = scenario_report(original, sanitized, tracks, max_value=args.max_value, bins=args.bins,
                             smoothing=args.smoothing, probe_iou=args.probe_iou)
    params = (f"max_value={format_value(args.max_value)};bins={args.bins};"
              f"smoothing={format_value(args.smoothing)};probe_iou={format_value(args.probe_iou)}")
    write_csv(Path(args.report), ("metric", "value", "params"),
              ([name, value, params] for name, value in report.items()))
    return 0


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    config = replace(config, out_dir=str(args.out), normalize=args.normalize or config.normalize)
    records = run_experiment(config, jobs=args.jobs)
    failed = sum(1 for r in records if r.error)
    print(f"{len(records)} cells, {failed} failed; CSV written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privtrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("privatize", help="Gaussian-mechanism noise on sensitive detections")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--sensitivity", type=float, default=1.0)
    p.add_argument("--cost", type=float, default=1.0, help="fraction of the budget spent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_ncp(p)
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("track", help="IoU/Hungarian tracker; writes MOT track lines")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gate", type=float, default=TrackerConfig.gate)
    p.add_argument("--max-misses", type=int, default=TrackerConfig.max_misses)
    p.add_argument("--init-frames", type=int, default=TrackerConfig.init_frames)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sensitive-classes", type=_int_list, default=(1,))
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("refine", help="sliding-window chain refinement of tracks")
    p.add_argument("--in", dest="inp", required=True, help="MOT track lines")
    p.add_argument("--det", required=True, help="MOT detections the tracks were built from")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="known noise std per unit NCP multiplier (px)")
    _add_ncp(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("attack", help="hijack or label-blinding attack on detections")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--onset", type=int, required=True)
    p.add_argument("--drift", type=_pair, default=(0.0, 0.0), help="DX,DY in px/frame")
    p.add_argument("--label-map", type=_label_map, default=None, help="SRC:DST[,SRC:DST...]")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sensitive-classes", type=_int_list, default=(1,))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("metrics", help="privacy/utility report for an original/sanitized pair")
    p.add_argument("--original", required=True)
    p.add_argument("--sanitized", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--tracks", default=None, help="optional MOT track lines for tracking metrics")
    p.add_argument("--max-value", type=float, default=1920.0)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--smoothing", type=float, default=1e-6)
    p.add_argument("--probe-iou", type=float, default=0.5)
    p.add_argument("--sensitive-classes", type=_int_list, default=(1,))
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("experiment", help="budget sweep / method comparison from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true", help="divide track RMSE by the frame diagonal")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (MOTParseError, CalibrationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
