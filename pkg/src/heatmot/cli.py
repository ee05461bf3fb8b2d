"""Command-line entry points: ``heatmot {synth,track,eval,losscheck,attncheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

from . import checks
from .grid import GridGeometry
from .metrics import DEFAULT_IOU, MOTMetrics, evaluate
from .motio import (
    MapFrame,
    MotRecord,
    annotations_to_records,
    parse_mot_file,
    read_maps,
    records_to_annotations,
    write_maps,
    write_mot_file,
)
from .synth import SyntheticScenario, generate_oracle_sequence, public_detections
from .tracker import (
    DEFAULT_MATCH_MIN_IOU,
    DEFAULT_REID_MIN_SIM,
    DEFAULT_SLEEP_MAX,
    DEFAULT_TAU,
    Tracker,
    TrackerConfig,
)

logger = logging.getLogger("heatmot")


def _occlusion(text: str) -> tuple[int, int, int]:
    try:
        obj, frames = text.split(":")
        f1, f2 = frames.split("-")
        return int(obj), int(f1), int(f2)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected OBJ:F1-F2, got {text!r}") from None


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic scenario")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-objects", type=int, default=12)
    g.add_argument("--num-frames", type=int, default=50)
    g.add_argument("--height", type=int, default=320, help="input image height (multiple of 32)")
    g.add_argument("--width", type=int, default=576, help="input image width (multiple of 32)")
    g.add_argument("--occlude", type=_occlusion, action="append", default=[], metavar="OBJ:F1-F2",
                   help="hide object OBJ (0-based) in frames F1..F2; repeatable")
    g.add_argument("--heatmap-noise", type=float, default=0.0)
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--displacement-noise", type=float, default=0.0)


def _scenario(args: argparse.Namespace) -> SyntheticScenario:
    occlusions: dict[int, list[tuple[int, int]]] = {}
    for obj, f1, f2 in args.occlude:
        occlusions.setdefault(obj, []).append((f1, f2))
    return SyntheticScenario(
        seed=args.seed, num_objects=args.num_objects, num_frames=args.num_frames,
        image_height=args.height, image_width=args.width, occlusions=occlusions,
        heatmap_noise=args.heatmap_noise, dropout_prob=args.dropout,
        displacement_noise=args.displacement_noise,
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatmot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scenario's ground truth and maps")
    _add_scenario_args(p)
    p.add_argument("--gt-out", required=True)
    p.add_argument("--maps-out", required=True)
    p.add_argument("--det-out", help="also write public detections (visible GT boxes)")

    p = sub.add_parser("track", help="run the tracker over serialized maps or a synthetic scenario")
    _add_scenario_args(p)
    p.add_argument("--maps", help="serialized output-map container; overrides the scenario")
    p.add_argument("--public", metavar="DET_FILE", help="gate births by these public detections")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--sleep-max", type=int, default=DEFAULT_SLEEP_MAX)
    p.add_argument("--match-min-iou", type=float, default=DEFAULT_MATCH_MIN_IOU)
    p.add_argument("--reid-min-sim", type=float, default=DEFAULT_REID_MIN_SIM)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a result file against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--result", required=True)
    p.add_argument("--iou", type=float, default=DEFAULT_IOU)
    p.add_argument("--format", choices=("table", "kv"), default="table")

    p = sub.add_parser("losscheck", help="finite-difference checks of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("attncheck", help="attention invariant checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    frames = generate_oracle_sequence(_scenario(args))
    write_mot_file(annotations_to_records(f.gt for f in frames), args.gt_out)
    write_maps([MapFrame(f.frame, f.maps, f.features) for f in frames], args.maps_out)
    if args.det_out:
        dets = public_detections(frames, seed=args.seed)
        write_mot_file([MotRecord.from_box(t, -1, box) for t, boxes in dets.items() for box in boxes],
                       args.det_out)
    logger.info("wrote %d frames", len(frames))
    return 0


def _cmd_track(args: argparse.Namespace) -> int:
    if args.maps:
        frames = read_maps(args.maps)
        if not frames:
            raise ValueError("map container holds no frames")
        gh, gw = frames[0].maps.shape
        geom = GridGeometry(gh * 4, gw * 4)
    else:
        sc = _scenario(args)
        geom = sc.geometry
        frames = [MapFrame(f.frame, f.maps, f.features) for f in generate_oracle_sequence(sc)]

    public = None
    if args.public:
        public = {t: [r.box for r in recs] for t, recs in parse_mot_file(args.public).items()}
    cfg = TrackerConfig(tau=args.tau, sleep_max=args.sleep_max, match_min_iou=args.match_min_iou,
                        reid_min_sim=args.reid_min_sim, public_mode=public is not None)
    tracker = Tracker(geom, cfg)
    records = []
    for fr in frames:
        boxes = public.get(fr.frame, []) if public is not None else None
        result = tracker.step(fr.frame, fr.maps, fr.features, boxes)
        records += [MotRecord.from_box(o.frame, o.track_id, o.box, o.score) for o in result.outputs]
    write_mot_file(records, args.out)
    logger.info("tracked %d frames, %d identities", len(frames), tracker.next_id - 1)
    return 0


def format_metrics(m: MOTMetrics, fmt: str) -> str:
    summary = m.summary()
    kv = "\n".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items())
    if fmt == "kv":
        return kv
    header = " ".join(f"{k:>9}" for k in summary)
    values = " ".join(f"{v:>9.4f}" if isinstance(v, float) else f"{v:>9d}" for v in summary.values())
    return f"{header}\n{values}\n\n{kv}"


def _cmd_eval(args: argparse.Namespace) -> int:
    gt = records_to_annotations(parse_mot_file(args.gt))
    hyp = records_to_annotations(parse_mot_file(args.result))
    print(format_metrics(evaluate(gt, hyp, args.iou), args.format))
    return 0


def _report(results: list[checks.CheckResult]) -> int:
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail or r.worst}")
    return 0 if all(r.passed for r in results) else 1


def _cmd_losscheck(args: argparse.Namespace) -> int:
    results = checks.gradient_suite(args.seed, args.instances)
    print(f"max relative gradient error: {max(r.worst for r in results):.3e} (tolerance {checks.GRAD_RTOL:g})")
    return _report(results)


def _cmd_attncheck(args: argparse.Namespace) -> int:
    return _report(checks.attention_suite(args.seed))


COMMANDS = {
    "synth": _cmd_synth,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "losscheck": _cmd_losscheck,
    "attncheck": _cmd_attncheck,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("CTE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"heatmot {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
