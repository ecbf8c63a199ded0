"""Command-line entry point: synth, detect, eval, solve, features."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from .config import Config, ConfigError
from .crf import load_problem
from .pipeline import detect, evaluate, exclude_undetectable
from .solver import solve_trws
from .synth import generate, load_scene, scenario_presets

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad usage, per our exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cipdet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=sorted(scenario_presets().keys()))
    group.add_argument("--scene", type=Path, help="scene description file (JSON)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None, help="override the scene seed")

    p = sub.add_parser("detect", help="run the detection pipeline")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("detections.json"))
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--window-length", type=int, default=None)
    p.add_argument("--window-stride", type=int, default=None)
    p.add_argument("--dump-overlay-boxes", type=Path, default=None,
                   help="also write per-frame chosen boxes as plain text")

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--exclude-undetectable", action="store_true",
                   help="drop frames whose true person is not among the candidates")
    p.add_argument("--report", type=Path, default=None,
                   help="where to write the JSON report (default: next to detections)")

    p = sub.add_parser("solve", help="solve a serialized CRF problem")
    p.add_argument("--problem", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)

    p = sub.add_parser("features", help="dump frame features of one frame")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--video", type=int, required=True)
    p.add_argument("--frame", type=int, required=True)
    return parser


def _load_config(args) -> Config:
    cfg = Config.from_file(args.config) if getattr(args, "config", None) else Config()
    for flag, name in (("window_length", "window_length"), ("window_stride", "window_stride")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    return cfg.validate()


def _cmd_synth(args) -> int:
    if args.preset:
        scene = scenario_presets()[args.preset]
    else:
        scene = load_scene(args.scene)
    if args.seed is not None:
        scene.noise.seed = args.seed
    generate(scene, args.out)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    cfg = _load_config(args)
    data = ds.load_dataset(args.data, with_ground_truth=False)
    detections = detect(data, cfg, threads=args.threads)
    ds.write_detections(detections, args.out)
    idle = sum(1 for d in detections if d.state is None)
    print(f"wrote {len(detections)} detections ({idle} idle) to {args.out}")
    if args.dump_overlay_boxes:
        with open(args.dump_overlay_boxes, "w") as f:
            for d in detections:
                if d.box is None:
                    f.write(f"{d.video_id} {d.frame} idle\n")
                else:
                    f.write(
                        f"{d.video_id} {d.frame} {d.state} "
                        f"{d.box.x:.2f} {d.box.y:.2f} {d.box.w:.2f} {d.box.h:.2f}\n"
                    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = ds.load_dataset(args.data)
    if data.ground_truth is None:
        raise ds.DatasetError(f"{args.data} has no ground_truth.json")
    detections = ds.load_detections(args.detections)
    gt = data.ground_truth
    if args.exclude_undetectable:
        detections, gt = exclude_undetectable(
            detections, gt, [s.candidates for s in data.streams], cfg.eval_iou
        )
    report = evaluate(detections, gt, cfg.eval_iou)
    print(report.pretty())
    out = args.report or args.detections.parent / "eval_report.json"
    with open(out, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote report to {out}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    cfg = _load_config(args)
    problem = load_problem(args.problem)
    report = solve_trws(
        problem,
        max_iters=args.max_iters or cfg.trws_max_iters,
        epsilon=args.epsilon or cfg.trws_epsilon,
    )
    print(f"energy      {report.labeling.energy:.6f}")
    print(f"lower bound {report.lower_bound:.6f}")
    print(f"iterations  {report.iterations}")
    print(f"converged   {report.converged}")
    print(f"wall time   {report.wall_time:.3f}s")
    print("states      " + " ".join(str(s) for s in report.labeling.states))
    return EXIT_OK


def _cmd_features(args) -> int:
    from .flowfeat import frame_feature

    data = ds.load_dataset(args.data, with_ground_truth=False)
    if not (0 <= args.video < data.n_videos):
        raise ValueError(f"video {args.video} not in dataset")
    stream = data.streams[args.video]
    if not (0 <= args.frame < stream.frame_count):
        raise ValueError(f"frame {args.frame} not in video {args.video}")
    flow = stream.flow_at(args.frame)
    cands = stream.candidates[args.frame]
    if not cands:
        print(f"video {args.video} frame {args.frame}: no candidates")
    for c in cands:
        feat = frame_feature(flow, c.box)
        print(f"video {args.video} frame {args.frame} candidate {c.id} "
              f"box=({c.box.x:.1f},{c.box.y:.1f},{c.box.w:.1f},{c.box.h:.1f})")
        print("  hof " + " ".join(f"{x:.4f}" for x in feat.hof))
        print("  mag " + " ".join(f"{x:.4f}" for x in feat.mag))
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "solve": _cmd_solve,
    "features": _cmd_features,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ds.DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
