"""Command line front end.

`run` drives the full pipeline on a synthetic preset; `rpe` compares two
trajectory files. Exit codes: 0 success, 2 tracking abort, 3 bad config.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import EdgeVOError, InsufficientOverlap, TrajectoryParseError
from .evaluate import read_trajectory, rpe
from .pipeline import RunConfig, run_vo


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgevo",
                                description="Edge-aware direct visual odometry "
                                            "on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="render a sequence and run the pipeline")
    r.add_argument("--scene", default="textured_box")
    r.add_argument("--trajectory", default="dolly",
                   choices=["dolly", "lateral", "arc", "orbit"])
    r.add_argument("--frames", type=int, default=30)
    r.add_argument("--length", type=float, default=1.0)
    r.add_argument("--noise", type=float, default=0.0,
                   help="intensity noise sigma")
    r.add_argument("--noise-endpoint", type=float, default=0.0,
                   help="edge endpoint jitter sigma, px")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--match-mode", choices=["gt", "geometric"], default="gt")
    r.add_argument("--geometric-weight", type=float, default=1.0)
    r.add_argument("--photometric-weight", type=float, default=1.0)
    r.add_argument("--edge-select", choices=["on", "off"], default="off")
    r.add_argument("--delta", type=int, default=1)
    r.add_argument("--oracle-recover", action="store_true")
    r.add_argument("--depth-init", choices=["gt", "noisy"], default="noisy")
    r.add_argument("--depth-sigma", type=float, default=0.05)
    r.add_argument("--half-resolution", action="store_true")
    r.add_argument("--out", default=None, metavar="DIR")

    e = sub.add_parser("rpe", help="relative pose error between two files")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--delta", type=int, default=1)
    e.add_argument("--no-scale", action="store_true",
                   help="skip scale alignment")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "rpe":
        try:
            gt = read_trajectory(args.gt)
            est = read_trajectory(args.est)
            report = rpe(gt, est, delta=args.delta,
                         correct_scale=not args.no_scale)
        except (TrajectoryParseError, InsufficientOverlap, OSError,
                ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 3
        print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
        return 0

    config = RunConfig(
        scene=args.scene,
        trajectory=args.trajectory,
        frames=args.frames,
        length=args.length,
        noise_intensity=args.noise,
        noise_endpoint=args.noise_endpoint,
        seed=args.seed,
        match_mode=args.match_mode,
        photometric_weight=args.photometric_weight,
        geometric_weight=args.geometric_weight,
        edge_select=args.edge_select == "on",
        oracle_recover=args.oracle_recover,
        depth_init=args.depth_init,
        depth_sigma=args.depth_sigma,
        half_resolution=args.half_resolution,
        delta=args.delta,
        out_dir=args.out,
    )
    try:
        config.validate()
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3

    try:
        result = run_vo(config)
    except EdgeVOError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3

    summary = {k: v for k, v in result.report.items() if k != "config"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if result.exit_code == 2:
        print(f"tracking aborted: {result.report['abort']}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
