"""Command-line entry points: synth, sweep, init, optimize, evaluate, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .metrics import evaluate_world, load_gt
from .observations import load_scene, load_state, save_state
from .optim import OptimConfig, run_hsfm, write_trace_csv
from .synth import SynthConfig, generate, sweep
from .world_init import InitOptions, initialize_world

logger = logging.getLogger(__name__)


def _add_optimize_flags(p):
    p.add_argument("--config", type=Path, default=None,
                   help="optimizer config JSON (fields mirror OptimConfig)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-places", action="store_true",
                   help="ablation: drop the pointmap alignment loss")
    p.add_argument("--detach-human-grads", action="store_true",
                   help="ablation: human loss stops driving cameras/scene")
    p.add_argument("--alpha-init", default="human",
                   help="human | one | fixed:<value>")
    p.add_argument("--reference-camera", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def cmd_synth(args):
    if args.config:
        cfg = SynthConfig.from_dict(json.loads(args.config.read_text()))
    else:
        cfg = SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    result = generate(cfg, args.out)
    print(f"scene written to {result.scene_dir} "
          f"(C={cfg.cameras}, H={cfg.humans}, scale={result.scene_scale:.2f} m)")
    return 0


def cmd_sweep(args):
    base = SynthConfig.from_dict(json.loads(args.config.read_text())) \
        if args.config else SynthConfig()
    if args.seed is not None:
        base.seed = args.seed
    values = [float(v) if "." in v else int(v) for v in args.values.split(",")]
    manifest = sweep(base, args.axis, values, args.out)
    print(f"{len(manifest['scenes'])} scenes written under {args.out}")
    return 0


def cmd_init(args):
    scene = load_scene(args.scene_dir)
    options = InitOptions(reference_camera=args.reference_camera,
                          alpha_mode=args.alpha_init)
    state, report = initialize_world(scene, options)
    doc = {"report": report.to_dict()}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    snapshot_dir = args.out.parent / (args.out.stem + "_state")
    save_state(snapshot_dir, state, scene.template, scene_dir=scene.path)
    doc["state_dir"] = str(snapshot_dir)
    args.out.write_text(json.dumps(doc, indent=1))
    print(f"alpha={report.alpha:.4f} anchor={report.anchor_id} "
          f"reference={report.reference_camera} -> {args.out}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_optimize(args):
    scene = load_scene(args.scene_dir)
    cfg = OptimConfig.from_dict(json.loads(args.config.read_text())) \
        if args.config else OptimConfig()
    if args.no_places:
        cfg.no_places = True
    if args.detach_human_grads:
        cfg.detach_human_grads = True
    if args.steps is not None:
        cfg.steps = args.steps
    if args.lam is not None:
        cfg.lam = args.lam
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers

    options = InitOptions(reference_camera=args.reference_camera,
                          alpha_mode=args.alpha_init)
    state, report = initialize_world(scene, options)
    final, trace, bd = run_hsfm(state, scene.keypoints, scene.template, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .body import forward_kinematics
    joints = {h.human_id: forward_kinematics(h, scene.template)
              for h in final.humans}
    save_state(out / "state", final, scene.template, joints_by_human=joints,
               scene_dir=scene.path)
    write_trace_csv(out / "trace.csv", trace)
    (out / "init_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    print(f"final: L_humans={bd.l_humans:.6g} L_places={bd.l_places:.6g} "
          f"alpha={final.alpha:.4f} -> {out}")
    return 0


def cmd_evaluate(args):
    state, template, joints = load_state(Path(args.result_dir) / "state"
                                         if (Path(args.result_dir) / "state").is_dir()
                                         else args.result_dir)
    gt_cams, gt_joints, _ = load_gt(args.gt_dir)
    report = evaluate_world(state, template, gt_cams, gt_joints)
    doc = report.to_dict()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(doc, indent=1))
    if args.csv:
        cols = ["w_mpjpe", "ga_mpjpe", "pa_mpjpe", "te", "s_te", "ae"]
        cols += [f"rra@{t}" for t in sorted(report.rra)]
        cols += [f"cca@{t}" for t in sorted(report.cca)]
        vals = [doc["w_mpjpe"], doc["ga_mpjpe"], doc["pa_mpjpe"], doc["te"],
                doc["s_te"], doc["ae"]]
        vals += [report.rra[t] for t in sorted(report.rra)]
        vals += [report.cca[t] for t in sorted(report.cca)]
        args.csv.write_text(",".join(cols) + "\n" +
                            ",".join("" if v is None else repr(v) for v in vals) + "\n")
    ga = "-" if report.ga_mpjpe is None else f"{report.ga_mpjpe:.4f}"
    print(f"W-MPJPE={report.w_mpjpe:.4f} GA-MPJPE={ga} "
          f"PA-MPJPE={report.pa_mpjpe:.4f} TE={report.te:.4f} AE={report.ae:.3f}")
    return 0


def cmd_export(args):
    from .export import export_world
    result_dir = Path(args.result_dir)
    state_dir = result_dir / "state" if (result_dir / "state").is_dir() else result_dir
    scene = load_scene(args.scene) if args.scene else None
    state, template, _ = load_state(state_dir, scene=scene)
    paths = export_world(state, template, args.out, binary=not args.ascii)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hsfm",
        description="Joint reconstruction of humans, scene pointmaps, and "
                    "cameras from sparse multi-view observations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="generate a scene per value along an axis")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--axis", required=True,
                   choices=["humans", "cameras", "noise", "alpha_init"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("init", help="run world initialization only")
    p.add_argument("scene_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--reference-camera", type=int, default=None)
    p.add_argument("--alpha-init", default="human")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("optimize", help="initialize then run the two-stage "
                                        "joint optimization")
    p.add_argument("scene_dir", type=Path)
    _add_optimize_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="score a result against ground truth")
    p.add_argument("result_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write PLY inspection files")
    p.add_argument("result_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scene", type=Path, default=None,
                   help="scene directory for pair data (defaults to the one "
                        "recorded in the snapshot)")
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
