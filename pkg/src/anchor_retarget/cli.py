"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation, io, optimizer, synthetic
from .anchors import extract_anchors
from .errors import NumericalError, RetargetError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("anchor_retarget")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="anchor-retarget", description="Anchor-based motion retargeting.")
    top = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    anchors = top.add_parser("anchors", help="anchor sets").add_subparsers(dest="cmd", required=True,
                                                                           parser_class=_Parser)
    p = anchors.add_parser("extract", help="extract anchors and store them in the character file")
    p.add_argument("--char", required=True, type=Path)
    p.add_argument("--samples", type=int, default=3, help="samples per bone")
    p.add_argument("--rays", type=int, default=8, help="rays per sample")
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_anchors_extract)

    retarget = top.add_parser("retarget", help="motion retargeting").add_subparsers(dest="cmd", required=True,
                                                                                    parser_class=_Parser)
    p = retarget.add_parser("run", help="optimize a target motion")
    p.add_argument("--source-char", required=True, type=Path)
    p.add_argument("--source-motion", required=True, type=Path)
    p.add_argument("--target-char", required=True, type=Path)
    p.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--out", required=True, type=Path, help="output motion file")
    p.add_argument("--trace", type=Path, help="per-step loss CSV")
    p.add_argument("--report", type=Path, help="directory for metrics and figures")
    _common(p)
    p.set_defaults(func=cmd_retarget_run)

    ev = top.add_parser("eval", help="evaluation").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    p = ev.add_parser("metrics", help="penetration and contact preservation of motion B against motion A")
    p.add_argument("--char", required=True, type=Path, help="character of motion A (and B unless --char-b)")
    p.add_argument("--char-b", type=Path, help="character of motion B")
    p.add_argument("--motion-a", required=True, type=Path, help="reference motion")
    p.add_argument("--motion-b", required=True, type=Path, help="evaluated motion")
    p.add_argument("--delta-c", type=float, help="contact threshold (default: 1%% of height)")
    p.add_argument("--out", type=Path, help="write the report as JSON")
    _common(p)
    p.set_defaults(func=cmd_eval_metrics)

    ex = top.add_parser("export", help="exporters").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    p = ex.add_parser("obj", help="one OBJ per frame plus anchor point clouds")
    p.add_argument("--char", required=True, type=Path)
    p.add_argument("--motion", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_export_obj)

    p = ex.add_parser("bvh", help="skeleton and motion as BVH")
    p.add_argument("--char", required=True, type=Path)
    p.add_argument("--motion", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_export_bvh)

    syn = top.add_parser("synth", help="procedural test inputs").add_subparsers(dest="cmd", required=True,
                                                                               parser_class=_Parser)
    p = syn.add_parser("character", help="ellipsoid humanoid with anchors")
    p.add_argument("--head-scale", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0, help="length unit factor (1000 for millimetres)")
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--rays", type=int, default=6)
    p.add_argument("--conform", action="store_true", help="insert every anchor as a mesh vertex")
    p.add_argument("--name", default="humanoid")
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_synth_character)

    p = syn.add_parser("motion", help="scripted motion for a synthetic character")
    p.add_argument("--char", required=True, type=Path)
    p.add_argument("--kind", choices=("walk", "hand-to-head", "rest"), default="walk")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    p.set_defaults(func=cmd_synth_motion)
    return parser


def cmd_anchors_extract(args):
    char = io.load_character(args.char)
    anchors = extract_anchors(char.mesh, char.skeleton, char.skin, args.samples, args.rays)
    io.save_character(char.with_anchors(anchors), args.out)
    print(f"{anchors.n_anchors} anchors -> {args.out}")


def _ensure_anchors(char, cfg):
    if char.anchors is not None:
        return char
    log.info("%s: extracting anchors (%d samples, %d rays)", char.name, cfg.samples_per_bone, cfg.rays_per_sample)
    return char.with_anchors(extract_anchors(char.mesh, char.skeleton, char.skin,
                                             cfg.samples_per_bone, cfg.rays_per_sample))


def cmd_retarget_run(args):
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    source = _ensure_anchors(io.load_character(args.source_char), cfg)
    target = _ensure_anchors(io.load_character(args.target_char), cfg)
    motion = io.load_motion(args.source_motion, source.skeleton)
    result = optimizer.run(source, motion, target, cfg.optim())
    io.save_motion(result.motion, args.out, target.skeleton)
    if args.trace:
        optimizer.write_trace_csv(result, args.trace)
    if args.report:
        write_report(args.report, source, motion, target, result, cfg.delta_c)
    final = result.final.as_row()
    print(f"{cfg.steps} steps, L_retarget {final['L_retarget']:.6g} -> {args.out}")


def write_report(out_dir, source, source_motion, target, result, delta_c=None):
    """metrics.json, events.csv, the loss curve and the contact timeline."""
    from . import plotting

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dc_src = evaluation.default_contact_threshold(source) if delta_c is None else delta_c
    dc_tgt = evaluation.default_contact_threshold(target) if delta_c is None else delta_c
    src_events = evaluation.detect_contacts(source, source_motion, dc_src)
    tgt_events = evaluation.detect_contacts(target, result.motion, dc_tgt)
    pen = evaluation.penetration_rate(target, result.motion)
    report = evaluation.contact_preservation(src_events, tgt_events, pen, dc_tgt)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    evaluation.write_events_csv(tgt_events, out_dir / "events.csv")
    optimizer.write_trace_csv(result, out_dir / "trace.csv")
    plotting.plot_loss_curves(result, out_dir / "loss_curve.png")
    plotting.plot_contact_timeline(src_events, tgt_events, out_dir / "contacts.png")
    return report


def cmd_eval_metrics(args):
    char_a = io.load_character(args.char)
    char_b = io.load_character(args.char_b) if args.char_b else char_a
    motion_a = io.load_motion(args.motion_a, char_a.skeleton)
    motion_b = io.load_motion(args.motion_b, char_b.skeleton)
    if args.delta_c is not None and not args.delta_c > 0:
        raise ValidationError("--delta-c must be positive")
    ev_a = evaluation.detect_contacts(char_a, motion_a, args.delta_c)
    ev_b = evaluation.detect_contacts(char_b, motion_b, args.delta_c)
    dc = evaluation.default_contact_threshold(char_b) if args.delta_c is None else args.delta_c
    report = evaluation.contact_preservation(ev_a, ev_b, evaluation.penetration_rate(char_b, motion_b), dc)
    text = report.to_json()
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_export_obj(args):
    char = io.load_character(args.char)
    motion = io.load_motion(args.motion, char.skeleton)
    anchors = skin = None
    if char.anchors is not None:
        anchors, skin = char.anchors.rest_positions, char.anchors.skin.matrix
    files = io.export_obj_sequence(char, motion, args.out_dir, anchors, skin)
    print(f"{len(files)} files -> {args.out_dir}")


def cmd_export_bvh(args):
    char = io.load_character(args.char)
    motion = io.load_motion(args.motion, char.skeleton)
    io.export_bvh(char.skeleton, motion, args.out)
    print(f"{motion.n_frames} frames -> {args.out}")


def cmd_synth_character(args):
    char = synthetic.humanoid(args.name, head_scale=args.head_scale, samples_per_bone=args.samples,
                              rays_per_sample=args.rays, scale=args.scale, conform=args.conform)
    io.save_character(char, args.out)
    print(f"{char.mesh.n_vertices} vertices, {char.anchors.n_anchors} anchors -> {args.out}")


def cmd_synth_motion(args):
    char = io.load_character(args.char)
    sk = char.skeleton
    if args.kind == "walk":
        motion = synthetic.walk_motion(sk, args.frames, args.fps)
    elif args.kind == "hand-to-head":
        motion = synthetic.hand_to_head_motion(sk, args.frames, args.fps)
    else:
        motion = synthetic.rest_motion(sk, args.frames, args.fps)
    io.save_motion(motion, args.out, sk)
    print(f"{motion.n_frames} frames -> {args.out}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RetargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
