"""Command-line entry point: ``drspaam <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

from .bench import bench
from .cutout import CutoutParams, cutouts_at
from .detector import (VARIANTS, BackboneSpec, ConfigurationError, Detector, SpaamParams,
                       StateError, Variant)
from .evalmetrics import EvaluationError, evaluate, pr_curve_csv
from .pipeline import detect_sequence, predict_sequence, tune_vote
from .scan_data import LidarConfig, ParseError, ValidationError, load_sequence, save_sequence
from .sim import SceneDistribution, SceneSpec, random_scene, render_sequence
from .trainer import TrainConfig, TrainingError, train
from .tracklets import associate, filter_tracklets, tracklets_to_csv, tracklets_to_json
from .vote import VoteParams, detect, detections_from_jsonl, detections_to_jsonl

log = logging.getLogger("drspaam")

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _add_variant_flags(p, required=False):
    p.add_argument("--variant", choices=VARIANTS, required=required,
                   help="temporal fusion variant (default: the one stored in the checkpoint)")
    p.add_argument("--T", type=int, default=5, help="frames fused by backT (default 5)")
    p.add_argument("--window", type=int, default=None,
                   help="attention window half-width w (window is 2w+1 beams)")
    p.add_argument("--alpha", type=float, default=None, help="template update weight")


def _add_input_flags(p):
    p.add_argument("--in", dest="input", required=True, help="sequence file")
    p.add_argument("--format", choices=("native", "drow"), default="native")
    p.add_argument("--fov-deg", type=float, default=225.0,
                   help="field of view for DROW files, degrees (default 225)")


def _load_input(args):
    return load_sequence(args.input, args.format, fov=math.radians(args.fov_deg))


def _spaam_from(args, base: SpaamParams) -> SpaamParams:
    kw = {}
    if args.window is not None:
        kw["window_half"] = args.window
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    return SpaamParams(**{**asdict(base), **kw})


def _load_model(args) -> Detector:
    model = Detector.load(args.ckpt)
    variant = Variant(args.variant, args.T if args.variant == "backT" else 1) \
        if args.variant else model.variant
    return model.with_variant(variant, _spaam_from(args, model.spaam))


def _vote_from(path) -> VoteParams:
    return VoteParams(**json.loads(Path(path).read_text())) if path else VoteParams()


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    config = LidarConfig(args.num_points, math.radians(args.fov_deg), args.max_range)
    if args.spec:
        spec = SceneSpec.load(args.spec)
    else:
        spec = random_scene(SceneDistribution(num_persons=args.persons, num_poles=args.poles,
                                              duration=args.duration), args.seed)
    seq = render_sequence(spec, config)
    save_sequence(seq, args.out)
    log.info("wrote %d scans to %s", len(seq), args.out)


def cmd_train(args):
    train_seqs = [load_sequence(p) for p in args.data]
    val_seqs = [load_sequence(p) for p in args.val] if args.val else None
    variant = Variant(args.variant, args.T if args.variant == "backT" else 1)
    model = Detector(train_seqs[0].config, variant,
                     CutoutParams(args.cutout_width, args.cutout_depth, args.cutout_samples),
                     BackboneSpec(tuple(args.channels), 3, 2, args.feature_dim),
                     _spaam_from(args, SpaamParams()), seed=args.seed)
    cfg = TrainConfig(batch_scans=args.batch, epochs=args.epochs, context_frames=args.context,
                      lr_init=args.lr_init, lr_final=args.lr_final, seed=args.seed,
                      val_every=args.val_every)
    history = train(model, train_seqs, cfg, val=val_seqs,
                    progress=lambda r: log.info("epoch %d loss %.4f", r["epoch"], r["loss"]))
    model.save(args.out)
    if args.log:
        Path(args.log).write_text(history.to_csv())


def cmd_detect(args):
    model = _load_model(args)
    seq = _load_input(args)
    dets = detect_sequence(model, seq, _vote_from(args.vote))
    _write(args.out, detections_to_jsonl(dets))


def cmd_eval(args):
    gt = load_sequence(args.gt)
    dets = detections_from_jsonl(Path(args.dets).read_text())
    if len(dets) > len(gt):
        raise ValidationError("detections reference frames beyond the ground-truth sequence")
    dets += [[] for _ in range(len(gt) - len(dets))]
    frames = list(zip(dets, gt.annotations))
    r03, r05 = evaluate(frames, 0.3), evaluate(frames, 0.5)
    report = {"ap_03": r03.ap, "ap_05": r05.ap, "peak_f1": r05.peak_f1, "eer": r05.eer}
    if args.curve:
        Path(args.curve).write_text(pr_curve_csv(r05))
    _write(args.out, json.dumps(report, indent=2) + "\n")


def cmd_tune_vote(args):
    model = _load_model(args)
    seqs = [load_sequence(p) for p in args.val]
    params, res, _ = tune_vote(model, seqs, d=args.d)
    log.info("best AP %.4f with %s", res.ap, params)
    _write(args.out, json.dumps(asdict(params), indent=2) + "\n")


def cmd_bench(args):
    model = _load_model(args)
    seq = _load_input(args)
    vote = _vote_from(args.vote)
    report = bench(model, seq, repetitions=args.reps, warmup=args.warmup, vote=vote)
    if args.parallel:
        report = {"serial": report,
                  "parallel": bench(model, seq, repetitions=args.reps, warmup=args.warmup,
                                    vote=vote, parallel=args.parallel)}
    _write(args.out, json.dumps(report, indent=2) + "\n")


def cmd_track(args):
    model = _load_model(args)
    seq = _load_input(args)
    vote = _vote_from(args.vote)
    outputs = predict_sequence(model, seq)
    stream = ((k, detect(o.preds, s, seq.config, vote), o.correspondence)
              for k, (o, s) in enumerate(zip(outputs, seq.scans)))
    tracks = filter_tracklets(associate(stream, args.link_dist), args.min_conf, args.min_len)
    _write(args.out, tracklets_to_json(tracks) + "\n")
    if args.csv:
        Path(args.csv).write_text(tracklets_to_csv(tracks))


def cmd_cutout(args):
    seq = _load_input(args)
    if not 0 <= args.frame < len(seq):
        raise ValidationError(f"frame {args.frame} out of range (sequence has {len(seq)})")
    r = seq.scans[args.frame].ranges
    if args.params:
        params = CutoutParams(**json.loads(Path(args.params).read_text()))
    else:
        params = CutoutParams(args.width, args.depth, args.samples)
    values = cutouts_at(r, r, seq.config, params)
    Path(args.out).write_bytes(values.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drspaam", description="2D lidar person detection with temporal attention")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON file whose keys override flag defaults")
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "render a simulated scan sequence")
    p.add_argument("--spec", help="scene JSON (default: a random scene)")
    p.add_argument("--seed", type=int, default=0, help="random scene seed")
    p.add_argument("--persons", type=int, default=2)
    p.add_argument("--poles", type=int, default=0)
    p.add_argument("--duration", type=float, default=3.0, help="seconds")
    p.add_argument("--num-points", type=int, default=450)
    p.add_argument("--fov-deg", type=float, default=225.0)
    p.add_argument("--max-range", type=float, default=30.0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a detector")
    p.add_argument("--data", nargs="+", required=True, help="training sequences")
    p.add_argument("--val", nargs="*", help="validation sequences")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_variant_flags(p, required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--context", type=int, default=10, help="frames unrolled per sample")
    p.add_argument("--lr-init", type=float, default=1e-3)
    p.add_argument("--lr-final", type=float, default=1e-6)
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, nargs="+", default=[32, 64])
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--cutout-width", type=float, default=1.0)
    p.add_argument("--cutout-depth", type=float, default=0.5)
    p.add_argument("--cutout-samples", type=int, default=56)
    p.add_argument("--log", help="write the per-epoch log as CSV")

    p = add("detect", cmd_detect, "stream a sequence through a detector")
    p.add_argument("--ckpt", required=True)
    _add_input_flags(p)
    _add_variant_flags(p)
    p.add_argument("--vote", help="voting parameters JSON")
    p.add_argument("--out", default="-", help="detections JSONL (default stdout)")

    p = add("eval", cmd_eval, "score detections against annotations")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--curve", help="write the PR curve at 0.5 m as CSV")
    p.add_argument("--out", default="-")

    p = add("tune-vote", cmd_tune_vote, "grid-search voting parameters on validation data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--val", nargs="+", required=True)
    _add_variant_flags(p)
    p.add_argument("--d", type=float, default=0.5)
    p.add_argument("--out", default="-")

    p = add("bench", cmd_bench, "time the cutout, network and voting stages")
    p.add_argument("--ckpt", required=True)
    _add_input_flags(p)
    _add_variant_flags(p)
    p.add_argument("--vote")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--parallel", type=int, default=0, metavar="THREADS",
                   help="also time cutouts built on this many threads")
    p.add_argument("--out", default="-")

    p = add("track", cmd_track, "link detections into tracklets")
    p.add_argument("--ckpt", required=True)
    _add_input_flags(p)
    _add_variant_flags(p)
    p.add_argument("--vote")
    p.add_argument("--link-dist", type=float, default=0.5)
    p.add_argument("--min-conf", type=float, default=0.35)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--csv")
    p.add_argument("--out", default="-")

    p = add("cutout", cmd_cutout, "dump one frame's cutouts as little-endian float32")
    _add_input_flags(p)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--params", help="cutout parameters JSON (width_bar, depth, num_samples)")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--depth", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=56)
    p.add_argument("--out", required=True)
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with defaults taken from the ``--config`` file so that flags
    given on the command line still win."""
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    kw = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        kw[dest] = value
    sub.set_defaults(**kw)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, argv, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"drspaam: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ParseError, ValidationError, EvaluationError, TrainingError, StateError,
            ConfigurationError, OSError, ValueError, TypeError, KeyError) as exc:
        print(f"drspaam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DATA_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
