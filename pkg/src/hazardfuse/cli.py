"""``hazardfuse`` command line.

Every subcommand writes files under ``--out`` and prints one JSON summary on
stdout; the exit status is 0 exactly when the summary says ``"ok": true``.
Options may also come from ``--config`` (a JSON object keyed by option name);
command-line values win. ``HAZARDFUSE_LOG`` sets the log level (default
WARNING), logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("hazardfuse")


class UsageError(Exception):
    pass


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _freeze(args, command: str) -> dict:
    """Resolved options of this invocation, written next to the outputs."""
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    return {"schema": "hazardfuse.invocation/1", "command": command, "version": __version__, "options": opts}


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hha_config(args):
    from .hha import HHAConfig

    return HHAConfig.from_dict(args.hha) if getattr(args, "hha", None) else HHAConfig()


def _load_spec(args):
    from .fusion import FusionSpec, Hyperparams

    if args.fusion_spec:
        spec = FusionSpec.from_dict(json.loads(Path(args.fusion_spec).read_text()))
    else:
        spec = FusionSpec.create(args.fusion, args.modalities.split(","))
    hp = spec.hyperparams.to_dict()
    if args.hyperparams:
        hp.update(json.loads(Path(args.hyperparams).read_text()))
    if args.seed is not None:
        hp["seed"] = args.seed
    return spec.with_hyperparams(Hyperparams.from_dict(hp))


def _select(frames, floors):
    if not floors:
        return frames
    keep = set(floors.split(","))
    return [f for f in frames if f.floor in keep]


def _load_parents(path):
    from .nn.checkpoint import Checkpoint

    if not path:
        return None
    d = Path(path)
    return {k: Checkpoint.load(d / k) for k in ("rgb", "hha") if (d / f"{k}.json").exists()}


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> dict:
    from .dataset import SynthConfig, save_frame, synth_generate

    out = _out(args)
    cfg = SynthConfig.from_dict(args.synth or {})
    if args.groups is not None:
        cfg.groups = args.groups
    if args.label_rule:
        cfg.label_rule = args.label_rule
    seed = 0 if args.seed is None else args.seed
    frames = synth_generate(seed, args.frames, cfg)
    for f in frames:
        save_frame(out, f)
    manifest = {"schema": "hazardfuse.synth_manifest/1", "seed": seed, "n_frames": len(frames),
                "config": cfg.to_dict(), "frames": [f.key for f in frames], "version": __version__}
    _write_json(out / "manifest.json", manifest)
    return {"frames": len(frames), "seed": seed, "manifest": str(out / "manifest.json")}


def cmd_encode_hha(args) -> dict:
    from .dataset import load_corpus, write_png
    from .hha import encode_frame

    frames = load_corpus(args.corpus)
    out = Path(args.out) if args.out else Path(args.corpus)
    cfg = _hha_config(args)
    written, skipped, fallbacks = 0, [], 0
    for f in frames:
        if f.depth is None:
            skipped.append(f.key)
            continue
        res = encode_frame(f.depth, cfg)
        base = out / f.floor / "hha" / f.frame_id
        write_png(base.with_suffix(".png"), res.image)
        _write_json(base.with_suffix(".json"), {**res.sidecar(), "frame": f.key})
        written += 1
        fallbacks += res.gravity.fallback
    return {"encoded": written, "skipped_no_depth": len(skipped), "skipped": skipped,
            "gravity_fallbacks": fallbacks}


def cmd_train(args) -> dict:
    from .dataset import load_corpus
    from .fusion import new_network, train
    from .pipeline import split_validation

    out = _out(args)
    spec = _load_spec(args)
    frames = _select(load_corpus(args.corpus), args.floors)
    fit, val = split_validation(frames, args.val_every_nth)
    net, pids = new_network(spec, _load_parents(args.parents))
    res = train(net, fit, spec.hyperparams, val, pids, _hha_config(args))
    path = res.checkpoint.save(out / "checkpoint")
    _write_json(out / "loss.json", {"train": res.train_loss, "val": res.val_loss,
                                    "best_iteration": res.best_iteration})
    return {"checkpoint": str(path), "id": res.checkpoint.id, "best_iteration": res.best_iteration,
            "final_train_loss": res.train_loss[-1]}


def cmd_grid_search(args) -> dict:
    from .dataset import load_corpus
    from .fusion import default_grid, grid_search
    from .pipeline import split_validation

    out = _out(args)
    spec = _load_spec(args)
    grid = json.loads(Path(args.grid).read_text()) if args.grid else default_grid(spec.fusion)
    frames = _select(load_corpus(args.corpus), args.floors)
    fit, val = split_validation(frames, args.val_every_nth)
    ranking = grid_search(spec, grid, fit, val, _load_parents(args.parents), _hha_config(args), args.jobs)
    _write_json(out / "grid.json", {"grid": grid, "ranking": [r.to_dict() for r in ranking]})
    best = ranking[0]
    path = best.checkpoint.save(out / "checkpoint") if best.checkpoint else None
    return {"combinations": len(ranking), "best": best.to_dict(), "checkpoint": str(path) if path else None}


def cmd_predict(args) -> dict:
    from .dataset import load_corpus
    from .fusion import network_from_checkpoint, predict
    from .nn.checkpoint import Checkpoint

    out = _out(args)
    net = network_from_checkpoint(Checkpoint.load(args.checkpoint))
    frames = _select(load_corpus(args.corpus), args.floors)
    paths = []
    for f in frames:
        pm = predict(net, f, _hha_config(args))
        paths.append(str(pm.save(out / f.floor / f.frame_id)))
    return {"predictions": len(paths), "source": net.name}


def cmd_fuse(args) -> dict:
    from .dataset import read_png
    from .fusion import PredictionMap, late_overlay, late_proportional
    from .hha import HHAConfig

    out = _out(args)
    a, b = PredictionMap.load(args.a), PredictionMap.load(args.b)
    if args.mode == "late_proportional":
        fused = late_proportional([a, b], args.proportional_mode)
    else:
        if not args.depth:
            raise UsageError("late_overlay needs --depth (the frame's depth PNG, millimetres)")
        depth = read_png(args.depth).astype(np.float64) / 1000.0
        valid = (depth > 0) & (depth <= HHAConfig().z_max)
        fused = late_overlay(a, b, valid, args.overlay_mode)
    path = fused.save(out / (a.frame_id.replace("/", "_") or "fused"))
    return {"fused": str(path), "mode": args.mode, "source": fused.source}


def _load_predictions(root: Path, frames):
    from .fusion import PredictionMap

    out = []
    for f in frames:
        p = root / f.floor / f"{f.frame_id}.json"
        if not p.exists():
            raise FileNotFoundError(f"no prediction for {f.key} at {p}")
        out.append(PredictionMap.load(p))
    return out


def cmd_eval(args) -> dict:
    from .dataset import load_corpus, read_png
    from .evaluation import (EvalFrame, evaluate_masks, operating_point, pr_sweep, write_curve,
                             write_report)

    out = _out(args)
    frames = _select(load_corpus(args.corpus), args.floors)
    if bool(args.predictions) == bool(args.masks):
        raise UsageError("give exactly one of --predictions or --masks")
    echo = {"theta_det": args.theta_det, "frames": [f.key for f in frames]}
    if args.masks:
        gts = [EvalFrame(np.zeros(f.trip_mask().shape), f.trip_mask(), f.objects() if f.polygons else None,
                         key=f.key) for f in frames]
        masks = [read_png(Path(args.masks) / f.floor / f"{f.frame_id}.png") > 0 for f in frames]
        report = evaluate_masks(masks, gts, args.theta_det)
        write_report(report, out / "report.json", echo)
        return {"report": report.to_dict()}
    preds = _load_predictions(Path(args.predictions), frames)
    eval_frames = [EvalFrame.from_prediction(p, f) for p, f in zip(preds, frames)]
    curve = pr_sweep(eval_frames, args.thresholds, args.theta_det)
    best = operating_point(curve)
    write_curve(curve, out / "curve")
    write_report(best, out / "report.json", echo)
    return {"report": best.to_dict(), "curve": str(out / "curve.csv")}


def cmd_crossval(args) -> dict:
    from .pipeline import RunConfig, run_crossval

    out = _out(args)
    cfg = RunConfig.from_dict(args.run_config or {})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.corpus:
        cfg.corpus = args.corpus
    return run_crossval(cfg, out, args.jobs)


def cmd_gradcheck(args) -> dict:
    from .checks import gradcheck_suite

    results = gradcheck_suite(args.samples, 0 if args.seed is None else args.seed)
    cases = {name: {"max_rel_error": r.max_rel_error, "checked": r.n_checked, "skipped_kinks": r.n_skipped,
                    "worst": r.worst, "passed": r.passed(args.tolerance)} for name, r in results}
    ok = all(c["passed"] for c in cases.values())
    if args.out:
        _write_json(_out(args) / "gradcheck.json", cases)
    return {"ok": ok, "tolerance": args.tolerance, "cases": cases}


# -- parser ------------------------------------------------------------------

def _add_spec_args(p):
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--floors", help="comma-separated floors to use (default: all)")
    p.add_argument("--fusion-spec", help="FusionSpec JSON")
    p.add_argument("--fusion", default="none", help="fusion kind when no --fusion-spec is given")
    p.add_argument("--modalities", default="rgb", help="comma-separated modalities, e.g. rgb,hha")
    p.add_argument("--hyperparams", help="JSON file overriding hyperparameters")
    p.add_argument("--parents", help="directory holding rgb.json/hha.json parent checkpoints")
    p.add_argument("--val-every-nth", type=int, default=5, help="hold out every n-th frame for validation")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p, suppress: bool):
        # Subcommand copies must not reset values given before the subcommand name.
        d = {"default": argparse.SUPPRESS} if suppress else {}
        p.add_argument("--config", help="JSON file of option defaults (crossval: the run config)", **d)
        p.add_argument("--seed", type=int, help="global seed", **d)
        p.add_argument("--out", help="output directory", **d)
        p.add_argument("--jobs", type=int, help="worker processes for grid cells",
                       **(d or {"default": 1}))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="hazardfuse", description="Trip-hazard segmentation from colour and depth.")
    global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--groups", type=int)
    p.add_argument("--label-rule", choices=("trip", "object"))
    p.set_defaults(func=cmd_synth, synth=None)

    p = sub.add_parser("encode-hha", parents=[common], help="write HHA images and sidecars")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_encode_hha, hha=None)

    p = sub.add_parser("train", parents=[common], help="train one network")
    _add_spec_args(p)
    p.set_defaults(func=cmd_train, hha=None)

    p = sub.add_parser("grid-search", parents=[common], help="rank a hyperparameter grid by validation loss")
    _add_spec_args(p)
    p.add_argument("--grid", help="JSON grid {name: [values]} (default: the standard grid for the fusion)")
    p.set_defaults(func=cmd_grid_search, hha=None)

    p = sub.add_parser("predict", parents=[common], help="write prediction maps for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--floors")
    p.set_defaults(func=cmd_predict, hha=None)

    p = sub.add_parser("fuse", parents=[common], help="fuse two prediction maps")
    p.add_argument("--mode", required=True, choices=("late_overlay", "late_proportional"))
    p.add_argument("--a", required=True, help="colour prediction map (JSON)")
    p.add_argument("--b", required=True, help="depth or HHA prediction map (JSON)")
    p.add_argument("--depth", help="depth PNG of the frame (late_overlay)")
    p.add_argument("--proportional-mode", choices=("pixel", "image"), default="pixel")
    p.add_argument("--overlay-mode", choices=("scores", "hard"), default="scores")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="metrics, PR curve and operating point")
    p.add_argument("--corpus", required=True)
    p.add_argument("--floors")
    p.add_argument("--predictions", help="directory of prediction maps <floor>/<id>.json")
    p.add_argument("--masks", help="directory of binary mask PNGs <floor>/<id>.png")
    p.add_argument("--theta-det", type=float, default=0.5)
    p.set_defaults(func=cmd_eval, thresholds=None)

    p = sub.add_parser("crossval", parents=[common], help="run floor-wise cross-validation")
    p.add_argument("--corpus", help="corpus directory (default: synthetic corpus from the config)")
    p.set_defaults(func=cmd_crossval, run_config=None)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser, args, argv):
    """Fill options not given on the command line from the --config JSON."""
    if not args.config:
        return args
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")
    if args.command == "crossval":
        args.run_config = doc
        return args
    explicit = parser.parse_args(argv, namespace=argparse.Namespace(**{k: None for k in vars(args)}))
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in vars(args) or dest in ("func", "command", "config"):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        if getattr(explicit, dest) is None or dest in ("synth", "hha", "thresholds"):
            setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HAZARDFUSE_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(parser, args, argv)
        if args.out:
            _write_json(Path(args.out) / f"invocation-{args.command}.json", _freeze(args, args.command))
        result = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"ok": False, "command": args.command, "error": str(exc)}))
        return 2
    except (ValueError, KeyError, FileNotFoundError, RuntimeError, TypeError, OSError) as exc:
        log.debug("command failed", exc_info=True)
        print(json.dumps({"ok": False, "command": args.command, "error": f"{type(exc).__name__}: {exc}"}))
        return 1
    summary = {"command": args.command, "ok": True, **result}
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0 if summary["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
