"""Floor-wise cross-validation: train, predict, sweep and report every approach.

Output layout under ``out``::

    config.json                         resolved run config + tool version
    parents/{rgb,hha}.{json,bin}        pre-trained parent networks
    folds/<floor>/<approach>/           checkpoint, grid ranking, predictions,
                                        curve.{csv,json}, report.json
    curves/<approach>.csv               fold-averaged curve
    averaged/<approach>.json            fold-averaged operating point
    table.csv                           one row per approach
    summary.json                        status and headline numbers
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SynthConfig, load_corpus, make_folds, synth_generate
from .evaluation import (
    DEFAULT_THETA,
    DEFAULT_THRESHOLDS,
    EvalFrame,
    MetricsReport,
    crossval_aggregate,
    operating_point,
    pr_sweep,
    write_curve,
    write_report,
)
from .fusion import (
    TABLE_APPROACHES,
    FusionSpec,
    Hyperparams,
    LateOverlayNet,
    default_grid,
    grid_search,
    network_from_checkpoint,
    new_network,
    predict,
    train,
)
from .fusion.training import make_sample
from .hha import HHAConfig
from .nn.checkpoint import Checkpoint

log = logging.getLogger(__name__)

SCHEMA = "hazardfuse.run_config/1"


def approach_slug(fusion: str, modalities) -> str:
    return "-".join([fusion, *modalities])


@dataclass
class RunConfig:
    """Everything a cross-validation run depends on.

    ``corpus`` is a directory in the on-disk corpus layout; when it is None the
    synthetic corpus described by ``synth`` is generated instead. ``grid`` is
    ``"default"`` for the standard grid of each approach, a dict applied to
    every approach, or None to train once with ``hyperparams``.
    """

    corpus: str | None = None
    synth: dict = field(default_factory=lambda: {"seed": 7, "n_frames": 40, "config": {}})
    approaches: list = field(default_factory=lambda: [[f, list(m)] for f, m in TABLE_APPROACHES])
    fusion_spec: str | None = None
    hyperparams: dict = field(default_factory=dict)
    grid: object = "default"
    parents: dict | None = field(default_factory=lambda: {"seed": 1007, "n_frames": 40, "config": {}})
    folds: list | None = None
    val_every_nth: int = 5
    theta_det: float = DEFAULT_THETA
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    hha: dict = field(default_factory=dict)
    save_predictions: bool = True
    checkpoint_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.grid, str) and self.grid != "default":
            raise ValueError(f"grid must be 'default', a dict or null, not {self.grid!r}")
        if self.val_every_nth < 2:
            raise ValueError("val_every_nth must be >= 2")
        if not 0.0 < self.theta_det <= 1.0:
            raise ValueError("theta_det must be in (0, 1]")
        for f, m in self.approaches:
            FusionSpec.create(f, m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = {k: v for k, v in d.items() if k not in ("schema", "version")}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def base_hyperparams(self) -> Hyperparams:
        return Hyperparams.from_dict({**self.hyperparams, "seed": self.seed})

    def hha_config(self) -> HHAConfig:
        return HHAConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.hha.items()})

    def specs(self) -> list:
        """Fusion specs of every approach, sharing the base layers of ``fusion_spec`` when given."""
        hp = self.base_hyperparams()
        template = None
        if self.fusion_spec:
            template = FusionSpec.from_dict(json.loads(Path(self.fusion_spec).read_text()))
        out = []
        for f, m in self.approaches:
            if template is None:
                out.append(FusionSpec.create(f, m, hp))
            else:
                out.append(FusionSpec.create(f, m, hp, layers=template.layers,
                                             proportional_mode=template.proportional_mode,
                                             overlay_mode=template.overlay_mode))
        return out


class CrossValError(RuntimeError):
    pass


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_frames(cfg: RunConfig) -> list:
    if cfg.corpus:
        return load_corpus(cfg.corpus)
    s = cfg.synth
    return synth_generate(int(s.get("seed", 7)), int(s.get("n_frames", 40)), SynthConfig.from_dict(s.get("config", {})))


def pretrain_parents(cfg: RunConfig, out: Path | None = None) -> dict:
    """Single-modality parents trained from scratch on a separate synthetic corpus.

    Every non-wall object is labelled positive, so the parents learn generic
    object-vs-floor features rather than the trip rule itself.
    """
    if cfg.parents is None:
        return {}
    p = cfg.parents
    synth_cfg = SynthConfig.from_dict({"label_rule": "object", **p.get("config", {})})
    frames = synth_generate(int(p.get("seed", 1007)), int(p.get("n_frames", 40)), synth_cfg)
    hp = cfg.base_hyperparams()
    parents = {}
    for key in ("rgb", "hha"):
        net, _ = new_network(FusionSpec.create("none", [key], hp))
        ckpt = train(net, frames, hp, hha_config=cfg.hha_config()).checkpoint
        parents[key] = ckpt
        if out is not None:
            ckpt.save(out / "parents" / key)
        log.info("parent %s trained (%s)", key, ckpt.id)
    return parents


def split_validation(frames, every_nth: int):
    """Hold out every ``every_nth`` frame (in key order) for validation."""
    frames = sorted(frames, key=lambda f: f.key)
    if len(frames) < 2:
        return frames, frames
    val = [f for i, f in enumerate(frames) if i % every_nth == every_nth - 1] or frames[-1:]
    ids = {f.key for f in val}
    return [f for f in frames if f.key not in ids], val


def _grid_for(cfg: RunConfig, fusion: str) -> dict | None:
    if cfg.grid is None:
        return None
    if cfg.grid == "default":
        return default_grid(fusion)
    return dict(cfg.grid)


def fit_approach(spec: FusionSpec, cfg: RunConfig, train_frames, parents: dict, jobs: int = 1):
    """Train one approach on one fold's training floors. Returns (network, info)."""
    fit, val = split_validation(train_frames, cfg.val_every_nth)
    grid = _grid_for(cfg, spec.fusion)
    hcfg = cfg.hha_config()
    use_parents = parents or None
    if grid is None:
        net, pids = new_network(spec, use_parents)
        res = train(net, fit, spec.hyperparams, val, pids, hcfg)
        return net, {"grid": None, "best_iteration": res.best_iteration, "checkpoint": res.checkpoint}
    ranking = grid_search(spec, grid, [make_sample(f, spec.modalities, hcfg) for f in fit],
                          [make_sample(f, spec.modalities, hcfg) for f in val], use_parents, hcfg, jobs)
    best = ranking[0]
    if best.diverged:
        raise CrossValError(f"{spec.name}: every grid combination diverged")
    return network_from_checkpoint(best.checkpoint), {
        "grid": [r.to_dict() for r in ranking], "best_iteration": best.best_iteration,
        "checkpoint": best.checkpoint}


def _overlay_arm(slug: str, fold_nets: dict, cfg: RunConfig, floor: str):
    if slug in fold_nets:
        return fold_nets[slug]
    if cfg.checkpoint_dir:
        path = Path(cfg.checkpoint_dir) / floor / slug / "checkpoint.json"
        if path.exists():
            return network_from_checkpoint(Checkpoint.load(path))
    raise CrossValError(
        f"late overlay needs a trained {slug} network for test floor {floor!r}; "
        f"train the single-modality arms first (add ['none', ['{slug.split('-', 1)[1]}']] to the approaches "
        f"before the overlay, or point checkpoint_dir at their checkpoints)")


def evaluate_predictions(preds, frames, cfg: RunConfig):
    eval_frames = [EvalFrame.from_prediction(p, f) for p, f in zip(preds, frames, strict=True)]
    curve = pr_sweep(eval_frames, cfg.thresholds, cfg.theta_det)
    return curve, operating_point(curve)


def mean_curve(curves) -> list:
    """Per-threshold mean of each metric across folds."""
    out = []
    for pts in zip(*curves, strict=True):
        det = [p.trip_obj_detection for p in pts if p.trip_obj_detection is not None]
        rep = MetricsReport(
            float(np.mean([p.precision for p in pts])), float(np.mean([p.recall for p in pts])),
            float(np.mean([p.f1 for p in pts])), float(np.mean([p.trip_iou for p in pts])),
            float(np.mean(det)) if det else None, pts[0].threshold, sum_counts(pts))
        out.append(rep)
    return out


def sum_counts(points):
    total = points[0].counts
    for p in points[1:]:
        total = total + p.counts
    return total


TABLE_COLUMNS = ("approach", "fusion", "modalities", "precision", "recall", "f1", "trip_iou", "obj_det")


def write_table(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for slug, spec, avg in rows:
            w.writerow([slug, spec.fusion, "+".join(spec.modalities), repr(avg.precision), repr(avg.recall),
                        repr(avg.f1), repr(avg.trip_iou),
                        "" if avg.trip_obj_detection is None else repr(avg.trip_obj_detection)])
    return path


def run_crossval(cfg: RunConfig, out, jobs: int = 1, frames=None) -> dict:
    """Run the whole protocol; returns the summary also written to summary.json.

    On failure the artifacts written so far stay in place, ``FAILED.json``
    records the error and :class:`CrossValError` is raised.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {**cfg.to_dict(), "version": __version__})
    (out / "FAILED.json").unlink(missing_ok=True)
    try:
        return _run(cfg, out, jobs, frames)
    except Exception as exc:
        write_json(out / "FAILED.json", {"error": f"{type(exc).__name__}: {exc}", "version": __version__})
        if isinstance(exc, CrossValError):
            raise
        raise CrossValError(f"{type(exc).__name__}: {exc}") from exc


def _run(cfg: RunConfig, out: Path, jobs: int, frames) -> dict:
    frames = load_frames(cfg) if frames is None else frames
    plan = make_folds(frames)
    folds = plan.folds
    if cfg.folds:
        folds = [f for f in folds if f.test_floor in cfg.folds]
        if not folds:
            raise CrossValError(f"no folds match {cfg.folds}")
    write_json(out / "folds.json", plan.to_dict())
    specs = cfg.specs()
    needs_parents = any(s.fusion != "late_overlay" for s in specs)
    parents = pretrain_parents(cfg, out) if needs_parents else {}
    reports = {approach_slug(s.fusion, s.modalities): [] for s in specs}
    curves = {k: [] for k in reports}
    for fold in folds:
        train_frames, test_frames = fold.split(frames)
        log.info("fold %s: %d train / %d test", fold.test_floor, len(train_frames), len(test_frames))
        fold_dir = out / "folds" / fold.test_floor
        fold_nets = {}
        for spec in specs:
            slug = approach_slug(spec.fusion, spec.modalities)
            adir = fold_dir / slug
            if spec.fusion == "late_overlay":
                rgb = _overlay_arm(approach_slug("none", ["rgb"]), fold_nets, cfg, fold.test_floor)
                other = _overlay_arm(approach_slug("none", [spec.modalities[1]]), fold_nets, cfg, fold.test_floor)
                net = LateOverlayNet(spec, rgb, other)
                info = {"arms": [approach_slug("none", ["rgb"]), approach_slug("none", [spec.modalities[1]])]}
            else:
                net, info = fit_approach(spec, cfg, train_frames, parents, jobs)
                info["checkpoint"].save(adir / "checkpoint")
                info = {**info, "checkpoint": info["checkpoint"].id}
                fold_nets[slug] = net
            write_json(adir / "training.json", info)
            preds = [predict(net, f, cfg.hha_config()) for f in test_frames]
            if cfg.save_predictions:
                for p, f in zip(preds, test_frames):
                    p.save(adir / "predictions" / f.frame_id)
            curve, best = evaluate_predictions(preds, test_frames, cfg)
            write_curve(curve, adir / "curve")
            write_report(best, adir / "report.json", {"theta_det": cfg.theta_det, "test_floor": fold.test_floor,
                                                      "train_floors": fold.train_floors})
            reports[slug].append(best)
            curves[slug].append(curve)
            log.info("fold %s %s: F1 %.3f at %.2f", fold.test_floor, slug, best.f1, best.threshold)
    rows = []
    summary = {"ok": True, "version": __version__, "folds": [f.test_floor for f in folds], "approaches": {}}
    for spec in specs:
        slug = approach_slug(spec.fusion, spec.modalities)
        avg = crossval_aggregate(reports[slug])
        write_report(avg, out / "averaged" / f"{slug}.json", {"theta_det": cfg.theta_det,
                                                              "folds": [f.test_floor for f in folds]})
        write_curve(mean_curve(curves[slug]), out / "curves" / slug)
        rows.append((slug, spec, avg))
        summary["approaches"][slug] = avg.to_dict()
    write_table(rows, out / "table.csv")
    write_json(out / "summary.json", summary)
    return summary
