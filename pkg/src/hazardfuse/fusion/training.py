from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..hha import HHAConfig, encode_frame, validity_mask
from ..nn.checkpoint import Checkpoint
from ..nn.optim import OptimState, sgd_momentum_step
from .combine import PredictionMap
from .networks import Network, build_network, init_scratch
from .spec import FusionSpec, Hyperparams, enumerate_grid
from .transfer import init_transfer

log = logging.getLogger(__name__)


# Inputs are mapped to [-2, 2]: roughly unit spread, which keeps the summed
# loss well conditioned for the small network.
INPUT_GAIN = 4.0


def _centred(x: np.ndarray) -> np.ndarray:
    return (x.astype(np.float32) - 0.5) * np.float32(INPUT_GAIN)


def modality_input(frame, modality: str, hha_config: HHAConfig | None = None) -> np.ndarray:
    """Network input for one modality: (3, H, W) float32 centred on zero."""
    if modality == "rgb":
        return _centred(frame.rgb.transpose(2, 0, 1) / np.float32(255.0))
    if frame.depth is None:
        raise KeyError(f"{frame.key}: missing modality {modality!r} (no depth)")
    cfg = hha_config or HHAConfig()
    if modality == "depth":
        z = _centred(np.clip(frame.depth.meters() / cfg.z_max, 0.0, 1.0))
        return np.repeat(z[None], 3, axis=0)
    if modality == "hha":
        if frame.hha is None:
            frame.hha = encode_frame(frame.depth, cfg).image
        return _centred(frame.hha.transpose(2, 0, 1) / np.float32(255.0))
    raise KeyError(f"unknown modality {modality!r}")


@dataclass
class Sample:
    key: str
    inputs: dict
    target: np.ndarray
    ignore: np.ndarray | None = None
    valid: np.ndarray | None = None


def make_sample(frame, modalities, hha_config: HHAConfig | None = None) -> Sample:
    inputs = {m: modality_input(frame, m, hha_config) for m in modalities}
    valid = None
    if frame.depth is not None:
        valid = validity_mask(frame.depth, (hha_config or HHAConfig()).z_max)
    return Sample(frame.key, inputs, frame.trip_mask(), None, valid)


def modalities_needed(spec: FusionSpec) -> list:
    return list(spec.modalities)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)  # (iteration, mean loss)
    best_iteration: int = 0


def _val_loss(net: Network, samples) -> float:
    total = sum(net.loss(s.inputs, s.target, s.ignore, train=False, backward=False) for s in samples)
    return total / len(samples)


def train(net: Network, frames, hp: Hyperparams | None = None, val_frames=(), parent_ids: dict | None = None,
          hha_config: HHAConfig | None = None) -> TrainResult:
    """SGD with momentum, batch size 1, summed per-pixel loss, seeded shuffling.

    Validation loss is measured before the first step and every ``val_every``
    iterations; the parameters with the lowest validation loss are returned
    (the final ones when there is no validation set). ``net`` is left holding
    the returned parameters.
    """
    hp = hp or net.spec.hyperparams
    if not net.trainable:
        raise TypeError(f"{net.name} has no trainable parameters")
    mods = modalities_needed(net.spec)
    samples = [f if isinstance(f, Sample) else make_sample(f, mods, hha_config) for f in frames]
    vals = [f if isinstance(f, Sample) else make_sample(f, mods, hha_config) for f in val_frames]
    if not samples:
        raise ValueError("no training frames")
    order_rng = np.random.default_rng([hp.seed, 2])
    net.set_rng(np.random.default_rng([hp.seed, 3]))
    opt = OptimState(hp.base_lr, hp.momentum, hp.bias_lr_factor)
    mults = net.lr_multipliers()
    params = net.parameters()
    trace, val_trace = [], []
    best = (math.inf, 0, {k: v.copy() for k, v in params.items()})
    if vals:
        v = _val_loss(net, vals)
        val_trace.append((0, v))
        best = (v, 0, best[2])
    order = []
    for it in range(hp.max_iterations):
        if not order:
            order = list(order_rng.permutation(len(samples)))
        s = samples[order.pop(0)]
        loss = net.loss(s.inputs, s.target, s.ignore, train=True)
        trace.append(loss)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"{net.name}: non-finite loss at iteration {it}", trace)
        sgd_momentum_step(params, net.gradients(), opt, mults)
        done = it + 1
        if vals and (done % hp.val_every == 0 or done == hp.max_iterations):
            v = _val_loss(net, vals)
            val_trace.append((done, v))
            if not math.isfinite(v):
                raise TrainingDiverged(f"{net.name}: non-finite validation loss at iteration {done}", trace)
            if v < best[0]:
                best = (v, done, {k: p.copy() for k, p in params.items()})
    if vals:
        net.set_parameters(best[2])
        best_it = best[1]
    else:
        best_it = hp.max_iterations
    ckpt = net.to_checkpoint(hp.seed, parent_ids, {"best_iteration": best_it})
    return TrainResult(ckpt, trace, val_trace, best_it)


def new_network(spec: FusionSpec, parents: dict | None = None) -> tuple:
    """Build and initialise a network; returns (net, parent_ids)."""
    net = build_network(spec)
    if parents:
        init_transfer(net, parents, spec.hyperparams.seed)
        return net, {k: v.id for k, v in sorted(parents.items()) if v is not None}
    init_scratch(net, spec.hyperparams.seed)
    return net, {}


@dataclass
class GridResult:
    hyperparams: Hyperparams
    val_loss: float
    diverged: bool = False
    checkpoint: Checkpoint | None = None
    best_iteration: int = 0

    def to_dict(self) -> dict:
        return {"hyperparams": self.hyperparams.to_dict(),
                "val_loss": self.val_loss if math.isfinite(self.val_loss) else None,
                "diverged": self.diverged, "best_iteration": self.best_iteration,
                "checkpoint": self.checkpoint.id if self.checkpoint else None}


def _grid_cell(spec: FusionSpec, hp: Hyperparams, train_s, val_s, parents) -> GridResult:
    net, pids = new_network(spec.with_hyperparams(hp), parents)
    try:
        res = train(net, train_s, hp, val_s, pids)
    except FloatingPointError as exc:
        log.warning("grid cell %s diverged: %s", hp, exc)
        return GridResult(hp, math.inf, True)
    return GridResult(hp, min(v for _, v in res.val_loss), False, res.checkpoint, res.best_iteration)


def grid_search(spec: FusionSpec, grid: dict, train_frames, val_frames, parents: dict | None = None,
                hha_config: HHAConfig | None = None, jobs: int = 1) -> list:
    """Train every grid combination and rank by lowest validation loss.

    Diverged combinations rank last; ties keep enumeration order. Each result
    carries the best-validation checkpoint of its run. ``jobs > 1`` trains
    cells in worker processes; results do not depend on ``jobs``.
    """
    combos = enumerate_grid(grid, spec.hyperparams)
    mods = modalities_needed(spec)
    train_s = [f if isinstance(f, Sample) else make_sample(f, mods, hha_config) for f in train_frames]
    val_s = [f if isinstance(f, Sample) else make_sample(f, mods, hha_config) for f in val_frames] or train_s
    if jobs > 1 and len(combos) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(jobs, len(combos))) as pool:
            futures = [pool.submit(_grid_cell, spec, hp, train_s, val_s, parents) for hp in combos]
            results = [f.result() for f in futures]
    else:
        results = [_grid_cell(spec, hp, train_s, val_s, parents) for hp in combos]
    order = sorted(range(len(results)), key=lambda i: (results[i].diverged, results[i].val_loss, i))
    return [results[i] for i in order]


def predict(net: Network, frame, hha_config: HHAConfig | None = None) -> PredictionMap:
    mods = modalities_needed(net.spec)
    s = make_sample(frame, mods, hha_config)
    return net.predict(s.inputs, frame.key, s.valid)
