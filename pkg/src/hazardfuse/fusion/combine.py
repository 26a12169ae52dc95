"""Prediction maps and the two late-fusion combiners."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import TRIP
from ..nn.ops import class_index, log_softmax, softmax

SCHEMA = "hazardfuse.prediction/1"


@dataclass
class PredictionMap:
    scores: np.ndarray  # (2, H, W) pre-softmax; channel 0 is trip
    source: str = ""
    frame_id: str = ""
    valid: np.ndarray | None = None  # depth validity of the frame, when known

    @property
    def shape(self):
        return self.scores.shape[1:]

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.scores.astype(np.float64))

    @property
    def trip_probability(self) -> np.ndarray:
        return self.probabilities[TRIP]

    def argmax_mask(self) -> np.ndarray:
        return self.scores.argmax(axis=0) == TRIP

    def save(self, path) -> Path:
        path = Path(path)
        if path.suffix in (".json", ".bin"):
            path = path.with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".bin").write_bytes(np.ascontiguousarray(self.scores, dtype="<f4").tobytes())
        doc = {"schema": SCHEMA, "shape": list(self.scores.shape), "source": self.source,
               "frame_id": self.frame_id, "blob": path.name + ".bin"}
        path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "PredictionMap":
        path = Path(path).with_suffix(".json")
        doc = json.loads(path.read_text())
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported prediction schema {doc.get('schema')!r}")
        raw = (path.parent / doc["blob"]).read_bytes()
        scores = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(doc["shape"])
        return cls(scores, doc["source"], doc["frame_id"])


def _onehot_argmax(scores: np.ndarray) -> np.ndarray:
    out = np.zeros_like(scores)
    np.put_along_axis(out, scores.argmax(axis=0)[None], 1.0, axis=0)
    return out


def _check_same(a: PredictionMap, b: PredictionMap):
    if a.scores.shape != b.scores.shape:
        raise ValueError(f"prediction maps differ in shape: {a.scores.shape} vs {b.scores.shape}")


def late_overlay(rgb_map: PredictionMap, other_map: PredictionMap, depth_valid: np.ndarray,
                 mode: str = "scores") -> PredictionMap:
    """Add the two score maps where depth is valid; keep the colour map elsewhere.

    ``mode="hard"`` adds one-hot argmax votes instead of raw scores.
    """
    _check_same(rgb_map, other_map)
    depth_valid = np.asarray(depth_valid, dtype=bool)
    if depth_valid.shape != rgb_map.shape:
        raise ValueError(f"depth mask {depth_valid.shape} vs maps {rgb_map.shape}")
    a, b = rgb_map.scores, other_map.scores
    if mode == "hard":
        a, b = _onehot_argmax(a), _onehot_argmax(b)
    elif mode != "scores":
        raise ValueError(f"unknown overlay mode {mode!r}")
    fused = np.where(depth_valid[None], a + b, a)
    return PredictionMap(fused, f"late_overlay({rgb_map.source},{other_map.source})", rgb_map.frame_id,
                         depth_valid)


def proportional_forward(scores_a: np.ndarray, scores_b: np.ndarray, mode: str = "pixel") -> dict:
    """Confidence-weighted mixture of two softmax classifiers, in log space.

    Confidence of a component is its best class score (per pixel, or averaged
    over the image in ``"image"`` mode); the occupation weights are a softmax
    over the two confidences. Returns the log fused probability ``logp`` plus
    the intermediates needed for the backward pass.
    """
    if scores_a.shape != scores_b.shape:
        raise ValueError(f"component shapes differ: {scores_a.shape} vs {scores_b.shape}")
    conf = np.stack([scores_a.max(axis=0), scores_b.max(axis=0)])
    if mode == "image":
        conf = conf.mean(axis=(1, 2), keepdims=True)
    elif mode != "pixel":
        raise ValueError(f"unknown proportional mode {mode!r}")
    logw = log_softmax(conf, axis=0)
    logq = np.stack([log_softmax(scores_a), log_softmax(scores_b)])
    z = logw[:, None] + logq
    zmax = z.max(axis=0)
    logp = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    return {"logw": logw, "logq": logq, "logp": logp, "scores": (scores_a, scores_b), "mode": mode}


def proportional_backward(cache: dict, target: np.ndarray, keep: np.ndarray):
    """Gradients of sum over kept pixels of -log p[target] w.r.t. both score maps."""
    logw, logq, logp = cache["logw"], cache["logq"], cache["logp"]
    cls = class_index(target)
    lq_t = np.take_along_axis(logq, np.broadcast_to(cls, logq.shape[:1] + (1,) + cls.shape), axis=1)[:, 0]
    lp_t = np.take_along_axis(logp, cls[None], axis=0)[0]
    resp = np.exp(logw + lq_t - lp_t) * keep  # posterior responsibility of each component
    w = np.exp(logw)
    onehot = np.zeros(logq.shape[1:], dtype=logq.dtype)
    np.put_along_axis(onehot, cls[None], 1.0, axis=0)
    grads = []
    for k, s in enumerate(cache["scores"]):
        q = np.exp(logq[k])
        g = resp[k][None] * (q - onehot)
        if cache["mode"] == "pixel":
            dconf = (w[k] - resp[k]) * keep
        else:
            dconf = np.full(s.shape[1:], ((w[k] * keep).sum() - resp[k].sum()) / keep.size)
        best = np.zeros_like(s)
        np.put_along_axis(best, s.argmax(axis=0)[None], 1.0, axis=0)
        g += best * dconf[None]
        grads.append(g.astype(s.dtype))
    return grads


def occupation_weights(maps, mode: str = "pixel") -> np.ndarray:
    a, b = maps
    return np.exp(proportional_forward(a.scores.astype(np.float64), b.scores.astype(np.float64), mode)["logw"])


def late_proportional(maps, mode: str = "pixel") -> PredictionMap:
    """Fuse two maps by confidence-weighted mixing of their class probabilities.

    The returned scores are log fused probabilities, so softmax of them gives
    the mixture back.
    """
    if len(maps) != 2:
        raise ValueError("late_proportional takes exactly two maps")
    a, b = maps
    _check_same(a, b)
    out = proportional_forward(a.scores.astype(np.float64), b.scores.astype(np.float64), mode)
    return PredictionMap(out["logp"].astype(np.float32), f"late_proportional({a.source},{b.source})",
                         a.frame_id, a.valid)
