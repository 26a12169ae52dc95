"""Weight initialisation from pre-trained single-modality parent networks.

Colour arms start from the ``rgb`` parent; depth and HHA arms start from the
``hha`` parent. Every layer ends up traceable to one parent or to a fresh
seeded initialisation, and the mapping is returned as a provenance record.
"""
from __future__ import annotations

import numpy as np

from ..nn.checkpoint import Checkpoint
from .networks import Network

PARENT_FOR = {"rgb": "rgb", "depth": "hha", "hha": "hha"}


class TransferError(ValueError):
    pass


def _by_layer(ckpt: Checkpoint) -> dict:
    out = {}
    for name, arr in ckpt.params.items():
        arm_layer, kind = name.rsplit(".", 1)
        layer = arm_layer.split("/", 1)[1]
        out.setdefault(layer, {})[kind] = arr
    return out


def _copy(layer, src: dict, where: str):
    for k in ("w", "b"):
        if k not in src:
            raise TransferError(f"{where}: parent lacks {k!r}")
        if src[k].shape != layer.params[k].shape:
            raise TransferError(
                f"{where}: parent shape {tuple(src[k].shape)} incompatible with {tuple(layer.params[k].shape)}")
        layer.params[k] = np.array(src[k], dtype=layer.params[k].dtype, copy=True)


def init_transfer(net: Network, parents: dict, seed: int = 0) -> dict:
    """Initialise ``net`` in place. Returns {param layer name: origin}.

    Origins are ``"rgb"``/``"hha"`` for copies, ``"rgb+hha"`` for the early
    fusion input layer, and ``"fresh"`` for seeded Gaussian layers.
    """
    spec = net.spec
    if spec.fusion == "late_overlay":
        raise TransferError("late overlay fusion has no weights of its own; train its two arms instead")
    needed = {PARENT_FOR[m] for m in spec.modalities}
    for p in sorted(needed):
        if p not in parents or parents[p] is None:
            raise TransferError(f"{spec.name}: missing {p!r} parent checkpoint")
    tables = {p: _by_layer(parents[p]) for p in needed}
    rng = np.random.default_rng([seed, 1])
    origin = {}

    def fresh(layer, name):
        layer.init_gaussian(rng, 0.01 if layer.kind == "score" else None)
        origin[name] = "fresh"

    def from_parent(layer, name, parent):
        table = tables[parent]
        if layer.name not in table:
            raise TransferError(f"{name}: layer {layer.name!r} missing from {parent!r} parent")
        _copy(layer, table[layer.name], name)
        origin[name] = parent

    first_conv = None
    for name, layer in net.param_layers():
        arm = name.split("/", 1)[0]
        if spec.fusion == "none":
            if layer.kind == "score":
                fresh(layer, name)
            else:
                from_parent(layer, name, PARENT_FOR[spec.modalities[0]])
        elif spec.fusion == "early":
            if first_conv is None:
                first_conv = layer
                rgb_l, other_l = tables["rgb"].get(layer.name), tables["hha"].get(layer.name)
                if rgb_l is None or other_l is None:
                    raise TransferError(f"{name}: first layer missing from a parent")
                w = np.concatenate([rgb_l["w"], other_l["w"]], axis=1)
                _copy(layer, {"w": w, "b": rgb_l["b"]}, name)
                origin[name] = "rgb+hha"
            elif layer.kind == "score":
                fresh(layer, name)
            else:
                from_parent(layer, name, "rgb")
        elif spec.fusion == "mid":
            if arm == "shared":
                fresh(layer, name)
            else:
                from_parent(layer, name, PARENT_FOR[arm])
        else:  # late_proportional: both arms copied whole
            from_parent(layer, name, PARENT_FOR[arm])
    return origin
