"""Trainable networks for each fusion topology.

Parameter names are ``<arm>/<layer>.<w|b>``. Arms: the modality name for a
single-modality net, ``early`` for input concatenation, the two modality
names plus ``shared`` for mid fusion, and two modality-named sub-networks for
late proportional fusion.
"""
from __future__ import annotations

import copy

import numpy as np

from ..nn.checkpoint import Checkpoint
from ..nn.layers import Dropout, build_layer
from ..nn.ops import softmax_xent_sum
from .combine import PredictionMap, late_overlay, proportional_backward, proportional_forward
from .spec import MODALITY_CHANNELS, FusionSpec, Hyperparams, split_at_final_pool


class Sequential:
    def __init__(self, prefix: str, layer_specs, in_channels: int):
        self.prefix = prefix
        self.layers = []
        ch = in_channels
        for spec in layer_specs:
            layer = build_layer(spec, ch)
            ch = layer.out_channels(ch)
            self.layers.append(layer)
        self.out_channels = ch

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def layer(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"{self.prefix}: no layer {name!r}")


class Network:
    """Common parameter plumbing; subclasses define ``arms``, forward and backward."""

    trainable = True

    def __init__(self, spec: FusionSpec):
        self.spec = spec
        self.arms: list = []

    @property
    def name(self) -> str:
        return self.spec.name

    def param_layers(self):
        for arm in self.arms:
            for layer in arm.layers:
                if layer.has_params:
                    yield f"{arm.prefix}/{layer.name}", layer

    def parameters(self) -> dict:
        return {f"{n}.{k}": layer.params[k] for n, layer in self.param_layers() for k in ("w", "b")}

    def gradients(self) -> dict:
        return {f"{n}.{k}": layer.grads[k] for n, layer in self.param_layers() for k in ("w", "b")}

    def lr_multipliers(self) -> dict:
        return {f"{n}.{k}": layer.lr_mult for n, layer in self.param_layers() for k in ("w", "b")}

    def set_parameters(self, params: dict) -> None:
        for n, layer in self.param_layers():
            for k in ("w", "b"):
                src = np.asarray(params[f"{n}.{k}"])
                if src.shape != layer.params[k].shape:
                    raise ValueError(f"{n}.{k}: shape {src.shape} vs expected {layer.params[k].shape}")
                layer.params[k] = src.astype(layer.params[k].dtype, copy=True)

    def astype(self, dtype) -> "Network":
        net = copy.deepcopy(self)
        for _, layer in net.param_layers():
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        net._dtype = np.dtype(dtype)
        return net

    @property
    def dtype(self):
        return getattr(self, "_dtype", np.dtype(np.float32))

    def dropout_layers(self):
        return [layer for arm in self.arms for layer in arm.layers if isinstance(layer, Dropout)]

    def freeze_dropout(self, frozen: bool = True) -> None:
        for layer in self.dropout_layers():
            layer.frozen = frozen
            layer._mask = None

    def set_rng(self, rng: np.random.Generator) -> None:
        for layer in self.dropout_layers():
            layer.rng = rng

    def switch_pattern(self) -> list:
        """Copies of every discrete choice made by the last forward pass."""
        return [st.copy() for arm in self.arms for layer in arm.layers
                if (st := layer.switch_state()) is not None]

    def _input(self, inputs: dict, modality: str) -> np.ndarray:
        if modality not in inputs:
            raise KeyError(f"{self.name}: missing modality {modality!r}")
        return np.asarray(inputs[modality], dtype=self.dtype)

    def forward(self, inputs: dict, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> None:
        raise NotImplementedError

    def loss(self, inputs, target, ignore=None, train=True, backward=True) -> float:
        scores = self.forward(inputs, train)
        res = softmax_xent_sum(scores, target, ignore)
        if backward:
            self.backward(res.grad)
        return res.loss

    def predict(self, inputs: dict, frame_id: str = "", valid=None) -> PredictionMap:
        scores = self.forward(inputs, train=False)
        return PredictionMap(scores.astype(np.float32), self.name, frame_id, valid)

    def to_checkpoint(self, seed: int = 0, parent_ids: dict | None = None, extra: dict | None = None) -> Checkpoint:
        params = {k: v.astype(np.float32) for k, v in self.parameters().items()}
        return Checkpoint(params, self.spec.to_dict(), self.spec.hyperparams.to_dict(), seed,
                          dict(parent_ids or {}), dict(extra or {}))


class SingleNet(Network):
    """One stack fed either one modality or the channel concatenation of two (early fusion)."""

    def __init__(self, spec: FusionSpec, prefix: str | None = None):
        super().__init__(spec)
        in_ch = sum(MODALITY_CHANNELS[m] for m in spec.modalities)
        if prefix is None:
            prefix = spec.modalities[0] if spec.fusion == "none" else "early"
        self.arms = [Sequential(prefix, spec.layers, in_ch)]

    @property
    def arm(self) -> Sequential:
        return self.arms[0]

    def forward(self, inputs, train=False):
        x = np.concatenate([self._input(inputs, m) for m in self.spec.modalities], axis=0)
        return self.arm.forward(x, train)

    def backward(self, grad):
        self.arm.backward(grad)


class MidNet(Network):
    """Two arms up to their final pooling layer, channel-concatenated, then shared layers."""

    def __init__(self, spec: FusionSpec):
        super().__init__(spec)
        arm_specs = split_at_final_pool(spec.layers)[0]
        a, b = spec.modalities
        self.arm_a = Sequential(a, arm_specs, MODALITY_CHANNELS[a])
        self.arm_b = Sequential(b, arm_specs, MODALITY_CHANNELS[b])
        self.shared = Sequential("shared", spec.shared_layers, self.arm_a.out_channels + self.arm_b.out_channels)
        self.arms = [self.arm_a, self.arm_b, self.shared]

    @property
    def concat_channels(self) -> int:
        return self.arm_a.out_channels + self.arm_b.out_channels

    def forward(self, inputs, train=False):
        a, b = self.spec.modalities
        fa = self.arm_a.forward(self._input(inputs, a), train)
        fb = self.arm_b.forward(self._input(inputs, b), train)
        return self.shared.forward(np.concatenate([fa, fb], axis=0), train)

    def backward(self, grad):
        g = self.shared.backward(grad)
        n = self.arm_a.out_channels
        self.arm_a.backward(g[:n])
        self.arm_b.backward(g[n:])


class LateProportionalNet(Network):
    """Two complete single-modality nets mixed by confidence; trained end to end.

    ``forward`` returns log fused probabilities, which act as scores.
    """

    def __init__(self, spec: FusionSpec):
        super().__init__(spec)
        self.nets = []
        for m in spec.modalities:
            sub = FusionSpec.create("none", [m], spec.hyperparams, layers=spec.layers)
            self.nets.append(SingleNet(sub, prefix=m))
        self.arms = [n.arm for n in self.nets]
        self._cache = None

    def astype(self, dtype):
        net = super().astype(dtype)
        for sub in net.nets:
            sub._dtype = np.dtype(dtype)
        return net

    def forward(self, inputs, train=False):
        sa = self.nets[0].forward(inputs, train)
        sb = self.nets[1].forward(inputs, train)
        self._cache = proportional_forward(sa, sb, self.spec.proportional_mode)
        return self._cache["logp"]

    def loss(self, inputs, target, ignore=None, train=True, backward=True) -> float:
        logp = self.forward(inputs, train)
        if target.shape != logp.shape[1:]:
            raise ValueError(f"target {target.shape} vs prediction {logp.shape[1:]}")
        keep = np.ones(target.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
        cls = np.where(np.asarray(target, dtype=bool), 0, 1)
        picked = np.take_along_axis(logp, cls[None], axis=0)[0]
        total = float(-picked[keep].sum(dtype=np.float64))
        if backward:
            ga, gb = proportional_backward(self._cache, target, keep)
            self.nets[0].backward(ga)
            self.nets[1].backward(gb)
        return total

    def switch_pattern(self) -> list:
        sa, sb = self._cache["scores"]
        return super().switch_pattern() + [sa.argmax(axis=0), sb.argmax(axis=0)]

    def component_maps(self, inputs: dict, frame_id: str = "") -> list:
        return [n.predict(inputs, frame_id) for n in self.nets]


class LateOverlayNet(Network):
    """Two independently trained single-modality nets; fusion has no parameters."""

    trainable = False

    def __init__(self, spec: FusionSpec, rgb_net: SingleNet | None = None, other_net: SingleNet | None = None):
        super().__init__(spec)
        self.nets = [rgb_net or SingleNet(FusionSpec.create("none", ["rgb"], spec.hyperparams, layers=spec.layers)),
                     other_net or SingleNet(FusionSpec.create("none", [spec.modalities[1]], spec.hyperparams,
                                                              layers=spec.layers))]
        self.arms = [n.arm for n in self.nets]

    def forward(self, inputs, train=False):
        raise TypeError("late overlay fusion needs a depth validity mask; use predict()")

    def predict(self, inputs: dict, frame_id: str = "", valid=None) -> PredictionMap:
        if valid is None:
            raise ValueError("late overlay fusion needs the frame's depth validity mask")
        a, b = (n.predict(inputs, frame_id) for n in self.nets)
        fused = late_overlay(a, b, valid, self.spec.overlay_mode)
        fused.source = self.name
        return fused


def apply_hyperparams(net: Network, hp: Hyperparams) -> None:
    """Set per-layer learning-rate multipliers and dropout ratios from ``hp``."""
    spec = net.spec
    for arm in net.arms:
        specs = spec.shared_layers if arm.prefix == "shared" else spec.layers
        by_name = {s.name or s.kind: s for s in specs}
        first_conv = next((layer for layer in arm.layers if layer.kind == "conv"), None)
        for layer in arm.layers:
            base = by_name[layer.name].lr_multiplier if layer.name in by_name else 1.0
            if layer.kind == "score":
                layer.lr_mult = base * hp.final_layer_mult
            elif layer.kind == "conv":
                mult = base
                if spec.fusion == "early" and layer is first_conv:
                    mult *= hp.first_layer_mult
                if arm.prefix == "shared":
                    mult *= hp.shared_layer_mult
                layer.lr_mult = mult
            elif layer.kind == "dropout" and arm.prefix == "shared":
                layer.ratio = hp.dropout_ratio


def build_network(spec: FusionSpec) -> Network:
    """Parameters start at zero; use ``init_scratch`` or ``init_transfer`` to fill them."""
    spec.validate()
    if spec.fusion in ("none", "early"):
        net = SingleNet(spec)
    elif spec.fusion == "mid":
        net = MidNet(spec)
    elif spec.fusion == "late_proportional":
        net = LateProportionalNet(spec)
    else:
        net = LateOverlayNet(spec)
    apply_hyperparams(net, spec.hyperparams)
    return net


def init_scratch(net: Network, seed: int) -> Network:
    """He-initialised convs, sigma=0.01 score layers, zero biases."""
    rng = np.random.default_rng([seed, 1])
    for _, layer in net.param_layers():
        layer.init_gaussian(rng, 0.01 if layer.kind == "score" else None)
    return net


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = build_network(FusionSpec.from_dict(ckpt.spec))
    net.set_parameters(ckpt.params)
    return net
