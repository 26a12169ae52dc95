"""Gradient checks over every layer kind and every trainable fusion topology."""
from __future__ import annotations

import numpy as np

from .fusion import FusionSpec, new_network
from .nn import LayerSpec, build_layer, gradcheck, gradcheck_layer

LAYER_CASES = (
    ("conv", LayerSpec("conv", "conv", kernel=3, out_channels=4), 3),
    ("score", LayerSpec("score", "score", kernel=1, out_channels=2), 4),
    ("relu", LayerSpec("relu", "relu"), 3),
    ("maxpool", LayerSpec("maxpool", "pool", kernel=2, stride=2), 3),
    ("dropout", LayerSpec("dropout", "drop", dropout_ratio=0.5), 3),
    ("bilinear_upsample", LayerSpec("bilinear_upsample", "up", stride=4), 4),
)

TOPOLOGIES = (
    ("none", ["rgb"], {}),
    ("early", ["rgb", "hha"], {}),
    ("mid", ["rgb", "hha"], {}),
    ("late_proportional", ["rgb", "hha"], {"proportional_mode": "pixel"}),
    ("late_proportional", ["rgb", "hha"], {"proportional_mode": "image"}),
)


def gradcheck_suite(n_samples: int = 200, seed: int = 0, size=(16, 24), epsilon: float = 1e-4) -> list:
    """Returns ``[(case name, GradcheckResult), ...]`` for layers, then networks."""
    rng = np.random.default_rng([seed, 7])
    h, w = size
    results = []
    for name, spec, ch in LAYER_CASES:
        layer = build_layer(spec, ch)
        if layer.has_params:
            layer.init_gaussian(rng, 0.5)
            layer.params["b"] = rng.standard_normal(layer.params["b"].shape)
        if hasattr(layer, "rng"):
            layer.rng = np.random.default_rng([seed, 3])
        x = rng.standard_normal((ch, h // 2, w // 2) if name == "bilinear_upsample" else (ch, h, w))
        results.append((f"layer:{name}", gradcheck_layer(layer, x, epsilon, n_samples, seed)))
    target = rng.random((h, w)) < 0.25
    inputs = {m: rng.standard_normal((3, h, w)) for m in ("rgb", "hha")}
    for fusion, mods, kw in TOPOLOGIES:
        spec = FusionSpec.create(fusion, mods, **kw)
        net, _ = new_network(spec)
        for _, layer in net.param_layers():
            if layer.kind == "score":
                layer.init_gaussian(rng, 0.3)
        net.set_rng(np.random.default_rng([seed, 3]))
        label = f"net:{spec.name}" + (f"[{kw['proportional_mode']}]" if kw else "")
        results.append((label, gradcheck(net, {m: inputs[m] for m in mods}, target, epsilon, n_samples, seed)))
    return results
