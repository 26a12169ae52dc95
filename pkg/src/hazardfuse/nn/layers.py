from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops

LAYER_KINDS = ("conv", "relu", "maxpool", "dropout", "bilinear_upsample", "score")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    kernel: int = 3
    stride: int = 1
    pad: int | None = None
    out_channels: int = 0
    lr_multiplier: float = 1.0
    dropout_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "score"):
            if self.kernel < 1 or self.out_channels < 1:
                raise ValueError(f"{self.name or self.kind}: conv needs kernel >= 1 and out_channels >= 1")
        if self.lr_multiplier < 0:
            raise ValueError(f"{self.name or self.kind}: lr_multiplier must be >= 0")
        if self.kind == "dropout" and not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError(f"{self.name or self.kind}: dropout_ratio must be in [0, 1)")
        if self.pad is None:
            self.pad = self.kernel // 2 if self.kind in ("conv", "score") else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


class Layer:
    kind = ""
    has_params = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.lr_mult = 1.0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def switch_state(self):
        """Discrete choices made by the last forward pass (ReLU signs, pooling winners), if any."""
        return None

    def out_channels(self, in_channels: int) -> int:
        return in_channels


class Conv2d(Layer):
    has_params = True

    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, pad=1, lr_mult=1.0, kind="conv"):
        super().__init__(name)
        self.kind = kind
        self.stride, self.pad, self.lr_mult = stride, pad, lr_mult
        self.params = {
            "w": np.zeros((out_ch, in_ch, kernel, kernel), dtype=np.float32),
            "b": np.zeros(out_ch, dtype=np.float32),
        }
        self._x = None

    def init_gaussian(self, rng: np.random.Generator, std: float | None = None):
        """Zero-mean Gaussian weights (He scaling unless ``std`` is given), zero bias."""
        w = self.params["w"]
        if std is None:
            std = np.sqrt(2.0 / np.prod(w.shape[1:]))
        self.params["w"] = (rng.standard_normal(w.shape) * std).astype(w.dtype)
        self.params["b"] = np.zeros_like(self.params["b"])

    def forward(self, x, train=False):
        self._x = x
        return ops.conv2d(x, self.params["w"], self.params["b"], self.stride, self.pad)

    def backward(self, grad):
        dx, dw, db = ops.conv2d_backward(grad, self._x, self.params["w"], self.stride, self.pad)
        self.grads = {"w": dw, "b": db}
        return dx

    def out_channels(self, in_channels):
        return self.params["w"].shape[0]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask

    def switch_state(self):
        return self._mask


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, kernel=2, stride=2):
        super().__init__(name)
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._arg = ops.maxpool(x, self.kernel, self.stride)
        return out

    def backward(self, grad):
        return ops.maxpool_backward(grad, self._arg, self._shape)

    def switch_state(self):
        return self._arg


class Dropout(Layer):
    """Inverted dropout. Identity at test time.

    With ``frozen`` set, the first training-mode mask is kept and reused, which
    makes the layer a fixed linear map for finite-difference checks.
    """

    kind = "dropout"

    def __init__(self, name, ratio=0.5):
        super().__init__(name)
        self.ratio = ratio
        self.rng = np.random.default_rng(0)
        self.frozen = False
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.ratio == 0.0:
            self._mask = None
            return x
        if not (self.frozen and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.ratio
            self._mask = (keep / (1.0 - self.ratio)).astype(x.dtype)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Upsample(Layer):
    kind = "bilinear_upsample"

    def __init__(self, name, factor=4):
        super().__init__(name)
        if factor < 1:
            raise ValueError("upsample factor must be >= 1")
        self.factor = factor

    def forward(self, x, train=False):
        return ops.bilinear_upsample(x, self.factor)

    def backward(self, grad):
        return ops.bilinear_upsample_backward(grad, self.factor)


def build_layer(spec: LayerSpec, in_channels: int) -> Layer:
    name = spec.name or spec.kind
    if spec.kind in ("conv", "score"):
        return Conv2d(name, in_channels, spec.out_channels, spec.kernel, spec.stride, spec.pad,
                      spec.lr_multiplier, kind=spec.kind)
    if spec.kind == "relu":
        return ReLU(name)
    if spec.kind == "maxpool":
        return MaxPool(name, spec.kernel, spec.stride)
    if spec.kind == "dropout":
        return Dropout(name, spec.dropout_ratio)
    return Upsample(name, spec.stride)
