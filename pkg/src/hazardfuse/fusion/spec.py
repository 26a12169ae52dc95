from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..nn.layers import LayerSpec

FUSIONS = ("none", "early", "mid", "late_overlay", "late_proportional")
MODALITIES = ("rgb", "depth", "hha")
# Raw depth is replicated to three channels so every modality can start
# from a three-channel parent network.
MODALITY_CHANNELS = {"rgb": 3, "depth": 3, "hha": 3}

# Desk-scale learning rates for the two-point grid. They play the role of the
# two fixed rates searched over at full scale, where the summed per-pixel loss
# of a 540x960 image sets a very different scale.
LR_GRID = (3e-6, 1e-6)


@dataclass
class Hyperparams:
    base_lr: float = 3e-6
    final_layer_mult: float = 5.0
    first_layer_mult: float = 1.0
    shared_layer_mult: float = 1.0
    dropout_ratio: float = 0.5
    momentum: float = 0.99
    bias_lr_factor: float = 2.0
    max_iterations: int = 500
    val_every: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("final_layer_mult", "first_layer_mult", "shared_layer_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError("dropout_ratio must be in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def toy_fcn_layers() -> list:
    """conv3x3x16-relu-pool-conv3x3x32-relu-pool-conv3x3x32-relu-dropout-score1x1-upsample x4."""
    return [
        LayerSpec("conv", "conv1", kernel=3, out_channels=16),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", kernel=2, stride=2),
        LayerSpec("conv", "conv2", kernel=3, out_channels=32),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", kernel=2, stride=2),
        LayerSpec("conv", "fc", kernel=3, out_channels=32),
        LayerSpec("relu", "relu3"),
        LayerSpec("dropout", "drop", dropout_ratio=0.5),
        LayerSpec("score", "score", kernel=1, out_channels=2),
        LayerSpec("bilinear_upsample", "up", stride=4),
    ]


def split_at_final_pool(layers: list):
    last = max(i for i, spec in enumerate(layers) if spec.kind == "maxpool")
    return layers[:last + 1], layers[last + 1:]


@dataclass
class FusionSpec:
    fusion: str = "none"
    modalities: list = field(default_factory=lambda: ["rgb"])
    layers: list = field(default_factory=toy_fcn_layers)
    shared_layers: list = field(default_factory=list)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    proportional_mode: str = "pixel"  # or "image"
    overlay_mode: str = "scores"  # or "hard"

    def __post_init__(self):
        self.modalities = list(self.modalities)
        self.validate()

    @classmethod
    def create(cls, fusion: str, modalities, hyperparams: Hyperparams | None = None, **kw) -> "FusionSpec":
        layers = kw.pop("layers", None) or toy_fcn_layers()
        shared = kw.pop("shared_layers", None)
        if fusion == "mid" and not shared:
            layers, shared = split_at_final_pool(layers)
        return cls(fusion, list(modalities), layers, shared or [], hyperparams or Hyperparams(), **kw)

    @property
    def name(self) -> str:
        return f"{self.fusion}/{'-'.join(self.modalities)}"

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
        if self.fusion == "none":
            if len(self.modalities) != 1:
                raise ValueError("fusion 'none' takes exactly 1 modality")
        else:
            if len(self.modalities) != 2:
                raise ValueError(f"fusion {self.fusion!r} takes exactly 2 modalities")
            if self.modalities[0] != "rgb" or self.modalities[1] == "rgb":
                raise ValueError("fused modalities must be rgb followed by depth or hha")
        if self.fusion == "mid":
            if not self.shared_layers:
                raise ValueError("mid fusion needs a nonempty shared layer list")
            if not any(s.kind == "maxpool" for s in self.layers):
                raise ValueError("mid fusion arms must end at a pooling layer")
        if self.proportional_mode not in ("pixel", "image"):
            raise ValueError("proportional_mode must be 'pixel' or 'image'")
        if self.overlay_mode not in ("scores", "hard"):
            raise ValueError("overlay_mode must be 'scores' or 'hard'")

    def to_dict(self) -> dict:
        return {
            "schema": "hazardfuse.fusion_spec/1",
            "fusion": self.fusion,
            "modalities": list(self.modalities),
            "layers": [s.to_dict() for s in self.layers],
            "shared_layers": [s.to_dict() for s in self.shared_layers],
            "hyperparams": self.hyperparams.to_dict(),
            "proportional_mode": self.proportional_mode,
            "overlay_mode": self.overlay_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        hp = Hyperparams.from_dict(d.get("hyperparams", {}))
        extra = {k: d[k] for k in ("proportional_mode", "overlay_mode") if k in d}
        layers = [LayerSpec.from_dict(s) for s in d["layers"]] if d.get("layers") else None
        shared = [LayerSpec.from_dict(s) for s in d["shared_layers"]] if d.get("shared_layers") else None
        return cls.create(d["fusion"], d["modalities"], hp, layers=layers, shared_layers=shared, **extra)

    def with_hyperparams(self, hp: Hyperparams) -> "FusionSpec":
        return replace(self, hyperparams=hp)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# The eleven approaches compared in the evaluation table, in its row order.
TABLE_APPROACHES = (
    ("none", ("depth",)),
    ("none", ("hha",)),
    ("none", ("rgb",)),
    ("early", ("rgb", "depth")),
    ("early", ("rgb", "hha")),
    ("late_overlay", ("rgb", "depth")),
    ("late_overlay", ("rgb", "hha")),
    ("mid", ("rgb", "depth")),
    ("mid", ("rgb", "hha")),
    ("late_proportional", ("rgb", "depth")),
    ("late_proportional", ("rgb", "hha")),
)


def default_grid(fusion: str, lrs=LR_GRID) -> dict:
    lrs = list(lrs)
    if fusion in ("none", "late_proportional"):
        return {"base_lr": lrs, "final_layer_mult": [5.0, 10.0]}
    if fusion == "early":
        return {"base_lr": lrs, "first_layer_mult": [4.0, 10.0], "final_layer_mult": [5.0]}
    if fusion == "mid":
        return {"base_lr": lrs, "final_layer_mult": [5.0, 10.0], "shared_layer_mult": [2.0, 5.0],
                "dropout_ratio": [0.5, 0.75]}
    raise ValueError(f"fusion {fusion!r} has no trainable parameters to search")


def enumerate_grid(grid: dict, base: Hyperparams) -> list:
    """Cartesian product of the grid, in key order then value order."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("hyperparameter grid is empty")
    keys = list(grid)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]
