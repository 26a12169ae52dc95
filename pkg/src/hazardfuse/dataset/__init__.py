from .corpus import LabeledFrame, load_corpus, read_png, save_frame, write_png
from .folds import Fold, FoldPlan, make_folds
from .raster import PolygonLabel, clip_to_rect, instance_masks, polygon_mask, rasterize
from .synth import SynthConfig, synth_generate

__all__ = [
    "LabeledFrame", "load_corpus", "read_png", "save_frame", "write_png",
    "Fold", "FoldPlan", "make_folds",
    "PolygonLabel", "clip_to_rect", "instance_masks", "polygon_mask", "rasterize",
    "SynthConfig", "synth_generate",
]
