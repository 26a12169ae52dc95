"""On-disk corpus layout and frame container.

    root/intrinsics.json                  optional, {fx, fy, cx, cy, width, height}
    root/<floor>/intrinsics.json          optional per-floor override
    root/<floor>/rgb/<id>.png             8-bit colour
    root/<floor>/depth/<id>.png           16-bit depth, millimetres, 0 = missing
    root/<floor>/labels/<id>.json         {frame_id, polygons: [{class, vertices}]}
    root/<floor>/hha/<id>.png             optional, 8-bit 3-channel
    root/<floor>/meta/<id>.json           optional, e.g. synthetic ground truth

Label parsing goes through ``label_reader`` so another annotation format can
be plugged in without touching the rest of the loader.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..hha import DEFAULT_INTRINSICS, DepthImage, Intrinsics
from .raster import PolygonLabel, instance_masks, rasterize

log = logging.getLogger(__name__)


@dataclass
class LabeledFrame:
    frame_id: str
    floor: str
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: DepthImage | None = None
    hha: np.ndarray | None = None
    polygons: list = field(default_factory=list)
    label_error: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.depth is not None and self.depth.shape != self.rgb.shape[:2]:
            raise ValueError(f"{self.key}: colour {self.rgb.shape[:2]} vs depth {self.depth.shape}")

    @property
    def key(self) -> str:
        return f"{self.floor}/{self.frame_id}"

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def trip_mask(self) -> np.ndarray:
        return rasterize(self.polygons, self.width, self.height)

    def objects(self) -> list:
        return instance_masks(self.polygons, self.width, self.height)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def read_label_json(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [PolygonLabel.from_dict(p) for p in doc["polygons"]]


def write_label_json(path, frame_id: str, polygons) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"frame_id": frame_id, "polygons": [p.to_dict() for p in polygons]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _intrinsics_for(floor_dir: Path, root: Path, shape) -> Intrinsics:
    for p in (floor_dir / "intrinsics.json", root / "intrinsics.json"):
        if p.exists():
            return Intrinsics.from_dict(json.loads(p.read_text()))
    h, w = shape
    d = DEFAULT_INTRINSICS
    if (w, h) == (d.width, d.height):
        return d
    sx, sy = w / d.width, h / d.height
    return Intrinsics(d.fx * sx, d.fy * sy, (d.cx + 0.5) * sx - 0.5, (d.cy + 0.5) * sy - 0.5, w, h)


FLOOR_ORDER = ("gnd", "2nd", "4th", "7th")


def floor_sort_key(floor: str):
    return (0, FLOOR_ORDER.index(floor), "") if floor in FLOOR_ORDER else (1, 0, floor)


def load_corpus(root, label_reader=read_label_json) -> list:
    root = Path(root)
    floors = sorted((p for p in root.iterdir() if (p / "rgb").is_dir()), key=lambda p: floor_sort_key(p.name)) \
        if root.is_dir() else []
    frames = []
    for floor_dir in floors:
        for rgb_path in sorted((floor_dir / "rgb").glob("*.png")):
            fid = rgb_path.stem
            rgb = read_png(rgb_path)
            if rgb.ndim == 2:
                rgb = np.repeat(rgb[..., None], 3, axis=2)
            rgb = rgb[..., :3].astype(np.uint8)
            depth = None
            dpath = floor_dir / "depth" / f"{fid}.png"
            if dpath.exists():
                raw = read_png(dpath).astype(np.uint16)
                depth = DepthImage(raw, _intrinsics_for(floor_dir, root, raw.shape))
            hha = None
            hpath = floor_dir / "hha" / f"{fid}.png"
            if hpath.exists():
                hha = read_png(hpath)
            polygons, err = [], None
            lpath = floor_dir / "labels" / f"{fid}.json"
            if lpath.exists():
                try:
                    polygons = label_reader(lpath)
                except (ValueError, KeyError, TypeError) as exc:
                    err = f"{type(exc).__name__}: {exc}"
                    log.warning("%s/%s: malformed labels (%s)", floor_dir.name, fid, err)
            meta = {}
            mpath = floor_dir / "meta" / f"{fid}.json"
            if mpath.exists():
                meta = json.loads(mpath.read_text())
            frames.append(LabeledFrame(fid, floor_dir.name, rgb, depth, hha, polygons, err, meta))
    if not frames:
        raise FileNotFoundError(f"empty corpus at {root}")
    return frames


def save_frame(root, frame: LabeledFrame) -> None:
    d = Path(root) / frame.floor
    write_png(d / "rgb" / f"{frame.frame_id}.png", frame.rgb)
    if frame.depth is not None:
        write_png(d / "depth" / f"{frame.frame_id}.png", frame.depth.depth.astype(np.uint16))
        ipath = d / "intrinsics.json"
        if not ipath.exists():
            ipath.write_text(json.dumps(frame.depth.intrinsics.to_dict(), indent=1, sort_keys=True))
    if frame.hha is not None:
        write_png(d / "hha" / f"{frame.frame_id}.png", frame.hha)
    write_label_json(d / "labels" / f"{frame.frame_id}.json", frame.frame_id, frame.polygons)
    if frame.meta:
        mpath = d / "meta" / f"{frame.frame_id}.json"
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(frame.meta, indent=1, sort_keys=True))
