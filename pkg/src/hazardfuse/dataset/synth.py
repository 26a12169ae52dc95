"""Seeded synthetic RGB-D corpus: a ray-cast floor scene seen from a tripod camera.

The object palette is built so that neither modality sees every hazard:

* ``strip``: flat, strongly coloured sheets/hoses a few millimetres high,
  below depth noise, so they only show up in colour.
* ``camo``: low boxes painted exactly like the floor, only visible in depth.
* ``crate``: coloured boxes, either lying (trip) or standing (not a trip).
* ``pillar``: tall grey cylinders, never a trip.

An object is a trip hazard when its top is below ``trip_height`` above the
floor. Depth beyond ``z_max`` is reported missing, as is a random speckle.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..hha import DepthImage, Intrinsics
from .corpus import LabeledFrame
from .raster import PolygonLabel, clip_to_rect, polygon_mask

FLOOR_COLOURS = ((128, 126, 118), (112, 116, 126), (140, 130, 112), (120, 120, 120),
                 (104, 110, 100), (136, 134, 130))
STRIP_COLOURS = ((235, 120, 20), (230, 210, 30), (30, 90, 220), (210, 40, 40), (40, 190, 80))
CRATE_COLOURS = ((150, 100, 55), (175, 125, 70), (125, 80, 45))
PILLAR_COLOUR = (185, 185, 190)
WALL_COLOUR = (200, 196, 188)


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 96
    hfov_deg: float = 70.0
    camera_height: float = 1.8
    pitch_deg: tuple = (22.0, 30.0)
    roll_deg: tuple = (-3.0, 3.0)
    groups: int = 4
    group_prefix: str = "scene"
    label_rule: str = "trip"  # "trip" or "object" (every non-wall object)
    trip_height: float = 0.5
    z_max: float = 5.0
    noise: bool = True
    depth_noise_mm: float = 5.0
    depth_noise_rel: float = 0.01
    speckle: float = 0.02
    colour_noise: float = 6.0
    strips: tuple = (1, 2)
    camos: tuple = (1, 2)
    crates: tuple = (1, 2)
    pillars: tuple = (0, 1)
    strip_height: float = 0.005

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def intrinsics(self) -> Intrinsics:
        f = self.width / 2.0 / math.tan(math.radians(self.hfov_deg / 2.0))
        return Intrinsics(f, f, self.width / 2.0 - 0.5, self.height / 2.0 - 0.5, self.width, self.height)


@dataclass
class Camera:
    height: float = 1.8
    pitch_deg: float = 25.0
    roll_deg: float = 0.0

    def rotation(self) -> np.ndarray:
        """Rows are the camera X (right), Y (down), Z (forward) axes in world (Y up)."""
        p, r = math.radians(self.pitch_deg), math.radians(self.roll_deg)
        x = np.array([-1.0, 0.0, 0.0])
        y = np.array([0.0, -math.cos(p), -math.sin(p)])
        z = np.array([0.0, -math.sin(p), math.cos(p)])
        xr = math.cos(r) * x + math.sin(r) * y
        yr = -math.sin(r) * x + math.cos(r) * y
        return np.stack([xr, yr, z])

    @property
    def centre(self) -> np.ndarray:
        return np.array([0.0, self.height, 0.0])

    def up(self) -> np.ndarray:
        return self.rotation() @ np.array([0.0, 1.0, 0.0])

    def project(self, pts_world: np.ndarray, k: Intrinsics) -> np.ndarray:
        """World points -> continuous pixel coords (pixel i spans [i, i+1))."""
        pc = (pts_world - self.centre) @ self.rotation().T
        z = np.maximum(pc[:, 2], 1e-6)
        return np.stack([k.fx * pc[:, 0] / z + k.cx + 0.5, k.fy * pc[:, 1] / z + k.cy + 0.5], axis=1)


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class Box:
    x: float
    z: float
    size: tuple  # (sx, sy, sz); sy is the vertical extent
    yaw: float = 0.0
    colour: tuple = CRATE_COLOURS[0]
    kind: str = "crate"

    @property
    def top(self) -> float:
        return self.size[1]

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.size[0], self.size[2])

    def corners(self) -> np.ndarray:
        sx, sy, sz = self.size
        loc = np.array([[a * sx / 2, b * sy, c * sz / 2] for a in (-1, 1) for b in (0, 1) for c in (-1, 1)])
        return loc @ _rot_y(self.yaw).T + np.array([self.x, 0.0, self.z])

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        rot = _rot_y(self.yaw)
        ol = (o - np.array([self.x, 0.0, self.z])) @ rot
        dl = d @ rot
        sx, sy, sz = self.size
        lo = np.array([-sx / 2, 0.0, -sz / 2])
        hi = np.array([sx / 2, sy, sz / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - ol) / dl
            t2 = (hi - ol) / dl
        tn = np.nanmax(np.minimum(t1, t2), axis=-1)
        tf = np.nanmin(np.maximum(t1, t2), axis=-1)
        return np.where((tn <= tf) & (tn > 0), tn, np.inf)

    def to_dict(self) -> dict:
        return {"type": "box", "x": self.x, "z": self.z, "size": list(self.size), "yaw": self.yaw,
                "colour": list(self.colour), "kind": self.kind}


@dataclass
class Cylinder:
    x: float
    z: float
    r: float
    h: float
    colour: tuple = PILLAR_COLOUR
    kind: str = "pillar"

    @property
    def top(self) -> float:
        return self.h

    @property
    def radius(self) -> float:
        return self.r

    def corners(self) -> np.ndarray:
        a = np.linspace(0, 2 * math.pi, 16, endpoint=False)
        ring = np.stack([self.x + self.r * np.cos(a), np.zeros_like(a), self.z + self.r * np.sin(a)], 1)
        return np.concatenate([ring, ring + np.array([0.0, self.h, 0.0])])

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        ox, oz = o[0] - self.x, o[2] - self.z
        dx, dz, dy = d[..., 0], d[..., 2], d[..., 1]
        a = dx * dx + dz * dz
        b = 2 * (ox * dx + oz * dz)
        c = ox * ox + oz * oz - self.r * self.r
        disc = b * b - 4 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
            ys = o[1] + ts * dy
            side = np.where((disc >= 0) & (ts > 0) & (ys >= 0) & (ys <= self.h), ts, np.inf)
            tc = (self.h - o[1]) / dy
            rx, rz = ox + tc * dx, oz + tc * dz
            cap = np.where((tc > 0) & (rx * rx + rz * rz <= self.r * self.r), tc, np.inf)
        return np.minimum(side, cap)

    def to_dict(self) -> dict:
        return {"type": "cylinder", "x": self.x, "z": self.z, "r": self.r, "h": self.h,
                "colour": list(self.colour), "kind": self.kind}


@dataclass
class Scene:
    camera: Camera
    floor_colour: tuple
    objects: list = field(default_factory=list)
    wall_z: float = 8.0


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (H, W) metres, inf where nothing is hit
    ids: np.ndarray  # (H, W) object index, -1 floor, -2 wall
    albedo: np.ndarray  # (H, W, 3) noise-free colour


def render(scene: Scene, k: Intrinsics) -> RenderBuffers:
    cam = scene.camera
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    dc = np.stack(np.broadcast_arrays((u[None, :] - k.cx) / k.fx, (v[:, None] - k.cy) / k.fy,
                                      np.ones((k.height, k.width))), axis=-1)
    dw = dc @ cam.rotation()  # camera z component is 1, so t is the z-depth
    o = cam.centre
    with np.errstate(divide="ignore"):
        t_floor = np.where(dw[..., 1] < 0, -o[1] / dw[..., 1], np.inf)
        t_wall = np.where(dw[..., 2] > 0, (scene.wall_z - o[2]) / dw[..., 2], np.inf)
    depth = np.minimum(t_floor, t_wall)
    ids = np.where(t_floor <= t_wall, -1, -2)
    for i, obj in enumerate(scene.objects):
        t = obj.intersect(o, dw)
        closer = t < depth
        depth[closer] = t[closer]
        ids[closer] = i
    palette = [np.array(obj.colour, dtype=np.float64) for obj in scene.objects]
    albedo = np.empty((k.height, k.width, 3))
    albedo[ids == -1] = scene.floor_colour
    albedo[ids == -2] = WALL_COLOUR
    for i, col in enumerate(palette):
        albedo[ids == i] = col
    return RenderBuffers(depth, ids, albedo)


def is_trip(obj, trip_height: float = 0.5) -> bool:
    return obj.top < trip_height


def object_polygon(obj, cam: Camera, k: Intrinsics) -> list:
    from scipy.spatial import ConvexHull

    pts = cam.project(obj.corners(), k)
    hull = ConvexHull(pts)
    return clip_to_rect([tuple(pts[i]) for i in hull.vertices], k.width, k.height)


def _place(rng, existing, radius, zr, k: Intrinsics, hfov_deg: float):
    for _ in range(50):
        z = rng.uniform(*zr)
        half = z * math.tan(math.radians(hfov_deg / 2.0)) * 0.8
        x = rng.uniform(-half, half)
        if all(math.hypot(x - ox, z - oz) > radius + orad + 0.15 for ox, oz, orad in existing):
            existing.append((x, z, radius))
            return x, z
    return None


def random_scene(rng: np.random.Generator, config: SynthConfig, floor_colour) -> Scene:
    cam = Camera(config.camera_height, rng.uniform(*config.pitch_deg), rng.uniform(*config.roll_deg))
    k = config.intrinsics()
    placed, objs = [], []

    def count(rng_range):
        return int(rng.integers(rng_range[0], rng_range[1] + 1))

    for _ in range(count(config.strips)):
        size = (rng.uniform(0.8, 1.8), config.strip_height, rng.uniform(0.15, 0.3))
        pos = _place(rng, placed, 0.5 * math.hypot(size[0], size[2]), (2.0, 6.5), k, config.hfov_deg)
        if pos:
            colour = STRIP_COLOURS[rng.integers(len(STRIP_COLOURS))]
            objs.append(Box(pos[0], pos[1], size, rng.uniform(0, math.pi), colour, "strip"))
    for _ in range(count(config.camos)):
        size = (rng.uniform(0.4, 0.9), rng.uniform(0.15, 0.4), rng.uniform(0.4, 0.9))
        pos = _place(rng, placed, 0.5 * math.hypot(size[0], size[2]), (2.0, 4.5), k, config.hfov_deg)
        if pos:
            objs.append(Box(pos[0], pos[1], size, rng.uniform(0, math.pi), tuple(floor_colour), "camo"))
    for _ in range(count(config.crates)):
        long_side, short_side = rng.uniform(1.2, 1.9), rng.uniform(0.25, 0.4)
        depth_side = rng.uniform(0.4, 0.7)
        lying = rng.random() < 0.5
        size = (long_side, short_side, depth_side) if lying else (short_side + 0.2, long_side, depth_side)
        pos = _place(rng, placed, 0.5 * math.hypot(size[0], size[2]), (2.2, 6.0), k, config.hfov_deg)
        if pos:
            colour = CRATE_COLOURS[rng.integers(len(CRATE_COLOURS))]
            objs.append(Box(pos[0], pos[1], size, rng.uniform(0, math.pi), colour, "crate"))
    for _ in range(count(config.pillars)):
        r = rng.uniform(0.15, 0.3)
        pos = _place(rng, placed, r, (2.5, 6.0), k, config.hfov_deg)
        if pos:
            objs.append(Cylinder(pos[0], pos[1], r, 2.6))
    return Scene(cam, tuple(floor_colour), objs, wall_z=rng.uniform(6.5, 9.0))


def _labelled(obj, config: SynthConfig) -> bool:
    return is_trip(obj, config.trip_height) if config.label_rule == "trip" else True


def render_frame(scene: Scene, config: SynthConfig, rng: np.random.Generator,
                 frame_id: str = "0000", floor: str = "scene0") -> LabeledFrame:
    """Render a scene into a labelled frame.

    Labelled objects whose polygon is mostly hidden behind other objects are
    removed from the scene before the final render.
    """
    k = config.intrinsics()
    for _ in range(5):
        buf = render(scene, k)
        keep, polys = [], []
        for i, obj in enumerate(scene.objects):
            if not _labelled(obj, config):
                keep.append(obj)
                continue
            verts = object_polygon(obj, scene.camera, k)
            mask = polygon_mask(verts, k.width, k.height) if len(verts) >= 3 else None
            if mask is None or mask.sum() < 3 or np.mean(buf.ids[mask] == i) < 0.5:
                continue
            keep.append(obj)
            polys.append(PolygonLabel(verts))
        if len(keep) == len(scene.objects):
            break
        scene = Scene(scene.camera, scene.floor_colour, keep, scene.wall_z)
    rgb = buf.albedo
    z = buf.depth.copy()
    if config.noise:
        rgb = rgb + rng.normal(0.0, config.colour_noise, rgb.shape)
        finite = np.isfinite(z)
        sigma = config.depth_noise_mm / 1000.0 + config.depth_noise_rel * np.where(finite, z, 0.0)
        z = np.where(finite, z + rng.normal(0.0, 1.0, z.shape) * sigma, z)
        z[rng.random(z.shape) < config.speckle] = 0.0
    z[~np.isfinite(z) | (z > config.z_max)] = 0.0
    depth_mm = np.rint(np.clip(z, 0, None) * 1000.0).astype(np.uint16)
    meta = {
        "up": [float(x) for x in scene.camera.up()],
        "ground": -scene.camera.height,
        "pitch_deg": scene.camera.pitch_deg,
        "roll_deg": scene.camera.roll_deg,
        "floor_colour": [float(c) for c in scene.floor_colour],
        "objects": [dict(o.to_dict(), trip=is_trip(o, config.trip_height)) for o in scene.objects],
        "label_rule": config.label_rule,
    }
    return LabeledFrame(frame_id, floor, np.clip(np.rint(rgb), 0, 255).astype(np.uint8),
                        DepthImage(depth_mm, k), None, polys, None, meta)


def synth_generate(seed: int, n_frames: int, config: SynthConfig | None = None) -> list:
    """Frame i belongs to scene group i % groups; each frame has its own seeded stream."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    config = config or SynthConfig()
    frames = []
    for i in range(n_frames):
        rng = np.random.default_rng([seed, i])
        g = i % config.groups
        base = np.array(FLOOR_COLOURS[g % len(FLOOR_COLOURS)], dtype=np.float64)
        floor_colour = tuple(float(c) for c in np.clip(base + rng.uniform(-6, 6, 3), 0, 255))
        scene = random_scene(rng, config, floor_colour)
        frames.append(render_frame(scene, config, rng, f"{i:04d}", f"{config.group_prefix}{g}"))
    return frames
