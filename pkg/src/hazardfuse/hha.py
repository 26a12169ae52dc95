"""Depth to HHA encoding: horizontal disparity, height above ground, angle to gravity.

Conventions: camera frame is X right, Y down, Z forward, metres. The gravity
estimate is stored as the unit *up* axis (opposite to gravity), so a level
camera reports (0, -1, 0) and heights below the camera are negative.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LEVEL_UP = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"intrinsics must be positive: {self}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point outside image: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# Assumed Kinect 2 colour-registered intrinsics at 960x540. A corpus
# intrinsics.json overrides these.
DEFAULT_INTRINSICS = Intrinsics(fx=540.7, fy=540.7, cx=479.5, cy=269.5, width=960, height=540)


@dataclass
class DepthImage:
    depth: np.ndarray  # (H, W) millimetres, 0 = missing
    intrinsics: Intrinsics = DEFAULT_INTRINSICS

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        h, w = self.depth.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"depth {w}x{h} does not match intrinsics {self.intrinsics.width}x{self.intrinsics.height}")
        if np.any(self.depth < 0):
            raise ValueError("negative depth values")

    @property
    def shape(self):
        return self.depth.shape

    def meters(self) -> np.ndarray:
        return self.depth.astype(np.float64) / 1000.0


@dataclass
class HHAConfig:
    z_min: float = 0.5
    z_max: float = 5.0
    height_range: float = 3.0
    normal_window: int = 5
    gravity_max_iter: int = 10
    gravity_bands: tuple = (45.0, 15.0)
    min_normal_fraction: float = 0.01
    min_aligned_fraction: float = 0.4
    ground_percentile: float = 1.0
    ground_limit: float = -1.9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gravity_bands"] = list(self.gravity_bands)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HHAConfig":
        d = dict(d)
        if "gravity_bands" in d:
            d["gravity_bands"] = tuple(d["gravity_bands"])
        return cls(**d)


@dataclass
class GravityEstimate:
    direction: np.ndarray
    iterations_used: int
    aligned_fraction: float
    fallback: bool = False

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            self.direction = self.direction / n


@dataclass
class GroundEstimate:
    height: float
    clamped: bool
    raw: float


class GravityError(RuntimeError):
    pass


def validity_mask(depth: DepthImage, z_max: float = 5.0) -> np.ndarray:
    z = depth.meters()
    return (z > 0) & (z <= z_max)


def backproject(depth: DepthImage):
    """Per-pixel camera-frame points in metres, plus a validity mask (depth > 0)."""
    k = depth.intrinsics
    z = depth.meters()
    h, w = z.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    pts = np.empty((h, w, 3))
    pts[..., 0] = (u - k.cx) * z / k.fx
    pts[..., 1] = (v - k.cy) * z / k.fy
    pts[..., 2] = z
    return pts, z > 0


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window with zero padding; a is (H, W, ...)."""
    h, w = a.shape[:2]
    pad = [(r + 1, r), (r + 1, r)] + [(0, 0)] * (a.ndim - 2)
    c = np.pad(a, pad).cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]


def estimate_normals(points: np.ndarray, valid: np.ndarray, window: int = 5):
    """Least-squares plane normals over a window x window neighbourhood.

    A normal is valid when its pixel is valid and at least half the window
    holds valid points. Normals face the camera (n . p < 0).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"normal window must be odd and >= 3, got {window}")
    r = window // 2
    p = np.where(valid[..., None], points, 0.0)
    n = _box_sum(valid.astype(np.float64), r)
    s1 = _box_sum(p, r)
    outer = p[..., :, None] * p[..., None, :]
    s2 = _box_sum(outer.reshape(*p.shape[:2], 9), r).reshape(*p.shape[:2], 3, 3)
    ok = valid & (n >= 0.5 * window * window)
    normals = np.zeros_like(points)
    if not ok.any():
        return normals, ok
    cnt = n[ok][:, None]
    mean = s1[ok] / cnt
    cov = s2[ok] / cnt[..., None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    nv = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", nv, points[ok]) > 0
    nv[flip] *= -1
    normals[ok] = nv
    return normals, ok


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0))))


def estimate_gravity(normals: np.ndarray, normal_valid: np.ndarray, max_iter: int = 10,
                     bands=(45.0, 15.0), init=LEVEL_UP, min_normal_fraction: float = 0.01,
                     min_aligned_fraction: float = 0.4) -> GravityEstimate:
    """Iteratively align the up axis with the scene's parallel/perpendicular normals.

    Each round takes the normals within ``band`` degrees of parallel or
    perpendicular to the current axis and replaces it with the dominant
    eigenvector of N_par^T N_par - N_perp^T N_perp. Raises GravityError when
    too few normals exist or too few end up aligned.
    """
    total = normal_valid.size
    nv = normals[normal_valid]
    if len(nv) < max(3, min_normal_fraction * total):
        raise GravityError(f"only {len(nv)} valid normals out of {total} pixels")
    g = np.asarray(init, dtype=np.float64)
    g = g / np.linalg.norm(g)
    iters = 0
    band = bands[-1]
    for band in bands:
        for _ in range(max_iter):
            ang = np.degrees(np.arccos(np.clip(np.abs(nv @ g), 0.0, 1.0)))
            par = nv[ang < band]
            perp = nv[ang > 90.0 - band]
            m = par.T @ par - perp.T @ perp
            _, vecs = np.linalg.eigh(m)
            g_new = vecs[:, -1]
            if g_new @ g < 0:
                g_new = -g_new
            change = _angle_deg(g, g_new)
            g = g_new
            iters += 1
            if change < 0.1:
                break
    ang = np.degrees(np.arccos(np.clip(np.abs(nv @ g), 0.0, 1.0)))
    aligned = float(np.mean((ang < band) | (ang > 90.0 - band)))
    if aligned < min_aligned_fraction:
        raise GravityError(f"aligned fraction {aligned:.3f} below {min_aligned_fraction}")
    return GravityEstimate(g, iters, aligned)


def gravity_or_fallback(normals, normal_valid, config: HHAConfig | None = None,
                        init=LEVEL_UP) -> GravityEstimate:
    config = config or HHAConfig()
    try:
        return estimate_gravity(normals, normal_valid, config.gravity_max_iter, config.gravity_bands,
                                init, config.min_normal_fraction, config.min_aligned_fraction)
    except GravityError as exc:
        log.info("gravity estimation failed (%s); using initial axis", exc)
        return GravityEstimate(np.asarray(init, dtype=np.float64), 0, 0.0, fallback=True)


def estimate_ground(points: np.ndarray, valid: np.ndarray, gravity: GravityEstimate,
                    percentile: float = 1.0, limit: float = -1.9) -> GroundEstimate:
    """Ground height relative to the camera (negative = below), clamped at ``limit``."""
    if not valid.any():
        raise ValueError("no valid points for ground estimation")
    h = points[valid] @ gravity.direction
    raw = float(np.percentile(h, percentile))
    return GroundEstimate(max(raw, limit), raw < limit, raw)


def _scale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.rint((x - lo) / (hi - lo) * 255.0), 0, 255)


def encode_hha(depth: DepthImage, gravity: GravityEstimate, ground: GroundEstimate,
               config: HHAConfig | None = None, normals=None) -> np.ndarray:
    """(H, W, 3) uint8 image: disparity, height above ground, angle to the up axis.

    Pixels without a normal (but with valid depth) get angle 180 degrees.
    """
    config = config or HHAConfig()
    pts, _ = backproject(depth)
    valid = validity_mask(depth, config.z_max)
    if normals is None:
        normals, nvalid = estimate_normals(pts, pts[..., 2] > 0, config.normal_window)
    else:
        normals, nvalid = normals
    z = np.where(valid, pts[..., 2], 1.0)
    out = np.zeros(z.shape + (3,))
    out[..., 0] = _scale(1.0 / z, 1.0 / config.z_max, 1.0 / config.z_min)
    out[..., 1] = _scale(pts @ gravity.direction - ground.height, 0.0, config.height_range)
    cosang = np.clip(normals @ gravity.direction, -1.0, 1.0)
    angle = np.where(nvalid, np.degrees(np.arccos(cosang)), 180.0)
    out[..., 2] = _scale(angle, 0.0, 180.0)
    out[~valid] = 0
    return out.astype(np.uint8)


@dataclass
class HHAResult:
    image: np.ndarray
    gravity: GravityEstimate
    ground: GroundEstimate
    config: HHAConfig = field(default_factory=HHAConfig)

    def sidecar(self) -> dict:
        return {
            "schema": "hazardfuse.hha/1",
            "gravity": [float(x) for x in self.gravity.direction],
            "gravity_iterations": self.gravity.iterations_used,
            "aligned_fraction": self.gravity.aligned_fraction,
            "gravity_fallback": self.gravity.fallback,
            "ground_height": self.ground.height,
            "ground_raw": self.ground.raw,
            "ground_clamped": self.ground.clamped,
            "config": self.config.to_dict(),
        }


def encode_frame(depth: DepthImage, config: HHAConfig | None = None) -> HHAResult:
    """Full pipeline for one frame, with the level-camera fallback for gravity."""
    config = config or HHAConfig()
    pts, valid = backproject(depth)
    normals, nvalid = estimate_normals(pts, valid, config.normal_window)
    gravity = gravity_or_fallback(normals, nvalid, config)
    in_range = valid & (pts[..., 2] <= config.z_max)
    if not in_range.any():
        ground = GroundEstimate(config.ground_limit, False, config.ground_limit)
    else:
        ground = estimate_ground(pts, in_range, gravity, config.ground_percentile, config.ground_limit)
    image = encode_hha(depth, gravity, ground, config, normals=(normals, nvalid))
    return HHAResult(image, gravity, ground, config)
