import math

import numpy as np
import pytest

from hazardfuse.dataset import SynthConfig, synth_generate
from hazardfuse.dataset.synth import Camera, Scene, render
from hazardfuse.hha import (
    DepthImage,
    GravityError,
    GravityEstimate,
    GroundEstimate,
    HHAConfig,
    Intrinsics,
    backproject,
    encode_frame,
    encode_hha,
    estimate_gravity,
    estimate_ground,
    estimate_normals,
    gravity_or_fallback,
    validity_mask,
)

K = Intrinsics(80.0, 80.0, 47.5, 31.5, 96, 64)


def angle_deg(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return math.degrees(math.acos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1)))


def scene_depth(pitch=0.0, roll=0.0, wall_z=6.0, height=1.8, k=K):
    cam = Camera(height, pitch, roll)
    z = render(Scene(cam, (120, 120, 120), [], wall_z), k).depth
    z[~np.isfinite(z) | (z > 5.0)] = 0.0
    return DepthImage(np.rint(z * 1000).astype(np.uint16), k), cam


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)


def test_backproject_unit_cases():
    d = np.zeros((64, 96), dtype=np.uint16)
    k = Intrinsics(20.0, 20.0, 40.0, 30.0, 96, 64)
    d[30, 40] = 1000
    d[30, 60] = 1000
    pts, valid = backproject(DepthImage(d, k))
    np.testing.assert_allclose(pts[30, 40], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pts[30, 60], [1.0, 0.0, 1.0])
    assert valid.sum() == 2


def test_backproject_plane_oracle():
    depth, cam = scene_depth(pitch=20.0, wall_z=30.0)
    pts, valid = backproject(depth)
    up = cam.up()
    # the floor is the plane p . up = -1.8 in camera coordinates
    resid = pts[valid] @ up + 1.8
    assert np.max(np.abs(resid)) < 1e-3 * 3  # 0.5 mm depth rounding scaled by the ray length


def test_validity_mask_scalar_scan():
    rng = np.random.default_rng(0)
    d = rng.integers(0, 7000, (16, 16)).astype(np.uint16)
    d[0, :4] = [0, 6000, 5000, 4999]
    m = validity_mask(DepthImage(d, Intrinsics(10, 10, 8, 8, 16, 16)))
    for (i, j), v in np.ndenumerate(d):
        assert m[i, j] == (0 < v <= 5000)
    assert not validity_mask(DepthImage(np.zeros((4, 4), np.uint16), Intrinsics(1, 1, 1, 1, 4, 4))).any()


def test_normals_wall_and_floor():
    k = K
    z = np.full((64, 96), 3000, dtype=np.uint16)
    pts, valid = backproject(DepthImage(z, k))
    n, nv = estimate_normals(pts, valid, 5)
    assert nv[10:-10, 10:-10].all()
    assert max(angle_deg(v, [0, 0, -1]) for v in n[nv]) < 1.0
    depth, _ = scene_depth(pitch=0.0, wall_z=100.0)
    pts, valid = backproject(depth)
    n, nv = estimate_normals(pts, valid, 5)
    assert nv.sum() > 100
    assert max(angle_deg(v, [0, -1, 0]) for v in n[nv]) < 1.0


def test_normal_of_isolated_pixel_is_invalid():
    d = np.zeros((9, 9), dtype=np.uint16)
    d[4, 4] = 2000
    pts, valid = backproject(DepthImage(d, Intrinsics(10, 10, 4, 4, 9, 9)))
    _, nv = estimate_normals(pts, valid, 5)
    assert not nv.any()


def test_gravity_level_camera():
    depth, _ = scene_depth(pitch=0.0, wall_z=5.5)
    pts, valid = backproject(depth)
    n, nv = estimate_normals(pts, valid)
    g = estimate_gravity(n, nv)
    assert angle_deg(g.direction, [0, -1, 0]) < 1.0
    assert abs(np.linalg.norm(g.direction) - 1) < 1e-6


@pytest.mark.parametrize("pitch,roll", [(10.0, 0.0), (25.0, 3.0), (15.0, -4.0)])
def test_gravity_pitched_camera_beats_initialisation(pitch, roll):
    depth, cam = scene_depth(pitch=pitch, roll=roll, wall_z=5.0)
    pts, valid = backproject(depth)
    n, nv = estimate_normals(pts, valid)
    g = estimate_gravity(n, nv)
    err = angle_deg(g.direction, cam.up())
    assert err < 1.0
    assert err < angle_deg([0, -1, 0], cam.up())


def test_gravity_fallback_on_noise_normals():
    rng = np.random.default_rng(0)
    n = rng.standard_normal((40, 40, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    nv = np.ones((40, 40), dtype=bool)
    with pytest.raises(GravityError):
        estimate_gravity(n, nv, min_aligned_fraction=0.9)
    g = gravity_or_fallback(n, nv, HHAConfig(min_aligned_fraction=0.9))
    assert g.fallback and np.allclose(g.direction, [0, -1, 0])
    g = gravity_or_fallback(n, np.zeros((40, 40), dtype=bool))
    assert g.fallback


def test_ground_clean_noisy_and_table():
    depth, cam = scene_depth(pitch=25.0, wall_z=30.0)
    pts, valid = backproject(depth)
    grav = GravityEstimate(cam.up(), 0, 1.0)
    g = estimate_ground(pts, valid, grav)
    assert abs(g.height + 1.8) < 0.02 and not g.clamped
    noisy = pts.copy()
    idx = np.argwhere(valid)[::7]
    noisy[idx[:, 0], idx[:, 1]] -= 0.7 * cam.up()  # points 0.7 m below the floor (at -2.5 m)
    g = estimate_ground(noisy, valid, grav)
    assert g.height == -1.9 and g.clamped and g.raw < -1.9
    table = np.zeros((10, 10, 3))
    table[..., 1] = 0.75  # every point 0.75 m below the camera
    g = estimate_ground(table, np.ones((10, 10), bool), GravityEstimate([0, -1, 0], 0, 1.0))
    assert abs(g.height + 0.75) < 1e-12


def test_encoding_scalar_mappings():
    k = Intrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
    d = np.array([[500, 5000, 1000, 0]] * 4, dtype=np.uint16)
    depth = DepthImage(d, k)
    img = encode_hha(depth, GravityEstimate([0, -1, 0], 0, 1.0), GroundEstimate(-1.8, False, -1.8))
    assert img[0, 0, 0] == 255
    assert img[0, 1, 0] == 0
    assert img[0, 2, 0] == round((1.0 - 0.2) / 1.8 * 255) == 113
    assert not img[:, 3].any()  # invalid pixels are zero in every channel


def test_encoded_floor_is_flat_and_parallel_to_gravity():
    depth, cam = scene_depth(pitch=25.0, wall_z=30.0)
    res = encode_frame(depth)
    floor = validity_mask(depth)
    pts, _ = backproject(depth)
    n, nv = estimate_normals(pts, floor)
    interior = floor & nv
    assert res.image[..., 1][interior].mean() < 2
    assert np.median(res.image[..., 2][interior]) <= 1
    assert not res.image[~floor].any()


def test_synthetic_corpus_geometry_noise_free():
    cfg = SynthConfig(noise=False)
    for f in synth_generate(11, 6, cfg):
        res = encode_frame(f.depth)
        assert angle_deg(res.gravity.direction, f.meta["up"]) < 1.0
        assert abs(res.ground.height - f.meta["ground"]) < 0.02


def test_encode_frame_is_deterministic():
    f = synth_generate(2, 1)[0]
    a, b = encode_frame(f.depth), encode_frame(f.depth)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.sidecar() == b.sidecar()
