import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_blend, random_dps_rays

from conftest import CONCRETE, grid_plane
from pointrt.grid import VoxelGridConfig, build_accel, build_grid
from pointrt.isect import IntersectionConfig, cast_ray, intersect_dps, test_visibility
from pointrt.scene import build_scene


def _accel(points):
    return build_accel(build_grid(build_scene(points, materials=CONCRETE)))


def _single(offset=(0.0, 0.0, 0.0), extra=()):
    pts = [[*offset, 0, 0, 1, 0, 0], *extra]
    return _accel(pts)


def test_single_disk_head_on():
    acc = _single()
    hit = intersect_dps([0, 0, 1], [0, 0, -1], 0, acc)
    np.testing.assert_allclose(hit.position, 0, atol=1e-15)
    np.testing.assert_allclose(hit.normal, [0, 0, 1])
    assert hit.distance == pytest.approx(1.0)
    assert hit.nearest_point_index == 0


def test_disk_rim_is_inclusive_and_outside_misses():
    r = IntersectionConfig().point_radius
    assert intersect_dps([0, 0, 1], [0, 0, -1], 0, _single((r * (1 - 1e-9), 0, 0))) is not None
    assert intersect_dps([0, 0, 1], [0, 0, -1], 0, _single((r * 1.001, 0, 0))) is None


def test_symmetric_pair_averages_to_midpoint():
    a = 0.01
    acc = _accel([[-a, 0, 0, 0, 0, 1, 0, 0], [a, 0, 0, 0, 0, 1, 0, 0]])
    hit = intersect_dps([0, 0, 1], [0, 0, -1], 0, acc)
    np.testing.assert_allclose(hit.position, [0, 0, 0], atol=1e-15)


def test_depth_factor_and_gaussian_factor():
    cfg = IntersectionConfig()
    # second disk 1 cm deeper: depth factor exp(-1) with lambda = 100
    acc = _accel([[0.01, 0.01, 0.05, 0, 0, 1, 0, 0], [0.01, 0.01, 0.04, 0, 0, 1, 0, 0]])
    hit = intersect_dps([0.01, 0.01, 1], [0, 0, -1], 0, acc, cfg)
    w = math.exp(-1.0)
    assert hit.position[2] == pytest.approx(0.05 - 0.01 * w / (1 + w), abs=1e-14)
    # a disk hit at the rim gets exp(-1/2) against a centred one, both at the same depth
    r = cfg.point_radius
    acc = _accel([[0, 0, 0, 0, 0, 1, 0, 0], [r, 0.0, 0, 0, 0, 1, 0, 0]])
    hit = intersect_dps([0, 0, 1], [0, 0, -1], 0, acc, cfg)
    assert hit.nearest_point_index == 0


def test_back_face_normal_is_flipped():
    hit = intersect_dps([0, 0, -1], [0, 0, 1], 0, _single())
    np.testing.assert_allclose(hit.normal, [0, 0, -1])


def test_cast_ray_plane_and_miss():
    acc = _accel(grid_plane(half=0.5, step=0.01))
    hit = cast_ray([0.013, -0.021, 1], [0, 0, -1], acc)
    assert abs(hit.position[2]) < 0.015
    assert np.degrees(np.arccos(hit.normal @ [0, 0, 1])) < 2
    assert cast_ray([0, 0, 1], [0, 0, 1], acc) is None


def test_nearest_of_two_parallel_planes_wins():
    pts = np.vstack([grid_plane(z=0.0, half=0.3, step=0.01), grid_plane(z=-1.0, half=0.3, step=0.01, surface=1)])
    acc = _accel(pts)
    hit = cast_ray([0.05, 0.05, 1], [0, 0, -1], acc)
    assert abs(hit.position[2]) < 1e-9
    assert acc.scene.surface_ids[hit.surface_label] == 0
    hit = cast_ray([0.05, 0.05, -2], [0, 0, 1], acc)
    assert hit.position[2] == pytest.approx(-1.0)


def test_visibility_cases():
    acc = _accel(grid_plane(half=0.5, step=0.01))
    assert test_visibility([0, 0, 1], [0, 0, -1], None)
    assert not test_visibility([0, 0, 1], [0, 0, -1], acc)
    assert test_visibility([-0.3, 0, 0.001], [0.3, 0.1, 0.001], acc)
    with pytest.raises(ValueError):
        test_visibility([0, 0, 1], [0, 0, 1], acc)


def test_matches_naive_blend_on_noisy_cloud():
    rng = np.random.default_rng(5)
    n = 3000
    p = rng.uniform(-0.3, 0.3, (n, 3))
    p[:, 2] = rng.normal(0, 0.004, n)
    nr = rng.normal([0, 0, 1], 0.2, (n, 3))
    nr /= np.linalg.norm(nr, axis=1, keepdims=True)
    acc = _accel(np.column_stack([p, nr, np.zeros(n), np.zeros(n)]))
    cfg = IntersectionConfig()
    for d, o, u in random_dps_rays(acc, 200, rng, cfg.point_radius):
        m = acc.dps.members(d)
        ref = naive_blend(o, u, acc.scene.positions[m], acc.scene.normals[m], cfg.point_radius,
                          cfg.depth_attenuation, cfg.min_weight_cutoff)
        hit = intersect_dps(o, u, d, acc, cfg)
        assert (ref is None) == (hit is None)
        if hit is not None:
            np.testing.assert_allclose(hit.position, ref[0], atol=1e-9, rtol=0)
            np.testing.assert_allclose(hit.normal, ref[1], atol=1e-9)


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 40
    p = np.column_stack([rng.uniform(-0.02, 0.02, (n, 2)), rng.normal(0, 0.002, n)])
    nr = np.tile([0.0, 0.0, 1.0], (n, 1))
    R = _rotation(rng)
    shift = rng.uniform(-5, 5, 3)
    c = np.full(3, 50.0)  # keeps every point of both frames inside one voxel
    o = np.array([0.001, -0.002, 0.5])
    u = np.array([0.0, 0.0, -1.0])
    def hit(points, normals, origin, direction):
        s = build_scene(np.column_stack([points, normals, np.zeros(n), np.zeros(n)]), materials=CONCRETE)
        acc = build_accel(build_grid(s, VoxelGridConfig(100.0)))
        return intersect_dps(origin, direction, 0, acc)

    a = hit(p + c, nr, o + c, u)
    b = hit(p @ R.T + c + shift, nr @ R.T, R @ o + c + shift, R @ u)
    assert (a is None) == (b is None)
    if a is not None:
        np.testing.assert_allclose(b.position, R @ (a.position - c) + c + shift, atol=1e-6)
        np.testing.assert_allclose(b.normal, R @ a.normal, atol=1e-6)


def test_large_depth_attenuation_collapses_to_first_hit():
    acc = _accel([[0.01, 0.01, 0.05, 0, 0, 1, 0, 0], [0.011, 0.01, 0.045, 0, 0, 1, 0, 0]])
    z = [intersect_dps([0.01, 0.01, 1], [0, 0, -1], 0, acc, IntersectionConfig(depth_attenuation=lam)).position[2]
         for lam in (10.0, 100.0, 1000.0, 10000.0)]
    assert all(b > a for a, b in zip(z, z[1:]))
    assert z[-1] == pytest.approx(0.05, abs=1e-12)
