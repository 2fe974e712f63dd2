import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointrt.grid import VoxelGridConfig, build_accel, build_grid
from pointrt.scene import MaterialParams, build_scene

MATS = {0: MaterialParams(3, 0, 0)}


def _scene(pts):
    pts = np.asarray(pts, float)
    n = len(pts)
    return build_scene(np.column_stack([pts, np.tile([0, 0, 1], (n, 1)), np.zeros(n), np.zeros(n)]), materials=MATS)


def test_points_are_binned_by_floor_of_coordinate():
    s = _scene([[0.01, 0.01, 0], [0.05, 0.02, 0], [-0.01, 0.0, 0], [0.07, 0.0, 0]])
    dps = build_grid(s, VoxelGridConfig(0.0625))
    assert [tuple(v) for v in dps.voxel] == [(-1, 0, 0), (0, 0, 0), (1, 0, 0)]
    assert sorted(dps.members(1).tolist()) == [0, 1]
    np.testing.assert_allclose(dps.reception[1], [0.03, 0.015, 0])


def test_boxes_are_inflated_by_point_radius():
    s = _scene([[0.01, 0.02, 0.0], [0.03, 0.05, 0.0]])
    dps = build_grid(s, VoxelGridConfig(0.0625), point_radius=0.015)
    np.testing.assert_allclose(dps.aabb_min[0], [-0.005, 0.005, -0.015])
    np.testing.assert_allclose(dps.aabb_max[0], [0.045, 0.065, 0.015])


def test_invalid_voxel_size():
    with pytest.raises(ValueError):
        VoxelGridConfig(0.0)


def test_stats_counts():
    s = _scene(np.random.default_rng(0).uniform(0, 1, (500, 3)))
    st_ = build_grid(s).stats()
    assert st_["num_points"] == 500
    assert st_["min_points"] >= 1 and st_["max_points"] >= st_["mean_points"]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2**31 - 1), st.sampled_from([0.03, 0.0625, 0.2]))
def test_every_point_in_exactly_one_set(n, seed, size):
    pts = np.random.default_rng(seed).normal(0, 0.5, (n, 3))
    dps = build_grid(_scene(pts), VoxelGridConfig(size))
    assert sorted(dps.order.tolist()) == list(range(n))
    assert dps.count.sum() == n
    for d in range(len(dps)):
        m = dps.members(d)
        assert (np.floor(pts[m] / size).astype(int) == dps.voxel[d]).all()
        assert (pts[m] >= dps.aabb_min[d] - 1e-12).all() and (pts[m] <= dps.aabb_max[d] + 1e-12).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bvh_query_never_misses_a_crossed_box(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (300, 3))
    acc = build_accel(build_grid(_scene(pts), VoxelGridConfig(0.25)))
    dps = acc.dps
    for _ in range(10):
        o = rng.uniform(-2, 2, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (dps.aabb_min - o) / d
            t2 = (dps.aabb_max - o) / d
        near = np.nanmax(np.minimum(t1, t2), axis=1)
        far = np.nanmin(np.maximum(t1, t2), axis=1)
        crossed = set(np.flatnonzero((near <= far) & (far >= 0)).tolist())
        assert crossed <= set(acc.query(o, d).tolist())
