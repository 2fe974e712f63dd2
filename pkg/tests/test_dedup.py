import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pointrt.dedup import dedup_pathset, dedup_paths, hash_path, hash_pathset, trajectory_key
from pointrt.paths import Interaction, InteractionKind, PathSet, PropagationPath


def _path(kinds, keys, length=1.0, rx=0, tx=0):
    inter = []
    for i, (k, key) in enumerate(zip(kinds, keys)):
        it = Interaction(InteractionKind(k), np.array([length * (i + 1), 0.0, 0.0]), np.array([0, 0, 1.0]))
        if k == InteractionKind.SCATTER:
            it.dps_voxel_coord = tuple(key)
        elif k == InteractionKind.DIFFRACTION:
            it.edge_index = key
        else:
            it.surface_label = key
        inter.append(it)
    return PropagationPath(tx, rx, np.zeros(3), np.array([0.0, 0.0, length]), inter)


def test_shortest_member_of_each_trajectory_survives():
    a = _path([0, 0], [1, 2], length=2.0)
    b = _path([0, 0], [1, 2], length=1.0)
    c = _path([0, 0], [2, 1], length=1.5)
    out = dedup_paths([a, b, c])
    assert len(out) == 2
    assert out[0].length == b.length
    assert {trajectory_key(p) for p in out} == {trajectory_key(b), trajectory_key(c)}


def test_key_components_distinguish():
    base = _path([0], [3])
    assert hash_path(base) != hash_path(_path([0], [3], rx=1))
    assert hash_path(base) != hash_path(_path([0], [3], tx=1))
    assert hash_path(_path([1], [(1, 2, 3)])) != hash_path(_path([1], [(1, 2, 4)]))
    assert hash_path(_path([2], [3])) != hash_path(base)
    # positions do not enter the key
    assert hash_path(base) == hash_path(_path([0], [3], length=7.0))


def test_empty():
    assert dedup_paths([]) == []
    assert len(dedup_pathset(PathSet.empty())) == 0


trajectories = st.lists(
    st.lists(st.tuples(st.sampled_from([0, 1, 2]), st.integers(-3, 3)), min_size=0, max_size=4),
    min_size=1, max_size=40,
)


@settings(max_examples=60, deadline=None)
@given(trajectories, st.integers(0, 2**31 - 1))
def test_hash_grouping_equals_exact_grouping(trajs, seed):
    rng = np.random.default_rng(seed)
    paths = []
    for t in trajs:
        kinds = [k for k, _ in t]
        keys = [(v, v + 1, -v) if k == 1 else v for k, v in t]
        paths.append(_path(kinds, keys, length=float(rng.uniform(0.5, 3.0)), rx=int(rng.integers(2))))
    ps = PathSet.from_paths(paths)
    h = hash_pathset(ps)
    keys = [trajectory_key(p) for p in paths]
    for i in range(len(paths)):
        for j in range(len(paths)):
            assert (h[i] == h[j]) == (keys[i] == keys[j])
    out = dedup_pathset(ps)
    assert len(out) == len(set(keys))
    best = {}
    for k, p in zip(keys, paths):
        best[k] = min(best.get(k, np.inf), p.length)
    assert sorted(out.length.tolist()) == sorted(best.values())
    # idempotent
    assert len(dedup_pathset(out)) == len(out)
