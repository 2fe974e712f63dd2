"""Voxel discretization of the point cloud and the BVH over point-set boxes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from .scene import Scene

DEFAULT_VOXEL_SIZE = 0.0625
_LEAF_SIZE = 4
_BINS = 16
_SAH_DEPTH = 48


@dataclass(frozen=True)
class VoxelGridConfig:
    voxel_size: float = DEFAULT_VOXEL_SIZE

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")


@dataclass(frozen=True)
class DiscretizedPointSet:
    voxel_coord: tuple[int, int, int]
    point_indices: np.ndarray
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    reception_point: np.ndarray
    dominant_surface_label: int


class DpsSet:
    """All discretized point sets of a scene, stored column-wise.

    Point sets are ordered lexicographically by voxel coordinate. Members of
    set ``d`` are ``order[start[d]:start[d] + count[d]]`` (indices into the
    scene's point arrays, in file order).
    """

    def __init__(self, scene: Scene, voxel_size: float, point_radius: float, order, start, count, voxel,
                 aabb_min, aabb_max, reception, dominant_label):
        self.scene = scene
        self.voxel_size = float(voxel_size)
        self.point_radius = float(point_radius)
        self.order = order
        self.start = start
        self.count = count
        self.voxel = voxel
        self.aabb_min = aabb_min
        self.aabb_max = aabb_max
        self.reception = reception
        self.dominant_label = dominant_label

    def __len__(self) -> int:
        return len(self.start)

    def __getitem__(self, d: int) -> DiscretizedPointSet:
        if not -len(self) <= d < len(self):
            raise IndexError(d)
        s, c = self.start[d], self.count[d]
        return DiscretizedPointSet(
            tuple(int(v) for v in self.voxel[d]),
            self.order[s: s + c].copy(),
            self.aabb_min[d].copy(),
            self.aabb_max[d].copy(),
            self.reception[d].copy(),
            int(self.dominant_label[d]),
        )

    def __iter__(self):
        return (self[d] for d in range(len(self)))

    def members(self, d: int) -> np.ndarray:
        s = self.start[d]
        return self.order[s: s + self.count[d]]

    @cached_property
    def voxel_index(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in vc): i for i, vc in enumerate(self.voxel)}

    def stats(self) -> dict:
        c = self.count
        point_bytes = self.scene.num_points * (6 * 8 + 2 * 8 + 8)
        dps_bytes = len(self) * (2 * 8 + 3 * 8 + 9 * 8 + 8)
        return {
            "num_points": int(self.scene.num_points),
            "num_dps": int(len(self)),
            "min_points": int(c.min()),
            "mean_points": float(c.mean()),
            "max_points": int(c.max()),
            "memory_bytes": int(point_bytes + dps_bytes + 2 * len(self) * 8 * 8),
        }


def build_grid(scene: Scene, config: VoxelGridConfig = VoxelGridConfig(), point_radius: float = 0.015) -> DpsSet:
    """Bin points into voxels of edge ``config.voxel_size``; one point set per occupied voxel.

    Boxes are the member bounds inflated by ``point_radius`` so that disks of
    boundary points stay inside their box.
    """
    if scene.num_points == 0:
        raise ValueError("cannot discretize an empty scene")
    pos = scene.positions
    vox = np.floor(pos / config.voxel_size).astype(np.int64)
    order = np.lexsort((vox[:, 2], vox[:, 1], vox[:, 0]))
    sv = vox[order]
    new = np.ones(len(sv), dtype=bool)
    new[1:] = (sv[1:] != sv[:-1]).any(axis=1)
    start = np.flatnonzero(new)
    count = np.diff(np.append(start, len(sv)))
    sp = pos[order]
    reception = np.add.reduceat(sp, start, axis=0) / count[:, None]
    aabb_min = np.minimum.reduceat(sp, start, axis=0) - point_radius
    aabb_max = np.maximum.reduceat(sp, start, axis=0) + point_radius

    # most frequent surface label per set, ties to the smallest label
    dps_of = np.repeat(np.arange(len(start)), count)
    labels = scene.surface_labels[order]
    pairs, freq = np.unique(np.column_stack([dps_of, labels]), axis=0, return_counts=True)
    pick = np.lexsort((pairs[:, 1], -freq, pairs[:, 0]))
    first = np.ones(len(pick), dtype=bool)
    first[1:] = pairs[pick[1:], 0] != pairs[pick[:-1], 0]
    dominant = pairs[pick[first], 1]

    for a in (order, start, count, sv, aabb_min, aabb_max, reception, dominant):
        a.setflags(write=False)
    return DpsSet(scene, config.voxel_size, point_radius, order, start, count, sv[start],
                  aabb_min, aabb_max, reception, dominant)


# --------------------------------------------------------------------------- BVH


@njit(cache=True)
def _area(x0, y0, z0, x1, y1, z1):
    dx = x1 - x0
    dy = y1 - y0
    dz = z1 - z0
    return dx * dy + dy * dz + dz * dx


@njit(cache=True)
def _sah_partition(prims, lo, hi, bmin, bmax, cent):
    """Reorder ``prims[lo:hi]`` by the cheapest binned surface-area split; returns the split index."""
    best_cost = np.inf
    best_axis = -1
    best_bin = -1
    cmin = np.empty(3)
    cmax = np.empty(3)
    for a in range(3):
        cmin[a] = np.inf
        cmax[a] = -np.inf
    for i in range(lo, hi):
        p = prims[i]
        for a in range(3):
            cmin[a] = min(cmin[a], cent[p, a])
            cmax[a] = max(cmax[a], cent[p, a])
    cnt = np.zeros(_BINS, np.int64)
    bb = np.empty((_BINS, 6))
    right_area = np.empty(_BINS)
    right_cnt = np.zeros(_BINS, np.int64)
    for a in range(3):
        ext = cmax[a] - cmin[a]
        if ext <= 0.0:
            continue
        scale = _BINS / ext
        cnt[:] = 0
        for b in range(_BINS):
            bb[b, 0] = bb[b, 1] = bb[b, 2] = np.inf
            bb[b, 3] = bb[b, 4] = bb[b, 5] = -np.inf
        for i in range(lo, hi):
            p = prims[i]
            b = min(int((cent[p, a] - cmin[a]) * scale), _BINS - 1)
            cnt[b] += 1
            for k in range(3):
                bb[b, k] = min(bb[b, k], bmin[p, k])
                bb[b, 3 + k] = max(bb[b, 3 + k], bmax[p, k])
        # sweep from the right: area and count of bins b.._BINS-1
        x0 = y0 = z0 = np.inf
        x1 = y1 = z1 = -np.inf
        c = 0
        for b in range(_BINS - 1, 0, -1):
            if cnt[b] > 0:
                x0 = min(x0, bb[b, 0])
                y0 = min(y0, bb[b, 1])
                z0 = min(z0, bb[b, 2])
                x1 = max(x1, bb[b, 3])
                y1 = max(y1, bb[b, 4])
                z1 = max(z1, bb[b, 5])
            c += cnt[b]
            right_cnt[b] = c
            right_area[b] = _area(x0, y0, z0, x1, y1, z1) if c > 0 else 0.0
        x0 = y0 = z0 = np.inf
        x1 = y1 = z1 = -np.inf
        c = 0
        for b in range(_BINS - 1):
            if cnt[b] > 0:
                x0 = min(x0, bb[b, 0])
                y0 = min(y0, bb[b, 1])
                z0 = min(z0, bb[b, 2])
                x1 = max(x1, bb[b, 3])
                y1 = max(y1, bb[b, 4])
                z1 = max(z1, bb[b, 5])
            c += cnt[b]
            if c == 0 or right_cnt[b + 1] == 0:
                continue
            cost = _area(x0, y0, z0, x1, y1, z1) * c + right_area[b + 1] * right_cnt[b + 1]
            if cost < best_cost:
                best_cost = cost
                best_axis = a
                best_bin = b
    if best_axis < 0:
        # all centroids coincide: split the range in half
        return (lo + hi) // 2
    scale = _BINS / (cmax[best_axis] - cmin[best_axis])
    i = lo
    j = hi - 1
    while i <= j:
        p = prims[i]
        b = min(int((cent[p, best_axis] - cmin[best_axis]) * scale), _BINS - 1)
        if b <= best_bin:
            i += 1
        else:
            prims[i] = prims[j]
            prims[j] = p
            j -= 1
    return i


@njit(cache=True)
def _median_partition(prims, lo, hi, cent):
    """Sort ``prims[lo:hi]`` along the widest centroid axis and split at the median."""
    axis = 0
    widest = -1.0
    for a in range(3):
        mn = np.inf
        mx = -np.inf
        for i in range(lo, hi):
            c = cent[prims[i], a]
            mn = min(mn, c)
            mx = max(mx, c)
        if mx - mn > widest:
            widest = mx - mn
            axis = a
    seg = prims[lo:hi].copy()
    keys = np.empty(hi - lo)
    for i in range(hi - lo):
        keys[i] = cent[seg[i], axis]
    prims[lo:hi] = seg[np.argsort(keys, kind="mergesort")]
    return (lo + hi) // 2


@njit(cache=True)
def _build_bvh(bmin, bmax):
    n = bmin.shape[0]
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    first = np.zeros(cap, np.int64)
    cnt = np.zeros(cap, np.int64)
    prims = np.arange(n)
    cent = 0.5 * (bmin + bmax)

    stack_node = np.empty(128, np.int64)
    stack_lo = np.empty(128, np.int64)
    stack_hi = np.empty(128, np.int64)
    stack_depth = np.empty(128, np.int64)
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    stack_depth[0] = 0
    sp = 1
    used = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        for a in range(3):
            mn = np.inf
            mx = -np.inf
            for i in range(lo, hi):
                p = prims[i]
                if bmin[p, a] < mn:
                    mn = bmin[p, a]
                if bmax[p, a] > mx:
                    mx = bmax[p, a]
            node_min[node, a] = mn
            node_max[node, a] = mx
        if hi - lo <= _LEAF_SIZE:
            first[node] = lo
            cnt[node] = hi - lo
            continue
        # surface-area splits; past _SAH_DEPTH fall back to balanced splits so the tree
        # (and every traversal stack) stays shallow even for degenerate layouts
        if depth < _SAH_DEPTH:
            mid = _sah_partition(prims, lo, hi, bmin, bmax, cent)
        else:
            mid = _median_partition(prims, lo, hi, cent)
        l_node = used
        r_node = used + 1
        used += 2
        left[node] = l_node
        right[node] = r_node
        stack_node[sp] = r_node
        stack_lo[sp] = mid
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = l_node
        stack_lo[sp] = lo
        stack_hi[sp] = mid
        stack_depth[sp] = depth + 1
        sp += 1
    return node_min[:used].copy(), node_max[:used].copy(), left[:used].copy(), right[:used].copy(), \
        first[:used].copy(), cnt[:used].copy(), prims


@njit(cache=True)
def _slab(nmin, nmax, node, ox, oy, oz, ix, iy, iz):
    t1 = (nmin[node, 0] - ox) * ix
    t2 = (nmax[node, 0] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (nmin[node, 1] - oy) * iy
    t2 = (nmax[node, 1] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (nmin[node, 2] - oz) * iz
    t2 = (nmax[node, 2] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    return tn, tf


@njit(cache=True, inline="always")
def _slab_box(box, node, ox, oy, oz, ix, iy, iz):
    t1 = (box[node, 0] - ox) * ix
    t2 = (box[node, 3] - ox) * ix
    tn = min(t1, t2)
    tf = max(t1, t2)
    t1 = (box[node, 1] - oy) * iy
    t2 = (box[node, 4] - oy) * iy
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    t1 = (box[node, 2] - oz) * iz
    t2 = (box[node, 5] - oz) * iz
    tn = max(tn, min(t1, t2))
    tf = min(tf, max(t1, t2))
    return tn, tf


@njit(cache=True)
def _inv(d):
    if abs(d) < 1e-300:
        return 1e300 if d >= 0 else -1e300
    return 1.0 / d


@njit(cache=True)
def _query(node_min, node_max, left, right, first, cnt, prims, o, d, t_max):
    """All primitives whose box meets the ray segment [0, t_max]."""
    ix, iy, iz = _inv(d[0]), _inv(d[1]), _inv(d[2])
    out = np.empty(prims.shape[0], np.int64)
    k = 0
    stack = np.empty(128, np.int64)
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tn, tf = _slab(node_min, node_max, node, o[0], o[1], o[2], ix, iy, iz)
        if tn > tf or tf < 0.0 or tn > t_max:
            continue
        if cnt[node] > 0:
            for i in range(first[node], first[node] + cnt[node]):
                out[k] = prims[i]
                k += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return np.sort(out[:k])


class AccelStructure:
    """Bounding-volume hierarchy over the point-set boxes of a ``DpsSet``."""

    def __init__(self, dps: DpsSet):
        self.dps = dps
        (self.node_min, self.node_max, self.left, self.right,
         self.first, self.count, self.prims) = _build_bvh(np.ascontiguousarray(dps.aabb_min),
                                                          np.ascontiguousarray(dps.aabb_max))
        # packed copies for the kernels: one row per node / disk keeps each visit on few cache lines
        self.node_box = np.ascontiguousarray(np.hstack([self.node_min, self.node_max]))
        self.node_info = np.ascontiguousarray(np.stack([self.left, self.right, self.first, self.count], axis=1))
        scene = dps.scene
        # point data permuted so each set's members are contiguous
        self.points = np.ascontiguousarray(scene.positions[dps.order])
        self.normals = np.ascontiguousarray(scene.normals[dps.order])
        self.surface_labels = np.ascontiguousarray(scene.surface_labels[dps.order])
        self.material_labels = np.ascontiguousarray(scene.material_labels[dps.order])
        self.disks = np.ascontiguousarray(np.hstack([self.points, self.normals]))

    @property
    def scene(self) -> Scene:
        return self.dps.scene

    @cached_property
    def _slab_base(self):
        """Per point set: a unit axis, the member extent along it and the widest normal tilt."""
        dps = self.dps
        D = len(dps)
        ref = self.normals[dps.start]
        # flip members onto the first member's hemisphere; disks are two-sided
        owner = np.repeat(np.arange(D), dps.count)
        sgn = np.where((self.normals * ref[owner]).sum(1) < 0, -1.0, 1.0)
        axis = np.zeros((D, 3))
        np.add.at(axis, owner, self.normals * sgn[:, None])
        norm = np.linalg.norm(axis, axis=1)
        good = norm > 1e-6
        axis[good] /= norm[good, None]
        axis[~good] = ref[~good]
        h = (self.points * axis[owner]).sum(1)
        lo = np.minimum.reduceat(h, dps.start)
        hi = np.maximum.reduceat(h, dps.start)
        cos = np.abs((self.normals * axis[owner]).sum(1)).clip(0.0, 1.0)
        sin = np.maximum.reduceat(np.sqrt(1.0 - cos * cos), dps.start)
        return axis, lo, hi, sin

    def slabs(self, point_radius: float):
        """(axis, lo, hi) slabs containing every member disk of radius ``point_radius``."""
        axis, lo, hi, sin = self._slab_base
        pad = point_radius * sin + 1e-9 * (1.0 + np.abs(lo) + np.abs(hi))
        return np.ascontiguousarray(axis), lo - pad, hi + pad

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.node_min[0].copy(), self.node_max[0].copy()

    def dps_index(self, voxel_coord) -> int | None:
        return self.dps.voxel_index.get(tuple(int(v) for v in voxel_coord))

    def query(self, origin, direction, t_max: float = np.inf) -> np.ndarray:
        """Candidate point sets for a ray; never misses a box the ray crosses."""
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        return _query(self.node_min, self.node_max, self.left, self.right, self.first,
                      self.count, self.prims, o, d, float(t_max))


def build_accel(dps: DpsSet) -> AccelStructure:
    if len(dps) == 0:
        raise ValueError("cannot build an acceleration structure without point sets")
    return AccelStructure(dps)
