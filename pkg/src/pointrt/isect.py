"""Ray intersection with point sets represented as surface-aligned disks.

Every member point of a point set is a disk of radius ``point_radius``
centred on the point and oriented by its normal. A ray is intersected with
each disk plane; disks hit inside their radius are blended into a single
surface point

    q = sum_i w_i q_i / sum_i w_i,
    w_i = exp(-|q_i - p_i|^2 / (2 r^2)) * exp(-depth_attenuation * |q_i - q_min|)

where ``q_min`` is the disk hit nearest to the ray origin. All disk hits lie
on the ray, so ``q`` does as well and its distance is the blended ray
parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .grid import AccelStructure, _inv, _slab_box


@dataclass(frozen=True)
class IntersectionConfig:
    point_radius: float = 0.015
    depth_attenuation: float = 100.0
    min_weight_cutoff: float = 1e-4
    # None -> 2 * point_radius
    visibility_slack: float | None = None
    # hits closer than this to a surface-attached ray origin are ignored; None -> 2 * point_radius
    start_slack: float | None = None
    surface_offset: float = 1e-4

    def __post_init__(self):
        if not self.point_radius > 0:
            raise ValueError("point_radius must be positive")
        if not self.depth_attenuation > 0:
            raise ValueError("depth_attenuation must be positive")
        if not 0 <= self.min_weight_cutoff < 1:
            raise ValueError("min_weight_cutoff must lie in [0, 1)")

    @property
    def vis_slack(self) -> float:
        return 2 * self.point_radius if self.visibility_slack is None else float(self.visibility_slack)

    @property
    def surface_start_slack(self) -> float:
        return 2 * self.point_radius if self.start_slack is None else float(self.start_slack)


@dataclass(frozen=True)
class SurfaceHit:
    position: np.ndarray
    normal: np.ndarray
    distance: float
    dps_index: int
    nearest_point_index: int
    surface_label: int
    material_label: int


class Geometry(NamedTuple):
    """Flat arrays handed to the compiled kernels.

    Point-set data is stored in leaf order of the hierarchy so that the sets
    tested by one leaf, and their disks, sit next to each other in memory.
    """

    box: np.ndarray  # (nodes, 6) min and max corner
    info: np.ndarray  # (nodes, 4) left, right, first slot, slot count (0 for inner nodes)
    # (slots, 8) per leaf slot: slab axis (3), slab lo, slab hi, first disk, disk count, point-set id;
    # every member disk lies in lo <= axis . x <= hi
    leaf: np.ndarray
    disks: np.ndarray  # (N, 6) position and normal, leaf order
    disk_point: np.ndarray  # (N,) permuted point index of each disk
    slot_of: np.ndarray  # (D,) leaf slot of each point set
    radius: float
    lam: float
    cutoff: float
    vis_slack: float
    start_slack: float
    offset: float


def _leaf_layout(accel: AccelStructure, point_radius: float):
    dps = accel.dps
    prims = accel.prims
    axis, lo, hi = accel.slabs(point_radius)
    count = dps.count[prims]
    first = np.concatenate([[0], np.cumsum(count)[:-1]])
    disk_point = np.repeat(dps.start[prims] - first, count) + np.arange(int(count.sum()))
    leaf = np.column_stack([axis[prims], lo[prims], hi[prims], first, count, prims]).astype(np.float64)
    slot_of = np.empty(len(prims), np.int64)
    slot_of[prims] = np.arange(len(prims))
    return (np.ascontiguousarray(leaf), np.ascontiguousarray(accel.disks[disk_point]),
            disk_point.astype(np.int64), slot_of)


def geometry(accel: AccelStructure, config: IntersectionConfig) -> Geometry:
    dps = accel.dps
    if not math.isclose(dps.point_radius, config.point_radius):
        # boxes must cover the disks used here
        raise ValueError(
            f"grid was built for point_radius={dps.point_radius}, intersection uses {config.point_radius}"
        )
    cache = accel.__dict__.setdefault("_leaf_cache", {})
    key = float(config.point_radius)
    if key not in cache:
        cache[key] = _leaf_layout(accel, key)
    return Geometry(
        accel.node_box, accel.node_info, *cache[key],
        float(config.point_radius), float(config.depth_attenuation), float(config.min_weight_cutoff),
        config.vis_slack, config.surface_start_slack, float(config.surface_offset),
    )


# --------------------------------------------------------------------------- kernels


@njit(cache=True, inline="always")
def _disk_t(g, i, ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Ray parameter of the hit with disk ``i`` (permuted index) or -1, plus squared offset."""
    nx = g.disks[i, 3]
    ny = g.disks[i, 4]
    nz = g.disks[i, 5]
    den = nx * dx + ny * dy + nz * dz
    if abs(den) < 1e-12:
        return -1.0, 0.0
    px = g.disks[i, 0]
    py = g.disks[i, 1]
    pz = g.disks[i, 2]
    t = (nx * (px - ox) + ny * (py - oy) + nz * (pz - oz)) / den
    if t <= t_min or t >= t_max:
        return -1.0, 0.0
    qx = ox + t * dx - px
    qy = oy + t * dy - py
    qz = oz + t * dz - pz
    r2 = qx * qx + qy * qy + qz * qz
    if r2 > g.radius * g.radius:
        return -1.0, 0.0
    return t, r2


@njit(cache=True)
def intersect_dps_kernel(g, d, ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Blended disk hit inside point set ``d``.

    Returns ``(hit, t, nx, ny, nz, nearest)`` with ``nearest`` a permuted
    point index and the normal facing the ray.
    """
    return _slot_hit(g, g.slot_of[d], ox, oy, oz, dx, dy, dz, t_min, t_max)


@njit(cache=True)
def _slot_hit(g, k, ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Blended hit with the point set stored at leaf slot ``k``."""
    rec = g.leaf[k]
    # cheap rejection: the ray must cross the slab holding all member disks within [t_min, t_max]
    ax = rec[0]
    ay = rec[1]
    az = rec[2]
    den = ax * dx + ay * dy + az * dz
    h0 = ax * ox + ay * oy + az * oz
    if abs(den) < 1e-12:
        if h0 < rec[3] or h0 > rec[4]:
            return False, 0.0, 0.0, 0.0, 0.0, -1
    else:
        ta = (rec[3] - h0) / den
        tb = (rec[4] - h0) / den
        if ta > tb:
            ta, tb = tb, ta
        if tb < t_min or ta > t_max:
            return False, 0.0, 0.0, 0.0, 0.0, -1
    s = int(rec[5])
    e = s + int(rec[6])
    # Weights are accumulated relative to the first disk hit (t_ref); the common factor
    # exp(lam * (t_ref - t_min_hit)) cancels in the average and in the cutoff ratio.
    inv2r2 = 1.0 / (2.0 * g.radius * g.radius)
    t_ref = -1.0
    umax = 0.0
    umin = np.inf
    best = -1
    sw = 0.0
    st = 0.0
    snx = 0.0
    sny = 0.0
    snz = 0.0
    for i in range(s, e):
        t, r2 = _disk_t(g, i, ox, oy, oz, dx, dy, dz, t_min, t_max)
        if t < 0.0:
            continue
        if t_ref < 0.0:
            t_ref = t
        u = math.exp(-r2 * inv2r2 - g.lam * (t - t_ref))
        if u > umax:
            umax = u
            best = i
        if u < umin:
            umin = u
        nx = g.disks[i, 3]
        ny = g.disks[i, 4]
        nz = g.disks[i, 5]
        # disks are two-sided: orient each toward the ray before blending
        if nx * dx + ny * dy + nz * dz > 0.0:
            nx = -nx
            ny = -ny
            nz = -nz
        sw += u
        st += u * t
        snx += u * nx
        sny += u * ny
        snz += u * nz
    if best < 0:
        return False, 0.0, 0.0, 0.0, 0.0, -1
    floor = g.cutoff * umax
    if umin < floor:
        # some disks fall under the cutoff: redo the sums without them
        sw = 0.0
        st = 0.0
        snx = 0.0
        sny = 0.0
        snz = 0.0
        for i in range(s, e):
            t, r2 = _disk_t(g, i, ox, oy, oz, dx, dy, dz, t_min, t_max)
            if t < 0.0:
                continue
            u = math.exp(-r2 * inv2r2 - g.lam * (t - t_ref))
            if u < floor:
                continue
            nx = g.disks[i, 3]
            ny = g.disks[i, 4]
            nz = g.disks[i, 5]
            if nx * dx + ny * dy + nz * dz > 0.0:
                nx = -nx
                ny = -ny
                nz = -nz
            sw += u
            st += u * t
            snx += u * nx
            sny += u * ny
            snz += u * nz
    nl = math.sqrt(snx * snx + sny * sny + snz * snz)
    if nl == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, -1
    return True, st / sw, snx / nl, sny / nl, snz / nl, g.disk_point[best]


@njit(cache=True)
def cast_kernel(g, ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Nearest blended hit over the scene: ``(hit, t, nx, ny, nz, dps, nearest)``."""
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    best_t = t_max
    hit = False
    bnx = 0.0
    bny = 0.0
    bnz = 0.0
    bd = -1
    bn = -1
    stack = np.empty(128, np.int64)
    tstack = np.empty(128)
    stack[0] = 0
    tstack[0] = 0.0
    sp = 1
    tn, tf = _slab_box(g.box, 0, ox, oy, oz, ix, iy, iz)
    if tn > tf or tf < t_min or tn > best_t:
        return False, 0.0, 0.0, 0.0, 0.0, -1, -1
    tstack[0] = tn
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if tstack[sp] > best_t:
            continue
        if g.info[node, 3] > 0:
            for k in range(g.info[node, 2], g.info[node, 2] + g.info[node, 3]):
                ok, t, nx, ny, nz, near = _slot_hit(g, k, ox, oy, oz, dx, dy, dz, t_min, best_t)
                if ok and t < best_t:
                    best_t = t
                    hit = True
                    bnx = nx
                    bny = ny
                    bnz = nz
                    bd = int(g.leaf[k, 7])
                    bn = near
            continue
        l = g.info[node, 0]
        r = g.info[node, 1]
        ln, lf = _slab_box(g.box, l, ox, oy, oz, ix, iy, iz)
        rn, rf = _slab_box(g.box, r, ox, oy, oz, ix, iy, iz)
        l_ok = ln <= lf and lf >= t_min and ln <= best_t
        r_ok = rn <= rf and rf >= t_min and rn <= best_t
        # push the far child first so the near one pops next
        if l_ok and r_ok:
            if ln <= rn:
                stack[sp] = r
                tstack[sp] = rn
                stack[sp + 1] = l
                tstack[sp + 1] = ln
            else:
                stack[sp] = l
                tstack[sp] = ln
                stack[sp + 1] = r
                tstack[sp + 1] = rn
            sp += 2
        elif l_ok:
            stack[sp] = l
            tstack[sp] = ln
            sp += 1
        elif r_ok:
            stack[sp] = r
            tstack[sp] = rn
            sp += 1
    if not hit:
        return False, 0.0, 0.0, 0.0, 0.0, -1, -1
    return True, best_t, bnx, bny, bnz, bd, bn


@njit(cache=True)
def occluded_kernel(g, ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Any blended hit with ``t_min < t < t_max``; stops at the first one."""
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    stack = np.empty(128, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        tn, tf = _slab_box(g.box, node, ox, oy, oz, ix, iy, iz)
        if tn > tf or tf < t_min or tn > t_max:
            continue
        if g.info[node, 3] > 0:
            for k in range(g.info[node, 2], g.info[node, 2] + g.info[node, 3]):
                ok, t, nx, ny, nz, near = _slot_hit(g, k, ox, oy, oz, dx, dy, dz, t_min, t_max)
                if ok:
                    return True
            continue
        stack[sp] = g.info[node, 0]
        stack[sp + 1] = g.info[node, 1]
        sp += 2
    return False


@njit(cache=True)
def visible_kernel(g, ax, ay, az, bx, by, bz, start_slack):
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    t_max = dist - g.vis_slack
    if t_max <= start_slack:
        return True
    return not occluded_kernel(g, ax, ay, az, dx / dist, dy / dist, dz / dist, start_slack, t_max)


@njit(cache=True)
def visible_from_surface(g, qx, qy, qz, nx, ny, nz, bx, by, bz):
    """Visibility from a surface point (normal facing the query side) to ``b``."""
    side = (bx - qx) * nx + (by - qy) * ny + (bz - qz) * nz
    if side <= 0.0:
        return False
    o = g.offset
    return visible_kernel(g, qx + o * nx, qy + o * ny, qz + o * nz, bx, by, bz, g.start_slack)


# --------------------------------------------------------------------------- python API


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("ray direction must be non-zero")
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"ray direction must have unit length, got |d|={n}")
    return v


def _hit(accel: AccelStructure, o, d, t, nx, ny, nz, dps_index, nearest) -> SurfaceHit:
    return SurfaceHit(
        position=o + t * d,
        normal=np.array([nx, ny, nz]),
        distance=float(t),
        dps_index=int(dps_index),
        nearest_point_index=int(accel.dps.order[nearest]),
        surface_label=int(accel.surface_labels[nearest]),
        material_label=int(accel.material_labels[nearest]),
    )


def intersect_dps(origin, direction, dps_index: int, accel: AccelStructure,
                  config: IntersectionConfig = IntersectionConfig(), t_min: float = 0.0) -> SurfaceHit | None:
    """Blended intersection of one ray with one point set, or None if no disk is hit."""
    o = np.asarray(origin, dtype=np.float64)
    d = _unit(direction)
    g = geometry(accel, config)
    ok, t, nx, ny, nz, near = intersect_dps_kernel(g, int(dps_index), o[0], o[1], o[2], d[0], d[1], d[2],
                                                   float(t_min), np.inf)
    if not ok:
        return None
    return _hit(accel, o, d, t, nx, ny, nz, dps_index, near)


def cast_ray(origin, direction, accel: AccelStructure, config: IntersectionConfig = IntersectionConfig(),
             t_min: float = 0.0, t_max: float = np.inf) -> SurfaceHit | None:
    """Nearest surface hit along a ray, traversing boxes near to far."""
    o = np.asarray(origin, dtype=np.float64)
    d = _unit(direction)
    g = geometry(accel, config)
    ok, t, nx, ny, nz, dps, near = cast_kernel(g, o[0], o[1], o[2], d[0], d[1], d[2], float(t_min), float(t_max))
    if not ok:
        return None
    return _hit(accel, o, d, t, nx, ny, nz, dps, near)


def test_visibility(a, b, accel: AccelStructure | None, config: IntersectionConfig = IntersectionConfig(),
                    start_slack: float = 0.0) -> bool:
    """True when no surface lies on segment a-b short of ``|b - a| - visibility_slack``.

    ``accel=None`` stands for an empty scene.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        raise ValueError("visibility endpoints coincide")
    if accel is None:
        return True
    g = geometry(accel, config)
    return bool(visible_kernel(g, a[0], a[1], a[2], b[0], b[1], b[2], float(start_slack)))


test_visibility.__test__ = False  # keep pytest from collecting the import
