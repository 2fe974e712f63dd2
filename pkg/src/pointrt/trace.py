"""Coarse path candidate generation.

One ray is launched from the transmitter toward the reception point of every
point set. Each surface hit is treated as a specular reflection and the ray
continues, so the number of live rays never grows. At every hit the
visibility matrix tells which receivers can see the hit's point set; each of
them yields a coarse specular candidate (the bounce chain so far plus the
receiver) and, with scattering enabled, a scattered path ending at the hit
once the hit-to-receiver segment is confirmed unobstructed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .grid import AccelStructure
from .isect import IntersectionConfig, cast_kernel, geometry, test_visibility, visible_from_surface
from .paths import InteractionKind, Interaction, PathSet, PropagationPath
from .vis import VisibilityMatrix

MAX_DEPTH_LIMIT = 8


@dataclass(frozen=True)
class TraceConfig:
    max_depth: int = 5
    enable_scattering: bool = True
    enable_diffraction: bool = False

    def __post_init__(self):
        if not 1 <= self.max_depth <= MAX_DEPTH_LIMIT:
            raise ValueError(f"max_depth must lie in [1, {MAX_DEPTH_LIMIT}], got {self.max_depth}")


@dataclass
class BounceTrace:
    """Raw per-ray output of the bounce tracer.

    Arrays are indexed ``[ray, depth]`` (and ``[..., rx]`` for the emission
    flags). Ray ``r`` was launched toward the reception point of set ``r``.
    """

    alive: np.ndarray  # (R, K) hit found at this depth
    point: np.ndarray  # (R, K, 3)
    normal: np.ndarray  # (R, K, 3) facing the incoming ray
    dps: np.ndarray  # (R, K)
    nearest: np.ndarray  # (R, K) permuted point index
    specular: np.ndarray  # (R, K, RX) coarse specular candidate emitted
    scatter: np.ndarray  # (R, K, RX) scattered path emitted

    @property
    def active_rays(self) -> np.ndarray:
        """Number of live rays per depth."""
        return self.alive.sum(axis=0)


@njit(cache=True, parallel=True)
def _trace_depth(g, k, order, ray, alive, point, normal, dps, near, spec, scat, rx, words, scattering):
    """Advance every live ray in ``order`` by one bounce (depth ``k``)."""
    NR = rx.shape[0]
    for m in prange(order.shape[0]):
        r = order[m]
        ox, oy, oz = ray[r, 0], ray[r, 1], ray[r, 2]
        dx, dy, dz = ray[r, 3], ray[r, 4], ray[r, 5]
        ok, t, nx, ny, nz, d, nr = cast_kernel(g, ox, oy, oz, dx, dy, dz, ray[r, 6], np.inf)
        if not ok:
            continue
        qx = ox + t * dx
        qy = oy + t * dy
        qz = oz + t * dz
        alive[r, k] = True
        point[r, k, 0] = qx
        point[r, k, 1] = qy
        point[r, k, 2] = qz
        normal[r, k, 0] = nx
        normal[r, k, 1] = ny
        normal[r, k, 2] = nz
        dps[r, k] = d
        near[r, k] = nr
        w = words[:, d >> 6]
        bit = np.uint64(d & 63)
        for j in range(NR):
            if (w[j] >> bit) & np.uint64(1):
                spec[r, k, j] = True
                if scattering:
                    scat[r, k, j] = visible_from_surface(g, qx, qy, qz, nx, ny, nz, rx[j, 0], rx[j, 1], rx[j, 2])
        dn = dx * nx + dy * ny + dz * nz
        dx -= 2.0 * dn * nx
        dy -= 2.0 * dn * ny
        dz -= 2.0 * dn * nz
        L = np.sqrt(dx * dx + dy * dy + dz * dz)
        ray[r, 0] = qx + g.offset * nx
        ray[r, 1] = qy + g.offset * ny
        ray[r, 2] = qz + g.offset * nz
        ray[r, 3] = dx / L
        ray[r, 4] = dy / L
        ray[r, 5] = dz / L
        ray[r, 6] = g.start_slack


def _trace(g, tx, targets, rx, words, max_depth, scattering):
    R = targets.shape[0]
    NR = rx.shape[0]
    alive = np.zeros((R, max_depth), np.bool_)
    point = np.zeros((R, max_depth, 3))
    normal = np.zeros((R, max_depth, 3))
    dps = np.full((R, max_depth), -1, np.int64)
    near = np.full((R, max_depth), -1, np.int64)
    spec = np.zeros((R, max_depth, NR), np.bool_)
    scat = np.zeros((R, max_depth, NR), np.bool_)
    d = targets - tx
    L = np.linalg.norm(d, axis=1)
    ray = np.zeros((R, 7))
    ray[:, :3] = tx
    live = L >= 1e-12
    ray[live, 3:6] = d[live] / L[live, None]
    order = np.flatnonzero(live)
    for k in range(max_depth):
        if len(order) == 0:
            break
        _trace_depth(g, k, order, ray, alive, point, normal, dps, near, spec, scat, rx, words, scattering)
        order = np.flatnonzero(alive[:, k])
    return alive, point, normal, dps, near, spec, scat


def run_bounces(accel: AccelStructure, vis: VisibilityMatrix, tx_position, receivers,
                config: TraceConfig = TraceConfig(), isect_config: IntersectionConfig = IntersectionConfig()
                ) -> BounceTrace:
    tx = np.asarray(tx_position, dtype=np.float64)
    rx = np.ascontiguousarray(np.asarray(receivers, dtype=np.float64).reshape(-1, 3))
    if vis.num_rx != len(rx) or vis.num_dps != len(accel.dps):
        raise ValueError("visibility matrix does not match receivers / point sets")
    out = _trace(geometry(accel, isect_config), tx, np.ascontiguousarray(accel.dps.reception), rx,
                 np.ascontiguousarray(vis.words), int(config.max_depth), bool(config.enable_scattering))
    bt = BounceTrace(*out)
    # a ray only continues after a hit, so the population can only shrink with depth
    active = bt.active_rays
    assert (np.diff(active) <= 0).all() and active[0] <= len(accel.dps)
    return bt


@njit(cache=True)
def _fill_chains(emit, point, normal, dps, near, tx, rx, slabel, mlabel, voxel, scatter_last):
    R, K, NR = emit.shape
    C = 0
    for k in range(K):
        for r in range(R):
            for j in range(NR):
                if emit[r, k, j]:
                    C += 1
    rxi = np.empty(C, np.int64)
    n = np.empty(C, np.int64)
    kind = np.full((C, K), -1, np.int8)
    pts = np.zeros((C, K, 3))
    nrm = np.zeros((C, K, 3))
    surf = np.full((C, K), -1, np.int64)
    mat = np.full((C, K), -1, np.int64)
    vox = np.zeros((C, K, 3), np.int64)
    length = np.zeros(C)
    c = 0
    for k in range(K):
        for r in range(R):
            for j in range(NR):
                if not emit[r, k, j]:
                    continue
                rxi[c] = j
                n[c] = k + 1
                px, py, pz = tx[0], tx[1], tx[2]
                total = 0.0
                for i in range(k + 1):
                    kind[c, i] = 1 if (scatter_last and i == k) else 0
                    for a in range(3):
                        pts[c, i, a] = point[r, i, a]
                        nrm[c, i, a] = normal[r, i, a]
                        vox[c, i, a] = voxel[dps[r, i], a]
                    surf[c, i] = slabel[near[r, i]]
                    mat[c, i] = mlabel[near[r, i]]
                    ex = point[r, i, 0] - px
                    ey = point[r, i, 1] - py
                    ez = point[r, i, 2] - pz
                    total += math.sqrt(ex * ex + ey * ey + ez * ez)
                    px, py, pz = point[r, i, 0], point[r, i, 1], point[r, i, 2]
                ex = rx[j, 0] - px
                ey = rx[j, 1] - py
                ez = rx[j, 2] - pz
                length[c] = total + math.sqrt(ex * ex + ey * ey + ez * ez)
                c += 1
    return rxi, n, kind, pts, nrm, surf, mat, vox, length


def _chain_paths(bt: BounceTrace, accel: AccelStructure, tx_index: int, tx_pos, receivers, emit: np.ndarray,
                 scatter_last: bool) -> PathSet:
    """Build paths from emission flags; order is (depth, ray, rx)."""
    tx = np.asarray(tx_pos, dtype=np.float64)
    rx = np.ascontiguousarray(np.asarray(receivers, dtype=np.float64).reshape(-1, 3))
    rxi, n, kind, pts, nrm, surf, mat, vox, length = _fill_chains(
        emit, bt.point, bt.normal, bt.dps, bt.nearest, tx, rx, accel.surface_labels, accel.material_labels,
        np.ascontiguousarray(accel.dps.voxel, dtype=np.int64), bool(scatter_last))
    C = len(rxi)
    K = emit.shape[1]
    return PathSet(np.full(C, tx_index), rxi, n, np.broadcast_to(tx, (C, 3)).copy(), rx[rxi] if C else np.zeros((0, 3)),
                   kind, pts, nrm, surf, mat, vox, np.full((C, K), -1), length, np.zeros(C, bool))


def coarse_candidates(bt: BounceTrace, accel: AccelStructure, tx_index: int, tx_pos, receivers
                      ) -> tuple[PathSet, PathSet]:
    """Split a bounce trace into (coarse specular candidates, scattered paths)."""
    spec = _chain_paths(bt, accel, tx_index, tx_pos, receivers, bt.specular, False)
    scat = _chain_paths(bt, accel, tx_index, tx_pos, receivers, bt.scatter, True)
    return spec, scat


def trace_los(accel: AccelStructure | None, tx_index: int, scene=None,
              isect_config: IntersectionConfig = IntersectionConfig()) -> list[PropagationPath]:
    """One interaction-free path per receiver with a clear line of sight."""
    scene = accel.scene if accel is not None else scene
    tx = scene.transmitters[tx_index]
    out = []
    for j, rx in enumerate(scene.receivers):
        if np.array_equal(tx, rx) or test_visibility(tx, rx, accel, isect_config):
            out.append(PropagationPath(tx_index, j, tx.copy(), rx.copy(), [], True, 0))
    return out


def trace_bounces(accel: AccelStructure, vis: VisibilityMatrix, tx_index: int,
                  config: TraceConfig = TraceConfig(), isect_config: IntersectionConfig = IntersectionConfig()
                  ) -> list[PropagationPath]:
    """Coarse specular candidates followed by scattered paths, as path objects."""
    scene = accel.scene
    bt = run_bounces(accel, vis, scene.transmitters[tx_index], scene.receivers, config, isect_config)
    spec, scat = coarse_candidates(bt, accel, tx_index, scene.transmitters[tx_index], scene.receivers)
    return spec.to_paths() + scat.to_paths()


def trace_diffraction(scene, tx_index: int, config: TraceConfig = TraceConfig()) -> list[PropagationPath]:
    """One coarse candidate per (edge, receiver) located at the edge midpoint."""
    if not config.enable_diffraction:
        return []
    tx = scene.transmitters[tx_index]
    out = []
    for e_idx, edge in enumerate(scene.edges):
        mid = 0.5 * (edge.start + edge.end)
        normal = edge.normal_a + edge.normal_b
        nl = np.linalg.norm(normal)
        normal = normal / nl if nl > 0 else edge.normal_a.copy()
        for j, rx in enumerate(scene.receivers):
            it = Interaction(InteractionKind.DIFFRACTION, mid.copy(), normal.copy(), -1, int(edge.material_a),
                             (0, 0, 0), e_idx)
            out.append(PropagationPath(tx_index, j, tx.copy(), rx.copy(), [it], False, 0))
    return out
