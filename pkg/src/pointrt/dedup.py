"""Trajectory hashing and duplicate path removal.

A trajectory is identified by ``(tx, rx, [(kind, key), ...])`` where the key
is the surface label for specular reflections, the edge index for
diffractions and the voxel coordinate for scattering. Paths are hashed with
64-bit FNV-1a over the little-endian bytes of that tuple.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .paths import InteractionKind, PathSet, PropagationPath

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_SPEC = int(InteractionKind.SPECULAR)
_SCAT = int(InteractionKind.SCATTER)
_DIFF = int(InteractionKind.DIFFRACTION)


@njit(cache=True, inline="always")
def _mix_byte(h, b):
    return (h ^ np.uint64(b)) * _FNV_PRIME


@njit(cache=True, inline="always")
def _mix_int(h, v):
    u = np.uint64(np.int64(v))
    for _ in range(8):
        h = _mix_byte(h, u & np.uint64(0xFF))
        u = u >> np.uint64(8)
    return h


@njit(cache=True)
def _hash_one(tx, rx, n, kind, slabel, voxel, edge):
    h = _FNV_OFFSET
    h = _mix_int(h, tx)
    h = _mix_int(h, rx)
    h = _mix_int(h, n)
    for k in range(n):
        kd = kind[k]
        h = _mix_byte(h, np.uint64(kd))
        if kd == _SCAT:
            h = _mix_int(h, voxel[k, 0])
            h = _mix_int(h, voxel[k, 1])
            h = _mix_int(h, voxel[k, 2])
        elif kd == _DIFF:
            h = _mix_int(h, edge[k])
        else:
            h = _mix_int(h, slabel[k])
    return h


@njit(cache=True)
def _hash_all(tx, rx, n, kind, slabel, voxel, edge):
    out = np.empty(tx.shape[0], np.uint64)
    for p in range(tx.shape[0]):
        out[p] = _hash_one(tx[p], rx[p], n[p], kind[p], slabel[p], voxel[p], edge[p])
    return out


def trajectory_key(path: PropagationPath) -> tuple:
    """The exact tuple a trajectory hash digests."""
    key = []
    for it in path.interactions:
        if it.kind == InteractionKind.SCATTER:
            key.append((int(it.kind), tuple(int(v) for v in it.dps_voxel_coord)))
        elif it.kind == InteractionKind.DIFFRACTION:
            key.append((int(it.kind), int(it.edge_index)))
        else:
            key.append((int(it.kind), int(it.surface_label)))
    return (int(path.tx_index), int(path.rx_index), tuple(key))


def hash_pathset(paths: PathSet) -> np.ndarray:
    if len(paths) == 0:
        return np.zeros(0, np.uint64)
    w = max(paths.width, 1)
    ps = paths.widen(w)
    return _hash_all(ps.tx, ps.rx, ps.n, ps.kind, ps.surface_label, ps.voxel, ps.edge)


def hash_path(path: PropagationPath) -> int:
    return int(hash_pathset(PathSet.from_paths([path]))[0])


def dedup_pathset(paths: PathSet) -> PathSet:
    """Keep the shortest path of every trajectory; output ordered by (rx, length)."""
    if len(paths) == 0:
        return paths
    h = hash_pathset(paths)
    paths = paths.take(np.arange(len(paths)))
    paths.hash = h
    # shortest first within each hash, ties by input position
    idx = np.lexsort((np.arange(len(h)), paths.length, h))
    hs = h[idx]
    first = np.ones(len(idx), dtype=bool)
    first[1:] = hs[1:] != hs[:-1]
    keep = idx[first]
    keep = keep[np.lexsort((paths.hash[keep], paths.length[keep], paths.rx[keep]))]
    return paths.take(keep)


def dedup_paths(paths: list[PropagationPath]) -> list[PropagationPath]:
    if not paths:
        return []
    return dedup_pathset(PathSet.from_paths(paths)).to_paths()
