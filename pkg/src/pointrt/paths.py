"""Propagation path containers.

``PropagationPath`` is the object form used at API boundaries. ``PathSet``
holds many paths column-wise (padded to a common interaction width) and is
what the pipeline, deduplication and the EM layer operate on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class InteractionKind(enum.IntEnum):
    SPECULAR = 0
    SCATTER = 1
    DIFFRACTION = 2


@dataclass
class Interaction:
    kind: InteractionKind
    point: np.ndarray
    normal: np.ndarray
    surface_label: int = -1
    material_label: int = -1
    dps_voxel_coord: tuple[int, int, int] = (0, 0, 0)
    edge_index: int = -1


@dataclass
class PropagationPath:
    tx_index: int
    rx_index: int
    tx_position: np.ndarray
    rx_position: np.ndarray
    interactions: list[Interaction] = field(default_factory=list)
    refined: bool = False
    trajectory_hash: int = 0

    @property
    def vertices(self) -> np.ndarray:
        """TX, interaction points, RX as an ``(N + 2, 3)`` array."""
        return np.vstack([self.tx_position, *[i.point for i in self.interactions], self.rx_position])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())

    @property
    def kinds(self) -> tuple[InteractionKind, ...]:
        return tuple(i.kind for i in self.interactions)


class PathSet:
    """Column-wise storage for paths sharing an interaction width ``K``.

    Per path ``p`` only the first ``n[p]`` interaction slots are meaningful;
    padding slots carry kind ``-1``.
    """

    FIELDS = ("tx", "rx", "n", "start", "end", "kind", "point", "normal", "surface_label",
              "material_label", "voxel", "edge", "length", "refined", "hash")

    def __init__(self, tx, rx, n, start, end, kind, point, normal, surface_label, material_label,
                 voxel, edge, length, refined, hash=None):
        self.tx = np.asarray(tx, dtype=np.int64)
        self.rx = np.asarray(rx, dtype=np.int64)
        self.n = np.asarray(n, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.float64).reshape(-1, 3)
        self.end = np.asarray(end, dtype=np.float64).reshape(-1, 3)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.point = np.asarray(point, dtype=np.float64)
        self.normal = np.asarray(normal, dtype=np.float64)
        self.surface_label = np.asarray(surface_label, dtype=np.int64)
        self.material_label = np.asarray(material_label, dtype=np.int64)
        self.voxel = np.asarray(voxel, dtype=np.int64)
        self.edge = np.asarray(edge, dtype=np.int64)
        self.length = np.asarray(length, dtype=np.float64)
        self.refined = np.asarray(refined, dtype=bool)
        self.hash = np.zeros(len(self.tx), np.uint64) if hash is None else np.asarray(hash, dtype=np.uint64)

    @property
    def width(self) -> int:
        return self.kind.shape[1] if self.kind.ndim == 2 else 0

    def __len__(self) -> int:
        return len(self.tx)

    @classmethod
    def empty(cls, width: int = 0) -> PathSet:
        z = np.zeros
        return cls(z(0), z(0), z(0), z((0, 3)), z((0, 3)), z((0, width)), z((0, width, 3)), z((0, width, 3)),
                   z((0, width)), z((0, width)), z((0, width, 3)), z((0, width)), z(0), z(0, bool))

    def take(self, idx) -> PathSet:
        idx = np.asarray(idx)
        return PathSet(**{f: getattr(self, f)[idx] for f in self.FIELDS})

    def widen(self, width: int) -> PathSet:
        if width == self.width:
            return self
        if width < self.width:
            if (self.n > width).any():
                raise ValueError("cannot narrow below the longest path")
            cut = {f: getattr(self, f)[:, :width] for f in
                   ("kind", "point", "normal", "surface_label", "material_label", "voxel", "edge")}
            return PathSet(**{f: cut.get(f, getattr(self, f)) for f in self.FIELDS})
        extra = width - self.width
        p = len(self)

        def pad(a, fill):
            shape = (p, extra) + a.shape[2:]
            return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)], axis=1)

        out = {f: getattr(self, f) for f in self.FIELDS}
        out.update(kind=pad(self.kind, -1), point=pad(self.point, 0.0), normal=pad(self.normal, 0.0),
                   surface_label=pad(self.surface_label, -1), material_label=pad(self.material_label, -1),
                   voxel=pad(self.voxel, 0), edge=pad(self.edge, -1))
        return PathSet(**out)

    @staticmethod
    def concat(sets: list[PathSet]) -> PathSet:
        sets = [s for s in sets if s is not None]
        if not sets:
            return PathSet.empty()
        width = max(s.width for s in sets)
        sets = [s.widen(width) for s in sets]
        return PathSet(**{f: np.concatenate([getattr(s, f) for s in sets]) for f in PathSet.FIELDS})

    def vertices(self, p: int) -> np.ndarray:
        n = self.n[p]
        return np.vstack([self.start[p], self.point[p, :n], self.end[p]])

    def path(self, p: int) -> PropagationPath:
        inter = [
            Interaction(
                InteractionKind(int(self.kind[p, k])), self.point[p, k].copy(), self.normal[p, k].copy(),
                int(self.surface_label[p, k]), int(self.material_label[p, k]),
                tuple(int(v) for v in self.voxel[p, k]), int(self.edge[p, k]),
            )
            for k in range(int(self.n[p]))
        ]
        return PropagationPath(int(self.tx[p]), int(self.rx[p]), self.start[p].copy(), self.end[p].copy(),
                               inter, bool(self.refined[p]), int(self.hash[p]))

    def to_paths(self) -> list[PropagationPath]:
        return [self.path(p) for p in range(len(self))]

    def __iter__(self):
        return (self.path(p) for p in range(len(self)))

    @classmethod
    def from_paths(cls, paths: list[PropagationPath], width: int | None = None) -> PathSet:
        width = max([len(p.interactions) for p in paths], default=0) if width is None else width
        P = len(paths)
        kind = np.full((P, width), -1, np.int8)
        point = np.zeros((P, width, 3))
        normal = np.zeros((P, width, 3))
        sl = np.full((P, width), -1, np.int64)
        ml = np.full((P, width), -1, np.int64)
        vox = np.zeros((P, width, 3), np.int64)
        edge = np.full((P, width), -1, np.int64)
        for i, path in enumerate(paths):
            for k, it in enumerate(path.interactions):
                kind[i, k] = int(it.kind)
                point[i, k] = it.point
                normal[i, k] = it.normal
                sl[i, k] = it.surface_label
                ml[i, k] = it.material_label
                vox[i, k] = it.dps_voxel_coord
                edge[i, k] = it.edge_index
        return cls(
            [p.tx_index for p in paths], [p.rx_index for p in paths], [len(p.interactions) for p in paths],
            np.array([p.tx_position for p in paths]).reshape(-1, 3),
            np.array([p.rx_position for p in paths]).reshape(-1, 3),
            kind, point, normal, sl, ml, vox, edge,
            [p.length for p in paths], [p.refined for p in paths], [p.trajectory_hash for p in paths],
        )

    def segment_lengths_total(self) -> np.ndarray:
        """Recompute path lengths from the stored vertices."""
        out = np.zeros(len(self))
        for p in range(len(self)):
            out[p] = np.linalg.norm(np.diff(self.vertices(p), axis=0), axis=1).sum()
        return out
