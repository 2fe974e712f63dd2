"""Receiver-to-point-set visibility matrix."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from .grid import AccelStructure
from .isect import IntersectionConfig, geometry, visible_kernel


@dataclass(frozen=True)
class VisibilityMatrix:
    """Packed bitset, shape ``num_rx x num_dps``.

    Row ``r`` is stored in ``words[r]``; entry ``d`` is bit ``d % 64`` of
    word ``d // 64`` (least significant bit first).
    """

    words: np.ndarray
    num_rx: int
    num_dps: int
    build_ms: float = 0.0

    def __getitem__(self, idx) -> bool:
        r, d = int(idx[0]), int(idx[1])
        return bool((int(self.words[r, d >> 6]) >> (d & 63)) & 1)

    def to_dense(self) -> np.ndarray:
        bits = np.unpackbits(self.words.view(np.uint8).reshape(self.num_rx, -1), axis=1, bitorder="little")
        return bits[:, : self.num_dps].astype(bool)

    @classmethod
    def from_dense(cls, dense, build_ms: float = 0.0) -> VisibilityMatrix:
        dense = np.asarray(dense, dtype=bool)
        r, d = dense.shape
        w = (d + 63) // 64
        padded = np.zeros((r, w * 64), dtype=bool)
        padded[:, :d] = dense
        words = np.packbits(padded, axis=1, bitorder="little").view("<u8").reshape(r, w)
        words.setflags(write=False)
        return cls(words, r, d, build_ms)

    def dump(self, path) -> None:
        """Row-major 64-bit little-endian words, one bit per entry."""
        Path(path).write_bytes(np.ascontiguousarray(self.words, dtype="<u8").tobytes())


@njit(cache=True, parallel=True)
def _visibility(g, rx, reception):
    nr = rx.shape[0]
    nd = reception.shape[0]
    out = np.zeros((nr, nd), dtype=np.bool_)
    for k in prange(nr * nd):
        r = k // nd
        d = k % nd
        out[r, d] = visible_kernel(g, rx[r, 0], rx[r, 1], rx[r, 2],
                                   reception[d, 0], reception[d, 1], reception[d, 2], 0.0)
    return out


def build_visibility(accel: AccelStructure, receivers=None,
                     config: IntersectionConfig = IntersectionConfig()) -> VisibilityMatrix:
    """Test every receiver against every point-set reception point."""
    rx = np.ascontiguousarray(accel.scene.receivers if receivers is None else receivers, dtype=np.float64)
    rx = rx.reshape(-1, 3)
    if len(rx) == 0:
        raise ValueError("visibility matrix needs at least one receiver")
    t0 = time.perf_counter()
    dense = _visibility(geometry(accel, config), rx, np.ascontiguousarray(accel.dps.reception))
    ms = (time.perf_counter() - t0) * 1e3
    return VisibilityMatrix.from_dense(dense, ms)


def visible_receivers(matrix: VisibilityMatrix, dps_index: int) -> list[int]:
    if not 0 <= dps_index < matrix.num_dps:
        raise IndexError(f"point-set index {dps_index} outside [0, {matrix.num_dps})")
    word = matrix.words[:, dps_index >> 6]
    bit = np.uint64(dps_index & 63)
    return [int(r) for r in np.flatnonzero((word >> bit) & np.uint64(1))]
