"""Deterministic synthetic scenes built from rectangles.

Each shape is a list of rectangles with exact normals, surface and material
labels. Points are drawn on a jittered grid of the requested density and
optionally displaced along the normal by Gaussian noise. The analytic
description is kept alongside so tests can compare against exact
image-method paths.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import MaterialParams, Scene, build_scene

SHAPES = ("plane", "corner", "corridor", "room5mat")


@dataclass(frozen=True)
class Rect:
    origin: tuple[float, float, float]
    u: tuple[float, float, float]
    v: tuple[float, float, float]
    normal: tuple[float, float, float]
    surface_label: int
    material_label: int

    def arrays(self):
        return (np.asarray(self.origin, float), np.asarray(self.u, float), np.asarray(self.v, float),
                np.asarray(self.normal, float))

    @property
    def area(self) -> float:
        _, u, v, _ = self.arrays()
        return float(np.linalg.norm(np.cross(u, v)))


@dataclass(frozen=True)
class SynthSpec:
    shape: str = "plane"
    density: float = 4096.0  # points per square metre
    noise: float = 0.0  # std of the displacement along the normal, metres
    seed: int = 0
    jitter: float = 0.2  # fraction of the grid cell
    size: float | None = None  # plane edge length, metres
    with_edges: bool = True

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not self.noise >= 0:
            raise ValueError("noise must be non-negative")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")


@dataclass
class Layout:
    rects: list[Rect]
    edges: list[list[float]]
    transmitters: np.ndarray
    receivers: np.ndarray
    materials: dict[int, MaterialParams]


@dataclass
class GroundTruth:
    rects: list[Rect]
    edges: list[list[float]]
    paths: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "surfaces": [
                {"origin": list(r.origin), "u": list(r.u), "v": list(r.v), "normal": list(r.normal),
                 "surface_label": r.surface_label, "material_label": r.material_label}
                for r in self.rects
            ],
            "edges": self.edges,
            "paths": self.paths,
        }


# --------------------------------------------------------------------------- layouts

ROOM5MAT_MATERIALS = {
    0: MaterialParams(5.3, 0.23, 0.2),  # floor
    1: MaterialParams(2.7, 0.06, 0.3),  # ceiling
    2: MaterialParams(3.9, 0.12, 0.4),  # walls x = const
    3: MaterialParams(6.3, 0.06, 0.1),  # walls y = const
    4: MaterialParams(2.0, 0.04, 0.5),  # table
}


def _box(x0, x1, y0, y1, z0, z1, labels, mats):
    """Six inward-facing faces: floor, ceiling, x0, x1, y0, y1."""
    X, Y, Z = x1 - x0, y1 - y0, z1 - z0
    return [
        Rect((x0, y0, z0), (X, 0, 0), (0, Y, 0), (0, 0, 1), labels[0], mats[0]),
        Rect((x0, y0, z1), (X, 0, 0), (0, Y, 0), (0, 0, -1), labels[1], mats[1]),
        Rect((x0, y0, z0), (0, Y, 0), (0, 0, Z), (1, 0, 0), labels[2], mats[2]),
        Rect((x1, y0, z0), (0, Y, 0), (0, 0, Z), (-1, 0, 0), labels[3], mats[3]),
        Rect((x0, y0, z0), (X, 0, 0), (0, 0, Z), (0, 1, 0), labels[4], mats[4]),
        Rect((x0, y1, z0), (X, 0, 0), (0, 0, Z), (0, -1, 0), labels[5], mats[5]),
    ]


def _box_edges(x0, x1, y0, y1, z0, z1, mats):
    """The twelve box edges as edge records (file label ids)."""
    out = []
    mf, mc, mx0, mx1, my0, my1 = mats
    zs = ((z0, (0, 0, 1), mf), (z1, (0, 0, -1), mc))
    for z, nz, mz in zs:
        out.append([x0, y0, z, x1, y0, z, *nz, 0, 1, 0, mz, my0])
        out.append([x0, y1, z, x1, y1, z, *nz, 0, -1, 0, mz, my1])
        out.append([x0, y0, z, x0, y1, z, *nz, 1, 0, 0, mz, mx0])
        out.append([x1, y0, z, x1, y1, z, *nz, -1, 0, 0, mz, mx1])
    for x, nx, mxx in ((x0, (1, 0, 0), mx0), (x1, (-1, 0, 0), mx1)):
        for y, ny, myy in ((y0, (0, 1, 0), my0), (y1, (0, -1, 0), my1)):
            out.append([x, y, z0, x, y, z1, *nx, *ny, mxx, myy])
    return [[float(v) for v in e[:12]] + [int(e[12]), int(e[13])] for e in out]


def layout(spec: SynthSpec) -> Layout:
    if spec.shape == "plane":
        s = 2.0 if spec.size is None else float(spec.size)
        rects = [Rect((-s / 2, -s / 2, 0.0), (s, 0, 0), (0, s, 0), (0, 0, 1), 0, 0)]
        return Layout(rects, [], np.array([[-0.5, 0.0, 1.0]]), np.array([[0.5, 0.2, 0.7]]),
                      {0: MaterialParams(5.3, 0.23, 0.2)})
    if spec.shape == "corner":
        rects = [
            Rect((0.0, -1.0, 0.0), (2.0, 0, 0), (0, 2.0, 0), (0, 0, 1), 0, 0),
            Rect((0.0, -1.0, 0.0), (0, 2.0, 0), (0, 0, 2.0), (1, 0, 0), 1, 1),
        ]
        edges = [[0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0, 0, 1, 1, 0, 0, 0, 1]] if spec.with_edges else []
        return Layout(rects, edges, np.array([[1.0, -0.3, 0.6]]), np.array([[0.7, 0.4, 1.1]]),
                      {0: MaterialParams(5.3, 0.23, 0.2), 1: MaterialParams(3.9, 0.12, 0.4)})
    if spec.shape == "corridor":
        rects = _box(0, 20, 0, 2, 0, 2.5, labels=(0, 1, 2, 3, 4, 5), mats=(0, 1, 2, 2, 2, 2))
        # partition panel blocking the direct path, leaving a gap at y > 1.3
        rects.append(Rect((10.0, 0.0, 0.0), (0, 1.3, 0), (0, 0, 2.5), (1, 0, 0), 6, 3))
        edges = _box_edges(0, 20, 0, 2, 0, 2.5, (0, 1, 2, 2, 2, 2)) if spec.with_edges else []
        mats = {0: MaterialParams(5.3, 0.23, 0.2), 1: MaterialParams(2.7, 0.06, 0.3),
                2: MaterialParams(3.9, 0.12, 0.4), 3: MaterialParams(2.0, 0.04, 0.5)}
        return Layout(rects, edges, np.array([[8.0, 0.5, 1.5]]), np.array([[12.0, 0.6, 1.2]]), mats)
    # room5mat
    rects = _box(0, 4, 0, 5, 0, 2.5, labels=(0, 1, 2, 3, 4, 5), mats=(0, 1, 2, 2, 3, 3))
    rects.append(Rect((2.2, 1.5, 0.75), (1.2, 0, 0), (0, 0.8, 0), (0, 0, 1), 6, 4))
    edges = _box_edges(0, 4, 0, 5, 0, 2.5, (0, 1, 2, 2, 3, 3)) if spec.with_edges else []
    rx = np.array([[3.0, 4.0, 1.2], [0.8, 3.5, 1.0], [3.2, 1.0, 1.4],
                   [2.0, 2.5, 1.6], [1.5, 4.5, 0.9], [3.5, 3.0, 1.1]])
    return Layout(rects, edges, np.array([[1.0, 1.2, 2.0]]), rx, dict(ROOM5MAT_MATERIALS))


# --------------------------------------------------------------------------- sampling


def sample_rect(rect: Rect, density: float, jitter: float, rng: np.random.Generator) -> np.ndarray:
    o, u, v, _ = rect.arrays()
    lu, lv = np.linalg.norm(u), np.linalg.norm(v)
    step = 1.0 / math.sqrt(density)
    nu = max(1, int(round(lu / step)))
    nv = max(1, int(round(lv / step)))
    a = (np.arange(nu) + 0.5) / nu
    b = (np.arange(nv) + 0.5) / nv
    A, B = np.meshgrid(a, b, indexing="ij")
    A = A.ravel() + rng.uniform(-jitter, jitter, A.size) / nu
    B = B.ravel() + rng.uniform(-jitter, jitter, B.size) / nv
    return o + A[:, None] * u + B[:, None] * v


def generate_with_truth(spec: SynthSpec, image_order: int = 2) -> tuple[Scene, GroundTruth]:
    lay = layout(spec)
    rng = np.random.default_rng(spec.seed)
    rows = []
    for rect in lay.rects:
        p = sample_rect(rect, spec.density, spec.jitter, rng)
        n = np.broadcast_to(np.asarray(rect.normal, float), p.shape)
        if spec.noise > 0:
            p = p + rng.normal(0.0, spec.noise, len(p))[:, None] * n
        rows.append(np.column_stack([p, n, np.full(len(p), rect.surface_label), np.full(len(p), rect.material_label)]))
    scene = build_scene(np.concatenate(rows), lay.edges, lay.transmitters, lay.receivers, lay.materials)
    truth = GroundTruth(lay.rects, lay.edges)
    for t, tx in enumerate(lay.transmitters):
        for r, rx in enumerate(lay.receivers):
            for path in image_method(lay.rects, tx, rx, image_order):
                truth.paths.append({"tx": t, "rx": r, **path})
    return scene, truth


def generate(spec: SynthSpec) -> Scene:
    return generate_with_truth(spec, image_order=0)[0]


def write_synthetic(spec: SynthSpec, scene_path, truth_path=None, image_order: int = 2, binary: bool = False):
    from .scene import save_scene

    scene, truth = generate_with_truth(spec, image_order)
    save_scene(scene, scene_path, binary=binary)
    if truth_path is not None:
        Path(truth_path).write_text(json.dumps(truth.to_json(), indent=1), encoding="utf-8")
    return scene, truth


# --------------------------------------------------------------------------- image method


def _segment_hits_rect(a, b, rect: Rect, eps: float = 1e-9) -> bool:
    o, u, v, n = rect.arrays()
    da = (a - o) @ n
    db = (b - o) @ n
    if da * db > 0 or abs(da - db) < 1e-15:
        return False
    t = da / (da - db)
    if t <= eps or t >= 1 - eps:
        return False
    p = a + t * (b - a) - o
    su = p @ u / (u @ u)
    sv = p @ v / (v @ v)
    return 0.0 <= su <= 1.0 and 0.0 <= sv <= 1.0


def _inside(p, rect: Rect) -> bool:
    o, u, v, _ = rect.arrays()
    q = p - o
    su = q @ u / (u @ u)
    sv = q @ v / (v @ v)
    return 0.0 <= su <= 1.0 and 0.0 <= sv <= 1.0


def _clear(a, b, rects, skip) -> bool:
    return not any(_segment_hits_rect(a, b, r) for i, r in enumerate(rects) if i not in skip)


def image_method(rects: list[Rect], tx, rx, max_order: int = 2) -> list[dict]:
    """Exact specular paths over finite rectangles (LOS included), up to ``max_order`` reflections."""
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    out = []
    if _clear(tx, rx, rects, ()):
        out.append({"surfaces": [], "points": [], "length": float(np.linalg.norm(rx - tx))})
    for order in range(1, max_order + 1):
        for seq in itertools.product(range(len(rects)), repeat=order):
            if any(seq[i] == seq[i + 1] for i in range(order - 1)):
                continue
            images = [tx]
            for i in seq:
                o, _, _, n = rects[i].arrays()
                p = images[-1]
                images.append(p - 2 * ((p - o) @ n) * n)
            target = rx
            pts = []
            ok = True
            for j in range(order, 0, -1):
                o, _, _, n = rects[seq[j - 1]].arrays()
                img = images[j]
                di = (img - o) @ n
                dt = (target - o) @ n
                if di * dt >= 0:
                    ok = False
                    break
                t = di / (di - dt)
                p = img + t * (target - img)
                if not _inside(p, rects[seq[j - 1]]):
                    ok = False
                    break
                pts.append(p)
                target = p
            if not ok:
                continue
            pts = pts[::-1]
            verts = [tx, *pts, rx]
            for s in range(len(verts) - 1):
                skip = set()
                if s > 0:
                    skip.add(seq[s - 1])
                if s < order:
                    skip.add(seq[s])
                if not _clear(verts[s], verts[s + 1], rects, skip):
                    ok = False
                    break
            if ok:
                length = float(sum(np.linalg.norm(verts[s + 1] - verts[s]) for s in range(len(verts) - 1)))
                out.append({"surfaces": [rects[i].surface_label for i in seq],
                            "points": [p.tolist() for p in pts], "length": length})
    return out
