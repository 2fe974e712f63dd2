"""Augmented point cloud scenes: data model, validation and file I/O.

A scene bundles the point cloud (positions, normals, surface and material
labels), optional diffraction edges, antenna positions and the material
table. Two on-disk encodings share one logical schema:

* JSON (UTF-8)::

    {"points":       [[x, y, z, nx, ny, nz, surface_label, material_label], ...],
     "edges":        [[sx, sy, sz, ex, ey, ez, nax, nay, naz, nbx, nby, nbz, mat_a, mat_b], ...],
     "transmitters": [[x, y, z], ...],
     "receivers":    [[x, y, z], ...],
     "materials":    {"<label>": {"relative_permittivity": ..., "conductivity_S_per_m": ...,
                                  "scattering_coefficient": ...}, ...}}

* binary, starting with the magic bytes ``PCRT\\x01``, followed by five
  length-prefixed sections in the order points, edges, transmitters,
  receivers, materials. Each section is a little-endian ``uint32`` record
  count followed by packed records: coordinates and normals are ``float32``,
  labels ``uint32``, material parameters ``float64``.

Labels in files may be sparse; the loader compacts them to dense ranges
(``Scene.material_ids`` / ``Scene.surface_ids`` map dense index to file id).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

BINARY_MAGIC = b"PCRT\x01"

_NORMAL_TOL = 1e-6
_EDGE_MIN_LENGTH = 1e-9
_EDGE_MIN_ANGLE = 1e-4


class SceneError(Exception):
    """Base class for scene loading failures."""


class SceneFormatError(SceneError):
    """Malformed scene file; ``line``/``offset`` locate the problem when known."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class SceneValidationError(SceneError):
    def __init__(self, diagnostics: list[Diagnostic]):
        errors = [d for d in diagnostics if d.severity == "error"]
        head = "; ".join(str(d) for d in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"invalid scene: {head}{more}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    entity: str  # "point" | "edge" | "transmitter" | "receiver" | "material" | "scene"
    index: int
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.entity}[{self.index}]: {self.message}"


@dataclass(frozen=True)
class MaterialParams:
    relative_permittivity: float
    conductivity: float
    scattering_coefficient: float


@dataclass(frozen=True)
class AugmentedPoint:
    position: np.ndarray
    normal: np.ndarray
    surface_label: int
    material_label: int


@dataclass(frozen=True)
class EdgeSegment:
    start: np.ndarray
    end: np.ndarray
    normal_a: np.ndarray
    normal_b: np.ndarray
    material_a: int
    material_b: int

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(eq=False)
class Scene:
    """Immutable point-cloud scene in columnar form.

    ``material_labels`` and ``surface_labels`` hold dense indices; the file
    ids they came from are ``material_ids[i]`` and ``surface_ids[i]``.
    ``materials`` is keyed by dense material index.
    """

    positions: np.ndarray
    normals: np.ndarray
    surface_labels: np.ndarray
    material_labels: np.ndarray
    edges: list[EdgeSegment] = field(default_factory=list)
    transmitters: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    receivers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    materials: dict[int, MaterialParams] = field(default_factory=dict)
    material_ids: tuple[int, ...] = ()
    surface_ids: tuple[int, ...] = ()

    def __post_init__(self):
        self.positions = _frozen(np.reshape(self.positions, (-1, 3)), np.float64)
        self.normals = _frozen(np.reshape(self.normals, (-1, 3)), np.float64)
        self.surface_labels = _frozen(self.surface_labels, np.int64)
        self.material_labels = _frozen(self.material_labels, np.int64)
        self.transmitters = _frozen(np.reshape(self.transmitters, (-1, 3)), np.float64)
        self.receivers = _frozen(np.reshape(self.receivers, (-1, 3)), np.float64)
        self.edges = list(self.edges)
        self.materials = dict(self.materials)
        if not self.material_ids:
            self.material_ids = tuple(sorted(self.materials))
        if not self.surface_ids:
            self.surface_ids = tuple(range(int(self.surface_labels.max(initial=-1)) + 1))
        self.material_ids = tuple(int(i) for i in self.material_ids)
        self.surface_ids = tuple(int(i) for i in self.surface_ids)

    @property
    def num_points(self) -> int:
        return len(self.positions)

    @property
    def num_materials(self) -> int:
        return len(self.material_ids)

    def point(self, i: int) -> AugmentedPoint:
        return AugmentedPoint(
            self.positions[i], self.normals[i], int(self.surface_labels[i]), int(self.material_labels[i])
        )

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """AABB over points, edge endpoints and antennas."""
        parts = [self.positions, self.transmitters, self.receivers]
        for e in self.edges:
            parts.append(np.stack([e.start, e.end]))
        allp = np.concatenate([p for p in parts if len(p)]) if any(len(p) for p in parts) else np.zeros((1, 3))
        return allp.min(axis=0), allp.max(axis=0)

    def with_materials(self, materials: Mapping[int, MaterialParams]) -> Scene:
        return Scene(
            self.positions, self.normals, self.surface_labels, self.material_labels, self.edges,
            self.transmitters, self.receivers, dict(materials), self.material_ids, self.surface_ids,
        )

    def with_antennas(self, transmitters=None, receivers=None) -> Scene:
        return Scene(
            self.positions, self.normals, self.surface_labels, self.material_labels, self.edges,
            self.transmitters if transmitters is None else transmitters,
            self.receivers if receivers is None else receivers,
            self.materials, self.material_ids, self.surface_ids,
        )


def validate_scene(scene: Scene, require_antennas: bool = False) -> list[Diagnostic]:
    """Check every scene invariant; returns an empty list for a valid scene."""
    diags: list[Diagnostic] = []
    pos, nrm = scene.positions, scene.normals
    if len(pos) == 0:
        diags.append(Diagnostic("error", "scene", 0, "scene has no points"))
    if nrm.shape != pos.shape:
        diags.append(Diagnostic("error", "scene", 0, "normals and positions differ in shape"))
        return diags

    for i in np.flatnonzero(~np.isfinite(pos).all(axis=1)):
        diags.append(Diagnostic("error", "point", int(i), "non-finite coordinate"))
    lengths = np.linalg.norm(nrm, axis=1)
    for i in np.flatnonzero(~np.isfinite(lengths) | (np.abs(lengths - 1.0) > _NORMAL_TOL)):
        diags.append(Diagnostic("error", "point", int(i), f"normal length {lengths[i]:.9g} is not 1"))

    known = set(scene.materials)
    for lab in np.unique(scene.material_labels):
        if int(lab) not in known:
            for i in np.flatnonzero(scene.material_labels == lab)[:1]:
                diags.append(Diagnostic("error", "point", int(i), f"unknown material label {_file_id(scene, lab)}"))
    if (scene.surface_labels < 0).any():
        i = int(np.flatnonzero(scene.surface_labels < 0)[0])
        diags.append(Diagnostic("error", "point", i, "negative surface label"))

    for j, e in enumerate(scene.edges):
        if not (np.isfinite(e.start).all() and np.isfinite(e.end).all()):
            diags.append(Diagnostic("error", "edge", j, "non-finite endpoint"))
            continue
        if np.linalg.norm(e.end - e.start) <= _EDGE_MIN_LENGTH:
            diags.append(Diagnostic("error", "edge", j, "zero-length edge"))
        na, nb = np.asarray(e.normal_a), np.asarray(e.normal_b)
        la, lb = np.linalg.norm(na), np.linalg.norm(nb)
        if la == 0 or lb == 0:
            diags.append(Diagnostic("error", "edge", j, "zero-length face normal"))
        else:
            sin_angle = np.linalg.norm(np.cross(na / la, nb / lb))
            if sin_angle < math.sin(_EDGE_MIN_ANGLE):
                diags.append(Diagnostic("error", "edge", j, "face normals are parallel (coplanar faces)"))
        for m in (e.material_a, e.material_b):
            if int(m) not in known:
                diags.append(Diagnostic("error", "edge", j, f"unknown material label {_file_id(scene, m)}"))

    for name, arr in (("transmitter", scene.transmitters), ("receiver", scene.receivers)):
        for i in np.flatnonzero(~np.isfinite(arr).all(axis=1)):
            diags.append(Diagnostic("error", name, int(i), "non-finite coordinate"))
    if require_antennas:
        if len(scene.transmitters) == 0:
            diags.append(Diagnostic("error", "scene", 0, "no transmitters"))
        if len(scene.receivers) == 0:
            diags.append(Diagnostic("error", "scene", 0, "no receivers"))

    for lab, m in scene.materials.items():
        if not m.relative_permittivity >= 1.0:
            diags.append(Diagnostic("error", "material", lab, "relative permittivity below 1"))
        if not m.conductivity >= 0.0:
            diags.append(Diagnostic("error", "material", lab, "negative conductivity"))
        if not 0.0 <= m.scattering_coefficient <= 1.0:
            diags.append(Diagnostic("error", "material", lab, "scattering coefficient outside [0, 1]"))
    return diags


def _file_id(scene: Scene, dense) -> int:
    dense = int(dense)
    if 0 <= dense < len(scene.material_ids):
        return scene.material_ids[dense]
    return dense


# --------------------------------------------------------------------------- building


def build_scene(
    points: np.ndarray,
    edges: Iterable[Iterable[float]] = (),
    transmitters=(),
    receivers=(),
    materials: Mapping[int, MaterialParams] | None = None,
) -> Scene:
    """Assemble a scene from raw records carrying *file* label ids.

    Normals are renormalized and labels compacted. Raises
    ``SceneValidationError`` when an invariant fails.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 8)
    materials = dict(materials or {})
    edge_rows = np.asarray(list(edges), dtype=np.float64).reshape(-1, 14)

    diags: list[Diagnostic] = []
    if len(pts) == 0:
        diags.append(Diagnostic("error", "scene", 0, "scene has no points"))

    nrm = pts[:, 3:6]
    lengths = np.linalg.norm(nrm, axis=1)
    bad = ~np.isfinite(lengths) | (lengths < 1e-12)
    for i in np.flatnonzero(bad):
        diags.append(Diagnostic("error", "point", int(i), "zero-length or non-finite normal"))
    nrm = nrm / np.where(bad, 1.0, lengths)[:, None]

    raw_labels = pts[:, 6:8]
    if not np.isfinite(raw_labels).all() or (raw_labels < 0).any() or (raw_labels != np.round(raw_labels)).any():
        i = int(np.flatnonzero(~np.isfinite(raw_labels).all(axis=1) | (raw_labels < 0).any(axis=1)
                               | (raw_labels != np.round(raw_labels)).any(axis=1))[0])
        diags.append(Diagnostic("error", "point", i, "labels must be non-negative integers"))
        raise SceneValidationError(diags)
    surf_file = raw_labels[:, 0].astype(np.int64)
    mat_file = raw_labels[:, 1].astype(np.int64)

    material_ids = tuple(sorted(int(k) for k in materials))
    dense_of = {mid: i for i, mid in enumerate(material_ids)}
    for lab in np.unique(mat_file):
        if int(lab) not in dense_of:
            i = int(np.flatnonzero(mat_file == lab)[0])
            diags.append(Diagnostic("error", "point", i, f"unknown material label {int(lab)}"))
    edge_list = []
    for j, row in enumerate(edge_rows):
        ma, mb = int(row[12]), int(row[13])
        for m in (ma, mb):
            if m not in dense_of:
                diags.append(Diagnostic("error", "edge", j, f"unknown material label {m}"))
        na, nb = row[6:9], row[9:12]
        la, lb = np.linalg.norm(na), np.linalg.norm(nb)
        edge_list.append(
            EdgeSegment(
                row[0:3].copy(), row[3:6].copy(),
                na / la if la > 0 else na.copy(), nb / lb if lb > 0 else nb.copy(),
                dense_of.get(ma, -1), dense_of.get(mb, -1),
            )
        )
    if any(d.severity == "error" for d in diags):
        raise SceneValidationError(diags)

    surface_ids, surf_dense = np.unique(surf_file, return_inverse=True)
    mat_dense = np.array([dense_of[int(m)] for m in material_ids], dtype=np.int64)
    lookup = np.full(max(material_ids, default=0) + 1, -1, dtype=np.int64)
    lookup[list(material_ids)] = mat_dense
    scene = Scene(
        positions=pts[:, 0:3],
        normals=nrm,
        surface_labels=surf_dense.astype(np.int64),
        material_labels=lookup[mat_file] if len(mat_file) else mat_file,
        edges=edge_list,
        transmitters=np.asarray(transmitters, dtype=np.float64).reshape(-1, 3),
        receivers=np.asarray(receivers, dtype=np.float64).reshape(-1, 3),
        materials={dense_of[k]: v for k, v in ((int(k), v) for k, v in materials.items())},
        material_ids=material_ids,
        surface_ids=tuple(int(s) for s in surface_ids),
    )
    errors = [d for d in validate_scene(scene) if d.severity == "error"]
    if errors:
        raise SceneValidationError(errors)
    return scene


def _points_records(scene: Scene) -> np.ndarray:
    surf = np.asarray(scene.surface_ids, dtype=np.int64)[scene.surface_labels] if scene.num_points else np.zeros(0)
    mats = np.asarray(scene.material_ids, dtype=np.int64)[scene.material_labels] if scene.num_points else np.zeros(0)
    return np.column_stack([scene.positions, scene.normals, surf, mats])


def _edge_records(scene: Scene) -> list[list[float]]:
    ids = scene.material_ids
    return [
        [*map(float, e.start), *map(float, e.end), *map(float, e.normal_a), *map(float, e.normal_b),
         ids[e.material_a], ids[e.material_b]]
        for e in scene.edges
    ]


def _material_json(params: MaterialParams) -> dict:
    return {
        "relative_permittivity": float(params.relative_permittivity),
        "conductivity_S_per_m": float(params.conductivity),
        "scattering_coefficient": float(params.scattering_coefficient),
    }


def materials_to_json(scene: Scene, materials: Mapping[int, MaterialParams] | None = None) -> dict:
    """Material table in the scene-file schema (keys are file label ids)."""
    materials = scene.materials if materials is None else materials
    return {str(scene.material_ids[k]): _material_json(v) for k, v in sorted(materials.items())}


# --------------------------------------------------------------------------- JSON


def scene_to_json(scene: Scene) -> dict:
    recs = _points_records(scene)
    points = [[float(v) for v in r[:6]] + [int(r[6]), int(r[7])] for r in recs]
    edges = [[float(v) for v in r[:12]] + [int(r[12]), int(r[13])] for r in _edge_records(scene)]
    return {
        "points": points,
        "edges": edges,
        "transmitters": scene.transmitters.tolist(),
        "receivers": scene.receivers.tolist(),
        "materials": materials_to_json(scene),
    }


def _parse_material(label: str, raw) -> tuple[int, MaterialParams]:
    try:
        key = int(label)
    except ValueError:
        raise SceneFormatError(f"material label {label!r} is not an integer") from None
    if not isinstance(raw, dict):
        raise SceneFormatError(f"material {label} must be an object")
    try:
        return key, MaterialParams(
            float(raw["relative_permittivity"]),
            float(raw["conductivity_S_per_m"]),
            float(raw["scattering_coefficient"]),
        )
    except KeyError as exc:
        raise SceneFormatError(f"material {label} is missing {exc.args[0]!r}") from None


def _records(doc: dict, key: str, width: int) -> np.ndarray:
    rows = doc.get(key, [])
    if not isinstance(rows, list):
        raise SceneFormatError(f"{key!r} must be an array")
    for i, r in enumerate(rows):
        if not isinstance(r, list) or len(r) != width:
            raise SceneFormatError(f"{key}[{i}] must be an array of {width} numbers")
        for v in r:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SceneFormatError(f"{key}[{i}] contains a non-numeric value {v!r}")
    return np.asarray(rows, dtype=np.float64).reshape(-1, width)


def scene_from_json(doc) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")
    unknown = set(doc) - {"points", "edges", "transmitters", "receivers", "materials"}
    if unknown:
        raise SceneFormatError(f"unknown top-level keys {sorted(unknown)}")
    mats_raw = doc.get("materials", {})
    if not isinstance(mats_raw, dict):
        raise SceneFormatError("'materials' must be an object")
    materials = dict(_parse_material(k, v) for k, v in mats_raw.items())
    return build_scene(
        _records(doc, "points", 8),
        _records(doc, "edges", 14),
        _records(doc, "transmitters", 3),
        _records(doc, "receivers", 3),
        materials,
    )


# --------------------------------------------------------------------------- binary

_POINT = struct.Struct("<6f2I")
_EDGE = struct.Struct("<12f2I")
_VEC = struct.Struct("<3f")
_MAT = struct.Struct("<I3d")


def scene_to_binary(scene: Scene) -> bytes:
    out = bytearray(BINARY_MAGIC)
    recs = _points_records(scene)
    out += struct.pack("<I", len(recs))
    dt = np.dtype([("f", "<f4", 6), ("l", "<u4", 2)])
    arr = np.zeros(len(recs), dtype=dt)
    arr["f"] = recs[:, :6]
    arr["l"] = recs[:, 6:8]
    out += arr.tobytes()
    edges = _edge_records(scene)
    out += struct.pack("<I", len(edges))
    for r in edges:
        out += _EDGE.pack(*r[:12], int(r[12]), int(r[13]))
    for arr3 in (scene.transmitters, scene.receivers):
        out += struct.pack("<I", len(arr3))
        out += np.asarray(arr3, dtype="<f4").tobytes()
    out += struct.pack("<I", len(scene.materials))
    for k, m in sorted(scene.materials.items()):
        out += _MAT.pack(scene.material_ids[k], m.relative_permittivity, m.conductivity, m.scattering_coefficient)
    return bytes(out)


def scene_from_binary(data: bytes) -> Scene:
    if not data.startswith(BINARY_MAGIC):
        raise SceneFormatError("missing PCRT magic", offset=0)
    off = len(BINARY_MAGIC)

    def count() -> int:
        nonlocal off
        if off + 4 > len(data):
            raise SceneFormatError("truncated section header", offset=off)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        return n

    def take(n: int, size: int) -> bytes:
        nonlocal off
        if off + n * size > len(data):
            raise SceneFormatError("truncated section", offset=off)
        chunk = data[off: off + n * size]
        off += n * size
        return chunk

    n = count()
    dt = np.dtype([("f", "<f4", 6), ("l", "<u4", 2)])
    arr = np.frombuffer(take(n, dt.itemsize), dtype=dt)
    points = np.column_stack([arr["f"].astype(np.float64), arr["l"].astype(np.float64)]) if n else np.zeros((0, 8))
    n = count()
    edges = [list(_EDGE.unpack(take(1, _EDGE.size))) for _ in range(n)]
    antennas = []
    for _ in range(2):
        n = count()
        antennas.append(np.frombuffer(take(n, _VEC.size), dtype="<f4").astype(np.float64).reshape(-1, 3))
    n = count()
    materials = {}
    for _ in range(n):
        lab, eps, sig, s = _MAT.unpack(take(1, _MAT.size))
        materials[lab] = MaterialParams(eps, sig, s)
    if off != len(data):
        raise SceneFormatError("trailing bytes after materials section", offset=off)
    return build_scene(points, edges, antennas[0], antennas[1], materials)


# --------------------------------------------------------------------------- files


def load_scene(path) -> Scene:
    """Load a JSON or binary scene file; the encoding is detected from the magic bytes."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(BINARY_MAGIC):
        return scene_from_binary(data)
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise SceneFormatError(f"{path}: not UTF-8", offset=exc.start) from None
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc.msg}", line=exc.lineno, offset=exc.pos) from None
    return scene_from_json(doc)


def save_scene(scene: Scene, path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(scene_to_binary(scene))
    else:
        path.write_text(json.dumps(scene_to_json(scene)), encoding="utf-8")
