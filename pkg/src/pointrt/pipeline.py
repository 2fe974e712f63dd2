"""End-to-end path computation for every (transmitter, receiver) link."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dedup import dedup_pathset, hash_pathset
from .em import C0, EmConfig, path_coefficients, synthesize_cir
from .grid import AccelStructure, DpsSet, VoxelGridConfig, build_accel, build_grid
from .isect import IntersectionConfig
from .learn import Link, make_link
from .paths import InteractionKind, PathSet
from .refine import RefinementConfig, refine_candidates, refine_diffraction
from .scene import MaterialParams, Scene
from .trace import TraceConfig, coarse_candidates, run_bounces, trace_diffraction, trace_los
from .vis import VisibilityMatrix, build_visibility


@dataclass(frozen=True)
class SimulationConfig:
    grid: VoxelGridConfig = VoxelGridConfig()
    isect: IntersectionConfig = IntersectionConfig()
    trace: TraceConfig = TraceConfig()
    refine: RefinementConfig = RefinementConfig()
    em: EmConfig = EmConfig()


@dataclass
class Prepared:
    scene: Scene
    dps: DpsSet
    accel: AccelStructure
    vis: VisibilityMatrix
    timings: dict[str, float]


@dataclass
class SimulationResult:
    scene: Scene
    paths: PathSet  # deduplicated, all links, sorted by (tx, rx, length)
    timings: dict[str, float]  # milliseconds per stage
    prepared: Prepared
    counts: dict[str, int] = field(default_factory=dict)

    def link(self, tx: int, rx: int) -> PathSet:
        return self.paths.take(np.flatnonzero((self.paths.tx == tx) & (self.paths.rx == rx)))


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def prepare(scene: Scene, config: SimulationConfig = SimulationConfig()) -> Prepared:
    t = time.perf_counter()
    dps = build_grid(scene, config.grid, config.isect.point_radius)
    accel = build_accel(dps)
    t_grid = _ms(t)
    t = time.perf_counter()
    vis = build_visibility(accel, None, config.isect)
    return Prepared(scene, dps, accel, vis, {"grid": t_grid, "vis": _ms(t)})


def _from_list(paths) -> PathSet:
    return PathSet.from_paths(paths) if paths else PathSet.empty()


def compute_link_paths(prep: Prepared, tx_index: int, config: SimulationConfig = SimulationConfig()
                       ) -> tuple[PathSet, dict[str, float], dict[str, int]]:
    """All deduplicated paths from one transmitter; returns (paths, timings ms, counts)."""
    scene, accel = prep.scene, prep.accel
    tx = scene.transmitters[tx_index]
    t = time.perf_counter()
    los = _from_list(trace_los(accel, tx_index, isect_config=config.isect))
    bt = run_bounces(accel, prep.vis, tx, scene.receivers, config.trace, config.isect)
    spec, scat = coarse_candidates(bt, accel, tx_index, tx, scene.receivers)
    res = refine_candidates(spec, accel, config.isect, config.refine)
    parts = [los, res.paths]
    if config.trace.enable_scattering:
        scat.refined[:] = True
        parts.append(scat)
    n_diff = 0
    if config.trace.enable_diffraction:
        diffs = [refine_diffraction(p, accel, config.isect, config.refine)
                 for p in trace_diffraction(scene, tx_index, config.trace)]
        diffs = [p for p in diffs if p is not None]
        n_diff = len(diffs)
        parts.append(_from_list(diffs))
    t_trace = _ms(t)
    t = time.perf_counter()
    out = dedup_pathset(PathSet.concat(parts))
    t_dedup = _ms(t)
    counts = {"coarse_specular": len(spec), "refined_specular": len(res.paths), "scatter": len(scat) if
              config.trace.enable_scattering else 0, "diffraction": n_diff, "deduplicated": len(out)}
    return out, {"trace_refine": t_trace, "dedup": t_dedup}, counts


def simulate(scene: Scene, config: SimulationConfig = SimulationConfig(), prepared: Prepared | None = None
             ) -> SimulationResult:
    if len(scene.transmitters) == 0 or len(scene.receivers) == 0:
        raise ValueError("simulation needs at least one transmitter and one receiver")
    prep = prepare(scene, config) if prepared is None else prepared
    timings = dict(prep.timings)
    timings.update(trace_refine=0.0, dedup=0.0)
    counts: dict[str, int] = {}
    sets = []
    for tx_index in range(len(scene.transmitters)):
        ps, tm, ct = compute_link_paths(prep, tx_index, config)
        sets.append(ps)
        for k, v in tm.items():
            timings[k] += v
        for k, v in ct.items():
            counts[k] = counts.get(k, 0) + v
    paths = PathSet.concat(sets)
    if len(paths):
        paths = paths.take(np.lexsort((paths.hash, paths.length, paths.rx, paths.tx)))
    t = time.perf_counter()
    if len(paths):
        path_coefficients(paths, scene.materials, config.em)
    timings["em"] = _ms(t)
    return SimulationResult(scene, paths, timings, prep, counts)


_KIND_NAMES = {int(InteractionKind.SPECULAR): "specular", int(InteractionKind.SCATTER): "scatter",
               int(InteractionKind.DIFFRACTION): "diffraction"}


def path_records(paths: PathSet, scene: Scene, em_config: EmConfig = EmConfig()) -> list[dict]:
    """One JSON-ready record per path (labels in file numbering)."""
    if len(paths) == 0:
        return []
    coeff = path_coefficients(paths, scene.materials, em_config)
    hashes = hash_pathset(paths)
    out = []
    for p in range(len(paths)):
        n = int(paths.n[p])
        labels = []
        for k in range(n):
            kind = int(paths.kind[p, k])
            if kind == InteractionKind.DIFFRACTION:
                labels.append({"edge": int(paths.edge[p, k])})
            else:
                s = int(paths.surface_label[p, k])
                m = int(paths.material_label[p, k])
                rec = {"surface": scene.surface_ids[s], "material": scene.material_ids[m]}
                if kind == InteractionKind.SCATTER:
                    rec["voxel"] = [int(v) for v in paths.voxel[p, k]]
                labels.append(rec)
        a = complex(coeff[p])
        length = float(paths.length[p])
        out.append({
            "tx": int(paths.tx[p]),
            "rx": int(paths.rx[p]),
            "kind_sequence": [_KIND_NAMES[int(paths.kind[p, k])] for k in range(n)],
            "points": [[float(v) for v in paths.point[p, k]] for k in range(n)],
            "labels": labels,
            "length_m": length,
            "delay_s": length / C0,
            "|a|": abs(a),
            "phase": math.atan2(a.imag, a.real),
            "hash": f"{int(hashes[p]):016x}",
        })
    return out


def write_jsonl(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------- training inputs


def reference_cirs(result: SimulationResult, materials: dict[int, MaterialParams] | None = None,
                   em_config: EmConfig = EmConfig(), tx: int = 0) -> dict[int, np.ndarray]:
    """Band-limited CIR per receiver of one transmitter under ``materials`` (scene table by default)."""
    materials = result.scene.materials if materials is None else materials
    return {j: synthesize_cir(result.link(tx, j), materials, em_config).cir
            for j in range(len(result.scene.receivers))}


def build_links(result: SimulationResult, targets: dict[int, np.ndarray], em_config: EmConfig = EmConfig(),
                tx: int = 0) -> dict[int, Link]:
    """Frozen training links for every receiver that has both paths and a reference."""
    links = {}
    for j, target in targets.items():
        ps = result.link(tx, j)
        if len(ps):
            links[j] = make_link(j, ps, target, em_config)
    return links


# --------------------------------------------------------------------------- depth scaling


@dataclass
class BenchRow:
    depth: int
    trace_refine_ms: float  # median, scattering enabled
    trace_refine_ms_specular: float  # median, specular only
    paths_specular: int
    paths_with_scatter: int


def bench_depths(scene: Scene, config: SimulationConfig = SimulationConfig(), depths=(2, 3, 4, 5),
                 repeats: int = 5, prepared: Prepared | None = None, tx: int = 0) -> list[BenchRow]:
    """Median trace+refine time and deduplicated path counts per maximum depth.

    One untimed warm-up run precedes the timed repeats of every setting.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    prep = prepare(scene, config) if prepared is None else prepared
    rows = []
    for depth in depths:
        out = {}
        for scat in (False, True):
            trace = replace(config.trace, max_depth=int(depth), enable_scattering=scat)
            cfg = replace(config, trace=trace)
            ps, _, _ = compute_link_paths(prep, tx, cfg)
            times = [compute_link_paths(prep, tx, cfg)[1]["trace_refine"] for _ in range(repeats)]
            out[scat] = (float(np.median(times)), len(ps))
        rows.append(BenchRow(int(depth), out[True][0], out[False][0], out[False][1], out[True][1]))
    return rows
