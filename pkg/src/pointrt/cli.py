"""Command-line entry point: ``pointrt <command> ...``.

Exit codes: 0 on success, 1 when a stage fails or a scene does not validate,
2 for usage errors (bad flags, unknown config keys, missing input files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .em import EmConfig, read_cir_csv, synthesize_cir, write_csvs
from .grid import VoxelGridConfig, build_accel, build_grid
from .isect import IntersectionConfig, cast_ray
from .learn import TrainConfig, initial_raw, physical, train
from .pipeline import (SimulationConfig, bench_depths, build_links, path_records, reference_cirs,
                       simulate, write_jsonl)
from .refine import RefinementConfig
from .scene import SceneError, load_scene, materials_to_json, validate_scene
from .synthgen import SHAPES, SynthSpec, write_synthetic
from .trace import TraceConfig

log = logging.getLogger("pointrt")

# flag name -> (type, help); the config file uses the same names with underscores
SHARED_FLAGS = {
    "voxel-size": (float, "voxel edge length in metres"),
    "point-radius": (float, "disk radius of each point in metres"),
    "depth-attenuation": (float, "depth attenuation of the disk blend, 1/m"),
    "refine-max-iters": (int, "stage-1 iteration cap"),
    "refine-retries": (int, "re-anchoring retries"),
    "refine-conv-threshold": (float, "convergence threshold on the squared gradient norm"),
    "refine-angle-threshold-deg": (float, "normal agreement threshold in degrees"),
    "refine-distance-threshold": (float, "plane distance threshold in metres"),
    "max-depth": (int, "maximum number of bounces"),
    "center-freq": (float, "carrier frequency in Hz"),
    "bandwidth": (float, "bandwidth in Hz"),
    "freq-samples": (int, "number of frequency samples"),
    "lr": (float, "Adam learning rate"),
    "iterations": (int, "training iterations"),
    "seed": (int, "random seed"),
    "threads": (int, "worker threads"),
}
BOOL_FLAGS = {"scattering": "scattered paths", "diffraction": "diffracted paths"}
CONFIG_KEYS = {k.replace("-", "_") for k in SHARED_FLAGS} | set(BOOL_FLAGS)


class UsageError(Exception):
    """Bad invocation; exit code 2."""


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except (UsageError, StageError):
        raise
    except Exception as exc:  # surface any module failure with its stage name
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    simulation: SimulationConfig
    train: TrainConfig
    threads: int | None
    seed: int


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"{p}: unknown config key(s) {unknown}")
    return doc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(getattr(args, "config", None))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v

    def get(key, default):
        return values.get(key, default)

    try:
        isect = IntersectionConfig(point_radius=float(get("point_radius", IntersectionConfig.point_radius)),
                                   depth_attenuation=float(get("depth_attenuation",
                                                               IntersectionConfig.depth_attenuation)))
        grid = VoxelGridConfig(voxel_size=float(get("voxel_size", VoxelGridConfig.voxel_size)))
        trace = TraceConfig(max_depth=int(get("max_depth", TraceConfig.max_depth)),
                            enable_scattering=bool(get("scattering", TraceConfig.enable_scattering)),
                            enable_diffraction=bool(get("diffraction", TraceConfig.enable_diffraction)))
        refine = RefinementConfig(
            max_iterations=int(get("refine_max_iters", RefinementConfig.max_iterations)),
            retry_count=int(get("refine_retries", RefinementConfig.retry_count)),
            convergence_threshold=float(get("refine_conv_threshold", RefinementConfig.convergence_threshold)),
            angle_threshold=float(get("refine_angle_threshold_deg", RefinementConfig.angle_threshold)),
            distance_threshold=float(get("refine_distance_threshold", RefinementConfig.distance_threshold)),
        )
        em = EmConfig(center_frequency=float(get("center_freq", EmConfig.center_frequency)),
                      bandwidth=float(get("bandwidth", EmConfig.bandwidth)),
                      num_freq_samples=int(get("freq_samples", EmConfig.num_freq_samples)))
        seed = int(get("seed", 0))
        tr = TrainConfig(learning_rate=float(get("lr", TrainConfig.learning_rate)),
                         iterations=int(get("iterations", TrainConfig.iterations)), seed=seed)
        threads = get("threads", None)
        if threads is not None and int(threads) < 1:
            raise ValueError("threads must be >= 1")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return RunConfig(SimulationConfig(grid, isect, trace, refine, em), tr, None if threads is None else int(threads),
                     seed)


def apply_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------- helpers


def vector(values: list[str]) -> np.ndarray:
    """Three numbers given as ``x y z`` or ``x,y,z``."""
    parts = [v for item in values for v in item.split(",") if v != ""]
    try:
        out = np.array([float(v) for v in parts])
    except ValueError:
        raise UsageError(f"not a vector: {' '.join(values)!r}") from None
    if out.shape != (3,):
        raise UsageError(f"expected 3 components, got {' '.join(values)!r}")
    return out


def existing_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def read_scene(args) -> object:
    path = args.scene_flag or args.scene
    if path is None:
        raise UsageError("a scene file is required (positional or --scene)")
    p = existing_file(path)
    with stage("scene"):
        return load_scene(p)


def out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.1f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


# --------------------------------------------------------------------------- commands


def cmd_validate_scene(args) -> int:
    scene = read_scene(args)
    diags = validate_scene(scene, require_antennas=args.require_antennas)
    for d in diags:
        print(d)
    errors = [d for d in diags if d.severity == "error"]
    print(f"{args.scene_flag or args.scene}: {scene.num_points} points, {len(scene.edges)} edges, "
          f"{len(scene.transmitters)} TX, {len(scene.receivers)} RX, {len(errors)} error(s)")
    return 1 if errors else 0


def cmd_voxelize(args) -> int:
    cfg = resolve_config(args)
    scene = read_scene(args)
    with stage("grid"):
        dps = build_grid(scene, cfg.simulation.grid, cfg.simulation.isect.point_radius)
    stats = dps.stats()
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "count", "rx_x", "rx_y", "rx_z", "min_x", "min_y", "min_z",
                        "max_x", "max_y", "max_z", "dominant_surface"])
            for d in range(len(dps)):
                w.writerow([*map(int, dps.voxel[d]), int(dps.count[d]), *map(float, dps.reception[d]),
                            *map(float, dps.aabb_min[d]), *map(float, dps.aabb_max[d]),
                            scene.surface_ids[int(dps.dominant_label[d])]])
    if args.stats or not args.out:
        print(json.dumps(stats, indent=2))
    return 0


def cmd_cast(args) -> int:
    cfg = resolve_config(args)
    scene = read_scene(args)
    origin = vector(args.origin)
    direction = vector(args.dir)
    if not np.linalg.norm(direction) > 0:
        raise UsageError("--dir must be a non-zero vector")
    with stage("isect"):
        accel = build_accel(build_grid(scene, cfg.simulation.grid, cfg.simulation.isect.point_radius))
        hit = cast_ray(origin, direction, accel, cfg.simulation.isect)
    if hit is None:
        print(json.dumps({"hit": False}))
        return 0
    print(json.dumps({
        "hit": True,
        "position": hit.position.tolist(),
        "normal": hit.normal.tolist(),
        "distance": hit.distance,
        "dps_index": hit.dps_index,
        "voxel": [int(v) for v in accel.dps.voxel[hit.dps_index]],
        "surface": scene.surface_ids[hit.surface_label],
        "material": scene.material_ids[hit.material_label],
    }))
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    apply_threads(cfg.threads)
    scene = read_scene(args)
    out = out_dir(args.out)
    sim = cfg.simulation
    with stage("simulate"):
        result = simulate(scene, sim)
    with stage("em"):
        write_jsonl(path_records(result.paths, scene, sim.em), out / "paths.jsonl")
        cir_dir = out_dir(out / "cir")
        for tx in range(len(scene.transmitters)):
            for rx in range(len(scene.receivers)):
                cir = synthesize_cir(result.link(tx, rx), scene.materials, sim.em)
                write_csvs(cir, cir_dir / f"tx{tx}_rx{rx}")
    if args.dump_vis:
        result.prepared.vis.dump(out / "visibility.bin")
    timing = {"stages_ms": {k: round(v, 3) for k, v in result.timings.items()}, "counts": result.counts,
              "links": len(scene.transmitters) * len(scene.receivers)}
    dump_json(timing, out / "timing.json")
    print(format_table(["stage", "ms"], [[k, float(v)] for k, v in result.timings.items()]))
    print(f"{len(result.paths)} paths over {timing['links']} link(s) written to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    apply_threads(cfg.threads)
    scene = read_scene(args)
    if args.repeats < 5:
        raise UsageError("--repeats must be at least 5")
    with stage("bench"):
        rows = bench_depths(scene, cfg.simulation, args.depths, args.repeats)
    header = ["depth", "trace_refine_ms", "trace_refine_ms_specular", "paths_specular", "paths_with_scatter"]
    table = [[r.depth, r.trace_refine_ms, r.trace_refine_ms_specular, r.paths_specular, r.paths_with_scatter]
             for r in rows]
    text = format_table(header, table)
    print(text)
    if args.out:
        out = out_dir(args.out)
        with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(table)
        (out / "bench.txt").write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    apply_threads(cfg.threads)
    scene = read_scene(args)
    sim = cfg.simulation
    if not args.self_consistent and args.reference is None:
        raise UsageError("train needs --reference DIR with ground-truth CIR files or --self-consistent")
    refs = {}
    if not args.self_consistent:
        ref_dir = Path(args.reference)
        if not ref_dir.is_dir():
            raise UsageError(f"reference directory not found: {ref_dir}")
        for j in range(len(scene.receivers)):
            f = ref_dir / f"tx0_rx{j}_cir.csv"
            if f.is_file():
                with stage("learn"):
                    refs[j] = read_cir_csv(f, sim.em)
        if not refs:
            raise UsageError(f"no ground-truth CIR files (tx0_rx<j>_cir.csv) in {ref_dir}")
    out = out_dir(args.out)
    with stage("simulate"):
        result = simulate(scene, sim)
    with stage("learn"):
        if args.self_consistent:
            refs = reference_cirs(result, scene.materials, sim.em)
        links = build_links(result, refs, sim.em)
        t0 = time.perf_counter()
        hist = train(links, scene.num_materials, cfg.train, sim.em, len(scene.receivers),
                     labels=list(scene.material_ids))
        elapsed = time.perf_counter() - t0
    hist.write_csv(out / "train_log.csv")
    dump_json(materials_to_json(scene, hist.final), out / "materials.json")
    rows = []
    for k, row in enumerate(hist.params[-1]):
        init = physical(initial_raw(1))[0]
        rows.append([scene.material_ids[k], *map(float, init), *map(float, row)])
    print(format_table(["label", "eps0", "sigma0", "S0", "eps", "sigma", "S"],
                       [[r[0]] + [f"{v:.4f}" for v in r[1:]] for r in rows]))
    finite = hist.loss[np.isfinite(hist.loss)]
    if len(finite):
        print(f"loss {finite[0]:.6g} -> {finite[-1]:.6g} over {len(hist.loss)} iterations ({elapsed:.1f} s)")
    return 0


def cmd_synthgen(args) -> int:
    try:
        spec = SynthSpec(args.shape, density=args.density, noise=args.noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with stage("synthgen"):
        _, truth = write_synthetic(spec, args.out, args.truth, image_order=args.image_order, binary=args.binary)
    print(f"wrote {args.out} and {args.truth} ({len(truth.paths)} analytic path(s))")
    return 0


# --------------------------------------------------------------------------- parser


def _scene_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("scene", nargs="?", help="scene file (JSON or binary)")
    p.add_argument("--scene", dest="scene_flag", metavar="FILE", help="scene file, alternative to the positional")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with the same keys as the flags (flags win)")
    for flag, (typ, help_) in SHARED_FLAGS.items():
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=None, help=help_)
    for flag, help_ in BOOL_FLAGS.items():
        p.add_argument(f"--{flag}", dest=flag, action=argparse.BooleanOptionalAction, default=None,
                       help=f"enable {help_}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointrt", description="Point-cloud radio ray tracing and material learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-scene", help="check a scene file")
    _scene_arg(p)
    p.add_argument("--require-antennas", action="store_true")
    p.set_defaults(func=cmd_validate_scene)

    p = sub.add_parser("voxelize", help="build the voxel grid and report statistics")
    _scene_arg(p)
    p.add_argument("--stats", action="store_true", help="print grid statistics as JSON")
    p.add_argument("--out", help="CSV with one row per point set")
    _shared(p)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("cast", help="cast one ray against the scene")
    _scene_arg(p)
    p.add_argument("--from", dest="origin", nargs="+", required=True, metavar="X,Y,Z")
    p.add_argument("--dir", nargs="+", required=True, metavar="X,Y,Z")
    _shared(p)
    p.set_defaults(func=cmd_cast)

    p = sub.add_parser("simulate", help="compute paths, CIRs and a timing report")
    _scene_arg(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-vis", action="store_true", help="also write the visibility bitset")
    _shared(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="depth-scaling table")
    _scene_arg(p)
    p.add_argument("--out", help="directory for bench.csv and bench.txt")
    p.add_argument("--depths", nargs="+", type=int, default=[2, 3, 4, 5])
    p.add_argument("--repeats", type=int, default=5)
    _shared(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="learn material parameters from CIRs")
    _scene_arg(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reference", help="directory of tx0_rx<j>_cir.csv ground-truth files")
    p.add_argument("--self-consistent", action="store_true",
                   help="generate ground truth from the scene's own material table")
    _shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthgen", help="write a synthetic scene and its analytic ground truth")
    p.add_argument("--shape", choices=SHAPES, required=True)
    p.add_argument("--density", type=float, default=SynthSpec.density)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-order", type=int, default=2)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--out", required=True, help="scene file")
    p.add_argument("--truth", required=True, help="ground-truth JSON")
    p.set_defaults(func=cmd_synthgen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except UsageError as exc:
        print(f"pointrt: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"pointrt: error in {exc}", file=sys.stderr)
        return 1
    except SceneError as exc:
        print(f"pointrt: error in scene: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
