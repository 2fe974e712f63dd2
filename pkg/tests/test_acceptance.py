"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE`` and printed in a terminal
summary section at the end of the run. Tolerances are fixed constants below.
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest
from oracles import naive_blend, projected_gradient_error

from conftest import ACCEPTANCE
from pointrt import autodiff as ad
from pointrt.cli import main
from pointrt.dedup import hash_pathset
from pointrt.em import (
    EmConfig,
    MaterialArrays,
    channel_var,
    coefficients_var,
    complex_permittivity,
    frequency_matrix,
    fresnel_reflection,
    path_geometry,
)
from pointrt.grid import build_accel, build_grid
from pointrt.isect import IntersectionConfig, intersect_dps
from pointrt.learn import TrainConfig, cir_loss, initial_raw, make_link, simulate_cir, total_loss, train
from pointrt.paths import InteractionKind, PathSet
from pointrt.pipeline import SimulationConfig, bench_depths, compute_link_paths, prepare, simulate
from pointrt.refine import RefinementConfig, length_and_gradient, refine_candidates
from pointrt.scene import MaterialParams, build_scene
from pointrt.synthgen import SynthSpec, generate, generate_with_truth, write_synthetic
from pointrt.trace import TraceConfig, coarse_candidates, run_bounces

# ---- pinned tolerances
BLEND_TOL_M = 1e-9
BLEND_PAIRS = 1000
BLEND_BUDGET_S = 10.0
IMAGE_TOL_M = 5e-3
IMAGE_BUDGET_S = 30.0
GRAD_PAIRS = 500
GRAD_REL_TOL = 1e-5
CONVERGED_FRACTION = 0.95
DEPTH_TIME_RATIO = 4.0
SCATTER_COUNT_RATIO = 10.0
LINK_BUDGET_S = 2.0
EM_DRAWS = 100
EM_REL_TOL = 1e-4
EPS_REL_TOL = 0.05
SIGMA_REL_TOL = 0.10
S_ABS_TOL = 0.05
LOSS_RATIO = 0.01
TRAIN_BUDGET_S = 15 * 60.0
ANCHOR_TOL = 1e-12
MIN_TRAJECTORIES = 100_000


def criterion(num: int, title: str):
    """Record the outcome of the wrapped test under criterion ``num``.

    The test returns a short detail string on success; any exception marks
    the criterion FAIL with the exception text and propagates.
    """

    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                ACCEPTANCE[num] = ("FAIL", title, msg[:200])
                print(f"criterion {num} FAIL {title}: {msg[:200]}")
                raise
            ACCEPTANCE[num] = ("PASS", title, detail or "")
            print(f"criterion {num} PASS {title}: {detail}")

        return run

    return deco


def _check(cond: bool, msg: str):
    if not cond:
        raise AssertionError(msg)


# --------------------------------------------------------------------------- 1


@criterion(1, "disk blend vs direct evaluation")
def test_blend_matches_direct_evaluation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 6000
    pos = rng.uniform(-0.5, 0.5, (n, 3))
    pos[:, 2] = rng.normal(0.0, 0.005, n)
    nrm = rng.normal([0, 0, 1], 0.25, (n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    scene = build_scene(np.column_stack([pos, nrm, np.zeros(n), np.zeros(n)]),
                        materials={0: MaterialParams(5.3, 0.2, 0.2)})
    accel = build_accel(build_grid(scene))
    cfg = IntersectionConfig()
    r = cfg.point_radius
    worst, hits = 0.0, 0
    for _ in range(BLEND_PAIRS):
        d = int(rng.integers(len(accel.dps)))
        m = accel.dps.members(d)
        aim = pos[m[rng.integers(len(m))]] + rng.uniform(-r, r, 3)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        o = aim - rng.uniform(0.2, 3.0) * u
        ref = naive_blend(o, u, pos[m], nrm[m], r, cfg.depth_attenuation, cfg.min_weight_cutoff)
        hit = intersect_dps(o, u, d, accel, cfg)
        _check((ref is None) == (hit is None), f"hit/miss disagreement on set {d}")
        if hit is not None:
            hits += 1
            worst = max(worst, float(np.abs(hit.position - ref[0]).max()))
    elapsed = time.perf_counter() - t0
    _check(worst <= BLEND_TOL_M, f"max deviation {worst:.3e} m")
    _check(hits > BLEND_PAIRS // 2, f"only {hits} hits")
    _check(elapsed < BLEND_BUDGET_S, f"took {elapsed:.1f} s")
    return f"{BLEND_PAIRS} pairs, {hits} hits, max |dq| {worst:.1e} m (< {BLEND_TOL_M:g}), {elapsed:.1f} s"


# --------------------------------------------------------------------------- 2


def _specular_links(scene, truth):
    cfg = SimulationConfig(trace=TraceConfig(max_depth=2, enable_scattering=False, enable_diffraction=False))
    res = simulate(scene, cfg)
    ps = res.paths
    found = {}
    for i in range(len(ps)):
        n = int(ps.n[i])
        key = (int(ps.tx[i]), int(ps.rx[i]), tuple(int(scene.surface_ids[s]) for s in ps.surface_label[i, :n]))
        _check(key not in found, f"duplicate trajectory {key}")
        found[key] = ps.point[i, :n]
    expect = {(p["tx"], p["rx"], tuple(p["surfaces"])): np.array(p["points"]).reshape(-1, 3) for p in truth.paths}
    return found, expect


@criterion(2, "image-method equivalence (plane, corner)")
def test_image_method_equivalence():
    t0 = time.perf_counter()
    notes = []
    for shape in ("plane", "corner"):
        for noise in (0.0, 0.002):
            scene, truth = generate_with_truth(SynthSpec(shape, noise=noise), image_order=2)
            found, expect = _specular_links(scene, truth)
            _check(set(found) == set(expect),
                   f"{shape}/noise {noise}: missing {sorted(set(expect) - set(found))}, "
                   f"extra {sorted(set(found) - set(expect))}")
            err = max((float(np.abs(found[k] - expect[k]).max()) for k in expect if len(expect[k])), default=0.0)
            _check(err <= IMAGE_TOL_M, f"{shape}/noise {noise}: point error {err:.2e} m")
            notes.append(f"{shape}/{noise:g}: {len(expect)} paths, {err * 1e3:.2f} mm")
    elapsed = time.perf_counter() - t0
    _check(elapsed < IMAGE_BUDGET_S, f"took {elapsed:.1f} s")
    return "; ".join(notes) + f"; {elapsed:.1f} s"


# --------------------------------------------------------------------------- 3


@criterion(3, "path-length gradient vs central differences")
def test_length_gradient():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(GRAD_PAIRS):
        n = int(rng.integers(1, 6))
        start, end = rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)
        anchors = rng.uniform(-2, 2, (n, 3))
        normals = rng.normal(size=(n, 3))
        x = rng.uniform(-0.5, 0.5, 2 * n)
        _, g, _, _ = length_and_gradient(start, end, anchors, normals, x)
        h = 1e-6
        fd = np.array([(length_and_gradient(start, end, anchors, normals, x + h * e)[0]
                        - length_and_gradient(start, end, anchors, normals, x - h * e)[0]) / (2 * h)
                       for e in np.eye(2 * n)])
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    _check(worst < GRAD_REL_TOL, f"max relative error {worst:.2e}")
    return f"{GRAD_PAIRS} configurations, max relative error {worst:.1e} (< {GRAD_REL_TOL:g})"


# --------------------------------------------------------------------------- 4


@criterion(4, "refinement converges before the iteration cap")
def test_convergence_fraction():
    notes = []
    for shape in ("plane", "corner", "room5mat"):
        scene = generate(SynthSpec(shape))
        prep = prepare(scene)
        bt = run_bounces(prep.accel, prep.vis, scene.transmitters[0], scene.receivers,
                         TraceConfig(max_depth=2, enable_scattering=False))
        spec, _ = coarse_candidates(bt, prep.accel, 0, scene.transmitters[0], scene.receivers)
        cfg = RefinementConfig(key_attempt_limit=0)  # every candidate, no early exit per trajectory
        _check(cfg.max_iterations == 50 and cfg.convergence_threshold == 1e-4, "defaults changed")
        res = refine_candidates(spec, prep.accel, config=cfg)
        frac = float(res.converged.mean())
        _check(frac >= CONVERGED_FRACTION, f"{shape}: {frac:.3f} of {len(spec)} candidates converged")
        notes.append(f"{shape} {100 * frac:.1f}% of {len(spec)}")
    return ", ".join(notes) + f" (>= {100 * CONVERGED_FRACTION:.0f}%)"


# --------------------------------------------------------------------------- 5


@pytest.mark.slow
@criterion(5, "depth scaling on the corridor")
def test_depth_scaling():
    scene = generate(SynthSpec("corridor"))
    rows = bench_depths(scene, SimulationConfig(), depths=(2, 3, 4, 5), repeats=5)
    by = {r.depth: r for r in rows}
    ratio = by[5].trace_refine_ms / by[2].trace_refine_ms
    count_ratio = by[5].paths_with_scatter / by[5].paths_specular
    spec_counts = [by[d].paths_specular for d in (2, 3, 4, 5)]
    all_counts = [by[d].paths_with_scatter for d in (2, 3, 4, 5)]
    _check(ratio <= DEPTH_TIME_RATIO, f"depth-5/depth-2 time ratio {ratio:.2f}")
    _check(count_ratio >= SCATTER_COUNT_RATIO, f"path count ratio {count_ratio:.1f}")
    _check(spec_counts == sorted(spec_counts) and all_counts == sorted(all_counts), "counts not monotone")
    return (f"time {by[2].trace_refine_ms:.0f} -> {by[5].trace_refine_ms:.0f} ms (x{ratio:.2f} <= {DEPTH_TIME_RATIO:g}),"
            f" paths {by[5].paths_specular} specular vs {by[5].paths_with_scatter} with scatter"
            f" (x{count_ratio:.0f} >= {SCATTER_COUNT_RATIO:g})")


# --------------------------------------------------------------------------- 6


@criterion(6, "per-link path computation latency")
def test_link_latency():
    scene = generate(SynthSpec("room5mat"))
    cfg = SimulationConfig(trace=TraceConfig(max_depth=2, enable_scattering=True))
    compute_link_paths(prepare(generate(SynthSpec("room5mat", density=64))), 0, cfg)  # compile outside the clock
    t0 = time.perf_counter()
    prep = prepare(scene, cfg)
    paths, _, _ = compute_link_paths(prep, 0, cfg)
    elapsed = time.perf_counter() - t0
    links = len(scene.transmitters) * len(scene.receivers)
    per_link = elapsed / links
    _check(per_link < LINK_BUDGET_S, f"{per_link:.2f} s per link")
    _check(elapsed < LINK_BUDGET_S, f"all {links} links together took {elapsed:.2f} s")
    return f"{links} links, {len(paths)} paths in {elapsed:.2f} s including grid and visibility ({per_link:.2f} s/link)"


# --------------------------------------------------------------------------- 7


@pytest.fixture(scope="module")
def corner_geometry():
    scene = generate(SynthSpec("corner"))
    res = simulate(scene, SimulationConfig(trace=TraceConfig(max_depth=2)))
    ps = res.link(0, 0)
    pick = [int(np.flatnonzero(ps.n == 0)[0])]
    for kind in (InteractionKind.SPECULAR, InteractionKind.SCATTER):
        for n in (1, 2):
            idx = np.flatnonzero((ps.n == n) & (ps.kind[:, n - 1] == kind))
            pick += idx[:3].tolist()
    return path_geometry(ps.take(np.array(pick)))


@criterion(7, "EM gradients vs central differences")
def test_em_gradients(corner_geometry):
    rng = np.random.default_rng(99)
    em = EmConfig()
    geom = corner_geometry
    F = frequency_matrix(geom.delays, em)
    base = MaterialArrays(np.array([4.0, 3.0]), np.array([0.1, 0.05]), np.array([0.3, 0.4]))
    target = channel_var(coefficients_var(geom, base, em), F)[1].value
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(EM_DRAWS):
        eps = rng.uniform(1.5, 8.0, 2)
        sig = rng.uniform(0.01, 1.0, 2)
        S = rng.uniform(0.05, 0.9, 2)
        cos = rng.uniform(0.05, 0.95, 2)
        note("permittivity", projected_gradient_error(
            lambda e, s: complex_permittivity(e, s, em.center_frequency), [eps, sig], rng))
        for pol in ("TE", "TM"):
            note("fresnel", projected_gradient_error(
                lambda e, s, c, pol=pol: fresnel_reflection(complex_permittivity(e, s, em.center_frequency), c, pol),
                [eps, sig, cos], rng))
        note("coefficient", projected_gradient_error(
            lambda e, s, q: coefficients_var(geom, MaterialArrays(e, s, q), em), [eps, sig, S], rng))
        note("cir", projected_gradient_error(
            lambda e, s, q: channel_var(coefficients_var(geom, MaterialArrays(e, s, q), em), F)[1],
            [eps, sig, S], rng))
        note("loss", projected_gradient_error(
            lambda e, s, q: cir_loss(channel_var(coefficients_var(geom, MaterialArrays(e, s, q), em), F)[1], target),
            [eps, sig, S], rng))
    bad = {k: v for k, v in worst.items() if not v < EM_REL_TOL}
    _check(not bad, f"relative errors {bad}")
    return f"{EM_DRAWS} draws, worst " + ", ".join(f"{k} {v:.0e}" for k, v in worst.items())


# --------------------------------------------------------------------------- 8


@pytest.mark.slow
@criterion(8, "material recovery on the five-material room")
def test_material_recovery():
    t0 = time.perf_counter()
    scene = generate(SynthSpec("room5mat"))
    em = EmConfig()
    res = simulate(scene, SimulationConfig(trace=TraceConfig(max_depth=2, enable_scattering=True)))
    links = {}
    for j in range(len(scene.receivers)):
        ps = res.link(0, j)
        if len(ps):
            links[j] = make_link(j, ps, simulate_cir(ps, scene.materials, em), em)
    _check(len(links) == 6, f"{len(links)} receivers with paths")
    n_mat = scene.num_materials
    hist = train(links, n_mat, TrainConfig(learning_rate=0.01, iterations=5000), em, len(scene.receivers))
    elapsed = time.perf_counter() - t0
    truth = np.array([[m.relative_permittivity, m.conductivity, m.scattering_coefficient]
                      for _, m in sorted(scene.materials.items())])
    final = hist.params[-1]
    used = hist.used
    e_eps = np.abs(final[:, 0] / truth[:, 0] - 1)[used]
    e_sig = np.abs(final[:, 1] / truth[:, 1] - 1)[used]
    e_S = np.abs(final[:, 2] - truth[:, 2])[used]
    l0 = total_loss(links, initial_raw(n_mat), em)
    l1 = total_loss(links, hist.raw, em)
    _check(used.any(), "no material on any path")
    _check(e_eps.max() <= EPS_REL_TOL, f"permittivity errors {e_eps.round(4)}")
    _check(e_sig.max() <= SIGMA_REL_TOL, f"conductivity errors {e_sig.round(4)}")
    _check(e_S.max() <= S_ABS_TOL, f"scattering errors {e_S.round(4)}")
    _check(l1 < LOSS_RATIO * l0, f"loss {l0:.3e} -> {l1:.3e}")
    _check(elapsed < TRAIN_BUDGET_S, f"took {elapsed:.0f} s")
    return (f"{int(used.sum())} materials, max err eps {e_eps.max():.1e} rel, sigma {e_sig.max():.1e} rel,"
            f" S {e_S.max():.1e} abs; loss {l0:.2e} -> {l1:.2e}; {elapsed:.0f} s")


# --------------------------------------------------------------------------- 9


@criterion(9, "loss anchors")
def test_loss_anchors():
    rng = np.random.default_rng(4)
    h = rng.normal(size=129) + 1j * rng.normal(size=129)
    vals = [cir_loss(h, h), cir_loss(np.zeros_like(h), h), cir_loss(2 * h, h)]
    var_vals = [float(cir_loss(ad.Var(x), h).value) for x in (h, np.zeros_like(h), 2 * h)]
    for got in (vals, var_vals):
        _check(abs(got[0]) <= ANCHOR_TOL and abs(got[1] - 1) <= ANCHOR_TOL and abs(got[2] - 1) <= ANCHOR_TOL,
               f"anchors {got}")
    return f"loss(h,h)={vals[0]:.0e}, loss(0,h)-1={vals[1] - 1:.0e}, loss(2h,h)-1={vals[2] - 1:.0e}"


# --------------------------------------------------------------------------- 10


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


@criterion(10, "determinism of simulate and train")
def test_determinism(tmp_path):
    scene_file = tmp_path / "room.json"
    write_synthetic(SynthSpec("room5mat", density=1024), scene_file, tmp_path / "truth.json")
    outs = []
    for run in range(2):
        sim = tmp_path / f"sim{run}"
        trn = tmp_path / f"train{run}"
        _check(main(["simulate", str(scene_file), "--out", str(sim), "--max-depth", "2"]) == 0, "simulate failed")
        _check(main(["train", str(scene_file), "--self-consistent", "--out", str(trn), "--max-depth", "2",
                     "--iterations", "40", "--seed", "3"]) == 0, "train failed")
        outs.append((_tree_bytes(sim), _tree_bytes(trn)))
    (s0, t0), (s1, t1) = outs
    _check("paths.jsonl" in s0 and "train_log.csv" in t0, "expected outputs missing")
    _check(s0 == s1, f"simulate outputs differ: {[k for k in s0 if s0[k] != s1.get(k)]}")
    _check(t0 == t1, f"training outputs differ: {[k for k in t0 if t0[k] != t1.get(k)]}")
    n_paths = len(s0["paths.jsonl"].splitlines())
    return f"{len(s0)} simulate files ({n_paths} paths) and {len(t0)} training files byte-identical"


# --------------------------------------------------------------------------- 11


def _exact_keys(ps: PathSet) -> list[tuple]:
    keys = []
    for i in range(len(ps)):
        items = []
        for k in range(int(ps.n[i])):
            kind = int(ps.kind[i, k])
            if kind == InteractionKind.SCATTER:
                items.append((kind, tuple(int(v) for v in ps.voxel[i, k])))
            elif kind == InteractionKind.DIFFRACTION:
                items.append((kind, int(ps.edge[i, k])))
            else:
                items.append((kind, int(ps.surface_label[i, k])))
        keys.append((int(ps.tx[i]), int(ps.rx[i]), tuple(items)))
    return keys


@criterion(11, "trajectory hash equals exact grouping")
def test_hash_soundness():
    corpora = {"plane": 3, "corner": 3, "room5mat": 3, "corridor": 5}
    hash_to_key, key_to_hash = {}, {}
    for shape, depth in corpora.items():
        scene = generate(SynthSpec(shape, with_edges=True))
        prep = prepare(scene)
        for t, tx in enumerate(scene.transmitters):
            bt = run_bounces(prep.accel, prep.vis, tx, scene.receivers, TraceConfig(max_depth=depth))
            spec, scat = coarse_candidates(bt, prep.accel, t, tx, scene.receivers)
            cfg = replace(SimulationConfig(), trace=TraceConfig(max_depth=min(depth, 3), enable_diffraction=True))
            final, _, _ = compute_link_paths(prep, t, cfg)
            for ps in (spec, scat, final):
                for h, k in zip(hash_pathset(ps).tolist(), _exact_keys(ps)):
                    # surface labels are per scene; tag the key with its corpus
                    k = (shape, k)
                    _check(hash_to_key.setdefault((shape, h), k) == k, f"hash collision in {shape}")
                    _check(key_to_hash.setdefault(k, h) == h, f"unstable hash in {shape}")
    distinct = len(key_to_hash)
    _check(distinct >= MIN_TRAJECTORIES, f"only {distinct} distinct trajectories")
    return f"{distinct} distinct trajectories over {len(corpora)} corpora, 0 collisions"

