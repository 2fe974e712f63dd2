"""How path search cost and path count grow with bounce depth.

The corridor is a long closed box, so every launched ray keeps bouncing.
The ray count stays fixed, so trace time should grow roughly in proportion
to depth. Scattered paths, one per visible hit, quickly outnumber the
specular ones.

    python demos/corridor_depth.py
"""

from pointrt.pipeline import bench_depths
from pointrt.synthgen import SynthSpec, generate

scene = generate(SynthSpec("corridor"))
print(f"corridor: {scene.num_points} points, {len(scene.receivers)} receivers")
rows = bench_depths(scene, depths=(1, 2, 3, 4, 5), repeats=5)
base = next(r for r in rows if r.depth == 2).trace_refine_ms
print(f"{'depth':>5} {'ms':>8} {'vs d2':>6} {'specular':>9} {'+scatter':>9}")
for r in rows:
    print(f"{r.depth:5d} {r.trace_refine_ms:8.1f} {r.trace_refine_ms / base:6.2f} "
          f"{r.paths_specular:9d} {r.paths_with_scatter:9d}")
