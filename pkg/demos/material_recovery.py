"""Recover material parameters of a room from its own channel responses.

Reference CIRs are synthesized from the room's true material table. Training
then starts every material at eps_r = 3, sigma = 0.01, S = 0.3 and fits the
reference with Adam, one receiver per step. The path geometry stays frozen
throughout.

    python demos/material_recovery.py --iterations 5000
"""

import argparse
import time

import numpy as np

from pointrt.learn import TrainConfig, initial_raw, total_loss, train
from pointrt.pipeline import SimulationConfig, build_links, reference_cirs, simulate
from pointrt.synthgen import SynthSpec, generate
from pointrt.trace import TraceConfig

parser = argparse.ArgumentParser()
parser.add_argument("--iterations", type=int, default=1000)
parser.add_argument("--density", type=float, default=4096.0)
args = parser.parse_args()

scene = generate(SynthSpec("room5mat", density=args.density))
result = simulate(scene, SimulationConfig(trace=TraceConfig(max_depth=2, enable_scattering=True)))
links = build_links(result, reference_cirs(result))
print(f"{len(result.paths)} paths over {len(links)} receivers")

t0 = time.perf_counter()
hist = train(links, scene.num_materials, TrainConfig(iterations=args.iterations), num_receivers=len(scene.receivers))
print(f"{args.iterations} steps in {time.perf_counter() - t0:.0f} s")
print(f"loss {total_loss(links, initial_raw(scene.num_materials)):.3e} -> {total_loss(links, hist.raw):.3e}")

names = ["floor", "ceiling", "walls x", "walls y", "table"]
print(f"\n{'material':10s} {'eps_r':>15s} {'sigma':>15s} {'S':>13s}")
for label, row in enumerate(hist.params[-1]):
    true = scene.materials[label]
    print(f"{names[label]:10s} {row[0]:6.3f} ({true.relative_permittivity:5.2f}) "
          f"{row[1]:6.4f} ({true.conductivity:5.3f}) {row[2]:5.3f} ({true.scattering_coefficient:4.2f})")
print("\nfirst ten losses:", np.round(hist.loss[:10], 4))
