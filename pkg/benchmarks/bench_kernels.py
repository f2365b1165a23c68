"""Time the hot kernels and two end-to-end workloads under both backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each backend runs in its own interpreter because ``DIRAC_BACKEND`` is read
once at import time. Timings are best-of-``repeat`` after one warm-up call,
so numba compilation (or cache loading) is excluded.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from diracwall import _kernels as k
from diracwall import adjoint_inversion as ai
from diracwall.greens_slab import PotentialRep, build_slab, project_potential

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
slab = build_slab(2.3, (-0.3, 0.3), 10, n_x=6)
n, d = slab.n_nodes, slab.dim
channel, partner = slab._channel_arrays
Vb = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
vx = rng.standard_normal((n, 8))
Y = rng.standard_normal((8, d, d)) + 0j
psi = rng.standard_normal((d, n, d)) + 1j * rng.standard_normal((d, n, d))
y = rng.uniform(-6, 6, 400)
c = 0.3 * rng.standard_normal((7, 8, 4))
V = PotentialRep((-0.3, 0.3), c)
basis = ai.PotentialBasis((-0.3, 0.3), 4, 6, channels=(0,))
model = ai.ForwardModel(basis, (1.7, 2.6, 3.4), 8)
kappa = 0.2 * rng.standard_normal(basis.size)
obs = ai.ObservationSet.from_preset("M0", model.energies, 8, model.tr(0.5 * kappa))

cases = {
    "hermite_table": lambda: k.hermite_table(40, y),
    "node_blocks": lambda: k.node_blocks(vx, Y),
    "block_green_product": lambda: k.block_green_product(Vb, slab.G, channel, partner),
    "pair_outer": lambda: k.pair_outer(psi, psi),
    "slab_solve": lambda: slab.solve(project_potential(V, slab.x, 10)),
    "gradient": lambda: ai.gradient(model, kappa, obs),
}
out = {"backend": k.BACKEND, "sizes": {"nodes": n, "dim": d}}
for name, fn in cases.items():
    fn()
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ, DIRAC_BACKEND=backend)
    proc = subprocess.run(
        [sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    results = {b: run(b, args.repeat) for b in ("numpy", "numba")}
    sizes = results["numba"]["sizes"]
    print(f"slab nodes={sizes['nodes']}  block dim={sizes['dim']}  best of {args.repeat}")
    print(f"{'case':<22s}{'numpy [ms]':>12s}{'numba [ms]':>12s}{'speedup':>10s}")
    for name in ("hermite_table", "node_blocks", "block_green_product", "pair_outer", "slab_solve", "gradient"):
        a, b = results["numpy"][name], results["numba"][name]
        print(f"{name:<22s}{1e3 * a:12.3f}{1e3 * b:12.3f}{a / b:10.2f}x")


if __name__ == "__main__":
    main()
