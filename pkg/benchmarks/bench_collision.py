"""Compare the numba and pure-numpy collision kernels on the same inputs.

Times operator assembly and a batched Q(F, G) evaluation on each path and checks
that both produce the same numbers. Usage:

    python3 benchmarks/bench_collision.py --n-v 8 --batch 4 --repeat 3
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from vmblimit import _collision_kernels as ck
from vmblimit._accel import HAVE_NUMBA
from vmblimit.collision_kernel import KernelModel, _quadrature_arrays, group_index_maps, representative_pairs
from vmblimit.phase_grid import VelocityGrid


def _best(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n_v: int, batch: int, repeat: int, seed: int = 0) -> dict:
    vg = VelocityGrid(6.0, n_v)
    model = KernelModel()
    rv, ru, rw = representative_pairs(n_v)
    gmap = group_index_maps(n_v)
    c, cphi, sphi, wq = _quadrature_arrays(model)
    nodes = np.ascontiguousarray(vg.flat_nodes)
    mu = np.ascontiguousarray(vg.mu.ravel())
    common = (rv, ru, rw, nodes, mu, float(vg.axis[0]), vg.dv, n_v, float(model.gamma), c, cphi, sphi, wq)
    N = vg.size
    rng = np.random.default_rng(seed)
    hF = rng.standard_normal((batch, N))
    hG = rng.standard_normal((batch, N))

    def assemble(kernel):
        As, Ad = np.zeros((N, N)), np.zeros((N, N))
        kernel(*common, As, Ad)
        return As, Ad

    def collide(kernel):
        out = np.zeros((batch, N))
        kernel(*common, gmap, hF, hG, out)
        return out

    result = {"n_v": n_v, "batch": batch, "repeat": repeat, "numba_available": HAVE_NUMBA}
    ref_A = assemble(ck.assemble_np)
    ref_Q = collide(ck.collide_np)
    result["numpy_assemble_s"] = _best(lambda: assemble(ck.assemble_np), repeat)
    result["numpy_collide_s"] = _best(lambda: collide(ck.collide_np), repeat)
    if HAVE_NUMBA:
        t0 = time.perf_counter()
        nb_A = assemble(ck.assemble_nb)
        nb_Q = collide(ck.collide_nb)
        result["numba_first_call_s"] = time.perf_counter() - t0
        result["numba_assemble_s"] = _best(lambda: assemble(ck.assemble_nb), repeat)
        result["numba_collide_s"] = _best(lambda: collide(ck.collide_nb), repeat)
        scale_A = max(np.max(np.abs(ref_A[0])), np.max(np.abs(ref_A[1])))
        result["assemble_max_rel_diff"] = float(max(np.max(np.abs(nb_A[0] - ref_A[0])),
                                                    np.max(np.abs(nb_A[1] - ref_A[1]))) / scale_A)
        result["collide_max_rel_diff"] = float(np.max(np.abs(nb_Q - ref_Q)) / np.max(np.abs(ref_Q)))
        result["assemble_speedup"] = result["numpy_assemble_s"] / result["numba_assemble_s"]
        result["collide_speedup"] = result["numpy_collide_s"] / result["numba_collide_s"]
    return result


def main(argv: list[str] | None = None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n-v", type=int, default=8)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--json", action="store_true", help="print the raw result dict")
    a = p.parse_args(argv)
    r = bench(a.n_v, a.batch, a.repeat)
    if a.json:
        print(json.dumps(r, indent=2))
        return
    print(f"lattice {a.n_v}^3, batch {a.batch}, best of {a.repeat}")
    print(f"  numpy assemble {r['numpy_assemble_s']:.3f} s, collide {r['numpy_collide_s']:.3f} s")
    if r["numba_available"]:
        print(f"  numba assemble {r['numba_assemble_s']:.3f} s, collide {r['numba_collide_s']:.3f} s "
              f"(first call with compilation {r['numba_first_call_s']:.2f} s)")
        print(f"  speedup assemble {r['assemble_speedup']:.1f}x, collide {r['collide_speedup']:.1f}x")
        print(f"  max relative difference assemble {r['assemble_max_rel_diff']:.1e}, "
              f"collide {r['collide_max_rel_diff']:.1e}")


if __name__ == "__main__":
    main()
