"""Time the compiled and pure-Python kernels on identical inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from advlab import kernels
from advlab.envs import build
from advlab.kernels import TabularSim


def workloads(impl):
    mdp = build("frozen_tmaze", "eval")
    sim = TabularSim(mdp, impl)
    pol = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    u_roll = np.random.default_rng(0).random((4096, 3))
    rng = np.random.default_rng(1)
    r = rng.normal(size=4096)
    v = rng.normal(size=4096)
    nv = rng.normal(size=4096)
    f = rng.choice([0, 0, 0, 0, 1, 2], size=4096).astype(np.int8)
    return {
        "rollout 4096 steps": lambda: sim.rollout(pol, -1, 0, u_roll),
        "episodes 1000": lambda: sim.episodes(pol, 1000, np.random.default_rng(2)),
        "returns 4096": lambda: kernels.discounted_returns(r, f, nv, 0.99, impl),
        "gae 4096": lambda: kernels.gae(r, v, nv, f, 0.99, 0.95, impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    found = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(found)}")
    table = {}
    for name, impl in found.items():
        for label, fn in workloads(impl).items():
            table.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'workload':<22}" + "".join(f"{n:>12}" for n in found) + ("     speedup" if len(found) > 1 else ""))
    for label, times in table.items():
        row = f"{label:<22}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in found)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
