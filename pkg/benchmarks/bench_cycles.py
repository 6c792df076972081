"""Compare the compiled and pure-Python cycle-counting kernels.

    python3 benchmarks/bench_cycles.py [--graphs 2000] [--repeat 3]

Uses QM9 skeletons when data/qm9.smi.gz exists, plus denser random graphs.
"""

import argparse
import gzip
import time
from pathlib import Path

import numpy as np

from skelgan import _cycles_py, structure
from skelgan.graph import Skeleton
from skelgan.smiles import SmilesError, parse_smiles

ROOT = Path(__file__).resolve().parents[1]


def qm9_skeletons(limit):
    path = ROOT / "data" / "qm9.smi.gz"
    if not path.exists():
        return []
    out = []
    with gzip.open(path, "rt") as fh:
        for line in fh:
            try:
                out.append(parse_smiles(line.split()[0]).skeleton)
            except (SmilesError, IndexError):
                continue
            if len(out) >= limit:
                break
    return out


def random_skeletons(count, n, p, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
        out.append(Skeleton(n, np.array(pairs, dtype=np.int64).reshape(-1, 2)))
    return out


def bench(kernel, inputs, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for indptr, indices, n in inputs:
            kernel(indptr, indices, n, 6)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--graphs", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if structure.KERNEL != "compiled":
        print("compiled kernel not built (pip install -e . --no-build-isolation); timing Python only")
    suites = {
        "qm9": qm9_skeletons(args.graphs),
        "G(12, 0.3)": random_skeletons(args.graphs // 4, 12, 0.3),
        "G(20, 0.2)": random_skeletons(args.graphs // 20, 20, 0.2),
    }
    print(f"{'suite':<12} {'graphs':>7} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, skeletons in suites.items():
        if not skeletons:
            continue
        inputs = [(*structure.csr(s), s.n) for s in skeletons]
        py = bench(_cycles_py.count_cycles_csr, inputs, args.repeat)
        if structure.KERNEL == "compiled":
            for ip, ix, n in inputs[:50]:
                assert np.array_equal(structure._kernel(ip, ix, n, 6), _cycles_py.count_cycles_csr(ip, ix, n, 6))
            co = bench(structure._kernel, inputs, args.repeat)
            print(f"{name:<12} {len(inputs):>7} {1e3 * py:>10.1f} {1e3 * co:>12.1f} {py / co:>7.1f}x")
        else:
            print(f"{name:<12} {len(inputs):>7} {1e3 * py:>10.1f} {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
