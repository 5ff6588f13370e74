"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times ``forward_logits``, ``sample_grads`` and ``mean_grad`` on a few
MLP shapes and reports the best-of-``repeat`` wall time per call.
"""
import argparse
import json
import timeit

import numpy as np

from emaprune import _kernels_py

try:
    from emaprune import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

SHAPES = [
    # (batch, sizes)
    (64, (20, 32, 4)),
    (256, (20, 32, 4)),
    (64, (50, 64, 64, 10)),
    (1024, (8, 16, 2)),
]


def _inputs(batch, sizes, seed=0):
    rng = np.random.default_rng(seed)
    n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    return (rng.standard_normal(n) * 0.3, rng.standard_normal((batch, sizes[0])),
            rng.integers(0, sizes[-1], batch).astype(np.float64))


def bench(mod, batch, sizes, repeat):
    p, X, y = _inputs(batch, sizes)
    calls = {
        "forward_logits": lambda: mod.forward_logits(p, X, sizes, 0),
        "sample_grads": lambda: mod.sample_grads(p, X, y, sizes, 0, 0),
        "mean_grad": lambda: mod.mean_grad(p, X, y, sizes, 0, 0),
    }
    out = {}
    for name, fn in calls.items():
        fn()
        number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
        out[name] = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the numpy fallback only")

    rows = []
    for batch, sizes in SHAPES:
        timings = {name: bench(mod, batch, sizes, args.repeat) for name, mod in backends.items()}
        for op in timings["python"]:
            row = {"batch": batch, "sizes": list(sizes), "op": op}
            row.update({f"{b}_us": timings[b][op] * 1e6 for b in timings})
            if "cython" in timings:
                row["speedup"] = timings["python"][op] / timings["cython"][op]
            rows.append(row)

    head = f"{'batch':>6} {'sizes':<16} {'op':<15} {'python us':>11}"
    if _kernels_c is not None:
        head += f" {'cython us':>11} {'speedup':>8}"
    print(head)
    for r in rows:
        line = f"{r['batch']:>6} {str(tuple(r['sizes'])):<16} {r['op']:<15} {r['python_us']:>11.1f}"
        if "cython_us" in r:
            line += f" {r['cython_us']:>11.1f} {r['speedup']:>7.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
