"""Compare the compiled and pure-Python edit-distance kernels.

    python benchmarks/bench_kernels.py [--pairs 2000] [--length 20] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from fstlab import _pykernels

try:
    from fstlab import _ckernels
except ImportError:
    _ckernels = None


def make_pairs(n, length, vocab, seed):
    rng = np.random.default_rng(seed)
    return [
        (rng.integers(vocab, size=rng.integers(1, length + 1)).tolist(),
         rng.integers(vocab, size=rng.integers(1, length + 1)).tolist())
        for _ in range(n)
    ]


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    pairs = make_pairs(args.pairs, args.length, args.vocab, args.seed)
    refs, hyps = [a for a, _ in pairs], [b for _, b in pairs]
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the Python fallback only")

    results = {}
    for name, mod in backends.items():
        single = best_time(lambda: [mod.edit_distance(a, b) for a, b in pairs], args.repeat)
        batch = best_time(lambda: mod.edit_distance_batch(refs, hyps), args.repeat)
        results[name] = (single, batch, list(mod.edit_distance_batch(refs, hyps)))
        print(f"{name:>7}: {single * 1e3:8.2f} ms per-pair loop, {batch * 1e3:8.2f} ms batch "
              f"({args.pairs} pairs, length <= {args.length})")

    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        if py[2] != cy[2]:
            raise SystemExit("backends disagree")
        print(f"speed-up: {py[0] / cy[0]:.1f}x per pair, {py[1] / cy[1]:.1f}x batch; outputs identical")


if __name__ == "__main__":
    main()
