"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --users 512 --items 5000 --repeat 5

Both backends are run on identical inputs and their outputs are compared
before any timing is reported.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from gtrec import kernels


def make_inputs(n_users: int, n_items: int, n_events: int, seed: int):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=(n_users, n_items)), 2)  # rounding forces ties
    targets = rng.integers(0, n_items, size=n_users)
    key_rank = rng.permutation(n_items).astype(np.int64)
    exclude = (rng.random((n_users, n_items)) < 0.05).astype(np.uint8)
    exclude[np.arange(n_users), targets] = 0
    ev_items = rng.integers(0, n_items, size=n_events)
    ev_users = rng.integers(0, n_users, size=n_events)
    item_mask = (rng.random(n_items) < 0.05).astype(np.uint8)
    return scores, targets, key_rank, exclude, ev_items, ev_users, item_mask


def cases(inputs, k):
    scores, targets, key_rank, exclude, ev_items, ev_users, item_mask = inputs
    n = len(ev_items)
    return {
        "target_ranks": lambda b: kernels.target_ranks(scores, targets, key_rank, exclude, backend=b),
        "topk": lambda b: kernels.topk(scores, k, key_rank, exclude, backend=b),
        "window_pool": lambda b: kernels.window_pool(ev_items, ev_users, n // 4, 3 * n // 4, 0,
                                                     item_mask, backend=b),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--users", type=int, default=512)
    p.add_argument("--items", type=int, default=5000)
    p.add_argument("--events", type=int, default=200_000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print machine-readable results")
    args = p.parse_args(argv)

    available = kernels.backends()
    if "cython" not in available:
        print("compiled extension not built; only the python backend is available", file=sys.stderr)
    inputs = make_inputs(args.users, args.items, args.events, args.seed)
    results = []
    for name, fn in cases(inputs, args.k).items():
        outs = {b: fn(b) for b in available}
        ref = outs["python"]
        for b, out in outs.items():
            if not np.array_equal(out, ref):
                print(f"{name}: {b} output differs from python", file=sys.stderr)
                return 1
        row = {"kernel": name}
        for b in available:
            row[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        results.append(row)

    if args.json:
        print(json.dumps(results, indent=2))
        return 0
    print(f"users={args.users} items={args.items} events={args.events} k={args.k} (best of {args.repeat})")
    print(f"{'kernel':<14}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for r in results:
        cy = f"{r['cython'] * 1e3:>12.2f}" if "cython" in r else f"{'-':>12}"
        sp = f"{r['speedup']:>9.1f}x" if "speedup" in r else f"{'-':>10}"
        print(f"{r['kernel']:<14}{r['python'] * 1e3:>12.2f}{cy}{sp}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
