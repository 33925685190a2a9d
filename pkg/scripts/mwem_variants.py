"""Compare MWEM and its variants on synthetic 1-D histograms.

Writes one JSON line per (dataset, variant, seed) and prints mean error and
runtime per variant.

    python scripts/mwem_variants.py --datasets 10 --seeds 5 --out mwem.jsonl
"""

import argparse
import json
import time
from collections import defaultdict

import numpy as np

from dpplan.datasets import suite
from dpplan.evaluation import per_query_error
from dpplan.plans import run_plan
from dpplan.selection import random_range


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--datasets", type=int, default=10)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--records", type=int, default=10**5)
    ap.add_argument("--variants", default="mwem,mwem_b,mwem_c,mwem_d")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    W = random_range((args.n,), args.queries, np.random.default_rng(0))
    errors, runtimes = defaultdict(list), defaultdict(list)
    sink = open(args.out, "w") if args.out else None
    for d, x in enumerate(suite(args.datasets, (args.n,), args.records, seed=1)):
        for variant in args.variants.split(","):
            for seed in range(args.seeds):
                t = time.perf_counter()
                res = run_plan(variant, x, W, args.epsilon, seed=seed)
                elapsed = time.perf_counter() - t
                err = per_query_error(W, res.x_hat, x)
                errors[variant].append(err)
                runtimes[variant].append(elapsed)
                if sink:
                    sink.write(json.dumps({"dataset": d, "plan": variant, "seed": seed, "error": err, "runtime_s": elapsed}) + "\n")
    if sink:
        sink.close()
    base_err, base_time = np.mean(errors["mwem"]), np.mean(runtimes["mwem"])
    for variant in errors:
        e, r = np.mean(errors[variant]), np.mean(runtimes[variant])
        print(f"{variant:8s} error {e:.5f} ({base_err / e:.2f}x vs base)  runtime {r:.3f}s ({r / base_time:.1f}x)")


if __name__ == "__main__":
    main()
