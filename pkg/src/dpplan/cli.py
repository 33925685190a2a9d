"""Command-line front end: vectorize, run, sweep, bench."""

from __future__ import annotations

import argparse
import json
import multiprocessing as mp
import signal
import sys
import time
from pathlib import Path

import numpy as np

from .evaluation import per_query_error
from .kernel import BudgetExceeded
from .matrix import CapacityError, DataVector, LinOp, check_capacity, from_dict, memory_cap
from .plans import PLANS, run_plan
from .selection import build_workload
from .transform import IngestionError, Schema, read_csv, vectorize

EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_CAPACITY = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- io -----------------------------------------------------------------------

def write_vector(x: DataVector, path, fmt="json"):
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps({"domain_shape": list(x.domain_shape), "values": x.values.tolist()}))
    elif fmt == "bin":
        x.values.astype("<f8").tofile(path)
        Path(str(path) + ".json").write_text(json.dumps({"domain_shape": list(x.domain_shape), "dtype": "<f8"}))
    else:
        raise UsageError(f"unknown format {fmt!r}")


def read_vector(path, schema=None) -> DataVector:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    if path.suffix == ".csv":
        if schema is None:
            raise UsageError("CSV input needs --schema")
        sch = Schema.load(schema)
        return vectorize(read_csv(path, sch), sch)
    header = Path(str(path) + ".json")
    if header.exists() and path.suffix != ".json":
        meta = json.loads(header.read_text())
        return DataVector(np.fromfile(path, dtype=meta.get("dtype", "<f8")), meta["domain_shape"])
    d = json.loads(path.read_text())
    return DataVector(np.asarray(d["values"], dtype=float), d["domain_shape"])


def load_workload(spec: str, shape, seed: int = 0) -> LinOp:
    p = Path(spec)
    if p.suffix == ".json" and p.exists():
        return from_dict(json.loads(p.read_text()))
    try:
        return build_workload(spec, shape, np.random.default_rng(seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _positive(text) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _csv_list(text, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t]


class _Timeout(Exception):
    pass


def _alarm(seconds):
    if not seconds:
        return
    def handler(signum, frame):
        raise _Timeout()
    signal.signal(signal.SIGALRM, handler)
    signal.setitimer(signal.ITIMER_REAL, seconds)


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands -----------------------------------------------------------------

def cmd_vectorize(args) -> int:
    schema = Schema.load(args.schema)
    try:
        x = vectorize(read_csv(args.data, schema), schema)
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_vector(x, args.out, args.format)
    print(json.dumps({"domain_shape": list(x.domain_shape), "n": len(x), "records": float(x.values.sum())}))
    return EXIT_OK


def cmd_run(args) -> int:
    x = read_vector(args.data, args.schema)
    W = load_workload(args.workload, x.domain_shape, args.workload_seed)
    params = _parse_params(args.param)
    if args.public_total:
        params.setdefault("public_total", float(x.values.sum()))
    _alarm(args.timeout)
    try:
        res = run_plan(args.plan, x, W, args.epsilon, seed=args.seed, workload_reduce=args.workload_reduce,
                       eps_total=args.eps_total, **params)
    finally:
        if args.timeout:
            signal.setitimer(signal.ITIMER_REAL, 0)
    out = {"plan": args.plan, "epsilon": args.epsilon, "seed": args.seed, "workload": args.workload,
           "error": per_query_error(W, res.x_hat, x, scale=args.scale) if x.values.sum() or args.scale else None,
           **res.to_dict(timing=args.timing)}
    _emit(json.dumps(out, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    x = read_vector(args.data, args.schema)
    W = load_workload(args.workload, x.domain_shape, args.workload_seed)
    plans = _csv_list(args.plans)
    for p in plans:
        if p not in PLANS:
            raise UsageError(f"unknown plan {p!r}")
    eps_list = _csv_list(args.epsilons, float)
    seeds = _csv_list(args.seeds, int)
    params = _parse_params(args.param)
    lines = []
    idx = 0
    for plan in plans:
        for eps in eps_list:
            for seed in seeds:
                stream = np.random.SeedSequence([seed, idx])
                t0 = time.perf_counter()
                row = {"plan": plan, "dataset": str(args.data), "workload": args.workload, "epsilon": eps, "seed": seed}
                try:
                    res = run_plan(plan, x, W, eps, seed=stream, workload_reduce=args.workload_reduce, **params)
                    row["error"] = per_query_error(W, res.x_hat, x, scale=args.scale)
                    row["status"] = "ok"
                except BudgetExceeded:
                    row["status"] = "budget-exceeded"
                row["runtime_ms"] = 1000.0 * (time.perf_counter() - t0)
                lines.append(json.dumps(row, sort_keys=True))
                idx += 1
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _bench_operator(kind: str, n: int, rep: str):
    from .matrix import Dense, Identity, Prefix, Sparse
    from .selection import h2_sel

    builders = {"prefix": Prefix, "h2": h2_sel, "identity": Identity}
    if kind not in builders:
        raise UsageError(f"unknown benchmark operator {kind!r}")
    implicit = builders[kind](n)
    if rep == "implicit":
        return implicit
    if rep == "sparse":
        nnz = {"prefix": n * (n + 1) // 2, "h2": n * (int(np.ceil(np.log2(max(n, 2)))) + 1), "identity": n}[kind]
        if 12 * nnz > memory_cap():
            raise CapacityError(f"sparse {kind} with {nnz} nonzeros exceeds the memory cap")
        if kind == "prefix":
            r, c = np.tril_indices(n)
            return Sparse.from_triplets(r, c, np.ones(r.size), (n, n))
        from .matrix import as_scipy_sparse

        blocks = implicit.blocks if kind == "h2" else [implicit]
        parts = []
        for blk in blocks:
            csr = as_scipy_sparse(blk)
            if csr is None:  # range rows: expand differences of prefixes into explicit rows
                csr = _range_rows_csr(blk)
            parts.append(csr)
        from scipy import sparse as sp
        return Sparse(sp.vstack(parts, format="csr"))
    check_capacity(implicit.rows, implicit.cols)
    return Dense(implicit.materialize())


def _range_rows_csr(op):
    """Explicit CSR for a Product(difference matrix, Prefix) range-query block."""
    from scipy import sparse as sp

    D = op.A.matrix.tocsr()
    n = op.cols
    rows, cols = [], []
    for i in range(D.shape[0]):
        idx = D.indices[D.indptr[i]:D.indptr[i + 1]]
        val = D.data[D.indptr[i]:D.indptr[i + 1]]
        hi = int(idx[val > 0][0]) + 1
        lo = int(idx[val < 0][0]) + 1 if np.any(val < 0) else 0
        rows.append(np.full(hi - lo, i))
        cols.append(np.arange(lo, hi))
    r, c = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(D.shape[0], n))


def _bench_case(kind, n, rep, reps, max_iter, conn):
    try:
        from .inference import least_squares
        from .measurement import Measurement

        A = _bench_operator(kind, n, rep)
        v = np.random.default_rng(0).random(n)
        best = np.inf
        for _ in range(reps):
            t = time.perf_counter()
            y = A.matvec(v)
            best = min(best, time.perf_counter() - t)
        t = time.perf_counter()
        least_squares([Measurement(A, y, 1.0, "bench")], max_iter=max_iter)
        conn.send({"status": "ok", "matvec_ms": 1000 * best, "inference_ms": 1000 * (time.perf_counter() - t)})
    except (CapacityError, MemoryError) as exc:
        conn.send({"status": "skipped", "reason": str(exc)})
    except Exception as exc:  # report instead of leaving the parent waiting for the timeout
        conn.send({"status": "error", "reason": repr(exc)})


def cmd_bench(args) -> int:
    ctx = mp.get_context("fork")
    lines = []
    for kind in _csv_list(args.ops):
        for n in _csv_list(args.sizes, int):
            for rep in _csv_list(args.reps_kinds):
                row = {"op": kind, "n": n, "representation": rep}
                recv, send = ctx.Pipe(duplex=False)
                proc = ctx.Process(target=_bench_case, args=(kind, n, rep, args.reps, args.max_iter, send))
                proc.start()
                ready = recv.poll(args.timeout)
                if ready:
                    row.update(recv.recv())
                    proc.join()
                else:
                    proc.terminate()
                    proc.join()
                    row["status"] = "timeout"
                lines.append(json.dumps(row, sort_keys=True))
                print(lines[-1], file=sys.stderr)
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpplan", description="Differentially private query plans.")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("vectorize", help="CSV + schema -> data vector file")
    v.add_argument("--data", required=True)
    v.add_argument("--schema", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--format", choices=["json", "bin"], default="json")
    v.set_defaults(func=cmd_vectorize)

    def common(p):
        p.add_argument("--data", required=True, help="vector file (.json, raw .bin with sidecar) or CSV with --schema")
        p.add_argument("--schema")
        p.add_argument("--workload", default="identity", help="built-in name or LinOp JSON file")
        p.add_argument("--workload-seed", type=int, default=0)
        p.add_argument("--workload-reduce", action="store_true")
        p.add_argument("--scale", type=_positive, default=None)
        p.add_argument("--param", action="append", help="extra plan parameter key=value (repeatable)")
        p.add_argument("--out")

    r = sub.add_parser("run", help="execute one plan")
    common(r)
    r.add_argument("--plan", required=True, choices=sorted(PLANS))
    r.add_argument("--epsilon", type=_positive, required=True)
    r.add_argument("--eps-total", type=_positive, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--public-total", action="store_true", help="treat the record count as public")
    r.add_argument("--timeout", type=_positive, default=None)
    r.add_argument("--timing", action="store_true", help="include wall-clock timings in the output")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="plans x epsilons x seeds -> JSONL")
    common(s)
    s.add_argument("--plans", required=True)
    s.add_argument("--epsilons", required=True)
    s.add_argument("--seeds", default="0")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="matvec and inference timings -> JSONL")
    b.add_argument("--ops", default="prefix,h2")
    b.add_argument("--sizes", default="1024,16384")
    b.add_argument("--reps-kinds", default="implicit,sparse,dense", help="representations to time")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--max-iter", type=int, default=50)
    b.add_argument("--timeout", type=_positive, default=1000.0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (CapacityError, _Timeout) as exc:
        print(f"capacity or time limit reached: {exc or 'timeout'}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
