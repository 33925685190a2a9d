"""Error metrics, the analytic error oracle and a small trial runner."""

from __future__ import annotations

import time

import numpy as np

from .matrix import LinOp, ensure_linop


class SupportError(ValueError):
    """The query is not answerable from the strategy (outside its row space)."""


def per_query_error(W: LinOp, x_hat, x_true, m: int | None = None, scale: float | None = None) -> float:
    """``sqrt(||W x_hat - W x||^2 / m) / scale``; scale defaults to the true total."""
    W = ensure_linop(W)
    x_hat = np.asarray(getattr(x_hat, "values", x_hat), dtype=float)
    x_true = np.asarray(getattr(x_true, "values", x_true), dtype=float)
    m = m or W.rows
    scale = float(x_true.sum()) if scale is None else float(scale)
    if scale == 0:
        raise ZeroDivisionError("error scale is zero; pass an explicit scale")
    diff = W.matvec(x_hat - x_true)
    return float(np.sqrt(diff @ diff / m) / scale)


def expected_error_oracle(q, Q, sensitivity: bool = True, rtol: float = 1e-8) -> float:
    """Expected squared error of answering ``q`` by least squares over ``Q``, up to a constant.

    With ``sensitivity=True`` the strategy is run at a fixed privacy budget:
    ``||Q||_1^2 ||q Q^+||_2^2``. With ``sensitivity=False`` every row carries
    unit-variance noise regardless of how many rows there are:
    ``||q Q^+||_2^2``.
    """
    Q = Q.materialize() if isinstance(Q, LinOp) else np.atleast_2d(np.asarray(Q, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    Qp = np.linalg.pinv(Q)
    coef = q @ Qp
    if np.linalg.norm(coef @ Q - q) > rtol * max(1.0, np.linalg.norm(q)) * max(1.0, np.abs(Q).max()):
        raise SupportError("query is outside the row space of the strategy")
    err = float(coef @ coef)
    if sensitivity:
        err *= float(np.abs(Q).sum(axis=0).max()) ** 2
    return err


def workload_expected_error(W, Q, sensitivity: bool = True) -> float:
    """Sum of oracle errors over the rows of W."""
    Wd = W.materialize() if isinstance(W, LinOp) else np.atleast_2d(W)
    return float(sum(expected_error_oracle(w, Q, sensitivity) for w in Wd))


def run_trials(plan, x, W: LinOp, epsilon, seeds, scale=None, **params) -> dict:
    """Run ``plan`` once per seed on fresh kernels and summarize the errors.

    ``plan`` is a registry name or a callable with the plan signature.
    """
    from .plans import run_plan

    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        res = run_plan(plan, x, W, epsilon, seed=seed, **params)
        elapsed = time.perf_counter() - t0
        err = per_query_error(W, res.x_hat, x, scale=scale)
        rows.append({
            "plan": plan if isinstance(plan, str) else getattr(plan, "__name__", "plan"),
            "epsilon": float(epsilon),
            "seed": seed,
            "error": err,
            "runtime_ms": 1000.0 * elapsed,
        })
    errors = np.array([r["error"] for r in rows])
    return {
        "rows": rows,
        "mean": float(errors.mean()),
        "median": float(np.median(errors)),
        "q05": float(np.quantile(errors, 0.05)),
        "q95": float(np.quantile(errors, 0.95)),
        "mean_runtime_ms": float(np.mean([r["runtime_ms"] for r in rows])),
    }
