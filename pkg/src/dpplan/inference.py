"""Inference: turn noisy measurements into a data vector estimate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.sparse.linalg import LinearOperator, lsmr

from .matrix import DimensionError, LinOp, Union, Weighted, fuse_sparse
from .measurement import Measurement


@dataclass
class MeasurementSet:
    n: int
    items: list = field(default_factory=list)

    def add(self, m: Measurement) -> "MeasurementSet":
        if m.Q_eff.cols != self.n:
            raise DimensionError(f"measurement addresses {m.Q_eff.cols} cells, expected {self.n}")
        self.items.append(m)
        return self

    def extend(self, ms) -> "MeasurementSet":
        for m in ms:
            self.add(m)
        return self

    def __len__(self):
        return len(self.items)

    def stacked(self, weighted: bool = True) -> tuple:
        """Single operator and answer vector; rows scaled by 1/noise_scale when weighted."""
        if not self.items:
            raise ValueError("no measurements to combine")
        blocks, ys = [], []
        for m in self.items:
            w = 1.0 / m.noise_scale if weighted and m.noise_scale > 0 else 1.0
            blocks.append(m.Q_eff if w == 1.0 else Weighted(w, m.Q_eff))
            ys.append(w * m.y)
        return fuse_sparse(blocks), np.concatenate(ys)


def as_measurement_set(ms) -> MeasurementSet:
    if isinstance(ms, MeasurementSet):
        return ms
    ms = list(ms)
    return MeasurementSet(ms[0].Q_eff.cols).extend(ms)


@dataclass
class Estimate:
    x_hat: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool = True

    def to_dict(self):
        return {
            "x_hat": self.x_hat.tolist(),
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
        }


def _scipy_operator(A: LinOp) -> LinearOperator:
    return LinearOperator(A.shape, matvec=A.matvec, rmatvec=A.rmatvec, dtype=float)


def least_squares(ms, tol: float = 1e-10, max_iter: int | None = None) -> Estimate:
    """Weighted least squares; the minimum-norm minimizer when it is not unique."""
    ms = as_measurement_set(ms)
    A, b = ms.stacked()
    max_iter = max_iter or max(2 * ms.n, 20)
    out = lsmr(_scipy_operator(A), b, atol=tol, btol=tol, maxiter=max_iter)
    x, istop, itn = out[0], out[1], out[2]
    return Estimate(x, int(itn), float(out[3]), converged=istop != 7)


def _objective(r):
    return 0.5 * float(r @ r)


def nnls(ms, tol: float = 1e-8, max_iter: int = 5000, x0=None, rtol: float = 0.0) -> Estimate:
    """Weighted least squares subject to ``x >= 0``.

    Bounded L-BFGS (scipy's L-BFGS-B) driven only by products with the
    stacked operator and its transpose. Stops once ``||min(x, grad)||_inf``,
    which equals the projected-gradient norm, drops to ``tol`` or to
    ``rtol`` times its value at the start point.
    """
    ms = as_measurement_set(ms)
    A, b = ms.stacked()
    if x0 is None:
        x0 = least_squares(ms).x_hat
    x = np.maximum(np.asarray(x0, dtype=float), 0.0)

    def fun(v):
        r = A.matvec(v) - b
        return _objective(r), A.rmatvec(r)

    def kkt(v, g):
        return float(np.max(np.abs(np.minimum(v, g)), initial=0.0))

    tol = max(tol, rtol * kkt(x, fun(x)[1]))
    out = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * x.size,
                   options={"maxiter": max_iter, "maxfun": 2 * max_iter + 10, "gtol": tol, "ftol": 0.0})
    x = np.maximum(out.x, 0.0)
    f, g = fun(x)
    return Estimate(x, int(out.nit), float(np.sqrt(2 * f)), converged=kkt(x, g) <= tol)


def mult_weights(ms, x_init, N_total: float, iters: int = 100) -> Estimate:
    """Multiplicative-weights updates ``x <- x * exp(Q^T (y - Q x) / (2 N))``, renormalized to N."""
    ms = as_measurement_set(ms)
    A, y = ms.stacked(weighted=False)
    x = np.asarray(getattr(x_init, "values", x_init), dtype=float).copy()
    if np.any(x <= 0):
        raise ValueError("multiplicative weights needs a strictly positive start")
    N = float(N_total)
    x *= N / x.sum()
    for _ in range(iters):
        g = 0.5 * A.rmatvec(y - A.matvec(x))
        z = g / N
        x = x * np.exp(z - z.max())
        x *= N / x.sum()
    res = float(np.linalg.norm(A.matvec(x) - y))
    return Estimate(x, iters, res, converged=True)
