"""Plan catalog.

Every plan has the signature ``plan(kernel, sv, W, epsilon, **params)``
where ``sv`` is a vector source and ``W`` a workload over its cells. The
estimate is produced on the domain of ``sv``; measurements taken on derived
sources are mapped back to it through their lineage.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .inference import MeasurementSet, least_squares, mult_weights, nnls
from .kernel import ProtectedKernel, as_fraction
from .matrix import DataVector, DimensionError, Identity, Kronecker, LinOp, Product, Sparse, Total, Union, Wavelet
from .measurement import Measurement, noisy_count, vector_laplace
from .partition import ahp_partition, dawa_partition, grid_partition, stripe_partition, workload_based
from .selection import (
    adaptive_cell_sel,
    greedy_h_sel,
    h2_sel,
    hb_sel,
    quadtree_sel,
    stripe_select,
    uniform_grid_divisions,
    uniform_grid_sel,
    worst_approx,
)
from .transform import Reduce, VectorTransform


@dataclass
class PlanResult:
    x_hat: DataVector
    workload_answers: np.ndarray
    budget_spent: float
    transcript: list
    timing: dict = field(default_factory=dict)
    converged: bool = True
    ledger: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    measurements: list = field(default_factory=list, repr=False)

    def to_dict(self, timing: bool = False):
        out = {
            "x_hat": self.x_hat.values.tolist(),
            "domain_shape": list(self.x_hat.domain_shape),
            "workload_answers": np.asarray(self.workload_answers).tolist(),
            "budget_spent": self.budget_spent,
            "converged": self.converged,
            "transcript": self.transcript,
            "ledger": self.ledger,
            "info": self.info,
        }
        if timing:
            out["timing"] = self.timing
        return out


class _Run:
    """Book-keeping shared by the plans: budget baseline, timers, measurements."""

    def __init__(self, kernel: ProtectedKernel, sv, W: LinOp, epsilon):
        self.kernel, self.sv, self.W = kernel, sv, W
        self.eps = as_fraction(epsilon)
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")
        self.shape = kernel.domain_shape(sv)
        self.n = kernel.size(sv)
        if W.cols != self.n:
            raise DimensionError(f"workload has {W.cols} columns, source has {self.n} cells")
        self.spent0 = kernel.spent
        self.t0 = time.perf_counter()
        self.timing = {}
        self.ms = MeasurementSet(self.n)

    def measure(self, src, Q, eps) -> Measurement:
        t = time.perf_counter()
        m = vector_laplace(self.kernel, src, Q, eps, base=self.sv)
        self.timing["measure"] = self.timing.get("measure", 0.0) + time.perf_counter() - t
        self.ms.add(m)
        return m

    def infer(self, method="ls", **kw):
        t = time.perf_counter()
        est = {"ls": least_squares, "nnls": nnls}[method](self.ms, **kw)
        self.timing["inference"] = self.timing.get("inference", 0.0) + time.perf_counter() - t
        return est

    def result(self, x_hat, converged=True, **info) -> PlanResult:
        self.timing["total"] = time.perf_counter() - self.t0
        x_hat = np.asarray(x_hat, dtype=float)
        return PlanResult(
            x_hat=DataVector(x_hat, self.shape),
            workload_answers=self.W.matvec(x_hat),
            budget_spent=float(self.kernel.spent - self.spent0),
            transcript=[e.to_dict() for e in self.kernel.transcript()],
            timing=self.timing,
            converged=bool(converged),
            ledger=self.kernel.ledger(),
            info=info,
            measurements=list(self.ms.items),
        )


def _single(kernel, sv, W, epsilon, Q) -> PlanResult:
    run = _Run(kernel, sv, W, epsilon)
    run.measure(sv, Q, run.eps)
    est = run.infer()
    return run.result(est.x_hat, est.converged)


# -- data-independent plans -------------------------------------------------------

def plan_identity(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, Identity(kernel.size(sv)))


def plan_uniform(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, Total(kernel.size(sv)))


def plan_h2(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, h2_sel(kernel.size(sv)))


def plan_hb(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, hb_sel(kernel.size(sv)))


def plan_greedy_h(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, greedy_h_sel(W))


def _pow2(n):
    return 1 << max(0, math.ceil(math.log2(n))) if n > 1 else 1


def plan_privelet(kernel, sv, W, epsilon) -> PlanResult:
    """Haar wavelet measurements per axis; axes are zero-padded to a power of two."""
    run = _Run(kernel, sv, W, epsilon)
    padded = [_pow2(n) for n in run.shape]
    src = sv
    if list(padded) != list(run.shape):
        pads = [Sparse.from_triplets(np.arange(n), np.arange(n), np.ones(n), (N, n)) for n, N in zip(run.shape, padded)]
        E = pads[0] if len(pads) == 1 else Kronecker(pads)
        src = kernel.register_transform(sv, VectorTransform(E, padded))
    waves = [Wavelet(N) for N in padded]
    Q = waves[0] if len(waves) == 1 else Kronecker(waves)
    run.measure(src, Q, run.eps)
    est = run.infer()
    return run.result(est.x_hat, est.converged)


def _as_2d(shape):
    shape = tuple(shape)
    if len(shape) == 1:
        return (shape[0], 1)
    if len(shape) != 2:
        raise DimensionError(f"plan needs a 1-D or 2-D domain, got {shape}")
    return shape


def plan_quadtree(kernel, sv, W, epsilon) -> PlanResult:
    return _single(kernel, sv, W, epsilon, quadtree_sel(_as_2d(kernel.domain_shape(sv))))


def plan_ugrid(kernel, sv, W, epsilon, total_share=Fraction(1, 10), c=10.0) -> PlanResult:
    """Noisy total to size a static grid, then one count per grid cell."""
    run = _Run(kernel, sv, W, epsilon)
    shape = _as_2d(run.shape)
    e_total = run.eps * as_fraction(total_share)
    e_grid = run.eps - e_total
    m_total = run.measure(sv, Total(run.n), e_total)
    n_est = float(m_total.y[0])
    run.measure(sv, uniform_grid_sel(shape, n_est, float(e_grid), c), e_grid)
    est = run.infer()
    return run.result(est.x_hat, est.converged, grid_divisions=uniform_grid_divisions(n_est, float(e_grid), c))


def plan_agrid(kernel, sv, W, epsilon, c=10.0, c2=5.0) -> PlanResult:
    """Coarse grid with half the budget, then per-cell refinement in parallel."""
    run = _Run(kernel, sv, W, epsilon)
    shape = _as_2d(run.shape)
    half = run.eps / 2
    e_total = run.eps / 20
    e_coarse = half - e_total
    m_total = run.measure(sv, Total(run.n), e_total)
    g1 = uniform_grid_divisions(float(m_total.y[0]), float(e_coarse), c)
    widths = [max(1, n // g1) for n in shape]
    P = grid_partition(shape, widths)
    coarse = run.measure(sv, P.matrix(), e_coarse)
    cells = kernel.register_partition(sv, P)
    refined = 0
    for g, child in enumerate(cells):
        sub = adaptive_cell_sel(P.cell_shapes[g], float(coarse.y[g]), float(half), c2)
        refined += sub.rows
        run.measure(child, sub, half)
    est = run.infer()
    return run.result(est.x_hat, est.converged, coarse_cells=P.p, refined_queries=refined)


# -- data-dependent partitioning plans ------------------------------------------

def _split(eps, rho):
    rho = as_fraction(rho)
    if not 0 < rho < 1:
        raise ValueError(f"partition share rho must lie in (0, 1), got {float(rho)}")
    e1 = eps * rho
    return e1, eps - e1


def plan_ahp(kernel, sv, W, epsilon, rho=Fraction(1, 4), eta=1.0) -> PlanResult:
    run = _Run(kernel, sv, W, epsilon)
    e1, e2 = _split(run.eps, rho)
    P = ahp_partition(kernel, sv, e1, eta=eta, eps2=float(e2))
    reduced = kernel.register_transform(sv, Reduce(P))
    run.measure(reduced, Identity(P.p), e2)
    est = run.infer()
    return run.result(est.x_hat, est.converged, groups=P.p)


def plan_dawa(kernel, sv, W, epsilon, rho=Fraction(1, 4)) -> PlanResult:
    run = _Run(kernel, sv, W, epsilon)
    e1, e2 = _split(run.eps, rho)
    P = dawa_partition(kernel, sv, e1, eps2=float(e2))
    reduced = kernel.register_transform(sv, Reduce(P))
    Q = greedy_h_sel(Product(W, P.pinv()))
    run.measure(reduced, Q, e2)
    est = run.infer()
    return run.result(est.x_hat, est.converged, groups=P.p)


# -- striped plans ----------------------------------------------------------

def _check_axis(shape, axis):
    if not 0 <= axis < len(shape):
        raise DimensionError(f"axis {axis} out of range for shape {tuple(shape)}")


def plan_hb_striped(kernel, sv, W, epsilon, axis=0) -> PlanResult:
    """Split into 1-D stripes along ``axis`` and measure an HB tree on each."""
    run = _Run(kernel, sv, W, epsilon)
    _check_axis(run.shape, axis)
    P = stripe_partition(run.shape, axis)
    Q = hb_sel(run.shape[axis])
    for child in kernel.register_partition(sv, P):
        run.measure(child, Q, run.eps)
    est = run.infer()
    return run.result(est.x_hat, est.converged, stripes=P.p)


def plan_hb_striped_kron(kernel, sv, W, epsilon, axis=0) -> PlanResult:
    """The striped HB plan written as one Kronecker measurement."""
    run = _Run(kernel, sv, W, epsilon)
    _check_axis(run.shape, axis)
    run.measure(sv, stripe_select(run.shape, axis, hb_sel), run.eps)
    est = run.infer()
    return run.result(est.x_hat, est.converged)


def plan_dawa_striped(kernel, sv, W, epsilon, axis=0, rho=Fraction(1, 4)) -> PlanResult:
    """DAWA on each stripe, with the workload restricted to that stripe."""
    run = _Run(kernel, sv, W, epsilon)
    _check_axis(run.shape, axis)
    e1, e2 = _split(run.eps, rho)
    P = stripe_partition(run.shape, axis)
    groups = 0
    for g, child in enumerate(kernel.register_partition(sv, P)):
        Pg = dawa_partition(kernel, child, e1, eps2=float(e2))
        reduced = kernel.register_transform(child, Reduce(Pg))
        Wg = Product(Product(W, P.selector(g).T), Pg.pinv())
        run.measure(reduced, greedy_h_sel(Wg), e2)
        groups += Pg.p
    est = run.infer()
    return run.result(est.x_hat, est.converged, groups=groups)


# -- MWEM family ----------------------------------------------------------------

def _dyadic_complement(support: np.ndarray, n: int, size: int) -> LinOp | None:
    """Aligned blocks of ``size`` cells that avoid ``support``; None if there are none."""
    starts = np.arange(0, n, size)
    stops = np.minimum(starts + size, n)
    hit = np.zeros(n + 1, dtype=np.int64)
    hit[1:] = np.cumsum(np.isin(np.arange(n), support))
    free = (hit[stops] - hit[starts]) == 0
    if not free.any():
        return None
    rows, cols = [], []
    for i, (a, z) in enumerate(zip(starts[free], stops[free])):
        rows.append(np.full(z - a, i))
        cols.append(np.arange(a, z))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return Sparse.from_triplets(rows, cols, np.ones(cols.size), (int(free.sum()), n))


def plan_mwem(kernel, sv, W, epsilon, T=10, augment=False, use_nnls=False, total=None, mw_iters=100,
              nnls_iters=100) -> PlanResult:
    """T rounds of private worst-query selection, measurement and re-estimation.

    ``augment`` adds, in round t, the aligned dyadic ranges of length
    ``2**(t-1)`` that avoid the selected query (measured at no extra cost
    since they are disjoint from it). ``use_nnls`` replaces multiplicative
    weights with non-negative least squares plus a heavily weighted total,
    warm-started from the previous round and capped at ``nnls_iters``.
    The record count is public when ``total`` or ``kernel.public_total`` is
    set; otherwise 5% of the budget buys a noisy count.
    """
    run = _Run(kernel, sv, W, epsilon)
    if T < 1:
        raise ValueError("MWEM needs at least one round")
    n, eps = run.n, run.eps
    N = total if total is not None else kernel.public_total
    if N is None:
        e_count = eps / 20
        N = noisy_count(kernel, sv, e_count)
        eps = eps - e_count
    N = max(float(N), 1.0)
    e_round = eps / T
    x_hat = np.full(n, N / n)
    selected = []
    converged = True
    for t in range(1, T + 1):
        i, q = worst_approx(kernel, sv, W, x_hat, e_round / 2)
        selected.append(i)
        Q = q
        if augment:
            extra = _dyadic_complement(q.matrix.indices, n, 2 ** (t - 1))
            if extra is not None:
                Q = Union([q, extra])
        m = run.measure(sv, Q, e_round / 2)
        if use_nnls:
            anchor = Measurement(Total(n), [N], m.noise_scale / 100.0, "public_total")
            ms = MeasurementSet(n, run.ms.items + [anchor])
            t0 = time.perf_counter()
            est = nnls(ms, tol=1e-9, rtol=1e-3, max_iter=nnls_iters, x0=x_hat)
            run.timing["inference"] = run.timing.get("inference", 0.0) + time.perf_counter() - t0
            x_hat = est.x_hat
            converged = est.converged
        else:
            t0 = time.perf_counter()
            x_hat = mult_weights(run.ms, x_hat, N, iters=mw_iters).x_hat
            run.timing["inference"] = run.timing.get("inference", 0.0) + time.perf_counter() - t0
    return run.result(x_hat, converged, selected=selected)


def plan_mwem_b(kernel, sv, W, epsilon, **kw) -> PlanResult:
    return plan_mwem(kernel, sv, W, epsilon, augment=True, **kw)


def plan_mwem_c(kernel, sv, W, epsilon, **kw) -> PlanResult:
    return plan_mwem(kernel, sv, W, epsilon, use_nnls=True, **kw)


def plan_mwem_d(kernel, sv, W, epsilon, **kw) -> PlanResult:
    return plan_mwem(kernel, sv, W, epsilon, augment=True, use_nnls=True, **kw)


# -- workload-based reduction ------------------------------------------------------

def with_workload_reduction(plan):
    """Run ``plan`` on the domain obtained by merging cells the workload cannot tell apart."""

    def wrapped(kernel, sv, W, epsilon, **params):
        P = workload_based(W)
        if P.p == W.cols:
            return plan(kernel, sv, W, epsilon, **params)
        t0 = time.perf_counter()
        reduced = kernel.register_transform(sv, Reduce(P))
        Pinv = P.pinv()
        inner = plan(kernel, reduced, Product(W, Pinv), epsilon, **params)
        x_hat = Pinv.matvec(inner.x_hat.values)
        inner.timing["total"] = time.perf_counter() - t0
        return PlanResult(
            x_hat=DataVector(x_hat, kernel.domain_shape(sv)),
            workload_answers=W.matvec(x_hat),
            budget_spent=inner.budget_spent,
            transcript=inner.transcript,
            timing=inner.timing,
            converged=inner.converged,
            ledger=kernel.ledger(),
            info={**inner.info, "reduced_source": reduced.id, "reduced_size": P.p},
            measurements=inner.measurements,
        )

    wrapped.__name__ = f"{getattr(plan, '__name__', 'plan')}_reduced"
    return wrapped


PLANS = {
    "identity": plan_identity,
    "privelet": plan_privelet,
    "h2": plan_h2,
    "hb": plan_hb,
    "greedyh": plan_greedy_h,
    "uniform": plan_uniform,
    "mwem": plan_mwem,
    "mwem_b": plan_mwem_b,
    "mwem_c": plan_mwem_c,
    "mwem_d": plan_mwem_d,
    "ahp": plan_ahp,
    "dawa": plan_dawa,
    "quadtree": plan_quadtree,
    "ugrid": plan_ugrid,
    "agrid": plan_agrid,
    "hb_striped": plan_hb_striped,
    "dawa_striped": plan_dawa_striped,
    "hb_striped_kron": plan_hb_striped_kron,
}


def get_plan(name):
    if callable(name):
        return name
    try:
        return PLANS[name]
    except KeyError:
        raise KeyError(f"unknown plan {name!r}; choose from {sorted(PLANS)}") from None


def run_plan(plan, x, W, epsilon, seed=None, workload_reduce=False, eps_total=None, public_total=None, **params) -> PlanResult:
    """Fresh kernel over data vector ``x`` (budget ``eps_total``, default ``epsilon``), then run ``plan``."""
    if not isinstance(x, DataVector):
        x = np.asarray(x, dtype=float)
        x = DataVector(x, (x.size,))
    kernel = ProtectedKernel.from_vector(x, eps_total if eps_total is not None else epsilon, seed=seed,
                                         public_total=public_total)
    fn = get_plan(plan)
    if workload_reduce:
        fn = with_workload_reduction(fn)
    return fn(kernel, kernel.root, W, epsilon, **params)
