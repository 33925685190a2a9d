"""Query selection: measurement strategies and workload builders."""

from __future__ import annotations

import math

import numpy as np

from .matrix import (
    DimensionError,
    Identity,
    Kronecker,
    LinOp,
    Prefix,
    Product,
    Sparse,
    Total,
    Union,
    Wavelet,
    Weighted,
)


# -- intervals --------------------------------------------------------------

def range_queries(n: int, starts, stops) -> LinOp:
    """Rows ``[start, stop)`` expressed as differences of two prefix sums."""
    starts = np.asarray(starts, dtype=np.int64)
    stops = np.asarray(stops, dtype=np.int64)
    if np.any(starts < 0) or np.any(stops > n) or np.any(stops <= starts):
        raise DimensionError("ranges must satisfy 0 <= start < stop <= n")
    m = starts.size
    idx = np.arange(m)
    has_lo = starts > 0
    rows = np.concatenate([idx, idx[has_lo]])
    cols = np.concatenate([stops - 1, starts[has_lo] - 1])
    vals = np.concatenate([np.ones(m), -np.ones(int(has_lo.sum()))])
    D = Sparse.from_triplets(rows, cols, vals, (m, n))
    return Product(D, Prefix(n), binary=True)


def tree_levels(n: int, b: int = 2) -> list:
    """Breadth-first levels of a b-ary split of ``[0, n)`` down to unit cells.

    Each level is a pair of arrays ``(starts, stops)``. Children of an
    interval of length L have sizes differing by at most one, larger first.
    """
    if b < 2:
        raise ValueError("branching factor must be at least 2")
    starts, stops = np.array([0]), np.array([n])
    levels = [(starts, stops)]
    while True:
        lengths = stops - starts
        split = lengths > 1
        if not split.any():
            return levels
        s, L = starts[split], lengths[split]
        q, r = np.divmod(L, b)
        j = np.arange(b)
        child_start = s[:, None] + j[None, :] * q[:, None] + np.minimum(j[None, :], r[:, None])
        child_size = q[:, None] + (j[None, :] < r[:, None])
        keep = child_size > 0
        starts = child_start[keep]
        stops = (child_start + child_size)[keep]
        levels.append((starts, stops))


def _hierarchy(n: int, b: int) -> LinOp:
    if n == 1:
        return Identity(1)
    levels = tree_levels(n, b)
    starts = np.concatenate([s[(t - s) > 1] for s, t in levels])
    stops = np.concatenate([t[(t - s) > 1] for s, t in levels])
    return Union([range_queries(n, starts, stops), Identity(n)])


def axis_blocks(n: int, width: int) -> list:
    """Consecutive blocks of ``width`` cells; the last block absorbs any remainder."""
    if width < 1:
        raise ValueError("block width must be positive")
    count = max(1, n // width)
    bounds = [i * width for i in range(count)] + [n]
    return list(zip(bounds[:-1], bounds[1:]))


def _block_indicator(n: int, blocks) -> Sparse:
    rows, cols = [], []
    for i, (a, z) in enumerate(blocks):
        rows.append(np.full(z - a, i))
        cols.append(np.arange(a, z))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return Sparse.from_triplets(rows, cols, np.ones(cols.size), (len(blocks), n))


# -- core selectors ---------------------------------------------------------

def identity_sel(n: int) -> LinOp:
    return Identity(n)


def total_sel(n: int) -> LinOp:
    return Total(n)


def prefix_sel(n: int) -> LinOp:
    return Prefix(n)


def wavelet_sel(n: int) -> LinOp:
    return Wavelet(n)


def h2_sel(n: int, b: int = 2) -> LinOp:
    """Every internal node of a b-ary tree (breadth first), then the leaves."""
    return _hierarchy(n, b)


def hb_branching(n: int) -> int:
    """Branching factor minimizing ``2 h^3 (b - 1)`` with ``h = ceil(log_b n)``."""
    best, best_cost = 2, math.inf
    for b in range(2, max(n, 2) + 1):
        h, reach = 0, 1
        while reach < n:
            reach *= b
            h += 1
        cost = 2 * h**3 * (b - 1)
        if cost < best_cost:
            best, best_cost = b, cost
    return best


def hb_sel(n: int) -> LinOp:
    if n == 1:
        return Identity(1)
    b = hb_branching(n)
    if b >= n:
        return Union([Total(n), Identity(n)])
    return _hierarchy(n, b)


def quadtree_sel(shape) -> LinOp:
    """Recursive four-way split of a 2-D domain down to unit cells, one level per union block."""
    shape = tuple(shape)
    if len(shape) != 2:
        raise DimensionError(f"quadtree needs a 2-D domain, got {shape}")
    per_axis = []
    for n in shape:
        levels = [(s, t) for s, t in tree_levels(n, 2)]
        per_axis.append(levels)
    depth = max(len(levels) for levels in per_axis)
    blocks = []
    for d in range(depth):
        factors = []
        for n, levels in zip(shape, per_axis):
            s, t = levels[min(d, len(levels) - 1)]
            factors.append(_block_indicator(n, list(zip(s.tolist(), t.tolist()))))
        blocks.append(Kronecker(factors))
    return blocks[0] if len(blocks) == 1 else Union(blocks)


def grid_sel(shape, widths) -> LinOp:
    """Disjoint rectangular cells covering the domain."""
    shape = tuple(shape)
    factors = [_block_indicator(n, axis_blocks(n, w)) for n, w in zip(shape, widths)]
    return factors[0] if len(factors) == 1 else Kronecker(factors)


def uniform_grid_divisions(n_est: float, eps: float, c: float = 10.0) -> int:
    return max(1, math.ceil(math.sqrt(max(n_est, 0.0) * eps / c)))


def uniform_grid_sel(shape, n_est: float, eps: float, c: float = 10.0) -> LinOp:
    shape = tuple(shape)
    if len(shape) != 2:
        raise DimensionError(f"uniform grid needs a 2-D domain, got {shape}")
    g = uniform_grid_divisions(n_est, eps, c)
    return grid_sel(shape, [max(1, n // g) for n in shape])


def adaptive_cell_sel(cell_shape, n_cell: float, eps2: float, c2: float = 5.0) -> LinOp:
    """Sub-grid for one coarse cell; a zero (or negative) count leaves it unrefined."""
    g2 = uniform_grid_divisions(n_cell, eps2, c2)
    return grid_sel(cell_shape, [max(1, n // g2) for n in cell_shape])


def adaptive_grid_sel(shape, coarse_widths, coarse_counts, eps2: float, c2: float = 5.0) -> LinOp:
    """Union over coarse cells of their sub-grids, addressed on the full domain."""
    from .partition import grid_partition

    shape = tuple(shape)
    if len(shape) != 2:
        raise DimensionError(f"adaptive grid needs a 2-D domain, got {shape}")
    P = grid_partition(shape, coarse_widths)
    blocks = []
    for g, cell_shape in enumerate(P.cell_shapes):
        sub = adaptive_cell_sel(cell_shape, coarse_counts[g], eps2, c2)
        blocks.append(Product(sub, P.selector(g), binary=True))
    return blocks[0] if len(blocks) == 1 else Union(blocks)


def stripe_select(domain_shape, axis: int, sub) -> LinOp:
    """``sub`` on the stripe axis, Identity on all others.

    ``sub`` is a LinOp or a callable mapping the axis length to one.
    """
    domain_shape = tuple(domain_shape)
    if not 0 <= axis < len(domain_shape):
        raise DimensionError(f"axis {axis} out of range for shape {domain_shape}")
    op = sub(domain_shape[axis]) if callable(sub) else sub
    if op.cols != domain_shape[axis]:
        raise DimensionError("sub-selector does not match the stripe length")
    if len(domain_shape) == 1:
        return op
    return Kronecker([op if i == axis else Identity(n) for i, n in enumerate(domain_shape)])


# -- Greedy-H -----------------------------------------------------------------

def _haar_coeffs(R: np.ndarray) -> tuple:
    """Orthonormal Haar coefficients along the last axis, with a scale label per coefficient.

    Label ``s >= 1`` marks detail vectors supported on ``2**s`` cells, 0 the constant vector.
    """
    x = R
    parts, labels, s = [], [], 1
    while x.shape[-1] > 1:
        parts.append((x[..., 0::2] - x[..., 1::2]) / math.sqrt(2))
        labels.append(np.full(x.shape[-1] // 2, s))
        x = (x[..., 0::2] + x[..., 1::2]) / math.sqrt(2)
        s += 1
    parts.append(x)
    labels.append(np.zeros(1, dtype=int))
    return np.concatenate(parts, axis=-1), np.concatenate(labels)


def _workload_scale_energy(W: LinOp, N: int) -> tuple:
    """Workload energy per Haar scale on the zero-padded domain of size N."""
    n = W.cols
    if W.rows <= n:
        R = np.zeros((W.rows, N))
        R[:, :n] = W.materialize()
        C, labels = _haar_coeffs(R)
        energy = np.sum(C**2, axis=0)
    else:
        G = np.zeros((N, N))
        G[:n, :n] = W.gram()
        C, labels = _haar_coeffs(G)
        C, _ = _haar_coeffs(C.T)
        energy = np.diag(C)
    L = int(labels.max())
    E = np.bincount(labels, weights=energy, minlength=L + 1)
    return E[1:], float(E[0])


def greedy_h_objective(weights, E, E_const) -> float:
    """Expected total workload error of a weighted dyadic hierarchy, up to a constant."""
    w = np.asarray(weights, dtype=float)
    contrib = w**2 * 2.0 ** np.arange(w.size)
    lam = np.cumsum(contrib)[:-1]  # detail scale s sees levels below s
    lam_const = contrib.sum()
    with np.errstate(divide="ignore"):
        terms = np.where(E > 0, E / np.where(lam > 0, lam, 1.0), 0.0)
        terms = np.where((E > 0) & (lam <= 0), np.inf, terms)
    total = terms.sum() + (E_const / lam_const if E_const > 0 else 0.0)
    return float(w.sum() ** 2 * total)


def _golden(f, lo, hi, iters=40):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def greedy_h_weights(W: LinOp, sweeps: int = 4, floor: float = 1e-3) -> np.ndarray:
    """Per-level weights, index 0 for unit cells up to the root."""
    n = W.cols
    L = max(0, math.ceil(math.log2(n))) if n > 1 else 0
    N = 2**L
    if N == 1:
        return np.ones(1)
    E, E_const = _workload_scale_energy(W, N)
    w = np.ones(L + 1)
    best = greedy_h_objective(w, E, E_const)
    for _ in range(sweeps):
        improved = False
        for level in range(L + 1):
            def f(t, level=level):
                trial = w.copy()
                trial[level] = math.exp(t)
                return greedy_h_objective(trial, E, E_const)

            t, val = _golden(f, math.log(floor), 0.0)
            if val < best * (1 - 1e-12):
                w[level], best, improved = math.exp(t), val, True
        if not improved:
            break
    return w


def greedy_h_sel(W: LinOp, weights=None) -> LinOp:
    """Weighted dyadic hierarchy tuned to the workload ``W``."""
    n = W.cols
    w = greedy_h_weights(W) if weights is None else np.asarray(weights, dtype=float)
    if n == 1:
        return Weighted(w[0], Identity(1)) if w[0] != 1 else Identity(1)
    blocks = []
    for level in reversed(range(w.size)):
        size = 2**level
        starts = np.arange(0, n, size)
        stops = np.minimum(starts + size, n)
        B = _block_indicator(n, list(zip(starts.tolist(), stops.tolist())))
        blocks.append(Weighted(w[level], B))
    return Union(blocks)


# -- private selection ----------------------------------------------------------

class WorstApproxOp:
    """Exponential mechanism over workload rows, scored by absolute error."""

    name = "worst_approx"

    def __init__(self, W: LinOp, x_hat):
        self.W = W
        self.x_hat = np.asarray(getattr(x_hat, "values", x_hat), dtype=float)

    def run(self, payload, epsilon, rng):
        x = payload.values
        if x.size != self.x_hat.size:
            raise DimensionError("estimate and data have different lengths")
        scores = np.abs(self.W.matvec(x) - self.W.matvec(self.x_hat))
        delta = self.W.max_abs() or 1.0
        return exponential_mechanism(scores, epsilon, delta, rng)


def exponential_mechanism(scores, epsilon, sensitivity, rng) -> int:
    logits = epsilon * np.asarray(scores, dtype=float) / (2.0 * sensitivity)
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))


def worst_approx(kernel, sv, W: LinOp, x_hat, epsilon) -> tuple:
    """Select one workload row privately; returns ``(index, 1 x n LinOp)``."""
    i = kernel.measure(sv, WorstApproxOp(W, x_hat), epsilon)
    r = W.row(i)
    nz = np.flatnonzero(r)
    return i, Sparse.from_triplets(np.zeros(nz.size, dtype=np.int64), nz, r[nz], (1, W.cols))


# -- workloads ----------------------------------------------------------------

def random_range(shape, count: int, rng) -> LinOp:
    """``count`` random axis-aligned ranges with uniformly drawn endpoints."""
    shape = tuple(shape) if np.iterable(shape) else (int(shape),)
    if len(shape) == 1:
        n = shape[0]
        a = rng.integers(0, n, size=count)
        b = rng.integers(0, n, size=count)
        lo, hi = np.minimum(a, b), np.maximum(a, b) + 1
        return range_queries(n, lo, hi)
    rows = []
    for _ in range(count):
        factors = []
        for n in shape:
            a, b = sorted(rng.integers(0, n, size=2))
            factors.append(range_queries(n, [a], [b + 1]))
        rows.append(Kronecker(factors))
    return Union(rows)


def all_range(n: int) -> LinOp:
    a, b = np.triu_indices(n)
    return range_queries(n, a, b + 1)


def marginal(shape, keep) -> LinOp:
    """Marginal over the axes in ``keep``: Identity there, Total elsewhere."""
    shape = tuple(shape)
    keep = set(keep)
    factors = [Identity(n) if i in keep else Total(n) for i, n in enumerate(shape)]
    return factors[0] if len(factors) == 1 else Kronecker(factors)


def marginals(shape, sets) -> LinOp:
    blocks = [marginal(shape, s) for s in sets]
    return blocks[0] if len(blocks) == 1 else Union(blocks)


def build_workload(name: str, shape, rng=None) -> LinOp:
    """Named workloads, e.g. ``prefix``, ``allrange:1000``, ``marginals:0,1;1``."""
    shape = tuple(shape)
    n = int(np.prod(shape))
    head, _, arg = name.partition(":")
    if head == "identity":
        return Identity(n)
    if head == "total":
        return Total(n)
    if head == "prefix":
        return Prefix(n)
    if head == "h2":
        return h2_sel(n)
    if head == "hb":
        return hb_sel(n)
    if head == "wavelet":
        return Wavelet(n)
    if head == "quadtree":
        return quadtree_sel(shape)
    if head in ("allrange", "randomrange"):
        if not arg:
            return all_range(n)
        rng = rng if rng is not None else np.random.default_rng(0)
        return random_range(shape, int(arg), rng)
    if head == "marginals":
        sets = [[int(a) for a in part.split(",") if a] for part in arg.split(";")]
        return marginals(shape, sets)
    if head == "stripe":
        axis, _, sub = arg.partition(":")
        return stripe_select(shape, int(axis), lambda k: build_workload(sub or "identity", (k,), rng))
    raise ValueError(f"unknown workload {name!r}")
