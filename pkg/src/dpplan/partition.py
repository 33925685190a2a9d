"""Partition selection operators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .matrix import DimensionError, LinOp
from .measurement import sample_laplace
from .selection import axis_blocks
from .transform import PartitionMap


def _relabel(inverse: np.ndarray) -> PartitionMap:
    """Renumber group ids in order of first appearance."""
    _, first = np.unique(inverse, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return PartitionMap(remap[inverse], order.size)


def _round_significant(h: np.ndarray, bits: int = 40) -> np.ndarray:
    # keep roughly 12 significant decimal digits so summation-order noise cannot split a group
    mant, expo = np.frexp(h)
    return np.ldexp(np.round(mant * 2.0**bits), expo - bits)


# -- public (data-independent) partitions -------------------------------------------

def workload_based(W: LinOp, k: int = 2, rng=None) -> PartitionMap:
    """Group cells whose workload columns are identical.

    Columns are compared through random projections ``W^T v``; all-zero
    columns end up together in one group.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = np.empty((W.cols, k))
    for r in range(k):
        v = rng.uniform(0.0, 1.0, size=W.rows)
        keys[:, r] = _round_significant(W.rmatvec(v))
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return _relabel(inverse.ravel())


def stripe_partition(domain_shape, axis: int) -> PartitionMap:
    """One group per line along ``axis``; members ordered along the axis."""
    shape = tuple(domain_shape)
    if not 0 <= axis < len(shape):
        raise DimensionError(f"axis {axis} out of range for shape {shape}")
    coords = np.indices(shape).reshape(len(shape), -1)
    rest = [i for i in range(len(shape)) if i != axis]
    if not rest:
        return PartitionMap(np.zeros(coords.shape[1], dtype=np.int64), 1)
    group = np.ravel_multi_index(tuple(coords[i] for i in rest), tuple(shape[i] for i in rest))
    return PartitionMap(group, int(np.prod([shape[i] for i in rest])))


@dataclass
class GridPartition(PartitionMap):
    cell_shapes: list = field(default_factory=list)


def grid_partition(domain_shape, widths) -> GridPartition:
    """Rectangular blocks of the given per-axis width, numbered in row-major order."""
    shape = tuple(domain_shape)
    widths = [int(widths)] * len(shape) if np.isscalar(widths) else [int(w) for w in widths]
    if len(widths) != len(shape) or any(w < 1 for w in widths):
        raise DimensionError(f"invalid cell size {widths} for shape {shape}")
    per_axis = [axis_blocks(n, w) for n, w in zip(shape, widths)]
    labels = []
    for n, blocks in zip(shape, per_axis):
        lab = np.empty(n, dtype=np.int64)
        for i, (a, z) in enumerate(blocks):
            lab[a:z] = i
        labels.append(lab)
    counts = tuple(len(b) for b in per_axis)
    grids = np.meshgrid(*labels, indexing="ij")
    group = np.ravel_multi_index(tuple(g.ravel() for g in grids), counts)
    cells = np.indices(counts).reshape(len(counts), -1).T
    cell_shapes = [tuple(per_axis[d][c[d]][1] - per_axis[d][c[d]][0] for d in range(len(shape))) for c in cells]
    return GridPartition(group, int(np.prod(counts)), cell_shapes)


# -- DAWA ---------------------------------------------------------------------

def dyadic_deviation_costs(x: np.ndarray) -> list:
    """L1 deviation from the mean for every aligned dyadic interval inside ``[0, n)``.

    Entry ``l`` holds costs for intervals ``[j 2^l, (j+1) 2^l)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    costs, size = [], 1
    while size <= n:
        cnt = n // size
        blocks = x[: cnt * size].reshape(cnt, size)
        costs.append(np.abs(blocks - blocks.mean(axis=1, keepdims=True)).sum(axis=1))
        size *= 2
    return costs


def dawa_dp(costs: list, n: int, penalty: float) -> list:
    """Minimum-cost cover of ``[0, n)`` by aligned dyadic intervals.

    Each chosen interval costs its entry in ``costs`` plus ``penalty``.
    Returns the chosen intervals as ``(start, stop)`` pairs.
    """
    best = np.full(n + 1, np.inf)
    best[0] = 0.0
    choice = np.zeros(n + 1, dtype=np.int64)
    for end in range(1, n + 1):
        level = 0
        while level < len(costs) and end % (1 << level) == 0:
            size = 1 << level
            start = end - size
            val = best[start] + costs[level][start // size] + penalty
            if val < best[end]:
                best[end], choice[end] = val, level
            level += 1
    out, end = [], n
    while end > 0:
        size = 1 << int(choice[end])
        out.append((end - size, end))
        end -= size
    return out[::-1]


def intervals_to_partition(intervals, n) -> PartitionMap:
    group = np.empty(n, dtype=np.int64)
    for g, (a, z) in enumerate(intervals):
        group[a:z] = g
    return PartitionMap(group, len(intervals))


class DawaPartitionOp:
    name = "dawa_partition"

    def __init__(self, eps2: float):
        self.eps2 = eps2

    def run(self, payload, epsilon, rng):
        x = payload.values
        costs = dyadic_deviation_costs(x)
        # one cell sits in one interval per level; each deviation moves by at most 2
        scale = 2.0 * len(costs) / epsilon
        noisy = [c + sample_laplace(scale, c.size, rng) for c in costs]
        return intervals_to_partition(dawa_dp(noisy, x.size, 1.0 / self.eps2), x.size)


def dawa_partition(kernel, sv, eps1: float, rho: float = 0.25, eps2: float | None = None) -> PartitionMap:
    """Contiguous buckets of near-uniform counts; spends ``eps1`` on ``sv``.

    ``eps2`` is the budget the caller will spend measuring the buckets; by
    default it is the remainder of a total split with partition share ``rho``.
    """
    if not 0 < rho < 1 and eps2 is None:
        raise ValueError("rho must lie in (0, 1) when eps2 is not given")
    eps2 = eps2 if eps2 is not None else eps1 * (1 - rho) / rho
    return kernel.measure(sv, DawaPartitionOp(eps2), eps1)


# -- AHP ----------------------------------------------------------------------

def ahp_cluster(values: np.ndarray, threshold: float) -> PartitionMap:
    """Greedy clustering of sorted values.

    A value joins the current cluster while the cluster's L1 deviation grows
    by at most ``threshold``; otherwise it opens a new cluster.
    """
    v = np.asarray(values, dtype=float)
    n = v.size
    order = np.argsort(v, kind="stable")
    s = v[order]
    S = np.concatenate([[0.0], np.cumsum(s)])

    def dev(a, b):
        mu = (S[b] - S[a]) / (b - a)
        c = a + int(np.searchsorted(s[a:b], mu))
        return mu * (c - a) - (S[c] - S[a]) + (S[b] - S[c]) - mu * (b - c)

    group = np.empty(n, dtype=np.int64)
    g, start, current = 0, 0, 0.0
    for i in range(n):
        if i > start:
            d = dev(start, i + 1)
            if d - current > threshold:
                g, start, d = g + 1, i, 0.0
            current = d
        group[order[i]] = g
    return PartitionMap(group, g + 1)


class AHPPartitionOp:
    name = "ahp_partition"

    def __init__(self, eps2: float, eta: float = 1.0):
        self.eps2, self.eta = eps2, eta

    def run(self, payload, epsilon, rng):
        x = payload.values
        n = x.size
        noisy = x + sample_laplace(1.0 / epsilon, n, rng)
        floor = self.eta * math.sqrt(math.log(n)) / epsilon if n > 1 else 0.0
        noisy = np.where(noisy < floor, 0.0, noisy)
        # merging saves one bucket of measurement noise; allow for the selection noise too
        threshold = 1.0 / self.eps2 + 2.0 * math.log(n + 1) / epsilon
        return ahp_cluster(noisy, threshold)


def ahp_partition(kernel, sv, eps1: float, eta: float = 1.0, rho: float = 0.25, eps2: float | None = None) -> PartitionMap:
    """Groups of cells (not necessarily contiguous) with similar noisy counts; spends ``eps1``."""
    if not 0 < rho < 1 and eps2 is None:
        raise ValueError("rho must lie in (0, 1) when eps2 is not given")
    eps2 = eps2 if eps2 is not None else eps1 * (1 - rho) / rho
    return kernel.measure(sv, AHPPartitionOp(eps2, eta), eps1)
