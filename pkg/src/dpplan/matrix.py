"""Matrix-free linear operators.

Every operator exposes its shape plus five primitives: matrix-vector
product, transpose, composition (``@``), element-wise ``abs`` and ``sqr``.
Everything else (sensitivity, gram matrices, row access, materialization)
is derived from those.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import sparse

DEFAULT_MEMORY_CAP = 2 * 1024**3
MEMORY_CAP_ENV = "DPPLAN_MEMORY_CAP"


class DimensionError(ValueError):
    pass


class CapacityError(MemoryError):
    """A dense allocation would exceed the configured memory cap."""


def memory_cap() -> int:
    value = os.environ.get(MEMORY_CAP_ENV)
    return int(float(value)) if value else DEFAULT_MEMORY_CAP


def check_capacity(rows: int, cols: int, what: str = "dense matrix") -> None:
    need = 8 * int(rows) * int(cols)
    cap = memory_cap()
    if need > cap:
        raise CapacityError(f"{what} of shape ({rows}, {cols}) needs {need} bytes, cap is {cap}")


@dataclass
class DataVector:
    values: np.ndarray
    domain_shape: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.domain_shape = tuple(int(s) for s in self.domain_shape)
        if int(np.prod(self.domain_shape)) != self.values.size:
            raise DimensionError(f"domain shape {self.domain_shape} does not match {self.values.size} values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("data vector has non-finite entries")

    def __len__(self):
        return self.values.size


class LinOp:
    """Base class. Subclasses implement ``_matmat`` on ``(cols, k)`` arrays."""

    kind = "linop"
    binary = False

    def __init__(self, shape):
        self.shape = (int(shape[0]), int(shape[1]))

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    # -- primitives -------------------------------------------------------
    def _matmat(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _rmatmat(self, Y: np.ndarray) -> np.ndarray:
        return self.T._matmat(Y)

    def _transpose(self) -> "LinOp":
        raise NotImplementedError

    def abs(self) -> "LinOp":
        if self.binary:
            return self
        return Dense(np.abs(self.materialize()))

    def sqr(self) -> "LinOp":
        if self.binary:
            return self
        return Dense(self.materialize() ** 2)

    def max_abs(self) -> float:
        if self.binary:
            return 1.0 if self.rows and self.cols else 0.0
        return float(np.max(np.abs(self.materialize()), initial=0.0))

    # -- public API -------------------------------------------------------
    @property
    def T(self) -> "LinOp":
        return self._transpose()

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.size != self.cols:
            raise DimensionError(f"operator has {self.cols} columns, vector has shape {v.shape}")
        return self._matmat(v[:, None])[:, 0]

    def rmatvec(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim != 1 or u.size != self.rows:
            raise DimensionError(f"operator has {self.rows} rows, vector has shape {u.shape}")
        return self._rmatmat(u[:, None])[:, 0]

    def matmat(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != self.cols:
            raise DimensionError(f"operator has {self.cols} columns, got array of shape {X.shape}")
        return self._matmat(X)

    def __matmul__(self, other):
        if isinstance(other, LinOp):
            return matmul(self, other)
        other = np.asarray(other)
        return self.matvec(other) if other.ndim == 1 else self.matmat(other)

    def __mul__(self, c):
        return Weighted(float(c), self)

    __rmul__ = __mul__

    def sensitivity_l1(self) -> float:
        if self.rows == 0:
            return 0.0
        return float(np.max(self.abs().rmatvec(np.ones(self.rows))))

    def sensitivity_l2(self) -> float:
        if self.rows == 0:
            return 0.0
        return float(np.sqrt(np.max(self.sqr().rmatvec(np.ones(self.rows)))))

    def materialize(self) -> np.ndarray:
        check_capacity(self.rows, self.cols)
        k = min(self.rows, self.cols)
        check_capacity(k, k, "identity block")
        if self.rows < self.cols:  # wide: probe with the transpose on the smaller identity
            return np.ascontiguousarray(self._rmatmat(np.eye(self.rows)).T)
        return self._matmat(np.eye(self.cols))

    def gram(self) -> np.ndarray:
        check_capacity(self.cols, self.cols, "gram matrix")
        M = self.materialize()
        return M.T @ M

    def row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.rows:
            raise IndexError(i)
        e = np.zeros(self.rows)
        e[i] = 1.0
        return self.rmatvec(e)

    # -- structure --------------------------------------------------------
    def _params(self) -> dict:
        return {}

    def _children(self) -> list:
        return []

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self._params(),
            "children": [c.to_dict() for c in self._children()],
        }

    def __eq__(self, other):
        return isinstance(other, LinOp) and self.to_dict() == other.to_dict()

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}{self.shape}"


class Dense(LinOp):
    kind = "dense"

    def __init__(self, values):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        super().__init__(values.shape)
        self.values = values
        self.binary = bool(np.all((values == 0) | (values == 1)))

    def _matmat(self, X):
        return self.values @ X

    def _rmatmat(self, Y):
        return self.values.T @ Y

    def _transpose(self):
        return Dense(self.values.T)

    def abs(self):
        return Dense(np.abs(self.values))

    def sqr(self):
        return Dense(self.values**2)

    def max_abs(self):
        return float(np.max(np.abs(self.values), initial=0.0))

    def materialize(self):
        return self.values.copy()

    def _params(self):
        return {"values": self.values.tolist()}


class Sparse(LinOp):
    kind = "sparse"

    def __init__(self, matrix):
        matrix = sparse.csr_matrix(matrix, dtype=float)
        matrix.sum_duplicates()
        matrix.eliminate_zeros()
        matrix.sort_indices()
        super().__init__(matrix.shape)
        self.matrix = matrix
        self.binary = bool(np.all(matrix.data == 1))

    @classmethod
    def from_triplets(cls, rows, cols, vals, shape):
        return cls(sparse.coo_matrix((vals, (rows, cols)), shape=shape))

    def _matmat(self, X):
        return np.asarray(self.matrix @ X)

    def _rmatmat(self, Y):
        return np.asarray(self.matrix.T @ Y)

    def _transpose(self):
        return Sparse(self.matrix.T)

    def abs(self):
        return Sparse(abs(self.matrix))

    def sqr(self):
        return Sparse(self.matrix.multiply(self.matrix))

    def max_abs(self):
        return float(np.max(np.abs(self.matrix.data), initial=0.0))

    def materialize(self):
        check_capacity(*self.shape)
        return self.matrix.toarray()

    def gram(self):
        check_capacity(self.cols, self.cols, "gram matrix")
        return (self.matrix.T @ self.matrix).toarray()

    def _params(self):
        coo = self.matrix.tocoo()
        return {
            "shape": list(self.shape),
            "rows": coo.row.tolist(),
            "cols": coo.col.tolist(),
            "vals": coo.data.tolist(),
        }


class Identity(LinOp):
    kind = "identity"
    binary = True

    def __init__(self, n):
        super().__init__((n, n))

    def _matmat(self, X):
        return X.copy()

    def _transpose(self):
        return self

    def gram(self):
        check_capacity(self.cols, self.cols, "gram matrix")
        return np.eye(self.cols)

    def _params(self):
        return {"n": self.cols}


class Ones(LinOp):
    kind = "ones"
    binary = True

    def __init__(self, m, n):
        super().__init__((m, n))

    def _matmat(self, X):
        return np.broadcast_to(X.sum(axis=0), (self.rows, X.shape[1])).copy()

    def _transpose(self):
        return Total(self.rows) if self.cols == 1 else Ones(self.cols, self.rows)

    def _params(self):
        return {"m": self.rows, "n": self.cols}


class Total(Ones):
    kind = "total"

    def __init__(self, n):
        super().__init__(1, n)

    def _params(self):
        return {"n": self.cols}


class Prefix(LinOp):
    """Lower-triangular ones; row k sums cells 0..k."""

    kind = "prefix"
    binary = True

    def __init__(self, n):
        super().__init__((n, n))

    def _matmat(self, X):
        return np.cumsum(X, axis=0)

    def _rmatmat(self, Y):
        return Suffix(self.rows)._matmat(Y)

    def _transpose(self):
        return Suffix(self.cols)

    def sensitivity_l1(self):
        return float(self.cols)

    def _params(self):
        return {"n": self.cols}


class Suffix(LinOp):
    kind = "suffix"
    binary = True

    def __init__(self, n):
        super().__init__((n, n))

    def _matmat(self, X):
        return np.cumsum(X[::-1], axis=0)[::-1]

    def _rmatmat(self, Y):
        return np.cumsum(Y, axis=0)

    def _transpose(self):
        return Prefix(self.cols)

    def _params(self):
        return {"n": self.cols}


def _check_dyadic(n):
    if n < 1 or n & (n - 1):
        raise DimensionError(f"Haar wavelet needs a power-of-two size, got {n}")


class Wavelet(LinOp):
    """Unnormalized Haar transform.

    Row 0 is the total; then, coarse to fine, one row per dyadic interval
    with +1 on its left half and -1 on its right half.
    """

    kind = "wavelet"

    def __init__(self, n):
        _check_dyadic(n)
        super().__init__((n, n))

    def _matmat(self, X):
        details = []
        s = X
        while s.shape[0] > 1:
            left, right = s[0::2], s[1::2]
            details.append(left - right)
            s = left + right
        return np.concatenate([s] + details[::-1], axis=0)

    def _rmatmat(self, Y):
        s = Y[:1]
        pos = 1
        while s.shape[0] < self.cols:
            d = Y[pos : pos + s.shape[0]]
            pos += s.shape[0]
            nxt = np.empty((2 * s.shape[0], Y.shape[1]))
            nxt[0::2] = s + d
            nxt[1::2] = s - d
            s = nxt
        return s

    def _transpose(self):
        return WaveletT(self.cols)

    def max_abs(self):
        return 1.0

    def sensitivity_l1(self):
        return 1.0 + math.log2(self.cols)

    def sensitivity_l2(self):
        return math.sqrt(1.0 + math.log2(self.cols))

    def _params(self):
        return {"n": self.cols}


class WaveletT(LinOp):
    kind = "wavelet_t"

    def __init__(self, n):
        _check_dyadic(n)
        super().__init__((n, n))

    def _matmat(self, X):
        return Wavelet(self.cols)._rmatmat(X)

    def _rmatmat(self, Y):
        return Wavelet(self.cols)._matmat(Y)

    def _transpose(self):
        return Wavelet(self.cols)

    def max_abs(self):
        return 1.0

    def _params(self):
        return {"n": self.cols}


class Kronecker(LinOp):
    kind = "kronecker"

    def __init__(self, factors):
        factors = list(factors)
        if not factors:
            raise DimensionError("Kronecker needs at least one factor")
        m = int(np.prod([f.rows for f in factors]))
        n = int(np.prod([f.cols for f in factors]))
        super().__init__((m, n))
        self.factors = factors
        self.binary = all(f.binary for f in factors)

    def _apply(self, X, ops, in_dims, out_dims):
        k = X.shape[1]
        T = X.reshape(tuple(in_dims) + (k,))
        dims = list(in_dims)
        for axis, op in enumerate(ops):
            T = np.moveaxis(T, axis, 0)
            rest = T.shape[1:]
            T = op._matmat(T.reshape(dims[axis], -1)).reshape((out_dims[axis],) + rest)
            T = np.moveaxis(T, 0, axis)
            dims[axis] = out_dims[axis]
        return T.reshape(-1, k)

    def _matmat(self, X):
        return self._apply(X, self.factors, [f.cols for f in self.factors], [f.rows for f in self.factors])

    def _rmatmat(self, Y):
        ops = [f.T for f in self.factors]
        return self._apply(Y, ops, [f.rows for f in self.factors], [f.cols for f in self.factors])

    def _transpose(self):
        return Kronecker([f.T for f in self.factors])

    def abs(self):
        return self if self.binary else Kronecker([f.abs() for f in self.factors])

    def sqr(self):
        return self if self.binary else Kronecker([f.sqr() for f in self.factors])

    def max_abs(self):
        return float(np.prod([f.max_abs() for f in self.factors]))

    def sensitivity_l1(self):
        return float(np.prod([f.sensitivity_l1() for f in self.factors]))

    def gram(self):
        check_capacity(self.cols, self.cols, "gram matrix")
        return reduce(np.kron, [f.gram() for f in self.factors])

    def _children(self):
        return self.factors


class Union(LinOp):
    """Row-wise stack of operators sharing a column count."""

    kind = "union"

    def __init__(self, blocks):
        flat = []
        for b in blocks:
            flat.extend(b.blocks if isinstance(b, Union) else [b])
        if not flat:
            raise DimensionError("Union needs at least one block")
        cols = {b.cols for b in flat}
        if len(cols) != 1:
            raise DimensionError(f"Union blocks disagree on column count: {sorted(cols)}")
        super().__init__((sum(b.rows for b in flat), flat[0].cols))
        self.blocks = flat
        self.binary = all(b.binary for b in flat)
        self._offsets = np.cumsum([0] + [b.rows for b in flat])

    def _matmat(self, X):
        return np.concatenate([b._matmat(X) for b in self.blocks], axis=0)

    def _rmatmat(self, Y):
        out = np.zeros((self.cols, Y.shape[1]))
        for b, lo, hi in zip(self.blocks, self._offsets[:-1], self._offsets[1:]):
            out += b._rmatmat(Y[lo:hi])
        return out

    def _transpose(self):
        return HStack([b.T for b in self.blocks])

    def abs(self):
        return self if self.binary else Union([b.abs() for b in self.blocks])

    def sqr(self):
        return self if self.binary else Union([b.sqr() for b in self.blocks])

    def max_abs(self):
        return max(b.max_abs() for b in self.blocks)

    def gram(self):
        check_capacity(self.cols, self.cols, "gram matrix")
        if self.rows <= self.cols:  # few rows: one dense product beats summing block grams
            return super().gram()
        return sum(b.gram() for b in self.blocks)

    def _children(self):
        return self.blocks


class HStack(LinOp):
    """Column-wise concatenation; the transpose of a Union."""

    kind = "hstack"

    def __init__(self, blocks):
        blocks = list(blocks)
        rows = {b.rows for b in blocks}
        if len(rows) != 1:
            raise DimensionError(f"HStack blocks disagree on row count: {sorted(rows)}")
        super().__init__((blocks[0].rows, sum(b.cols for b in blocks)))
        self.blocks = blocks
        self.binary = all(b.binary for b in blocks)
        self._offsets = np.cumsum([0] + [b.cols for b in blocks])

    def _matmat(self, X):
        out = np.zeros((self.rows, X.shape[1]))
        for b, lo, hi in zip(self.blocks, self._offsets[:-1], self._offsets[1:]):
            out += b._matmat(X[lo:hi])
        return out

    def _rmatmat(self, Y):
        return np.concatenate([b._rmatmat(Y) for b in self.blocks], axis=0)

    def _transpose(self):
        return Union([b.T for b in self.blocks])

    def abs(self):
        return self if self.binary else HStack([b.abs() for b in self.blocks])

    def sqr(self):
        return self if self.binary else HStack([b.sqr() for b in self.blocks])

    def max_abs(self):
        return max(b.max_abs() for b in self.blocks)

    def _children(self):
        return self.blocks


class Product(LinOp):
    """Lazy ``A @ B``.

    ``binary=True`` is a caller promise that the product has 0/1 entries
    (e.g. range queries built as differences of prefixes), which makes
    ``abs`` and ``sqr`` no-ops instead of forcing materialization.
    """

    kind = "product"

    def __init__(self, A, B, binary=False):
        if A.cols != B.rows:
            raise DimensionError(f"cannot multiply {A.shape} by {B.shape}")
        super().__init__((A.rows, B.cols))
        self.A, self.B = A, B
        self.binary = bool(binary)

    def _matmat(self, X):
        return self.A._matmat(self.B._matmat(X))

    def _rmatmat(self, Y):
        return self.B._rmatmat(self.A._rmatmat(Y))

    def _transpose(self):
        return Product(self.B.T, self.A.T, binary=self.binary)

    def gram(self):
        check_capacity(self.cols, self.cols, "gram matrix")
        if self.A.rows > self.cols and self.A.rows * self.cols > self.A.cols**2:
            # avoid materializing a tall left factor
            G = self.A.gram()
            Bm = self.B.materialize()
            return Bm.T @ G @ Bm
        return super().gram()

    def _params(self):
        return {"binary": self.binary}

    def _children(self):
        return [self.A, self.B]


class Weighted(LinOp):
    kind = "weighted"

    def __init__(self, weight, base):
        super().__init__(base.shape)
        self.weight = float(weight)
        self.base = base

    def _matmat(self, X):
        return self.weight * self.base._matmat(X)

    def _rmatmat(self, Y):
        return self.weight * self.base._rmatmat(Y)

    def _transpose(self):
        return Weighted(self.weight, self.base.T)

    def abs(self):
        return Weighted(abs(self.weight), self.base.abs())

    def sqr(self):
        return Weighted(self.weight**2, self.base.sqr())

    def max_abs(self):
        return abs(self.weight) * self.base.max_abs()

    def sensitivity_l1(self):
        return abs(self.weight) * self.base.sensitivity_l1()

    def gram(self):
        return self.weight**2 * self.base.gram()

    def _params(self):
        return {"weight": self.weight}

    def _children(self):
        return [self.base]


# -- functional interface ---------------------------------------------------

def matvec(A: LinOp, v) -> np.ndarray:
    if isinstance(v, DataVector):
        v = v.values
    return A.matvec(v)


def transpose(A: LinOp) -> LinOp:
    return A.T


def matmul(A: LinOp, B: LinOp) -> LinOp:
    if A.cols != B.rows:
        raise DimensionError(f"cannot multiply {A.shape} by {B.shape}")
    return Product(A, B)


def abs_op(A: LinOp) -> LinOp:
    return A.abs()


def sqr_op(A: LinOp) -> LinOp:
    return A.sqr()


def sensitivity_l1(A: LinOp) -> float:
    return A.sensitivity_l1()


def sensitivity_l2(A: LinOp) -> float:
    return A.sensitivity_l2()


def gram(A: LinOp) -> np.ndarray:
    return A.gram()


def row(A: LinOp, i: int) -> np.ndarray:
    return A.row(i)


def materialize(A: LinOp) -> np.ndarray:
    return A.materialize()


def ensure_linop(A) -> LinOp:
    if isinstance(A, LinOp):
        return A
    if sparse.issparse(A):
        return Sparse(A)
    return Dense(A)


def as_scipy_sparse(A: LinOp, max_nnz: int = 10_000_000):
    """CSR form of A when it is cheaply available, else None."""
    if isinstance(A, Sparse):
        return A.matrix
    if isinstance(A, Identity):
        return sparse.identity(A.cols, format="csr")
    if isinstance(A, Ones) and A.rows * A.cols <= max_nnz:
        return sparse.csr_matrix(np.ones(A.shape))
    if isinstance(A, Weighted):
        inner = as_scipy_sparse(A.base, max_nnz)
        return None if inner is None else (A.weight * inner).tocsr()
    if isinstance(A, Union):
        parts = [as_scipy_sparse(b, max_nnz) for b in A.blocks]
        return None if any(p is None for p in parts) else sparse.vstack(parts, format="csr")
    return None


def fuse_sparse(blocks) -> LinOp:
    """Stack row blocks, merging runs of sparse-representable blocks into one CSR block."""
    out, run = [], []

    def flush():
        if run:
            out.append(Sparse(sparse.vstack(run, format="csr")) if len(run) > 1 else Sparse(run[0]))
            run.clear()

    for b in blocks:
        csr = as_scipy_sparse(b)
        if csr is None:
            flush()
            out.append(b)
        else:
            run.append(csr)
    flush()
    return out[0] if len(out) == 1 else Union(out)


# -- serialization ----------------------------------------------------------

def from_dict(d: dict) -> LinOp:
    kind = d["kind"]
    p = d.get("params", {})
    kids = [from_dict(c) for c in d.get("children", [])]
    if kind == "dense":
        return Dense(np.array(p["values"], dtype=float))
    if kind == "sparse":
        return Sparse.from_triplets(p["rows"], p["cols"], p["vals"], tuple(p["shape"]))
    if kind == "identity":
        return Identity(p["n"])
    if kind == "ones":
        return Ones(p["m"], p["n"])
    if kind == "total":
        return Total(p["n"])
    if kind == "prefix":
        return Prefix(p["n"])
    if kind == "suffix":
        return Suffix(p["n"])
    if kind == "wavelet":
        return Wavelet(p["n"])
    if kind == "wavelet_t":
        return WaveletT(p["n"])
    if kind == "kronecker":
        return Kronecker(kids)
    if kind == "union":
        return Union(kids)
    if kind == "hstack":
        return HStack(kids)
    if kind == "product":
        return Product(kids[0], kids[1], binary=p.get("binary", False))
    if kind == "weighted":
        return Weighted(p["weight"], kids[0])
    raise ValueError(f"unknown operator kind {kind!r}")
