"""Table and vector transformations with their stability constants."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matrix import DataVector, LinOp, Sparse


class SchemaError(ValueError):
    pass


class IngestionError(ValueError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class PartitionError(ValueError):
    pass


# -- schema -------------------------------------------------------------------

@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    values: tuple = ()
    lo: float = 0.0
    hi: float = 0.0
    bins: int = 0

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.values:
                raise SchemaError(f"categorical attribute {self.name!r} has no values")
            object.__setattr__(self, "values", tuple(str(v) for v in self.values))
        elif self.kind == "range":
            if self.bins < 1 or not self.hi > self.lo:
                raise SchemaError(f"range attribute {self.name!r} needs lo < hi and bins >= 1")
        elif self.kind != "count":
            raise SchemaError(f"unknown attribute type {self.kind!r}")

    @classmethod
    def categorical(cls, name, values):
        return cls(name, "categorical", values=tuple(values))

    @classmethod
    def uniform_ranges(cls, name, lo, hi, bins):
        return cls(name, "range", lo=float(lo), hi=float(hi), bins=int(bins))

    @property
    def size(self) -> int:
        if self.kind == "categorical":
            return len(self.values)
        if self.kind == "range":
            return self.bins
        raise SchemaError(f"attribute {self.name!r} has no finite domain")

    def normalize(self, value):
        if self.kind == "categorical":
            return str(value)
        return float(value)

    def bin_array(self, column) -> np.ndarray:
        """Cell index per value, -1 where the value falls outside the domain.

        Ranges are half-open ``[edge_i, edge_i+1)`` except the last, which is closed.
        """
        if self.kind == "categorical":
            lookup = {v: i for i, v in enumerate(self.values)}
            return np.array([lookup.get(str(v), -1) for v in column], dtype=np.int64)
        vals = np.asarray(column, dtype=float)
        width = (self.hi - self.lo) / self.bins
        with np.errstate(invalid="ignore"):
            idx = np.floor((vals - self.lo) / width)
        idx = np.where(vals == self.hi, self.bins - 1, idx)
        bad = ~np.isfinite(vals) | (vals < self.lo) | (vals > self.hi)
        return np.where(bad, -1, idx).astype(np.int64)

    def to_dict(self):
        if self.kind == "categorical":
            return {"name": self.name, "type": "categorical", "values": list(self.values)}
        if self.kind == "range":
            return {"name": self.name, "type": "range", "lo": self.lo, "hi": self.hi, "bins": self.bins}
        return {"name": self.name, "type": "count"}


@dataclass(frozen=True)
class Schema:
    attributes: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = self.names
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")

    @property
    def names(self) -> tuple:
        return tuple(a.name for a in self.attributes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.attributes)

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    def attribute(self, name) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}")

    def index(self, name) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def project(self, names) -> "Schema":
        return Schema(tuple(self.attribute(n) for n in names))

    def to_dict(self):
        return {"attributes": [a.to_dict() for a in self.attributes]}

    @classmethod
    def from_dict(cls, d):
        attrs = []
        for a in d["attributes"]:
            kind = a.get("type")
            if kind == "categorical":
                attrs.append(Attribute.categorical(a["name"], a["values"]))
            elif kind == "range":
                attrs.append(Attribute.uniform_ranges(a["name"], a["lo"], a["hi"], a["bins"]))
            else:
                raise SchemaError(f"attribute {a.get('name')!r}: unknown type {kind!r}")
        return cls(tuple(attrs))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Table:
    schema: Schema
    rows: list = field(default_factory=list)

    def __post_init__(self):
        width = len(self.schema.attributes)
        norm = []
        for r in self.rows:
            if len(r) != width:
                raise IngestionError(f"row has {len(r)} fields, schema has {width}")
            norm.append(tuple(a.normalize(v) for a, v in zip(self.schema.attributes, r)))
        self.rows = norm

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> list:
        i = self.schema.index(name)
        return [r[i] for r in self.rows]

    def as_dicts(self):
        names = self.schema.names
        return [dict(zip(names, r)) for r in self.rows]


def read_csv(path, schema: Schema) -> Table:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in schema.names if n not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"CSV header lacks attributes {missing}")
        rows = []
        for i, rec in enumerate(reader):
            try:
                rows.append(tuple(a.normalize(rec[a.name]) for a in schema.attributes))
            except ValueError as exc:
                raise IngestionError(f"row {i}: {exc}", rows=[i]) from None
    return Table(schema, rows)


def symmetric_difference(a: Table, b: Table) -> int:
    ca, cb = Counter(a.rows), Counter(b.rows)
    return sum(((ca - cb) + (cb - ca)).values())


# -- predicates -----------------------------------------------------------------

class Predicate:
    def attrs(self) -> set:
        return set()

    def test(self, row: dict, schema: Schema) -> bool:
        raise NotImplementedError

    def __and__(self, other):
        return And(self, other)


class _Const(Predicate):
    def __init__(self, value):
        self.value = value

    def test(self, row, schema):
        return self.value

    def __repr__(self):
        return "TRUE" if self.value else "FALSE"


TRUE = _Const(True)
FALSE = _Const(False)


class Eq(Predicate):
    def __init__(self, attr, value):
        self.attr, self.value = attr, value

    def attrs(self):
        return {self.attr}

    def test(self, row, schema):
        return row[self.attr] == schema.attribute(self.attr).normalize(self.value)


class In(Predicate):
    def __init__(self, attr, values):
        self.attr, self.values = attr, tuple(values)

    def attrs(self):
        return {self.attr}

    def test(self, row, schema):
        norm = schema.attribute(self.attr).normalize
        return row[self.attr] in {norm(v) for v in self.values}


class Between(Predicate):
    """Inclusive numeric range test."""

    def __init__(self, attr, lo, hi):
        self.attr, self.lo, self.hi = attr, lo, hi

    def attrs(self):
        return {self.attr}

    def test(self, row, schema):
        return self.lo <= float(row[self.attr]) <= self.hi


class And(Predicate):
    def __init__(self, *parts):
        self.parts = parts

    def attrs(self):
        return set().union(*(p.attrs() for p in self.parts))

    def test(self, row, schema):
        return all(p.test(row, schema) for p in self.parts)


# -- table transformations ----------------------------------------------------

def _check_attrs(schema: Schema, names):
    for n in names:
        schema.index(n)


def where(t: Table, predicate: Predicate) -> Table:
    _check_attrs(t.schema, predicate.attrs())
    names = t.schema.names
    kept = [r for r in t.rows if predicate.test(dict(zip(names, r)), t.schema)]
    return Table(t.schema, kept)


def select(t: Table, attrs) -> Table:
    attrs = list(attrs)
    if not attrs:
        raise SchemaError("select needs at least one attribute")
    idx = [t.schema.index(a) for a in attrs]
    return Table(t.schema.project(attrs), [tuple(r[i] for i in idx) for r in t.rows])


def group_by(t: Table, keys) -> Table:
    keys = list(keys)
    idx = [t.schema.index(k) for k in keys]
    counts = Counter(tuple(r[i] for i in idx) for r in t.rows)
    schema = Schema(t.schema.project(keys).attributes + (Attribute("count", "count"),))
    return Table(schema, [k + (c,) for k, c in sorted(counts.items(), key=lambda kv: repr(kv[0]))])


def split_by_partition(t: Table, attr, groups) -> list:
    """One table per group of attribute values; groups must be disjoint."""
    a = t.schema.attribute(attr)
    i = t.schema.index(attr)
    owner = {}
    for g, values in enumerate(groups):
        for v in values:
            v = a.normalize(v)
            if v in owner:
                raise PartitionError(f"value {v!r} appears in groups {owner[v]} and {g}")
            owner[v] = g
    out = [[] for _ in groups]
    for r in t.rows:
        if r[i] not in owner:
            raise PartitionError(f"value {r[i]!r} of {attr!r} is not covered by any group")
        out[owner[r[i]]].append(r)
    return [Table(t.schema, rows) for rows in out]


def vectorize(t: Table, schema: Schema | None = None) -> DataVector:
    schema = schema or t.schema
    if not t.rows:
        return DataVector(np.zeros(schema.size), schema.shape)
    cells = []
    bad = np.zeros(len(t.rows), dtype=bool)
    for a in schema.attributes:
        col = schema.index(a.name)
        idx = a.bin_array([r[col] for r in t.rows])
        bad |= idx < 0
        cells.append(idx)
    if bad.any():
        offending = np.flatnonzero(bad).tolist()
        raise IngestionError(f"values outside the schema domain in rows {offending[:20]}", rows=offending)
    flat = np.ravel_multi_index(tuple(cells), schema.shape)
    counts = np.bincount(flat, minlength=schema.size).astype(float)
    return DataVector(counts, schema.shape)


# -- partitions and vector transformations ------------------------------------

@dataclass
class PartitionMap:
    group_of: np.ndarray
    p: int

    def __post_init__(self):
        self.group_of = np.asarray(self.group_of, dtype=np.int64).ravel()
        self.p = int(self.p)
        if self.group_of.size and (self.group_of.min() < 0 or self.group_of.max() >= self.p):
            raise PartitionError("group ids must lie in [0, p)")
        if np.unique(self.group_of).size != self.p:
            raise PartitionError("partition map must be surjective onto [0, p)")

    @classmethod
    def from_groups(cls, groups, n) -> "PartitionMap":
        group_of = np.full(n, -1, dtype=np.int64)
        for g, members in enumerate(groups):
            members = np.asarray(members, dtype=np.int64)
            if np.any(group_of[members] >= 0) or np.unique(members).size != members.size:
                raise PartitionError(f"group {g} overlaps an earlier group")
            group_of[members] = g
        if np.any(group_of < 0):
            raise PartitionError(f"cells {np.flatnonzero(group_of < 0)[:10].tolist()} are not covered")
        return cls(group_of, len(groups))

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), n)

    @property
    def n(self) -> int:
        return self.group_of.size

    def groups(self) -> list:
        order = np.argsort(self.group_of, kind="stable")
        bounds = np.searchsorted(self.group_of[order], np.arange(self.p + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.p)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.p)

    def matrix(self) -> Sparse:
        n = self.n
        return Sparse.from_triplets(self.group_of, np.arange(n), np.ones(n), (self.p, n))

    def pinv(self) -> Sparse:
        """``P^T D^-1`` where D holds the group sizes."""
        n = self.n
        w = 1.0 / self.sizes()[self.group_of]
        return Sparse.from_triplets(np.arange(n), self.group_of, w, (n, self.p))

    def selector(self, g) -> Sparse:
        members = np.flatnonzero(self.group_of == g)
        k = members.size
        return Sparse.from_triplets(np.arange(k), members, np.ones(k), (k, self.n))

    def to_dict(self):
        return {"p": self.p, "group_of": self.group_of.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["group_of"]), d["p"])


def _values(x):
    return x.values if isinstance(x, DataVector) else np.asarray(x, dtype=float)


def vreduce(x, P: PartitionMap) -> np.ndarray:
    v = _values(x)
    if v.size != P.n:
        raise PartitionError(f"partition covers {P.n} cells, vector has {v.size}")
    return np.bincount(P.group_of, weights=v, minlength=P.p)


def vsplit(x, P: PartitionMap) -> list:
    v = _values(x)
    if v.size != P.n:
        raise PartitionError(f"partition covers {P.n} cells, vector has {v.size}")
    return [v[g] for g in P.groups()]


# -- descriptors registered with the kernel -------------------------------------

class Transform:
    """A transformation the kernel applies to a private payload."""

    name = "transform"
    stability = 1
    input_kind = "table"
    output_kind = "table"

    def apply(self, payload):
        raise NotImplementedError

    def matrix(self, n: int) -> LinOp | None:
        return None


class Where(Transform):
    name = "where"

    def __init__(self, predicate):
        self.predicate = predicate

    def apply(self, payload):
        return where(payload, self.predicate)


class Select(Transform):
    name = "select"

    def __init__(self, attrs):
        self.attrs = list(attrs)

    def apply(self, payload):
        return select(payload, self.attrs)


class GroupBy(Transform):
    name = "group_by"
    stability = 2

    def __init__(self, keys):
        self.keys = list(keys)

    def apply(self, payload):
        return group_by(payload, self.keys)


class Vectorize(Transform):
    name = "vectorize"
    output_kind = "vector"

    def __init__(self, schema: Schema | None = None):
        self.schema = schema

    def apply(self, payload):
        return vectorize(payload, self.schema)


class Reduce(Transform):
    name = "reduce"
    input_kind = output_kind = "vector"

    def __init__(self, partition: PartitionMap):
        self.partition = partition

    def apply(self, payload):
        return DataVector(vreduce(payload, self.partition), (self.partition.p,))

    def matrix(self, n):
        return self.partition.matrix()


class VectorTransform(Transform):
    """``x' = M x`` with stability equal to the largest L1 column norm of M."""

    name = "linear"
    input_kind = output_kind = "vector"

    def __init__(self, M: LinOp, domain_shape=None):
        self.M = M
        self.domain_shape = tuple(domain_shape) if domain_shape else (M.rows,)
        self.stability = M.sensitivity_l1()

    def apply(self, payload):
        return DataVector(self.M.matvec(_values(payload)), self.domain_shape)

    def matrix(self, n):
        return self.M
