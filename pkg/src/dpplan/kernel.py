"""The protected kernel.

Client code only ever holds :class:`SourceRef` handles. The kernel keeps the
payloads, the transformation tree, per-edge stabilities, per-source budget
counters and the query history, and decides every budget request from
public quantities alone.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .matrix import DataVector, Identity, LinOp, Product
from .transform import PartitionMap, Schema, Table, Transform, split_by_partition, vsplit


class BudgetExceeded(RuntimeError):
    """A budget request was denied. Carries no information about the data."""


class LineageError(KeyError):
    pass


class KernelTypeError(TypeError):
    pass


class ConfigurationError(ValueError):
    pass


def as_fraction(value) -> Fraction:
    """Exact rational for a budget amount; floats are read as their shortest decimal."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class SourceRef:
    id: str
    kind: str

    def __repr__(self):
        return f"SourceRef({self.id}, {self.kind})"


@dataclass(frozen=True)
class TranscriptEntry:
    op_name: str
    source: SourceRef
    epsilon: Fraction
    outcome: str

    def to_dict(self):
        return {
            "op_name": self.op_name,
            "source": self.source.id,
            "epsilon": float(self.epsilon),
            "outcome": self.outcome,
        }


@dataclass
class TableSplit:
    """Table-level partition on the values of one attribute."""

    attr: str
    groups: list


@dataclass
class _Node:
    ref: SourceRef
    parent: SourceRef | None
    stability: Fraction
    payload: object
    edge_matrix: LinOp | None = None
    children: list = None


def _digest(answer) -> str:
    if isinstance(answer, DataVector):
        answer = answer.values
    if isinstance(answer, np.ndarray):
        data = np.ascontiguousarray(answer).tobytes()
    else:
        data = repr(answer).encode()
    return hashlib.sha256(data).hexdigest()


class ProtectedKernel:
    def __init__(self, table, eps_total, seed=None, public_total=None):
        eps = as_fraction(eps_total)
        if eps <= 0:
            raise ConfigurationError(f"eps_total must be positive, got {eps_total}")
        if isinstance(table, Table):
            kind = "table"
        elif isinstance(table, DataVector):
            kind = "vector"
        else:
            raise ConfigurationError("initial source must be a Table or a DataVector")
        self.eps_total = eps
        self.rng = np.random.default_rng(seed)
        self.public_total = public_total
        self._lock = threading.RLock()
        self._ids = itertools.count()
        self._nodes: dict[str, _Node] = {}
        self._budget: dict[str, Fraction] = {}
        self._history: dict[str, list] = {}
        self._transcript: list[TranscriptEntry] = []
        self.root = self._add(kind, None, Fraction(1), table)

    @classmethod
    def from_vector(cls, x, eps_total, seed=None, domain_shape=None, public_total=None):
        if not isinstance(x, DataVector):
            x = np.asarray(x, dtype=float)
            x = DataVector(x, domain_shape or (x.size,))
        return cls(x, eps_total, seed=seed, public_total=public_total)

    # -- graph ---------------------------------------------------------------

    def _add(self, kind, parent, stability, payload, edge_matrix=None) -> SourceRef:
        ref = SourceRef(f"sv{next(self._ids)}", kind)
        self._nodes[ref.id] = _Node(ref, parent, stability, payload, edge_matrix, [])
        self._budget[ref.id] = Fraction(0)
        self._history[ref.id] = []
        if parent is not None:
            self._nodes[parent.id].children.append(ref)
        return ref

    def _node(self, sv) -> _Node:
        key = sv.id if isinstance(sv, SourceRef) else sv
        try:
            return self._nodes[key]
        except KeyError:
            raise LineageError(f"unknown source {sv!r}") from None

    def register_transform(self, parent: SourceRef, transform: Transform) -> SourceRef:
        with self._lock:
            node = self._node(parent)
            if node.ref.kind != transform.input_kind:
                raise KernelTypeError(
                    f"{transform.name} expects a {transform.input_kind} source, got {node.ref.kind}"
                )
            payload = transform.apply(node.payload)
            n = len(node.payload) if node.ref.kind == "vector" else 0
            matrix = transform.matrix(n) if transform.output_kind == "vector" and node.ref.kind == "vector" else None
            return self._add(transform.output_kind, parent, as_fraction(transform.stability), payload, matrix)

    def register_partition(self, parent: SourceRef, part) -> list:
        """Insert a partition-dummy under ``parent`` and one child per group."""
        with self._lock:
            node = self._node(parent)
            if isinstance(part, PartitionMap):
                if node.ref.kind != "vector":
                    raise KernelTypeError("a PartitionMap splits vector sources")
                pieces = vsplit(node.payload, part)
                dummy = self._add("partition-dummy", parent, Fraction(1), None, Identity(part.n))
                return [
                    self._add("vector", dummy, Fraction(1), DataVector(v, (v.size,)), part.selector(g))
                    for g, v in enumerate(pieces)
                ]
            if isinstance(part, TableSplit):
                if node.ref.kind != "table":
                    raise KernelTypeError("a TableSplit splits table sources")
                pieces = split_by_partition(node.payload, part.attr, part.groups)
                dummy = self._add("partition-dummy", parent, Fraction(1), None)
                return [self._add("table", dummy, Fraction(1), t) for t in pieces]
            raise KernelTypeError(f"cannot partition with {type(part).__name__}")

    # -- budget ----------------------------------------------------------------

    def _plan_request(self, sv_id, sigma, origin, increments) -> bool:
        """Dry run of a budget request; collects counter increments, mutates nothing."""
        node = self._nodes[sv_id]
        current = self._budget[sv_id] + increments.get(sv_id, 0)
        if node.parent is None:
            ok = current + sigma <= self.eps_total
            add = sigma
        elif node.ref.kind == "partition-dummy":
            child = self._budget[origin] + increments.get(origin, 0)
            add = max(child + sigma - current, Fraction(0))
            ok = self._plan_request(node.parent.id, add, sv_id, increments)
        else:
            ok = self._plan_request(node.parent.id, node.stability * sigma, sv_id, increments)
            add = sigma
        if ok:
            increments[sv_id] = increments.get(sv_id, 0) + add
        return ok

    def request_budget(self, sv: SourceRef, sigma) -> bool:
        sigma = as_fraction(sigma)
        if sigma < 0:
            raise ConfigurationError("budget requests must be nonnegative")
        with self._lock:
            node = self._node(sv)
            increments: dict[str, Fraction] = {}
            if not self._plan_request(node.ref.id, sigma, None, increments):
                return False
            for k, v in increments.items():
                self._budget[k] += v
            return True

    def measure(self, sv: SourceRef, query_op, epsilon):
        """Run a Private->Public operator on ``sv`` after charging ``epsilon``.

        ``query_op`` provides ``name`` and ``run(payload, epsilon, rng)``.
        """
        eps = as_fraction(epsilon)
        if eps <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
        with self._lock:
            node = self._node(sv)
            if node.ref.kind == "partition-dummy":
                raise KernelTypeError("partition-dummy sources cannot be queried")
            name = getattr(query_op, "name", type(query_op).__name__)
            if not self.request_budget(sv, eps):
                self._transcript.append(TranscriptEntry(name, node.ref, eps, "budget-exceeded"))
                raise BudgetExceeded(
                    f"{name} on {node.ref.id} needs {float(eps)}; the request was denied"
                )
            answer = query_op.run(node.payload, float(eps), self.rng)
            self._transcript.append(TranscriptEntry(name, node.ref, eps, "answered"))
            self._history[node.ref.id].append((name, eps, _digest(answer)))
            return answer

    # -- public inspection -----------------------------------------------------

    def budget(self, sv: SourceRef) -> Fraction:
        return self._budget[self._node(sv).ref.id]

    @property
    def spent(self) -> Fraction:
        return self._budget[self.root.id]

    @property
    def remaining(self) -> Fraction:
        return self.eps_total - self.spent

    def transcript(self) -> list:
        with self._lock:
            return list(self._transcript)

    def history(self, sv: SourceRef) -> list:
        return list(self._history[self._node(sv).ref.id])

    def parent(self, sv: SourceRef) -> SourceRef | None:
        return self._node(sv).parent

    def children(self, sv: SourceRef) -> list:
        return list(self._node(sv).children)

    def stability(self, sv: SourceRef) -> Fraction:
        """Stability of the edge from ``sv``'s parent (1 at the root)."""
        return self._node(sv).stability

    def cumulative_stability(self, sv: SourceRef) -> Fraction:
        s = Fraction(1)
        node = self._node(sv)
        while node.parent is not None:
            s *= node.stability
            node = self._node(node.parent)
        return s

    def domain_shape(self, sv: SourceRef) -> tuple:
        node = self._node(sv)
        while node.ref.kind == "partition-dummy":
            node = self._node(node.parent)
        if node.ref.kind != "vector":
            raise KernelTypeError(f"{sv!r} is not a vector source")
        return node.payload.domain_shape

    def size(self, sv: SourceRef) -> int:
        return int(np.prod(self.domain_shape(sv)))

    def schema(self, sv: SourceRef) -> Schema:
        node = self._node(sv)
        while node.ref.kind == "partition-dummy":
            node = self._node(node.parent)
        if node.ref.kind != "table":
            raise KernelTypeError(f"{sv!r} is not a table source")
        return node.payload.schema

    def vector_base(self, sv: SourceRef) -> SourceRef:
        """Topmost vector ancestor of ``sv``; measurements are mapped back to it."""
        node = self._node(sv)
        base = None
        while node is not None:
            if node.ref.kind == "vector":
                base = node.ref
            if node.ref.kind == "table":
                break
            node = self._node(node.parent) if node.parent is not None else None
        if base is None:
            raise KernelTypeError(f"{sv!r} has no vector ancestor")
        return base

    def lineage(self, sv: SourceRef, base: SourceRef | None = None) -> LinOp:
        """Public matrix M with ``payload(sv) = M @ payload(base)``."""
        base = base or self.vector_base(sv)
        chain = []
        node = self._node(sv)
        while node.ref.id != base.id:
            if node.edge_matrix is None or node.parent is None:
                raise LineageError(f"{base!r} is not a vector ancestor of {sv!r}")
            if not isinstance(node.edge_matrix, Identity):
                chain.append(node.edge_matrix)
            node = self._node(node.parent)
        if not chain:
            return Identity(self.size(base))
        M = chain[-1]
        for op in reversed(chain[:-1]):
            M = Product(op, M)
        return M

    def ledger(self) -> dict:
        with self._lock:
            rows = [
                {
                    "source_id": node.ref.id,
                    "parent_id": node.parent.id if node.parent else None,
                    "kind": node.ref.kind,
                    "stability": float(node.stability),
                    "budget": float(self._budget[node.ref.id]),
                }
                for node in self._nodes.values()
            ]
            return {
                "eps_total": float(self.eps_total),
                "sources": rows,
                "transcript": [e.to_dict() for e in self._transcript],
            }

    def ledger_json(self, **kw) -> str:
        return json.dumps(self.ledger(), **kw)


def init(table, eps_total, seed=None, **kw) -> ProtectedKernel:
    return ProtectedKernel(table, eps_total, seed=seed, **kw)
