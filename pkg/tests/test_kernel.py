import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpplan import kernel as kn
from dpplan import transform as tf
from dpplan.matrix import Dense, Identity, Prefix
from dpplan.measurement import NoisyCountOp, VectorLaplaceOp, vector_laplace

from schedules import run_schedule, snapshot

SCHEMA = tf.Schema((
    tf.Attribute.categorical("sex", ["M", "F"]),
    tf.Attribute.uniform_ranges("age", 0, 100, 10),
))


def table(rows):
    return tf.Table(SCHEMA, rows)


def vec_kernel(n=4, eps=1.0, seed=0):
    return kn.ProtectedKernel.from_vector(np.arange(float(n)), eps, seed=seed)


# -- init / register ----------------------------------------------------------

def test_init_contract():
    k = kn.init(table([]), 1.0)
    assert k.budget(k.root) == 0 and k.stability(k.root) == 1 and k.transcript() == []
    with pytest.raises(kn.ConfigurationError):
        kn.init(table([]), 0.0)
    with pytest.raises(kn.ConfigurationError):
        kn.init([1, 2], 1.0)


def test_register_transform_stabilities():
    k = kn.init(table([("M", 3)]), 1.0)
    assert k.stability(k.register_transform(k.root, tf.Where(tf.TRUE))) == 1
    assert k.stability(k.register_transform(k.root, tf.GroupBy(["sex"]))) == 2
    v = k.register_transform(k.root, tf.Vectorize())
    M = Dense([[2.0, 0.0], [0.0, 1.0]])
    k2 = vec_kernel(2)
    assert k2.stability(k2.register_transform(k2.root, tf.VectorTransform(M))) == 2
    assert k.domain_shape(v) == (2, 10)


def test_register_errors():
    k = kn.init(table([]), 1.0)
    with pytest.raises(kn.LineageError):
        k.register_transform(kn.SourceRef("nope", "table"), tf.Where(tf.TRUE))
    with pytest.raises(kn.KernelTypeError):
        k.register_transform(k.root, tf.Reduce(tf.PartitionMap.identity(2)))
    with pytest.raises(kn.KernelTypeError):
        k.register_partition(k.root, tf.PartitionMap.identity(2))


def test_register_partition_children():
    k = vec_kernel(4)
    kids = k.register_partition(k.root, tf.PartitionMap.from_groups([[0, 1], [2, 3]], 4))
    assert [k.size(c) for c in kids] == [2, 2]
    dummy = k.parent(kids[0])
    assert dummy.kind == "partition-dummy" and k.parent(dummy) == k.root
    singles = k.register_partition(k.root, tf.PartitionMap.identity(4))
    assert [k.size(c) for c in singles] == [1, 1, 1, 1]
    with pytest.raises(tf.PartitionError):
        k.register_partition(k.root, tf.PartitionMap.from_groups([[0, 1], [1, 2, 3]], 4))


def test_table_split_children():
    k = kn.init(table([("M", 1), ("F", 2), ("M", 3), ("M", 4)]), 1.0)
    kids = k.register_partition(k.root, kn.TableSplit("sex", [["M"], ["F"]]))
    assert len(kids) == 2
    k.measure(kids[0], NoisyCountOp(), 0.5)
    k.measure(kids[1], NoisyCountOp(), 0.5)
    assert k.spent == Fraction(1, 2)


# -- the budget request algorithm ---------------------------------------------------------

def test_sequential_requests_at_root():
    k = vec_kernel()
    assert k.request_budget(k.root, 0.6) is True
    assert k.request_budget(k.root, 0.6) is False
    assert k.spent == Fraction(3, 5)


def test_parallel_requests_through_partition():
    k = vec_kernel()
    a, b = k.register_partition(k.root, tf.PartitionMap.from_groups([[0, 1], [2, 3]], 4))
    assert k.request_budget(a, 0.5) and k.request_budget(b, 0.5)
    assert k.spent == Fraction(1, 2)
    assert k.request_budget(b, 0.25)
    assert k.spent == Fraction(3, 4)


def test_stability_scaling_through_group_by():
    k = kn.init(table([("M", 3)]), 1.0)
    g = k.register_transform(k.root, tf.GroupBy(["sex"]))
    assert k.request_budget(g, 0.3)
    assert k.spent == Fraction(3, 5)
    assert k.budget(g) == Fraction(3, 10)


def test_decimal_inputs_do_not_drift():
    k = vec_kernel()
    for _ in range(10):
        assert k.request_budget(k.root, 0.1)
    assert k.spent == 1
    assert not k.request_budget(k.root, 1e-12)


def test_measure_and_transcript():
    k = vec_kernel(eps=1.0)
    y = k.measure(k.root, VectorLaplaceOp(Identity(4)), 0.5)
    assert y.shape == (4,)
    assert k.spent == Fraction(1, 2)
    assert [e.outcome for e in k.transcript()] == ["answered"]
    k.measure(k.root, VectorLaplaceOp(Identity(4)), 0.5)
    assert k.spent == 1
    with pytest.raises(kn.BudgetExceeded):
        k.measure(k.root, VectorLaplaceOp(Identity(4)), 0.5)
    assert k.transcript()[-1].outcome == "budget-exceeded"
    assert k.spent == 1
    assert len(k.history(k.root)) == 2 and len(k.history(k.root)[0][2]) == 64


def test_measure_validation():
    k = vec_kernel()
    with pytest.raises(kn.ConfigurationError):
        k.measure(k.root, NoisyCountOp(), 0)
    dummy = k.parent(k.register_partition(k.root, tf.PartitionMap.identity(4))[0])
    with pytest.raises(kn.KernelTypeError):
        k.measure(dummy, NoisyCountOp(), 0.1)
    with pytest.raises(kn.ConfigurationError):
        k.request_budget(k.root, -0.1)


def test_lineage_maps_back_to_base():
    k = vec_kernel(6)
    t = k.register_transform(k.root, tf.VectorTransform(Prefix(6)))
    kids = k.register_partition(t, tf.PartitionMap(np.array([1, 0, 1, 0, 1, 1]), 2))
    x = np.arange(6.0)
    M = k.lineage(kids[1])
    assert np.allclose(M.matvec(x), (np.cumsum(x))[[0, 2, 4, 5]])
    m = vector_laplace(k, kids[1], Identity(4), 0.1)
    assert k.spent == Fraction(3, 5)
    assert m.Q_eff.shape == (4, 6)
    assert k.lineage(k.root).kind == "identity"


def test_ledger_json_fields():
    k = vec_kernel()
    kids = k.register_partition(k.root, tf.PartitionMap.identity(4))
    k.measure(kids[0], NoisyCountOp(), 0.25)
    doc = json.loads(k.ledger_json())
    assert doc["eps_total"] == 1.0
    assert set(doc["sources"][0]) == {"source_id", "parent_id", "kind", "stability", "budget"}
    budgets = {r["source_id"]: r["budget"] for r in doc["sources"]}
    assert budgets[k.root.id] == 0.25
    assert doc["transcript"] == [{"op_name": "noisy_count", "source": kids[0].id, "epsilon": 0.25, "outcome": "answered"}]


# -- invariants ---------------------------------------------------------------

@given(st.lists(st.integers(1, 30), min_size=1, max_size=12))
def test_sequential_composition_sums(steps):
    k = kn.ProtectedKernel.from_vector(np.ones(3), 1000, seed=0)
    for s in steps:
        assert k.request_budget(k.root, Fraction(s, 7))
    assert k.spent == sum(Fraction(s, 7) for s in steps)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 10)), max_size=25))
def test_parallel_composition_is_max(requests):
    k = kn.ProtectedKernel.from_vector(np.ones(4), 1000, seed=0)
    kids = k.register_partition(k.root, tf.PartitionMap.identity(4))
    for child, amount in requests:
        assert k.request_budget(kids[child], Fraction(amount, 10))
        assert k.spent == max(k.budget(c) for c in kids)


@given(st.lists(st.sampled_from([1, 2, 3]), max_size=4), st.integers(1, 10))
def test_cumulative_stability_scaling(scales, amount):
    k = kn.ProtectedKernel.from_vector(np.ones(2), 1000, seed=0)
    sv = k.root
    for c in scales:
        sv = k.register_transform(sv, tf.VectorTransform(Dense(np.eye(2) * c)))
    sigma = Fraction(amount, 10)
    assert k.request_budget(sv, sigma)
    assert k.spent == k.cumulative_stability(sv) * sigma == np.prod(scales or [1]) * sigma


@given(st.integers(0, 2**31 - 1))
def test_fuzzed_schedules_keep_root_within_total(seed):
    run_schedule(seed)


def test_denial_reveals_nothing_about_payload():
    rng = np.random.default_rng(11)
    for _ in range(100):
        rows = [(str(rng.choice(["M", "F"])), int(rng.integers(0, 100))) for _ in range(rng.integers(0, 8))]
        extra = (str(rng.choice(["M", "F"])), int(rng.integers(0, 100)))
        outcomes = []
        for data in (rows, rows + [extra]):
            k = kn.init(table(data), 1.0, seed=5)
            g = k.register_transform(k.root, tf.GroupBy(["sex"]))
            v = k.register_transform(k.root, tf.Vectorize())
            kids = k.register_partition(v, tf.PartitionMap(np.arange(20) % 3, 3))
            plan = [(g, 0.2), (kids[0], 0.3), (kids[1], 0.4), (k.root, 0.3), (kids[2], 0.2), (v, 0.1)]
            for sv, eps in plan:
                try:
                    k.measure(sv, NoisyCountOp(), eps)
                except kn.BudgetExceeded:
                    pass
            outcomes.append(json.dumps([(e.op_name, e.source.id, str(e.epsilon), e.outcome) for e in k.transcript()]))
            outcomes.append(json.dumps(snapshot(k)))
        assert outcomes[0] == outcomes[2] and outcomes[1] == outcomes[3]
