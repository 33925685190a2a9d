import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpplan.evaluation import SupportError, expected_error_oracle, per_query_error, run_trials, workload_expected_error
from dpplan.matrix import Identity, Prefix
from dpplan.plans import plan_identity


def test_per_query_error_examples():
    x = np.array([3.0, 1, 2])
    assert per_query_error(Prefix(3), x, x) == 0
    assert np.isclose(per_query_error(Identity(2), [3.0, 4.0], [0.0, 0.0], scale=1), np.sqrt(25 / 2))
    with pytest.raises(ZeroDivisionError):
        per_query_error(Identity(2), [1.0, 1.0], [0.0, 0.0])


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(0.1, 10))
def test_per_query_error_is_homogeneous(diff, c):
    x = np.array([5.0, 1, 2, 7])
    d = np.array(diff)
    a = per_query_error(Prefix(4), x + d, x)
    b = per_query_error(Prefix(4), x + c * d, x)
    assert a >= 0 and np.isclose(b, c * a, rtol=1e-9, atol=1e-12)


def test_per_query_error_default_scale_is_total():
    x = np.array([2.0, 2.0])
    assert per_query_error(Identity(2), [3.0, 2.0], x) == pytest.approx(np.sqrt(0.5) / 4)


def test_oracle_examples():
    assert expected_error_oracle([1, 0, 0, 0], Identity(4)) == 1
    assert expected_error_oracle([1, 1], np.eye(2)) == 2
    with pytest.raises(SupportError):
        expected_error_oracle([0, 1], np.array([[1.0, 0.0]]))


def test_oracle_extra_row_unit_variance_form():
    extended = np.vstack([np.eye(2), [1, 1]])
    assert expected_error_oracle([1, 1], extended, sensitivity=False) == pytest.approx(2 / 3)
    assert expected_error_oracle([1, 1], extended, sensitivity=False) < expected_error_oracle([1, 1], np.eye(2), sensitivity=False)
    # under a fixed budget the extra row doubles the column norm, so the strategy loses for q
    assert expected_error_oracle([1, 1], extended) == pytest.approx(8 / 3)


def test_oracle_invariances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 17))
        Q = rng.normal(size=(n + 2, n))
        q = rng.normal(size=n)
        base = expected_error_oracle(q, Q)
        assert np.isclose(expected_error_oracle(q, Q[rng.permutation(Q.shape[0])]), base)
        # duplicating every row at half weight keeps ||Q||_1 and the error unchanged
        dup = np.vstack([Q, Q]) / 2
        assert np.isclose(expected_error_oracle(q, dup) / 2, base)


def test_workload_error_sums_rows():
    W = np.array([[1.0, 0], [1, 1]])
    assert workload_expected_error(W, np.eye(2)) == pytest.approx(3.0)


def test_run_trials_summary():
    x = np.arange(1.0, 9.0)
    one = run_trials("identity", x, Identity(8), 1.0, [3])
    assert one["mean"] == one["rows"][0]["error"] == one["median"]
    again = run_trials("identity", x, Identity(8), 1.0, [3])
    assert again["rows"][0]["error"] == one["rows"][0]["error"]
    many = run_trials(plan_identity, x, Identity(8), 1.0, range(5))
    assert many["mean"] == pytest.approx(np.mean([r["error"] for r in many["rows"]]))
    assert many["rows"][0]["plan"] == "plan_identity"
    assert many["q05"] <= many["median"] <= many["q95"]
    with pytest.raises(ValueError):
        run_trials("identity", x, Identity(8), 1.0, [])
