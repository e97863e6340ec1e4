import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from tsbart.data import (
    BaselineFunction,
    Dataset,
    Schema,
    TimeGrid,
    build_time_grid,
    case_control_sample,
    estimate_alpha,
    expand_survival,
    load_csv,
    schema_of,
    write_csv,
)
from tsbart.exceptions import (
    DataError,
    DegenerateGridError,
    EmptyDataError,
    GridMembershipError,
    MissingCellError,
    ParseError,
    SchemaError,
)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- load_csv ---


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "y,t,x1\n1.5,1,0.2\n2.5,2,0.4\n3.5,3,0.6\n")
    ds = load_csv(p, Schema("y", "t"))
    assert ds.n == 3 and ds.p == 1
    np.testing.assert_array_equal(ds.response, [1.5, 2.5, 3.5])
    np.testing.assert_array_equal(ds.t, [1, 2, 3])
    assert ds.covariate_names == ("x1",)


def test_categorical_one_hot(tmp_path):
    p = _write(tmp_path, "y,t,x1,grp\n1,1,0.1,a\n2,2,0.2,b\n3,1,0.3,c\n4,2,0.4,a\n")
    plain = load_csv(p, Schema("y", "t", covariates=["x1"]))
    ds = load_csv(p, Schema("y", "t", categorical=["grp"]))
    assert ds.p == plain.p + 3
    assert ds.covariate_names == ("x1", "grp=a", "grp=b", "grp=c")
    np.testing.assert_array_equal(ds.X[:, 1:].sum(axis=1), 1.0)
    np.testing.assert_array_equal(ds.X[:, 1], [1, 0, 0, 1])


def test_nan_cell_names_row(tmp_path):
    p = _write(tmp_path, "y,t,x1\n1,1,0.2\n2,2,NaN\n")
    with pytest.raises(ParseError, match="row 2"):
        load_csv(p, Schema("y", "t"))


def test_non_numeric_and_missing_cells(tmp_path):
    p = _write(tmp_path, "y,t,x1\n1,1,abc\n")
    with pytest.raises(ParseError, match="row 1"):
        load_csv(p, Schema("y", "t"))
    p = _write(tmp_path, "y,t,x1\n1,1,\n", "e.csv")
    with pytest.raises(ParseError):
        load_csv(p, Schema("y", "t"))


def test_missing_column_and_empty_file(tmp_path):
    p = _write(tmp_path, "y,t,x1\n1,1,2\n")
    with pytest.raises(SchemaError, match="'time'"):
        load_csv(p, Schema("y", "time"))
    with pytest.raises(EmptyDataError):
        load_csv(_write(tmp_path, "", "empty.csv"), Schema("y", "t"))
    with pytest.raises(EmptyDataError):
        load_csv(_write(tmp_path, "y,t,x1\n", "hdr.csv"), Schema("y", "t"))


def test_binary_response_validated(tmp_path):
    p = _write(tmp_path, "c,t,x1\n0,1,2\n2,1,3\n")
    with pytest.raises(ParseError, match="row 2"):
        load_csv(p, Schema("c", "t", kind="survival"))


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal(25), rng.integers(0, 4, 25) * 0.1, rng.random((25, 3)),
                 covariate_names=("a", "b", "c"))
    write_csv(ds, tmp_path / "rt.csv")
    back = load_csv(tmp_path / "rt.csv", schema_of(ds))
    np.testing.assert_array_equal(back.response, ds.response)
    np.testing.assert_array_equal(back.t, ds.t)
    np.testing.assert_array_equal(back.X, ds.X)
    assert back.covariate_names == ds.covariate_names


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset([1.0, 2.0], [1.0], [[0.0], [1.0]])
    with pytest.raises(DataError):
        Dataset([0.0, 0.5], [1.0, 2.0], [[0.0], [1.0]], "binary")
    with pytest.raises(DataError):
        Dataset([0.0, np.nan], [1.0, 2.0], [[0.0], [1.0]])
    ds = Dataset([1.0, 2.0], [1.0, 2.0], [0.0, 1.0])
    assert ds.p == 1
    with pytest.raises((AttributeError, TypeError)):
        ds.response = None
    with pytest.raises(ValueError):
        ds.response[0] = 5.0


# --- time grid ---


def test_grid_weeks():
    ds = Dataset(np.zeros(18), np.tile(np.arange(34, 43), 2), np.zeros((18, 1)))
    g = build_time_grid(ds)
    assert g.size == 9 and g.t_range == 8


def test_grid_unit_interval():
    t = np.round(np.arange(11) * 0.1, 10)
    g = build_time_grid(Dataset(np.zeros(11), t, np.zeros((11, 1))))
    assert g.size == 11 and g.t_range == pytest.approx(1.0)


def test_degenerate_grid():
    ds = Dataset(np.zeros(3), np.ones(3), np.zeros((3, 1)))
    with pytest.raises(DegenerateGridError):
        build_time_grid(ds)
    assert build_time_grid(ds, allow_single=True).size == 1


def test_grid_index_of():
    g = TimeGrid(np.array([0.0, 0.1, 0.2]))
    np.testing.assert_array_equal(g.index_of([0.2, 0.0, 0.1 + 1e-12]), [2, 0, 1])
    with pytest.raises(GridMembershipError):
        g.index_of([0.15])
    with pytest.raises(DataError):
        TimeGrid(np.array([1.0, 1.0]))


# --- person-period expansion ---

WEEKS = TimeGrid(np.arange(34.0, 43.0))


def test_expand_stillbirth_and_live_birth():
    ds = Dataset([1.0, 0.0], [36.0, 42.0], [[0.5], [0.7]], "survival")
    tab = expand_survival(ds, WEEKS)
    first = tab.subject == 0
    np.testing.assert_array_equal(tab.s[first], [34, 35, 36])
    np.testing.assert_array_equal(tab.event[first], [0, 0, 1])
    second = tab.subject == 1
    assert second.sum() == 9 and tab.event[second].sum() == 0
    np.testing.assert_array_equal(tab.X[first, 0], 0.5)


def test_expand_off_grid():
    ds = Dataset([1.0], [33.0], [[0.5]], "survival")
    with pytest.raises(GridMembershipError):
        expand_survival(ds, WEEKS)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=1, max_size=60))
def test_expand_invariants(records):
    idx = np.array([r[0] for r in records])
    c = np.array([r[1] for r in records], dtype=float)
    ds = Dataset(c, WEEKS.values[idx], np.arange(idx.size, dtype=float), "survival")
    tab = expand_survival(ds, WEEKS)
    assert tab.n_rows == int(np.sum(idx + 1))
    assert tab.event.sum() == c.sum()
    for i in range(idx.size):
        rows = np.flatnonzero(tab.subject == i)
        ev = tab.event[rows]
        assert ev.sum() <= 1
        assert ev[:-1].sum() == 0
        assert ev[-1] == c[i]


# --- baseline ---


def test_alpha_constant():
    ds = Dataset(np.full(6, 5.0), [1, 2, 3, 1, 2, 3], np.zeros((6, 1)))
    a = estimate_alpha(ds, build_time_grid(ds))
    np.testing.assert_allclose(a.alpha, 5.0)


def test_alpha_recovers_g():
    t = np.repeat(np.arange(1.0, 6.0), 3)
    ds = Dataset(np.sin(t), t, np.zeros((t.size, 1)))
    a = estimate_alpha(ds, build_time_grid(ds))
    np.testing.assert_allclose(a.alpha, np.sin(np.arange(1.0, 6.0)), atol=1e-14)


def test_alpha_probit():
    half = Dataset([0, 1, 0, 1.0], [1, 1, 2, 2.0], np.zeros((4, 1)), "binary")
    np.testing.assert_allclose(estimate_alpha(half, build_time_grid(half)).alpha, 0.0,
                               atol=1e-15)
    y = np.r_[np.ones(39), 0.0, 0.0, 1.0]
    t = np.r_[np.ones(40), 2.0, 2.0]
    ds = Dataset(y, t, np.zeros((42, 1)), "binary")
    a = estimate_alpha(ds, build_time_grid(ds)).alpha
    assert a[0] == pytest.approx(norm.ppf(0.975), abs=1e-12)
    assert a[0] == pytest.approx(1.959964, abs=1e-6)


def test_alpha_clamps_extreme_rates():
    ds = Dataset([1.0, 1.0, 0.0, 0.0], [1, 1, 2, 2.0], np.zeros((4, 1)), "binary")
    a = estimate_alpha(ds, build_time_grid(ds)).alpha
    np.testing.assert_allclose(a, [norm.ppf(0.75), norm.ppf(0.25)])


def test_alpha_missing_cell():
    ds = Dataset([1.0, 2.0], [1.0, 3.0], np.zeros((2, 1)))
    with pytest.raises(MissingCellError):
        estimate_alpha(ds, TimeGrid(np.array([1.0, 2.0, 3.0])))


def test_baseline_validation():
    g = TimeGrid(np.array([0.0, 1.0]))
    with pytest.raises(DataError):
        BaselineFunction(g, [0.0, np.inf])
    np.testing.assert_array_equal(BaselineFunction.constant(g, 2.0).at([1, 0]), [2.0, 2.0])


# --- case-control ---


def _controls(n_ctrl, n_case=5, t=40.0):
    y = np.r_[np.zeros(n_ctrl), np.ones(n_case)]
    return Dataset(y, np.full(y.size, t), np.arange(y.size, dtype=float), "survival")


def test_case_control_identity():
    ds = _controls(50)
    out = case_control_sample(ds, 1.0, seed=3)
    np.testing.assert_array_equal(out.X, ds.X)


def test_case_control_two_percent():
    ds = _controls(1000)
    out = case_control_sample(ds, 0.02, seed=11)
    kept = int((out.response == 0).sum())
    # Bernoulli(0.02) thinning of 1000 controls: sd ~ 4.4
    assert abs(kept - 20) <= 15
    assert (out.response == 1).sum() == 5
    again = case_control_sample(ds, 0.02, seed=11)
    np.testing.assert_array_equal(out.X, again.X)


def test_case_control_bad_fraction():
    with pytest.raises(DataError):
        case_control_sample(_controls(5), 0.0, seed=1)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "absent.csv", Schema("y", "t"))
