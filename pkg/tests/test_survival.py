import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import jackknife_bruteforce, km_bruteforce
from fedsurv.errors import DomainError, ProtocolError
from fedsurv.survival import (
    PartialMatrix,
    PseudoValueMatrix,
    SurvivalData,
    SurvivalRecord,
    TimeGrid,
    aggregate_partial_matrices,
    bin_index,
    build_partial_matrix,
    censoring_km,
    km_from_partial_matrix,
    leave_one_out_matrix,
    pseudo_values,
)


def records(times, events):
    return [SurvivalRecord((0.0,), t, e) for t, e in zip(times, events)]


def pm(grid, r, d, c=None):
    return PartialMatrix(TimeGrid(tuple(grid)), r, tuple(d), tuple(c or [0] * len(d)))


# -- types ----------------------------------------------------------------------

def test_record_rejects_negative_time():
    with pytest.raises(DomainError):
        SurvivalRecord((1.0,), -0.1, True)
    with pytest.raises(DomainError):
        SurvivalRecord((1.0,), float("inf"), True)


@pytest.mark.parametrize("points", [(), (0.0, 1.0), (1.0, 1.0), (2.0, 1.0), (1.0, float("nan"))])
def test_grid_invariants(points):
    with pytest.raises(DomainError):
        TimeGrid(points)


def test_partial_matrix_rejects_broken_recursion():
    with pytest.raises(DomainError):
        pm([1, 2], 2, [1, 1], [1, 0])
    with pytest.raises(DomainError):
        pm([1, 2], 2, [-1, 0])


def test_partial_matrix_roundtrip_and_at_risk():
    mat = pm([2, 3, 5], 3, [1, 0, 1], [0, 1, 0])
    assert PartialMatrix.from_dict(mat.to_dict()) == mat
    assert mat.at_risk.tolist() == [3, 2, 1]


def test_survival_data_indexing():
    data = SurvivalData([[1.0, 2.0], [3.0, 4.0]], [1.0, 2.0], [1, 0])
    assert data[1] == SurvivalRecord((3.0, 4.0), 2.0, False)
    assert len(data[np.array([0])]) == 1
    assert SurvivalData.from_records(data.records()).event.tolist() == [True, False]
    with pytest.raises(DomainError):
        SurvivalData([[1.0]], [1.0], [2])


def test_pseudo_matrix_rejects_nonfinite():
    with pytest.raises(DomainError):
        PseudoValueMatrix(TimeGrid((1.0,)), [[np.nan]])


# -- bin_index --------------------------------------------------------------------

@pytest.mark.parametrize("time,expected", [(2.0, 1), (2.5, 2), (6.0, None), (0.0, 1), (5.0, 3)])
def test_bin_index(time, expected):
    assert bin_index(time, TimeGrid((2, 4, 5))) == expected


def test_bin_index_rejects_bad_time():
    with pytest.raises(DomainError):
        bin_index(-1.0, TimeGrid((1.0,)))


# -- partial matrices ---------------------------------------------------------------

@pytest.mark.parametrize("times,events,grid,r,d,c", [
    ([2, 3, 5], [1, 0, 1], [2, 3, 5], 3, [1, 0, 1], [0, 1, 0]),
    ([1, 2, 3], [1, 1, 1], [1, 2, 3], 3, [1, 1, 1], [0, 0, 0]),
    ([10, 12], [1, 1], [2, 4], 2, [0, 0], [0, 0]),
])
def test_build_partial_matrix(times, events, grid, r, d, c):
    mat = build_partial_matrix(records(times, events), TimeGrid(tuple(grid)))
    assert (mat.at_risk_initial, list(mat.events), list(mat.censored)) == (r, d, c)


def test_build_partial_matrix_empty():
    with pytest.raises(DomainError):
        build_partial_matrix([], TimeGrid((1.0,)))


def test_aggregate_examples():
    a = pm([1, 2], 2, [1, 0], [0, 1])
    assert aggregate_partial_matrices([a, a]) == pm([1, 2], 4, [2, 0], [0, 2])
    assert aggregate_partial_matrices([a]) == a
    b = pm([1, 2], 3, [1, 0], [0, 0])
    c = pm([1, 2], 5, [0, 2], [1, 0])
    assert aggregate_partial_matrices([b, c]) == pm([1, 2], 8, [1, 2], [1, 0])


def test_aggregate_errors():
    with pytest.raises(DomainError):
        aggregate_partial_matrices([])
    with pytest.raises(ProtocolError):
        aggregate_partial_matrices([pm([1, 2], 1, [0, 0]), pm([1, 3], 1, [0, 0])])


# -- Kaplan-Meier -------------------------------------------------------------------

@pytest.mark.parametrize("mat,expected", [
    (pm([2, 4, 5], 3, [1, 1, 1]), [2 / 3, 1 / 3, 0.0]),
    (pm([2, 3, 5], 3, [1, 0, 1], [0, 1, 0]), [2 / 3, 2 / 3, 0.0]),
    (pm([1, 2], 4, [0, 0]), [1.0, 1.0]),
])
def test_km_examples(mat, expected):
    np.testing.assert_allclose(km_from_partial_matrix(mat).survival, expected, rtol=0, atol=1e-15)


def test_km_freezes_after_empty_risk_set():
    s = km_from_partial_matrix(pm([1, 2, 3], 2, [1, 0, 0], [1, 0, 0])).survival
    assert s.tolist() == [0.5, 0.5, 0.5]


def test_km_curve_step_lookup():
    curve = km_from_partial_matrix(pm([2, 4, 5], 3, [1, 1, 1]))
    assert curve.at(1.0) == 1.0
    assert curve.at(4.5) == curve.survival[1]
    assert curve.at(99.0) == 0.0


@pytest.mark.parametrize("times,events,expected", [
    ([2, 3, 5], [1, 0, 1], [1.0, 0.5, 0.5]),
    ([2, 3, 5], [1, 1, 1], [1.0, 1.0, 1.0]),
])
def test_censoring_km(times, events, expected):
    curve = censoring_km(records(times, events), TimeGrid((2, 3, 5)))
    assert curve.survival.tolist() == expected


def test_censoring_km_all_censored():
    assert censoring_km(records([1, 1], [0, 0]), TimeGrid((1.0,))).survival.tolist() == [0.0]


# -- leave one out ------------------------------------------------------------------

def test_leave_one_out_examples():
    rec = SurvivalRecord((0.0,), 2, True)
    assert leave_one_out_matrix(pm([1, 2, 3], 3, [1, 1, 1]), rec) == pm([1, 2, 3], 2, [1, 0, 1])
    rec = SurvivalRecord((0.0,), 3, False)
    out = leave_one_out_matrix(pm([2, 3, 5], 3, [1, 0, 1], [0, 1, 0]), rec)
    assert out == pm([2, 3, 5], 2, [1, 0, 1], [0, 0, 0])
    rec = SurvivalRecord((0.0,), 10, True)
    assert leave_one_out_matrix(pm([2, 4], 2, [0, 0]), rec) == pm([2, 4], 1, [0, 0])


def test_leave_one_out_unrepresented():
    with pytest.raises(ProtocolError):
        leave_one_out_matrix(pm([1, 2], 1, [1, 0]), SurvivalRecord((0.0,), 2, True))


# -- pseudo values --------------------------------------------------------------------

def test_pseudo_values_hand_jackknife():
    grid = TimeGrid((1, 2, 3))
    recs = records([1, 2, 3], [1, 1, 1])
    mat = build_partial_matrix(recs, grid)
    j = pseudo_values(mat, recs, 3).values
    assert j[2, 1] == 1.0
    assert j[0, 1] == 0.0


def test_pseudo_values_total_n_mismatch():
    recs = records([1, 2], [1, 1])
    mat = build_partial_matrix(recs, TimeGrid((1.0, 2.0)))
    with pytest.raises(ProtocolError):
        pseudo_values(mat, recs, 3)


def test_pseudo_values_unrepresented_record():
    grid = TimeGrid((1.0, 2.0))
    mat = build_partial_matrix(records([1, 2], [1, 1]), grid)
    with pytest.raises(ProtocolError):
        pseudo_values(mat, records([1, 1], [1, 1]), 2)


def test_pseudo_values_definition():
    rng = np.random.default_rng(3)
    times = rng.exponential(2.0, 40).round(1)
    events = rng.random(40) < 0.6
    grid = TimeGrid((0.5, 1.0, 2.0, 3.5))
    recs = records(times, events)
    mat = build_partial_matrix(recs, grid)
    got = pseudo_values(mat, recs, 40).values
    s = km_from_partial_matrix(mat).survival
    for i, rec in enumerate(recs):
        loo = km_from_partial_matrix(leave_one_out_matrix(mat, rec)).survival
        np.testing.assert_allclose(got[i], 40 * s - 39 * loo, rtol=0, atol=1e-12)


# -- properties ------------------------------------------------------------------------

grids = st.lists(st.floats(0.1, 10.0), min_size=1, max_size=8, unique=True).map(sorted)


@st.composite
def datasets(draw, max_n=40, censoring=True):
    n = draw(st.integers(1, max_n))
    times = draw(st.lists(st.sampled_from([0.5 * k for k in range(1, 25)]), min_size=n, max_size=n))
    if censoring:
        events = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    else:
        events = [True] * n
    return times, events


@settings(max_examples=60, deadline=None)
@given(datasets(), grids)
def test_km_matches_bruteforce(data, grid):
    times, events = data
    mat = build_partial_matrix(records(times, events), TimeGrid(tuple(grid)))
    s = km_from_partial_matrix(mat).survival
    np.testing.assert_allclose(s, km_bruteforce(times, events, grid), rtol=0, atol=1e-12)
    assert ((s >= 0) & (s <= 1)).all()
    assert (np.diff(s) <= 0).all()


@settings(max_examples=60, deadline=None)
@given(datasets(max_n=25), grids)
def test_pseudo_values_match_bruteforce_jackknife(data, grid):
    times, events = data
    recs = records(times, events)
    mat = build_partial_matrix(recs, TimeGrid(tuple(grid)))
    got = pseudo_values(mat, recs, len(recs)).values
    np.testing.assert_allclose(got, jackknife_bruteforce(times, events, grid), rtol=0, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(datasets(censoring=False), grids)
def test_complete_data_identity_and_column_means(data, grid):
    times, _ = data
    recs = records(times, [True] * len(times))
    mat = build_partial_matrix(recs, TimeGrid(tuple(grid)))
    j = pseudo_values(mat, recs, len(recs)).values
    expected = (np.array(times)[:, None] > np.array(grid)[None, :]).astype(float)
    assert np.array_equal(j, expected)
    assert np.array_equal(j.mean(axis=0), km_from_partial_matrix(mat).survival)


@settings(max_examples=40, deadline=None)
@given(datasets(), datasets(), datasets(), grids)
def test_aggregation_commutative_associative(a, b, c, grid):
    g = TimeGrid(tuple(grid))
    ma, mb, mc = (build_partial_matrix(records(*x), g) for x in (a, b, c))
    left = aggregate_partial_matrices([aggregate_partial_matrices([ma, mb]), mc])
    right = aggregate_partial_matrices([ma, aggregate_partial_matrices([mb, mc])])
    assert left == right == aggregate_partial_matrices([mc, mb, ma])


@settings(max_examples=40, deadline=None)
@given(datasets(), grids, st.data())
def test_leave_one_out_then_readd(data, grid, draw):
    times, events = data
    g = TimeGrid(tuple(grid))
    recs = records(times, events)
    mat = build_partial_matrix(recs, g)
    rec = recs[draw.draw(st.integers(0, len(recs) - 1))]
    loo = leave_one_out_matrix(mat, rec)
    assert aggregate_partial_matrices([loo, build_partial_matrix([rec], g)]) == mat
