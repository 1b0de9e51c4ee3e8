import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, softmax

from mdam.dataset import MISSING, SurveyDataset, VariableDef
from mdam.margins import (
    AuxMargin,
    MarginDraw,
    MarginError,
    OffsetError,
    allocate_counts,
    clamp_proportions,
    estimate_constraint_variance,
    margin_draw,
    solve_intercept_offset,
    target_count,
)
from oracles import grid_refine, with_replacement_total_variance

B = VariableDef("X", ("0", "1"), role="X")


def _ds(cells, weights, unit_nr=None, N=1000, variables=(B,)):
    cells = np.asarray(cells).reshape(len(weights), -1)
    unit_nr = np.zeros(len(weights), bool) if unit_nr is None else np.asarray(unit_nr)
    return SurveyDataset(variables, cells, unit_nr, weights, N, weight_kind="constructed")


def test_margin_draw_degenerate():
    m = AuxMargin("X", [400.0], [1e-12])
    d = margin_draw(m, np.random.default_rng(0))
    assert abs(d.totals[0] - 400.0) < 1e-4


def test_margin_draw_moments():
    m = AuxMargin("X", [400.0, 120.0], [2500.0, 100.0])
    rng = np.random.default_rng(1)
    n = 100_000
    draws = np.array([margin_draw(m, rng).totals for _ in range(n)])
    assert np.all(np.abs(draws.mean(0) - m.totals) < 4 * np.sqrt(m.variances / n))
    np.testing.assert_allclose(draws.var(0), m.variances, rtol=0.03)


def test_vote_margin_from_proportion():
    n_vep = 2_000_000
    m = AuxMargin.from_proportions("V", [0.49], n_vep, variances=[1.0])
    assert m.totals[0] == pytest.approx(0.49 * n_vep)


def test_margin_validation():
    with pytest.raises(MarginError):
        AuxMargin("X", [10.0], [0.0])
    with pytest.raises(MarginError):
        AuxMargin("X", [0.0])
    with pytest.raises(MarginError):
        AuxMargin.from_proportions("X", [0.7, 0.5], 100)
    with pytest.raises(MarginError):
        margin_draw(AuxMargin("X", [10.0]), np.random.default_rng(0))


def test_constraint_variance_fully_observed_matches_direct_formula():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 2, 50)
    w = rng.uniform(5, 30, 50)
    ds = _ds(x, w, N=100)
    V = estimate_constraint_variance(ds, "X", rng, v_min_fraction=0.0)
    assert V[0] == pytest.approx(with_replacement_total_variance(x, w), rel=1e-12)


def test_constraint_variance_equal_weights_closed_form():
    n, N = 400, 40_000
    x = np.array([1] * 120 + [0] * 280)
    ds = _ds(x, np.full(n, N / n), N=N)
    V = estimate_constraint_variance(ds, "X", np.random.default_rng(0), v_min_fraction=0.0)
    p = 0.3
    assert V[0] == pytest.approx(N**2 * p * (1 - p) / n * n / (n - 1), rel=1e-12)


def test_constraint_variance_constant_variable_hits_floor():
    ds = _ds(np.ones(20, int), np.full(20, 50.0), N=1000)
    V = estimate_constraint_variance(ds, "X", np.random.default_rng(0))
    assert V[0] == pytest.approx((0.01 * 1000) ** 2)


def test_constraint_variance_rescales_to_all_weights():
    # two unit nonrespondents carrying weight 100 each; respondents sum to 800
    x = np.array([1, 0, 1, 0, 1, 0, 1, 0, MISSING, MISSING])
    w = np.array([100.0] * 10)
    u = np.array([False] * 8 + [True] * 2)
    ds = _ds(x, w, unit_nr=u, N=1000)
    V = estimate_constraint_variance(ds, "X", np.random.default_rng(0), v_min_fraction=0.0)
    assert V[0] == pytest.approx(with_replacement_total_variance(x[:8], w[:8] * 1000 / 800))


def test_constraint_variance_no_donors():
    x = np.array([MISSING, MISSING, MISSING])
    with pytest.raises(MarginError):
        estimate_constraint_variance(_ds(x, [1.0, 1.0, 1.0]), "X", np.random.default_rng(0))


def test_hot_deck_single_donor():
    from mdam.margins import weighted_hot_deck
    col = np.array([2, MISSING, 0, MISSING])
    fill = col == MISSING
    donors = np.array([True, False, False, False])
    out = weighted_hot_deck(col, np.ones(4), fill, np.random.default_rng(0), donors=donors)
    assert out.tolist() == [2, 2, 0, 2]


def test_target_count_arithmetic():
    # respondent weighted sum of level 1 = 30, ten nonrespondents at weight 5
    x = np.array([1, 1, 1, 0] + [MISSING] * 10)
    w = np.array([10.0, 10.0, 10.0, 10.0] + [5.0] * 10)
    u = np.array([False] * 4 + [True] * 10)
    ds = _ds(x, w, unit_nr=u, N=90)
    assert target_count(MarginDraw(np.array([55.0])), ds, "X") == 5
    assert target_count(MarginDraw(np.array([10.0])), ds, "X") == 0
    assert target_count(MarginDraw(np.array([500.0])), ds, "X") == 10


def test_allocate_reports_clamps():
    a = allocate_counts([10.0], [30.0], 5.0, 10)
    assert a.counts.tolist() == [10, 0] and a.clamped_low == 1
    b = allocate_counts([500.0], [30.0], 5.0, 10)
    assert b.counts.tolist() == [0, 10] and b.clamped_high == 1


def test_allocate_multinomial_repair():
    # raw counts 6.5 and 7.25 with n_u = 10: the floors (6, 7) overshoot
    a = allocate_counts([6.5 * 2, 7.25 * 2], [0.0, 0.0], 2.0, 10)
    assert a.repaired and a.counts.sum() == 10 and a.counts[0] == 0
    # largest remainder of 6.5/13.75*10=4.727 and 7.25/13.75*10=5.273 -> (5, 5)
    assert a.counts.tolist() == [0, 5, 5]
    c = allocate_counts([4.0, 6.0], [0.0, 0.0], 2.0, 10)
    assert c.counts.tolist() == [5, 2, 3] and not c.repaired


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(0.0, 1e4),
       st.floats(0.1, 100.0), st.integers(1, 300))
def test_target_count_monotone(t1, t2, resp, w_u, n_u):
    lo, hi = sorted((t1, t2))
    a = allocate_counts([lo], [resp], w_u, n_u).counts[1]
    b = allocate_counts([hi], [resp], w_u, n_u).counts[1]
    assert 0 <= a <= b <= n_u


def test_target_count_mean_without_clamping():
    rng = np.random.default_rng(3)
    m = AuxMargin("X", [1000.0], [400.0])
    resp, w_u, n_u = 600.0, 4.0, 200
    counts = [allocate_counts(margin_draw(m, rng).totals, [resp], w_u, n_u).counts[1]
              for _ in range(20_000)]
    assert abs(np.mean(counts) - (1000 - 600) / 4) < 1


def test_clamp_proportions():
    assert clamp_proportions([0, 10], 10).tolist() == [0.05, 0.95]
    p = clamp_proportions([0, 3, 7], 10)
    assert p.sum() == pytest.approx(1.0) and p.min() >= 0.05 - 1e-15


def test_offset_intercept_only_closed_form():
    a0, p = 0.37, 0.23
    delta = solve_intercept_offset(np.full(6, a0), p)
    assert delta == pytest.approx(np.log(p / (1 - p)) - a0, abs=1e-12)
    assert solve_intercept_offset(np.full(6, a0), p, rule="linear") == pytest.approx(
        np.log(p / (1 - p)) - a0, abs=1e-12)


def test_offset_fixed_point():
    eta = np.array([-1.2, 0.3, 0.8, 2.0, -0.1])
    p = expit(eta).mean()
    assert abs(solve_intercept_offset(eta, p)) < 1e-9
    E = np.array([[0.2, -0.4], [1.0, 0.1], [-0.5, 0.7], [0.3, 0.3]])
    P = softmax(np.column_stack([np.zeros(4), E]), axis=1).mean(0)
    np.testing.assert_allclose(solve_intercept_offset(E, P), 0.0, atol=1e-9)


def test_offset_multinomial_matches_grid_oracle():
    E = np.array([[0.4, -1.1], [1.3, 0.2], [-0.7, 0.9], [0.0, -0.3]])
    target = np.array([0.25, 0.45, 0.30])

    def loss(dl):
        P = softmax(np.column_stack([np.zeros(4), E + dl]), axis=1).mean(0)
        return float(np.sum((P - target) ** 2))

    oracle = grid_refine(loss, [-5, -5], [5, 5], 2, rounds=14)
    np.testing.assert_allclose(solve_intercept_offset(E, target), oracle, atol=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 0.99))
def test_offset_achieves_target_probability(seed, p):
    rng = np.random.default_rng(seed)
    eta = rng.normal(0, 2, rng.integers(1, 40))
    counts = rng.integers(1, 5, eta.size)
    delta = solve_intercept_offset(eta, p, counts)
    achieved = np.average(expit(eta + delta), weights=counts)
    assert abs(achieved - p) <= 1e-8


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_offset_multinomial_achieves_targets(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 6))
    E = rng.normal(0, 1.5, (int(rng.integers(1, 30)), d - 1))
    target = rng.dirichlet(np.ones(d))
    target = clamp_proportions(np.round(target * 200), 200)
    delta = solve_intercept_offset(E, target)
    P = softmax(np.column_stack([np.zeros(E.shape[0]), E + delta]), axis=1).mean(0)
    assert np.max(np.abs(P - target)) <= 1e-8


def test_offset_errors():
    with pytest.raises(OffsetError):
        solve_intercept_offset(np.zeros(3), 1.0)
    with pytest.raises(OffsetError):
        solve_intercept_offset(np.zeros((0,)), 0.5)
