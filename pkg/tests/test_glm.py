import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdam.dataset import VariableDef
from mdam.glm import (
    FittedCoefficients,
    TermSpec,
    draw_coefficients,
    expand_design,
    fit_counts,
    fit_logit,
    fit_multinomial,
    logit_gradient,
    logit_loglik,
    multinomial_gradient,
    multinomial_hessian,
    multinomial_loglik,
)
from oracles import (
    brute_force_logit,
    brute_force_multinomial,
    finite_difference_gradient,
    finite_difference_hessian,
)

S = VariableDef("S", ("Male", "Female"))
E = VariableDef("E", ("White", "Black", "Hispanic", "Rest"))


def test_expand_design_counts_columns():
    rng = np.random.default_rng(0)
    cells = np.column_stack([rng.integers(0, 2, 30), rng.integers(0, 4, 30)])
    X = expand_design(cells, (S, E), TermSpec(("S", "E")))
    assert X.shape == (30, 5)
    X2 = expand_design(cells, (S, E), TermSpec(("S", "E"), (("S", "E"),)))
    assert X2.shape == (30, 8)
    X0 = expand_design(cells, (S, E), TermSpec())
    assert X0.shape == (30, 1) and np.all(X0 == 1)


def test_expand_design_indicator_coding():
    cells = np.array([[0, 0], [1, 2], [1, 3]])
    X = expand_design(cells, (S, E), TermSpec(("S", "E"), (("S", "E"),)))
    np.testing.assert_array_equal(X[1], [1, 1, 0, 1, 0, 0, 1, 0])
    np.testing.assert_array_equal(X[2], [1, 1, 0, 0, 1, 0, 0, 1])
    assert TermSpec(("S", "E"), (("S", "E"),)).n_columns({"S": 2, "E": 4}) == 8


def test_expand_design_rejects_missing():
    with pytest.raises(ValueError):
        expand_design(np.array([[0, -1]]), (S, E), TermSpec(("E",)))


def test_termspec_parse_roundtrip():
    t = TermSpec.parse("I + S + E + C + A + S:E + S:C + S:A")
    assert t.main == ("S", "E", "C", "A")
    assert t.interactions == (("S", "E"), ("S", "C"), ("S", "A"))
    assert TermSpec.parse(t.formula()) == t
    assert TermSpec.parse("I + X1 + X2") == TermSpec(("X1", "X2"))


def test_intercept_only_balanced():
    X = np.ones((10, 1))
    y = np.array([0, 1] * 5)
    fc = fit_logit(X, y)
    assert abs(fc.coef[0]) < 1e-8
    assert fc.converged and not fc.ridge_used


def _random_logit_instance(rng, n=8, k=3):
    # the first 8 rows put both outcomes in each of the 4 covariate patterns,
    # so the data are never separated and the MLE exists
    base = np.array([[a, b] for a in (0, 1) for b in (0, 1)] * 2, dtype=float)
    extra = rng.integers(0, 2, (max(n - 8, 0), 2)).astype(float)
    X = np.column_stack([np.ones(max(n, 8)), np.vstack([base, extra])])
    y = np.concatenate([[0] * 4 + [1] * 4, rng.integers(0, 2, max(n - 8, 0))])
    w = rng.uniform(0.5, 3.0, X.shape[0])
    return X, y, w


def test_logit_matches_brute_force_on_crafted_rows():
    X = np.array([[1, 0, 0], [1, 1, 0], [1, 0, 1], [1, 1, 1],
                  [1, 0, 0], [1, 1, 0], [1, 0, 1], [1, 1, 1]], dtype=float)
    y = np.array([0, 1, 1, 0, 1, 1, 0, 1])
    w = np.array([1.0, 2.0, 0.5, 1.5, 1.0, 0.7, 2.2, 1.1])
    fc = fit_logit(X, y, w)
    np.testing.assert_allclose(fc.coef, brute_force_logit(X, y, w), atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_logit_matches_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    X, y, w = _random_logit_instance(rng, n=12)
    fc = fit_logit(X, y, w)
    assert fc.converged and not fc.ridge_used
    np.testing.assert_allclose(fc.coef, brute_force_logit(X, y, w), atol=1e-6)


def _random_mn_instance(rng, n=10, d=3):
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n)]).astype(float)
    y = rng.integers(0, d, n)
    # every level appears with both covariate values
    for c in range(d):
        y[2 * c], X[2 * c, 1] = c, 0
        y[2 * c + 1], X[2 * c + 1, 1] = c, 1
    w = rng.uniform(0.5, 2.0, n)
    return X, y, w


@pytest.mark.parametrize("seed", range(20))
def test_multinomial_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    X, y, w = _random_mn_instance(rng, n=10 + seed % 5)
    fc = fit_multinomial(X, y, w, n_levels=3)
    assert fc.converged
    np.testing.assert_allclose(fc.coef, brute_force_multinomial(X, y, w, 3), atol=1e-6)


def test_multinomial_two_levels_reduces_to_logit():
    rng = np.random.default_rng(3)
    X, y, w = _random_logit_instance(rng, n=15)
    a = fit_logit(X, y, w)
    b = fit_multinomial(X, y, w, n_levels=2)
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-8)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-8)


def test_multinomial_intercept_only_closed_form():
    y = np.array([0] * 5 + [1] * 3 + [2] * 2)
    fc = fit_multinomial(np.ones((10, 1)), y, n_levels=3)
    np.testing.assert_allclose(fc.coef, np.log([3 / 5, 2 / 5]), atol=1e-8)


def test_constant_weights_scale_cov():
    rng = np.random.default_rng(5)
    X, y, _ = _random_logit_instance(rng, n=20)
    a = fit_logit(X, y, np.ones(20))
    b = fit_logit(X, y, np.full(20, 4.0))
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-10)
    np.testing.assert_allclose(b.cov, a.cov / 4.0, rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_logit_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X, y, w = _random_logit_instance(rng, n=10)
    beta = rng.normal(0, 1, X.shape[1])
    g = logit_gradient(beta, X, y, w)
    fd = finite_difference_gradient(lambda b: logit_loglik(b, X, y, w), beta)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_multinomial_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X, y, w = _random_mn_instance(rng, n=9)
    beta = rng.normal(0, 1, X.shape[1] * 2)
    g = multinomial_gradient(beta, X, y, 3, w)
    fd = finite_difference_gradient(lambda b: multinomial_loglik(b, X, y, 3, w), beta)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_cov_matches_finite_difference_hessian():
    rng = np.random.default_rng(11)
    X, y, w = _random_mn_instance(rng, n=40)
    fc = fit_multinomial(X, y, w, n_levels=3)
    H = finite_difference_hessian(lambda b: multinomial_gradient(b, X, y, 3, w), fc.coef)
    np.testing.assert_allclose(fc.cov, np.linalg.inv(-H), rtol=1e-4)
    np.testing.assert_allclose(multinomial_hessian(fc.coef, X, 3, w), H, rtol=1e-5, atol=1e-8)


def test_permutation_invariance_and_duplication():
    rng = np.random.default_rng(8)
    X, y, w = _random_logit_instance(rng, n=25)
    base = fit_logit(X, y, w)
    perm = rng.permutation(25)
    np.testing.assert_allclose(fit_logit(X[perm], y[perm], w[perm]).coef, base.coef, atol=1e-10)
    dup = fit_logit(np.vstack([X, X]), np.concatenate([y, y]), np.concatenate([w, w]))
    dbl = fit_logit(X, y, 2 * w)
    np.testing.assert_allclose(dup.coef, dbl.coef, atol=1e-8)
    np.testing.assert_allclose(dup.cov, dbl.cov, rtol=1e-8)


def test_separation_triggers_ridge():
    X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
    y = np.array([0, 0, 1, 1, 1, 1])
    fc = fit_logit(X, y)
    assert fc.ridge_used
    assert np.all(np.isfinite(fc.cov))
    np.testing.assert_allclose(fc.cov, fc.cov.T, atol=1e-10)


def test_draw_zero_cov_is_exact():
    fc = FittedCoefficients(np.array([0.3, -1.2]), np.zeros((2, 2)), 0.0, True)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(draw_coefficients(fc, rng), fc.coef)


def test_draw_moments():
    fc = FittedCoefficients(np.array([0.7]), np.array([[0.25]]), 0.0, True)
    rng = np.random.default_rng(1)
    m = 100_000
    draws = np.array([draw_coefficients(fc, rng)[0] for _ in range(m)])
    assert abs(draws.mean() - 0.7) < 4 * 0.5 / np.sqrt(m)
    assert abs(draws.var() / 0.25 - 1) < 0.05


def test_draw_is_deterministic():
    fc = FittedCoefficients(np.array([0.1, 0.2]), np.array([[1.0, 0.3], [0.3, 2.0]]), 0.0, True)
    a = draw_coefficients(fc, np.random.default_rng(42))
    b = draw_coefficients(fc, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_count_table_fit_matches_row_level_fit():
    rng = np.random.default_rng(21)
    X, y, w = _random_mn_instance(rng, n=30)
    patterns, inv = np.unique(X, axis=0, return_inverse=True)
    C = np.zeros((patterns.shape[0], 3))
    np.add.at(C, (inv.ravel(), y), w)
    a = fit_multinomial(X, y, w, n_levels=3)
    b = fit_counts(patterns, C)
    np.testing.assert_allclose(b.coef, a.coef, atol=1e-8)
    np.testing.assert_allclose(b.cov, a.cov, rtol=1e-6)
