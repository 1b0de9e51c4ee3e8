import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdam.dataset import MISSING, SurveyDataset, VariableDef
from mdam.weights import (
    NegativeWeightError,
    WeightError,
    weighting_class_adjust,
    weights_from_adjusted,
    weights_from_design,
)

X = VariableDef("X", ("0", "1"), role="X")


def _ds(w, u, N=100, kind="design"):
    u = np.asarray(u, bool)
    cells = np.where(u, MISSING, 0)[:, None]
    return SurveyDataset((X,), cells, u, w, N, weight_kind=kind)


def test_design_regime_shares_remainder():
    r = weights_from_design(_ds([30, 40, 0, 0, 0], [0, 0, 1, 1, 1]), 100)
    assert r.weights.tolist() == [30, 40, 10, 10, 10]
    assert r.total == 100 and r.regime == "design"


def test_design_regime_without_nonrespondents():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = weights_from_design(_ds([30, 40], [0, 0], N=70))
    assert r.weights.tolist() == [30, 40]


def test_design_regime_warns_when_sum_differs():
    with pytest.warns(UserWarning):
        weights_from_design(_ds([30, 40], [0, 0], N=90))


def test_design_regime_negative_remainder():
    with pytest.raises(NegativeWeightError):
        weights_from_design(_ds([30, 40, 0], [0, 0, 1], N=60))


def test_adjusted_regime_arithmetic():
    r = weights_from_adjusted(_ds([10, 20, 10, 0], [0, 0, 0, 1], kind="adjusted"))
    assert r.weights.tolist() == [7.5, 15, 7.5, 10]
    assert r.total == 40


def test_adjusted_regime_identity_without_nonresponse():
    r = weights_from_adjusted(_ds([10, 20], [0, 0], kind="adjusted"))
    assert r.weights.tolist() == [10, 20]


def test_adjusted_regime_all_nonrespondents():
    with pytest.raises(WeightError):
        weights_from_adjusted(_ds([0, 0], [1, 1], kind="adjusted"))


def test_adjusted_rescale_option():
    r = weights_from_adjusted(_ds([10, 20, 10, 0], [0, 0, 0, 1], kind="adjusted"), rescale_to=100)
    assert r.total == pytest.approx(100, rel=1e-12)


def test_class_adjustment_factor():
    # class 0: respondents carry 80 of 100
    cls = np.array([0, 0, 0, 1, 1])
    r = weighting_class_adjust(_ds([40, 40, 20, 30, 30], [0, 0, 1, 0, 0]), "X", classes=cls)
    assert r.class_factors[0] == pytest.approx(0.8)
    assert r.weights.tolist() == pytest.approx([50, 50, 0, 30, 30])


def test_class_adjustment_uniform_rate():
    cls = np.array([0, 0, 1, 1])
    r = weighting_class_adjust(_ds([10, 10, 20, 20], [0, 1, 0, 1]), "X", classes=cls)
    assert r.weights.tolist() == [20, 0, 40, 0]


def test_class_adjustment_empty_class():
    with pytest.raises(WeightError, match="X=1"):
        weighting_class_adjust(_ds([10, 10], [0, 1]), "X", classes=np.array([0, 1]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 1e4), st.booleans()), min_size=2, max_size=40),
       st.floats(1.0, 3.0))
def test_regime_identities(rows, slack):
    w = np.array([r[0] for r in rows])
    u = np.array([r[1] for r in rows])
    u[0], u[-1] = False, True
    w_resp = np.where(u, 0.0, w)
    N = int(np.ceil(w_resp.sum() * slack))
    d = weights_from_design(_ds(w_resp, u, N=N))
    assert abs(d.weights.sum() - N) <= 1e-9 * N
    assert np.ptp(d.weights[u]) <= 1e-12 * N
    a = weights_from_adjusted(_ds(w_resp, u, N=N, kind="adjusted"))
    assert abs(a.weights.sum() - w_resp.sum()) <= 1e-9 * w_resp.sum()
    assert (a.weights >= 0).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_class_then_adjusted_positive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 40))
    cls = np.arange(n) % 2
    u = rng.random(n) < 0.3
    u[:2] = False
    u[2:4] = True  # each class has a respondent and a nonrespondent
    ds = _ds(rng.uniform(1, 50, n), u)
    r = weighting_class_adjust(ds, "X", classes=cls)
    adj = ds.with_weights(r.weights, "adjusted")
    assert (weights_from_adjusted(adj).weights > 0).all()
