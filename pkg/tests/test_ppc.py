import math

import numpy as np
import pytest
from scipy.special import expit

from mdam.dataset import MISSING, SurveyDataset
from mdam.margins import AuxMargin
from mdam.ppc import (
    MIN_DRAWS,
    Quantity,
    default_quantities,
    ppc_intervals,
    replicate_dataset,
)
from mdam.sampler import SamplerControls, run
from mdam.simulate import SIM_VARIABLES, sim_spec
from mdam.weights import weights_from_design

SPEC = sim_spec()
INDEX = {"X1": 0, "X2": 1}


def _params(u=-1.0, x2=0.4, x1=(0.2, 0.5), r=(-1.5, 0.0), off2=-0.6, off1=-0.4):
    return {"coef": {"U": np.array([u]), "X2": np.array([x2]), "X1": np.array(x1),
                     "R:X1": np.array(r)},
            "offset": {"X2": np.array([off2]), "X1": np.array([off1])}}


def _dataset(rep, N=None):
    n = rep.U.size
    cells = rep.reported.copy()
    cells[rep.R] = MISSING
    cells[rep.U] = MISSING
    w = np.where(rep.U, 0.0, 5.0)
    return SurveyDataset(SIM_VARIABLES, cells, rep.U, w, N or 5 * n, weight_kind="design")


def test_zero_coefficients_center_on_half():
    p = _params(u=-1.0, x2=0.0, x1=(0.0, 0.0), r=(-1.0, 0.0), off2=0.0, off1=0.0)
    rep = replicate_dataset(p, SPEC, SIM_VARIABLES, 400, np.random.default_rng(0))
    res = ppc_intervals([p] * 200, _dataset(rep), SPEC, np.random.default_rng(1), n=400)
    mid = (res.lower + res.upper) / 2
    assert np.all(np.abs(mid - 0.5) < 0.03)


def test_no_unit_nonrespondents_when_u_probability_zero():
    rep = replicate_dataset(_params(u=-60.0), SPEC, SIM_VARIABLES, 1000, np.random.default_rng(2))
    assert not rep.U.any()


def test_item_indicators_never_set_for_unit_nonrespondents():
    rep = replicate_dataset(_params(u=0.0, r=(0.0, 0.0)), SPEC, SIM_VARIABLES, 2000,
                            np.random.default_rng(3))
    assert rep.U.any() and not rep.R[rep.U].any()


def test_replicated_share_matches_closed_form():
    # item response unrelated to X2: the respondent share of X2 is expit(coef)
    p = _params(x2=0.4, r=(-1.0, 0.0))
    rng = np.random.default_rng(4)
    q = Quantity("P(X2=1)", {"X2": 1})
    vals = [q.value(replicate_dataset(p, SPEC, SIM_VARIABLES, 300, rng).complete_respondents(),
                    INDEX) for _ in range(2000)]
    resp = 300 * (1 - expit(-1.0)) * (1 - expit(-1.0))
    se = math.sqrt(expit(0.4) * (1 - expit(0.4)) / resp / 2000)
    assert abs(np.mean(vals) - expit(0.4)) < 4 * se


def test_constant_quantity_has_degenerate_interval():
    p = _params()
    rep = replicate_dataset(p, SPEC, SIM_VARIABLES, 300, np.random.default_rng(5))
    q = Quantity("sure", {"X1": 0}, {"X1": 0})
    res = ppc_intervals([p] * 100, _dataset(rep), SPEC, np.random.default_rng(6), [q])
    assert res.lower[0] == res.upper[0] == res.observed[0] == 1.0
    assert res.contained[0]


def test_too_few_draws():
    rep = replicate_dataset(_params(), SPEC, SIM_VARIABLES, 100, np.random.default_rng(0))
    with pytest.raises(ValueError, match=str(MIN_DRAWS)):
        ppc_intervals([_params()] * (MIN_DRAWS - 1), _dataset(rep), SPEC, np.random.default_rng(0))


def test_wider_level_nests_narrower():
    p = _params()
    rep = replicate_dataset(p, SPEC, SIM_VARIABLES, 500, np.random.default_rng(7))
    ds = _dataset(rep)
    a = ppc_intervals([p] * 300, ds, SPEC, np.random.default_rng(8), level=0.9)
    b = ppc_intervals([p] * 300, ds, SPEC, np.random.default_rng(8), level=0.95)
    assert (b.lower <= a.lower).all() and (a.upper <= b.upper).all()


def test_empty_subgroup_is_undefined():
    p = _params(x2=-60.0, off2=0.0)
    rep = replicate_dataset(p, SPEC, SIM_VARIABLES, 200, np.random.default_rng(9))
    q = Quantity("P(X1=1|X2=1)", {"X1": 1}, {"X2": 1})
    res = ppc_intervals([p] * 100, _dataset(rep), SPEC, np.random.default_rng(9), [q])
    assert res.undefined[0] and not res.contained[0]
    assert math.isnan(res.share_contained)


def test_default_quantities_names():
    names = [q.name for q in default_quantities(SIM_VARIABLES, "X1")]
    assert names == ["P(X1=1)", "P(X2=1)", "P(X1=1|X2=0)", "P(X1=1|X2=1)"]


def test_rows_and_csv(tmp_path):
    p = _params()
    rep = replicate_dataset(p, SPEC, SIM_VARIABLES, 300, np.random.default_rng(10))
    res = ppc_intervals([p] * 100, _dataset(rep), SPEC, np.random.default_rng(11))
    res.write_csv(tmp_path / "ppc.csv")
    lines = (tmp_path / "ppc.csv").read_text().splitlines()
    assert lines[0] == "quantity,observed,lower,upper,contained,undefined"
    assert len(lines) == 1 + len(res.quantities)


def test_self_consistency_on_model_generated_data():
    truth = _params(r=(-1.5, 0.3))
    rep = replicate_dataset(truth, SPEC, SIM_VARIABLES, 1500, np.random.default_rng(12))
    ds = weights_from_design(_dataset(rep, N=7500)).apply(_dataset(rep, N=7500))
    full = rep.cells
    margins = {"X2": AuxMargin("X2", [5.0 * full[:, 1].sum()]),
               "X1": AuxMargin("X1", [5.0 * full[:, 0].sum()])}
    spec = sim_spec(SamplerControls(700, 200, 10))
    mi = run(ds, spec, margins, np.random.default_rng(13))
    draws = mi.parameter_draws()
    assert len(draws) >= MIN_DRAWS
    res = ppc_intervals(draws, ds, spec, np.random.default_rng(14))
    assert res.share_contained >= 0.9
