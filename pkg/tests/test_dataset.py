import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdam.dataset import (
    MISSING,
    CsvSchema,
    SchemaError,
    SurveyDataset,
    VariableDef,
    augment_unit_nonrespondents,
    load_csv,
    missingness_summary,
    write_csv,
)

S = VariableDef("S", ("Male", "Female"), role="X")
E = VariableDef("E", ("White", "Black", "Hispanic", "Rest"), role="X")
SCHEMA = CsvSchema((S, E))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_all_blank_row_is_unit_nonrespondent_keeping_weight(tmp_path):
    p = _write(tmp_path, "S,E,weight\nMale,White,10\n,,812\nFemale,NA,20\n")
    ds = load_csv(p, SCHEMA, 1000)
    assert ds.n == 3
    assert ds.unit_nr.tolist() == [False, True, False]
    assert ds.weights[1] == 812
    assert ds.item_missing()[2].tolist() == [False, True]
    # unit nonrespondent cells are excluded from R
    assert not ds.item_missing()[1].any()


def test_fully_observed_file(tmp_path):
    p = _write(tmp_path, "S,E,weight\nMale,White,1\nFemale,Rest,2\n")
    ds = load_csv(p, SCHEMA, 10)
    assert not ds.item_missing().any() and not ds.unit_nr.any()


def test_missing_code_set_symmetry(tmp_path):
    schema = CsvSchema((S, E), missing_codes=frozenset({"NA", "-9"}))
    a = load_csv(_write(tmp_path, "S,E,weight\nMale,NA,1\nFemale,White,1\n", "a.csv"), schema, 10)
    b = load_csv(_write(tmp_path, "S,E,weight\nMale,-9,1\nFemale,White,1\n", "b.csv"), schema, 10)
    np.testing.assert_array_equal(a.cells, b.cells)
    assert a.cells[0, 1] == MISSING


def test_unknown_level_names_row_and_column(tmp_path):
    p = _write(tmp_path, "S,E,weight\nMale,White,1\nMale,Purple,1\n")
    with pytest.raises(SchemaError, match=r"row 2.*'E'"):
        load_csv(p, SCHEMA, 10)


def test_non_numeric_weight(tmp_path):
    with pytest.raises(SchemaError, match="non-numeric"):
        load_csv(_write(tmp_path, "S,E,weight\nMale,White,abc\n"), SCHEMA, 10)


def test_missing_column(tmp_path):
    with pytest.raises(SchemaError, match="missing columns"):
        load_csv(_write(tmp_path, "S,weight\nMale,1\n"), SCHEMA, 10)


def test_explicit_unit_column_overrides_heuristic(tmp_path):
    schema = CsvSchema((S, E), unit_nr_column="unit")
    p = _write(tmp_path, "S,E,weight,unit\nMale,White,1,1\n,,2,0\n")
    ds = load_csv(p, schema, 10)
    assert ds.unit_nr.tolist() == [True, False]
    assert (ds.cells[0] == MISSING).all()


def test_variable_def_validation():
    with pytest.raises(SchemaError):
        VariableDef("X", ("a",))
    with pytest.raises(SchemaError):
        VariableDef("X", ("a", "a"))
    with pytest.raises(SchemaError):
        VariableDef("X", ("a", "b"), role="Z")


def test_unit_nonrespondent_cells_must_be_missing():
    with pytest.raises(SchemaError):
        SurveyDataset((S,), np.array([[1]]), np.array([True]), np.array([1.0]), 10)


def test_augment_counts_and_identity():
    ds = SurveyDataset((S, E), np.zeros((2013, 2), int), np.zeros(2013, bool), np.ones(2013), 10**6)
    big = augment_unit_nonrespondents(ds, 913)
    assert big.n == 2926 and big.n_unit_nr == 913
    assert (big.cells[2013:] == MISSING).all() and (big.weights[2013:] == 0).all()
    assert big.weight_pending[2013:].all()
    np.testing.assert_array_equal(big.cells[:2013], ds.cells)
    assert augment_unit_nonrespondents(ds, 0) is ds
    one = augment_unit_nonrespondents(
        SurveyDataset((S,), np.zeros((0, 1), int), np.zeros(0, bool), np.zeros(0), 5), 1)
    assert one.n == 1 and one.unit_nr[0]


def test_augment_associative():
    ds = SurveyDataset((S,), np.array([[0], [1], [MISSING]]), np.array([False, False, False]),
                       np.ones(3), 50)
    a = missingness_summary(augment_unit_nonrespondents(augment_unit_nonrespondents(ds, 2), 3))
    b = missingness_summary(augment_unit_nonrespondents(ds, 5))
    assert a == b


def test_summary_rates():
    cells = np.array([[0, 1], [MISSING, 2], [1, MISSING], [MISSING, MISSING]])
    u = np.array([False, False, False, True])
    ds = SurveyDataset((S, E), cells, u, np.ones(4), 100)
    s = missingness_summary(ds)
    assert s.unit_rate == 0.25
    assert s.item_rates == {"S": pytest.approx(1 / 3), "E": pytest.approx(1 / 3)}
    assert sum(s.patterns.values()) == 4


def test_summary_unit_rate_for_cps_shape():
    ds = SurveyDataset((S,), np.zeros((2013, 1), int), np.zeros(2013, bool), np.ones(2013), 10**6)
    s = missingness_summary(augment_unit_nonrespondents(ds, 913))
    assert round(s.unit_rate, 2) == 0.31


def test_simulated_item_rate_near_eighteen_percent():
    from mdam.simulate import SCENARIOS, generate_population, generate_weights, poisson_sample
    rng = np.random.default_rng(5)
    sc = SCENARIOS["weak-a"]
    pop = generate_population(sc, rng)
    _, pi = generate_weights(sc, rng)
    ds = poisson_sample(pop, pi, rng).ds
    assert abs(missingness_summary(ds).item_rates["X1"] - 0.18) <= 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    cells = np.column_stack([rng.integers(-1, 2, n), rng.integers(-1, 4, n)])
    u = rng.random(n) < 0.2
    cells[u] = MISSING
    w = np.round(rng.uniform(0, 100, n), 3) * rng.uniform(0.5, 2)
    ds = SurveyDataset((S, E), cells, u, w, 10**4)
    schema = CsvSchema((S, E), unit_nr_column="unit")
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    write_csv(ds, p, schema)
    back = load_csv(p, schema, 10**4)
    np.testing.assert_array_equal(back.cells, ds.cells)
    np.testing.assert_array_equal(back.unit_nr, ds.unit_nr)
    np.testing.assert_array_equal(back.weights, ds.weights)
    p2 = p.with_name("y.csv")
    write_csv(back, p2, schema)
    assert p.read_bytes() == p2.read_bytes()
