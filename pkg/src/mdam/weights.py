"""Analysis weights for unit respondents and unit nonrespondents."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import MISSING, SurveyDataset


class WeightError(ValueError):
    """Weights cannot be constructed from the inputs supplied."""


class NegativeWeightError(WeightError):
    pass


@dataclass
class WeightReport:
    """Constructed weights plus the inputs they were built from."""

    weights: np.ndarray
    input_weights: np.ndarray
    respondent_sum: float
    nonrespondent_sum: float
    target: float
    regime: str
    unit_nr: np.ndarray
    class_factors: dict | None = None

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def apply(self, ds: SurveyDataset) -> SurveyDataset:
        kind = "adjusted" if self.regime == "class-adjusted" else "constructed"
        return ds.with_weights(self.weights, kind)

    def to_rows(self):
        """Rows for a CSV audit of the construction."""
        yield ("unit", "unit_nr", "input_weight", "weight")
        for i, (nr, a, b) in enumerate(zip(self.unit_nr, self.input_weights, self.weights)):
            yield (i, int(nr), repr(float(a)), repr(float(b)))


def weights_from_design(ds: SurveyDataset, N: float | None = None) -> WeightReport:
    """Keep respondent design weights; give every nonrespondent an equal
    share of what is left of the population size.
    """
    N = float(ds.N if N is None else N)
    u = ds.unit_nr
    wd = np.where(u, 0.0, ds.weights)
    if (wd[~u] <= 0).any():
        raise WeightError("every unit respondent needs a positive design weight")
    n_u = int(u.sum())
    resp_sum = float(wd.sum())
    w = wd.copy()
    if n_u == 0:
        if not np.isclose(resp_sum, N, rtol=1e-9):
            warnings.warn(
                f"no unit nonrespondents and design weights sum to {resp_sum:.6g}, not N={N:.6g}",
                stacklevel=2,
            )
    else:
        remainder = N - resp_sum
        if remainder < 0:
            raise NegativeWeightError(
                f"respondent design weights sum to {resp_sum:.6g}, above N={N:.6g}; "
                "nonrespondent weights would be negative (use weights_from_adjusted)"
            )
        w[u] = remainder / n_u
    return WeightReport(w, np.asarray(ds.weights, dtype=float).copy(), resp_sum,
                        float(w[u].sum()), N, "design", u.copy())


def weights_from_adjusted(ds: SurveyDataset, rescale_to: float | None = None) -> WeightReport:
    """Down-weight nonresponse-adjusted respondent weights by the response
    rate and hand the freed mass to the unit nonrespondents in equal shares.

    The constructed weights sum to the adjusted total.  Passing
    ``rescale_to`` (typically N) rescales all of them to that total instead.
    """
    u = ds.unit_nr
    n = ds.n
    n_u = int(u.sum())
    if n_u == n:
        raise WeightError("every unit is a nonrespondent; nothing to down-weight")
    wa = np.where(u, 0.0, ds.weights)
    if (wa[~u] <= 0).any():
        raise WeightError("every unit respondent needs a positive adjusted weight")
    total = float(wa.sum())
    w = np.where(u, total / n, wa * (1.0 - n_u / n))
    target = total
    if rescale_to is not None:
        w = w * (float(rescale_to) / w.sum())
        target = float(rescale_to)
    return WeightReport(w, np.asarray(ds.weights, dtype=float).copy(), float(w[~u].sum()),
                        float(w[u].sum()), target, "adjusted", u.copy())


def weighting_class_adjust(ds: SurveyDataset, class_var: str,
                           classes: np.ndarray | None = None) -> WeightReport:
    """Weighting-class nonresponse adjustment of design weights.

    The response rate of each class is estimated by the design-weighted share
    of respondents; respondents are inflated by its inverse and
    nonrespondents get weight 0.  ``classes`` supplies class membership for
    every sampled unit when the survey column is missing for nonrespondents
    (the simulator knows it).
    """
    u = ds.unit_nr
    if classes is None:
        classes = ds.column(class_var)
    classes = np.asarray(classes)
    if (classes == MISSING).any():
        raise WeightError(f"class variable {class_var!r} must be known for every unit")
    wd = np.asarray(ds.weights, dtype=float)
    w = np.zeros(ds.n)
    factors = {}
    for c in np.unique(classes):
        members = classes == c
        denom = wd[members].sum()
        num = wd[members & ~u].sum()
        if denom <= 0 or num <= 0:
            raise WeightError(f"weighting class {class_var}={c} has no responding weight")
        phi = num / denom
        factors[int(c)] = phi
        w[members & ~u] = wd[members & ~u] / phi
    return WeightReport(w, wd.copy(), float(w.sum()), 0.0, float(w.sum()),
                        "class-adjusted", u.copy(), class_factors=factors)
