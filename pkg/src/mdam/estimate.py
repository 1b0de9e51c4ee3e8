"""Design-based estimates on completed datasets, pooled with Rubin's rules.

Variances treat each completed dataset as a probability-proportional-to-size
sample drawn with replacement, so a weighted total sum(w x) has variance
estimate n/(n-1) * sum (w_i x_i - T/n)^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .dataset import MISSING, SurveyDataset
from .glm import fit_logit


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class MIEstimate:
    """Pooled multiple-imputation estimate.

    ``T = u_bar + (1 + 1/L) b``.  When b is 0 the interval uses the normal
    quantile and ``df`` is infinite.
    """

    q: float
    u_bar: float
    b: float
    T: float
    df: float
    ci: tuple[float, float]
    L: int

    @property
    def se(self) -> float:
        return math.sqrt(self.T)

    @property
    def mi_se(self) -> float:
        """sqrt(b / L), the Monte-Carlo error of q itself."""
        return math.sqrt(self.b / self.L)

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]


def rubin_combine(estimates: Sequence[tuple[float, float]], level: float = 0.95) -> MIEstimate:
    """Pool ``(q_l, u_l)`` pairs from L completed datasets."""
    arr = np.asarray(list(estimates), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise EstimationError("pooling needs at least two completed-data estimates")
    q, u = arr[:, 0], arr[:, 1]
    if (u < 0).any():
        raise EstimationError("within-imputation variances must be nonnegative")
    L = q.size
    qbar = float(q.mean())
    b = float(q.var(ddof=1))
    ubar = float(u.mean())
    T = ubar + (1 + 1 / L) * b
    ratio = ubar / ((1 + 1 / L) * b) if b > 0 else math.inf
    if ratio < 1e100:
        df = (L - 1) * (1 + ratio) ** 2
        crit = stats.t.ppf(0.5 + level / 2, df)
    else:
        # no (or negligible) between-imputation variance
        df = math.inf
        crit = stats.norm.ppf(0.5 + level / 2)
    half = crit * math.sqrt(T)
    return MIEstimate(qbar, ubar, b, T, float(df), (float(qbar - half), float(qbar + half)), L)


def _wr_variance(z: np.ndarray) -> float:
    n = z.size
    if n < 2:
        raise EstimationError("variance needs at least two units")
    return float(n / (n - 1) * np.sum((z - z.mean()) ** 2))


def _require_complete(ds: SurveyDataset, cols: Iterable[int]):
    for k in cols:
        if (ds.cells[:, k] == MISSING).any():
            raise EstimationError(f"variable {ds.names[k]!r} has missing cells")


def ht_total(ds: SurveyDataset, variable: str, level: int = 1) -> tuple[float, float]:
    """Weighted total of units at ``level`` of ``variable`` and its variance."""
    k = ds.index(variable)
    _require_complete(ds, [k])
    z = ds.weights * (ds.cells[:, k] == level)
    return float(z.sum()), _wr_variance(z)


def condition_mask(ds: SurveyDataset, cond) -> np.ndarray:
    """Rows satisfying ``cond``.

    ``cond`` is None (every row), a boolean array, or a mapping from variable
    name to a level index, a level label or a list of either.
    """
    if cond is None:
        return np.ones(ds.n, dtype=bool)
    if isinstance(cond, np.ndarray):
        return cond.astype(bool)
    mask = np.ones(ds.n, dtype=bool)
    for name, want in cond.items():
        var = ds.variable(name)
        want = want if isinstance(want, (list, tuple, set)) else [want]
        idx = [w if isinstance(w, (int, np.integer)) else var.index_of(w) for w in want]
        col = ds.column(name)
        _require_complete(ds, [ds.index(name)])
        mask &= np.isin(col, idx)
    return mask


def weighted_proportion(ds: SurveyDataset, target, subgroup=None) -> tuple[float, float]:
    """Ratio estimate of P(target | subgroup) with a linearization variance."""
    y = condition_mask(ds, target)
    g = condition_mask(ds, subgroup)
    w = np.asarray(ds.weights, dtype=float)
    denom = float(np.sum(w * g))
    if denom <= 0:
        raise EstimationError("subgroup is empty")
    p = float(np.sum(w * g * y)) / denom
    z = w * g * (y - p) / denom
    return p, _wr_variance(z)


def survey_logit(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Survey-weighted logistic regression.

    Point estimates solve the weighted score equations; the covariance is the
    with-replacement sandwich H^-1 S H^-1 with S built from per-unit scores.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    fc = fit_logit(X, y, w)
    mu = 1 / (1 + np.exp(-(X @ fc.coef)))
    scores = X * (w * (y - mu))[:, None]
    n = X.shape[0]
    centered = scores - scores.mean(axis=0)
    meat = n / (n - 1) * centered.T @ centered
    bread = np.linalg.inv((X.T * (w * mu * (1 - mu))) @ X)
    return fc.coef, bread @ meat @ bread


def pool(datasets: Sequence[SurveyDataset], fn: Callable[[SurveyDataset], tuple[float, float]],
         level: float = 0.95) -> MIEstimate:
    """Apply a completed-data estimator to every dataset and pool the results."""
    return rubin_combine([fn(ds) for ds in datasets], level)


RESULT_COLUMNS = ("estimand", "estimate", "se", "mi_se", "df", "ci_lower", "ci_upper", "L", "note")


def result_row(name: str, est: MIEstimate | None, note: str = "") -> dict:
    if est is None:
        return {"estimand": name, "estimate": "", "se": "", "mi_se": "", "df": "",
                "ci_lower": "", "ci_upper": "", "L": "", "note": note or "undefined"}
    return {"estimand": name, "estimate": repr(est.q), "se": repr(est.se), "mi_se": repr(est.mi_se),
            "df": repr(est.df), "ci_lower": repr(est.ci[0]), "ci_upper": repr(est.ci[1]),
            "L": est.L, "note": note}


def write_results(rows: Iterable[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow(row)
