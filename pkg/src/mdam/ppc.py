"""Posterior predictive checks.

For each retained parameter draw a whole survey is simulated from the model
(unit response, survey values, item response and, with measurement error,
reported values).  A quantity is computed on the complete respondents of
each replicate and compared with its value on the observed complete
respondents.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import MISSING, SurveyDataset, VariableDef
from .glm import expand_design
from .sampler import ModelSpec

MIN_DRAWS = 100
UNDEFINED_SHARE = 0.05


@dataclass
class Replicate:
    """One simulated survey: full values, unit and item response flags, and
    the values a respondent would report."""

    U: np.ndarray
    cells: np.ndarray
    R: np.ndarray
    reported: np.ndarray

    def complete_respondents(self) -> np.ndarray:
        ok = ~self.U & ~self.R.any(axis=1)
        return self.reported[ok]


@dataclass(frozen=True)
class Quantity:
    """P(target | given) among complete respondents; levels are indices."""

    name: str
    target: dict
    given: dict | None = None

    def value(self, cells: np.ndarray, index: dict) -> float:
        g = np.ones(cells.shape[0], dtype=bool)
        for v, lev in (self.given or {}).items():
            g &= cells[:, index[v]] == lev
        if not g.any():
            return float("nan")
        t = g.copy()
        for v, lev in self.target.items():
            t &= cells[:, index[v]] == lev
        return float(t.sum() / g.sum())


@dataclass
class PPCResult:
    quantities: list
    observed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicated: np.ndarray  # (draws, quantities)
    undefined: np.ndarray

    @property
    def contained(self) -> np.ndarray:
        return (self.lower <= self.observed) & (self.observed <= self.upper) & ~self.undefined

    @property
    def share_contained(self) -> float:
        ok = ~self.undefined
        return float(self.contained[ok].mean()) if ok.any() else float("nan")

    def rows(self) -> list:
        out = []
        for j, q in enumerate(self.quantities):
            out.append({"quantity": q.name, "observed": float(self.observed[j]),
                        "lower": float(self.lower[j]), "upper": float(self.upper[j]),
                        "contained": bool(self.contained[j]),
                        "undefined": bool(self.undefined[j])})
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _eta(coef, X, d):
    return X @ np.asarray(coef).reshape(d - 1, -1).T


def _draw(rng, eta):
    if eta.shape[1] == 1:
        return (rng.random(eta.shape[0]) < expit(eta[:, 0])).astype(np.int64)
    z = np.hstack([np.zeros((eta.shape[0], 1)), eta])
    p = np.exp(z - z.max(axis=1, keepdims=True))
    c = p.cumsum(axis=1)
    u = rng.random(p.shape[0]) * c[:, -1]
    return np.minimum((c < u[:, None]).sum(axis=1), p.shape[1] - 1)


def replicate_dataset(params: dict, spec: ModelSpec, variables: Sequence[VariableDef], n: int,
                      rng: np.random.Generator) -> Replicate:
    """Simulate ``n`` sampled units from one parameter draw.

    ``params`` has the layout of the sampler's parameter draws.  Units with
    U=1 get the U offsets; ICIN draws carry none.
    """
    variables = tuple(variables)
    index = {v.name: k for k, v in enumerate(variables)}
    K = len(variables)
    coef, offsets = params["coef"], params.get("offset", {})
    U = rng.random(n) < expit(float(np.ravel(coef["U"])[0]))
    cells = np.zeros((n, K), dtype=np.int64)
    for m in spec.outcomes:
        k = index[m.variable]
        d = variables[k].n_levels
        eta = _eta(coef[m.variable], expand_design(cells, variables, m.terms), d)
        if m.variable in offsets:
            eta = eta + np.outer(U, np.ravel(offsets[m.variable]))
        cells[:, k] = _draw(rng, eta)
    R = np.zeros((n, K), dtype=bool)
    for m in spec.items:
        k = index[m.variable]
        eta = _eta(coef["R:" + m.variable], expand_design(cells, variables, m.terms), 2)
        R[:, k] = rng.random(n) < expit(eta[:, 0])
    for r in spec.rules:
        R[:, index[r.forced]] |= R[:, index[r.trigger]]
    R &= ~U[:, None]
    reported = cells.copy()
    me = spec.measurement_error
    theta = params.get("theta")
    if me is not None and theta is not None:
        k, c = index[me.variable], index[me.stratum]
        flip = (cells[:, k] == 0) & (rng.random(n) < np.asarray(theta)[cells[:, c]])
        reported[flip, k] = 1
    return Replicate(U, cells, R, reported)


def default_quantities(variables: Sequence[VariableDef], outcome: str) -> list:
    """Every non-baseline level share plus P(outcome = 1 | X = level) for each
    other variable X and each of its levels."""
    out = []
    for v in variables:
        for lev in range(1, v.n_levels):
            out.append(Quantity(f"P({v.name}={v.levels[lev]})", {v.name: lev}))
    for v in variables:
        if v.name == outcome:
            continue
        for lev in range(v.n_levels):
            out.append(Quantity(f"P({outcome}=1|{v.name}={v.levels[lev]})", {outcome: 1},
                                {v.name: lev}))
    return out


def observed_complete(ds: SurveyDataset) -> np.ndarray:
    ok = ~ds.unit_nr & ~(ds.cells == MISSING).any(axis=1)
    return ds.cells[ok]


def ppc_intervals(draws: Sequence[dict], ds: SurveyDataset, spec: ModelSpec,
                  rng: np.random.Generator, quantities: Sequence[Quantity] | None = None,
                  level: float = 0.95, n: int | None = None) -> PPCResult:
    """Posterior predictive intervals for ``quantities``.

    One replicate of size ``n`` (default: the sample size of ``ds``) is
    simulated per draw.  Intervals use the median-unbiased sample quantile.
    A quantity whose subgroup is empty in more than 5% of replicates is
    flagged undefined; otherwise empty replicates are dropped.
    """
    if len(draws) < MIN_DRAWS:
        raise ValueError(f"posterior predictive checks need at least {MIN_DRAWS} draws, "
                         f"got {len(draws)}")
    variables = ds.variables
    index = {v.name: k for k, v in enumerate(variables)}
    if quantities is None:
        outcome = (spec.measurement_error.variable if spec.measurement_error
                   else spec.outcomes[-1].variable)
        quantities = default_quantities(variables, outcome)
    quantities = list(quantities)
    n = ds.n if n is None else n
    obs_cells = observed_complete(ds)
    observed = np.array([q.value(obs_cells, index) for q in quantities])
    rep = np.empty((len(draws), len(quantities)))
    for i, p in enumerate(draws):
        cr = replicate_dataset(p, spec, variables, n, rng).complete_respondents()
        rep[i] = [q.value(cr, index) for q in quantities]
    empty = np.isnan(rep)
    undefined = (empty.mean(axis=0) > UNDEFINED_SHARE) | np.isnan(observed)
    a = (1 - level) / 2
    lower = np.full(len(quantities), np.nan)
    upper = np.full(len(quantities), np.nan)
    for j in range(len(quantities)):
        if undefined[j]:
            continue
        col = rep[~empty[:, j], j]
        lower[j], upper[j] = np.quantile(col, [a, 1 - a], method="median_unbiased")
    return PPCResult(quantities, observed, lower, upper, rep, undefined)
