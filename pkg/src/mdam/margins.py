"""Auxiliary population margins and the intercept-matching arithmetic.

A margin supplies a population total for every non-baseline level of one
survey variable, together with a constraint variance V expressing how far the
survey's own design-based total may plausibly sit from it.  Each sampler scan
draws a target total, converts it into a count of unit nonrespondents who
must take the level, and solves the U-offset that makes the model's expected
share among nonrespondents equal that count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import expit, logit, logsumexp

from .dataset import MISSING, SurveyDataset

# V is never allowed below (V_MIN_FRACTION * N)^2
V_MIN_FRACTION = 0.01
OFFSET_MAX_ITER = 50
OFFSET_TOL = 1e-8


class MarginError(ValueError):
    pass


class OffsetError(RuntimeError):
    """The offset equation could not be solved; ``diagnostics`` says why."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AuxMargin:
    """Population totals for the non-baseline levels of ``variable``.

    ``totals[j]`` is the count for level ``j + 1``.  ``variances`` may be left
    as None at registration and filled later by
    :func:`estimate_constraint_variance` (see :func:`resolve_variances`).
    """

    variable: str
    totals: np.ndarray
    variances: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.totals, dtype=float)).copy()
        t.flags.writeable = False
        object.__setattr__(self, "totals", t)
        if not np.all(np.isfinite(t)) or (t < 0).any() or t.sum() <= 0:
            raise MarginError(f"margin for {self.variable!r}: totals must be finite, "
                              "nonnegative and not all zero")
        if self.variances is not None:
            v = np.broadcast_to(np.asarray(self.variances, dtype=float), t.shape).copy()
            if not np.all(np.isfinite(v)) or (v <= 0).any():
                raise MarginError(f"margin for {self.variable!r}: variances must be positive")
            v.flags.writeable = False
            object.__setattr__(self, "variances", v)

    @classmethod
    def from_proportions(cls, variable, proportions, N, variances=None, source=""):
        """Register a margin given as population shares; converted with ``N`` here,
        once, so later draws never depend on N."""
        p = np.atleast_1d(np.asarray(proportions, dtype=float))
        if (p < 0).any() or p.sum() > 1 + 1e-12:
            raise MarginError(f"margin for {variable!r}: proportions must lie in [0, 1] "
                              "and sum to at most 1")
        return cls(variable, p * float(N), variances, source)

    @property
    def n_levels(self) -> int:
        return self.totals.size + 1

    def check_population(self, N: float) -> None:
        if self.totals.sum() > N * (1 + 1e-12):
            raise MarginError(f"margin for {self.variable!r} exceeds the population size")

    def with_variances(self, variances) -> "AuxMargin":
        return replace(self, variances=np.asarray(variances, dtype=float))


@dataclass
class MarginDraw:
    totals: np.ndarray
    iteration: int = 0


def margin_draw(m: AuxMargin, rng: np.random.Generator, iteration: int = 0) -> MarginDraw:
    """Draw a target total T-hat ~ N(T, V), independently per level."""
    if m.variances is None:
        raise MarginError(f"margin for {m.variable!r} has no constraint variance yet")
    return MarginDraw(m.totals + np.sqrt(m.variances) * rng.standard_normal(m.totals.size),
                      iteration)


# -- constraint variance -----------------------------------------------------

def ht_variance_wr(values: np.ndarray, weights: np.ndarray) -> float:
    """With-replacement variance of the weighted total sum(w * x)."""
    z = np.asarray(weights, dtype=float) * np.asarray(values, dtype=float)
    n = z.size
    if n < 2:
        raise MarginError("variance needs at least two units")
    return float(n / (n - 1) * np.sum((z - z.sum() / n) ** 2))


def weighted_hot_deck(column: np.ndarray, weights: np.ndarray, fill: np.ndarray,
                      rng: np.random.Generator, donors: np.ndarray | None = None) -> np.ndarray:
    """Fill ``column[fill]`` with values of donors drawn with probability
    proportional to weight.  Donors default to the observed cells."""
    out = np.array(column, copy=True)
    if donors is None:
        donors = out != MISSING
    donors = donors & ~fill
    if not fill.any():
        return out
    idx = np.flatnonzero(donors)
    if idx.size == 0:
        raise MarginError("hot-deck has no donors")
    p = np.asarray(weights, dtype=float)[idx]
    p = p / p.sum() if p.sum() > 0 else None
    out[fill] = out[rng.choice(idx, size=int(fill.sum()), p=p)]
    return out


def estimate_constraint_variance(ds: SurveyDataset, variable: str, rng: np.random.Generator,
                                 *, v_min_fraction: float = V_MIN_FRACTION) -> np.ndarray:
    """Design-based variance of the respondent-estimated total, per non-baseline level.

    Item-missing cells of ``variable`` are filled once by a weighted hot-deck
    among observed respondents.  Respondent weights are rescaled to the total
    of all analysis weights, so that they estimate population totals on their
    own, before applying the with-replacement variance formula.  The result is
    floored at ``(v_min_fraction * N)**2``.
    """
    k = ds.index(variable)
    resp = ~ds.unit_nr
    col = ds.cells[resp, k]
    w = np.asarray(ds.weights, dtype=float)
    wr = w[resp]
    if wr.sum() <= 0:
        raise MarginError("respondent weights must be constructed before estimating V")
    observed = col != MISSING
    if not observed.any():
        raise MarginError(f"no observed values of {variable!r} to estimate V from")
    filled = weighted_hot_deck(col, wr, ~observed, rng)
    scale = w.sum() / wr.sum()
    d = ds.variables[k].n_levels
    floor = (v_min_fraction * ds.N) ** 2
    V = np.array([ht_variance_wr(filled == lev, wr * scale) for lev in range(1, d)])
    return np.maximum(V, floor)


def resolve_variances(margins, ds: SurveyDataset, rng: np.random.Generator,
                      *, v_min_fraction: float = V_MIN_FRACTION):
    """Return margins with every missing V estimated from ``ds``."""
    out = {}
    for name, m in margins.items():
        if m.variances is None:
            m = m.with_variances(estimate_constraint_variance(ds, name, rng,
                                                              v_min_fraction=v_min_fraction))
        m.check_population(ds.N)
        out[name] = m
    return out


# -- target counts -------------------------------------------------------------

@dataclass
class Allocation:
    """Counts of unit nonrespondents per level (baseline first)."""

    counts: np.ndarray
    clamped_low: int = 0
    clamped_high: int = 0
    repaired: bool = False

    @property
    def clamped(self) -> bool:
        return bool(self.clamped_low or self.clamped_high)


def allocate_counts(drawn_totals, respondent_sums, w_u: float, n_u: int) -> Allocation:
    """Target counts of nonrespondents for every non-baseline level at once.

    Each level gets floor((T-hat - respondent sum) / w_u) clamped to
    [0, n_u]; the baseline takes what is left.  If the non-baseline counts
    already exceed n_u they are re-apportioned by largest remainder.
    """
    if not w_u > 0:
        raise MarginError("nonrespondent weight must be positive")
    drawn = np.atleast_1d(np.asarray(drawn_totals, dtype=float))
    raw = (drawn - np.atleast_1d(np.asarray(respondent_sums, dtype=float))) / w_u
    low = int((raw < 0).sum())
    high = int((raw > n_u).sum())
    raw = np.clip(raw, 0.0, n_u)
    counts = np.floor(raw).astype(np.int64)
    repaired = False
    if counts.sum() > n_u:
        repaired = True
        share = raw / raw.sum() * n_u
        counts = np.floor(share).astype(np.int64)
        left = n_u - counts.sum()
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:left]] += 1
    full = np.concatenate([[n_u - counts.sum()], counts])
    return Allocation(full, low, high, repaired)


def target_count(draw: MarginDraw, ds: SurveyDataset, variable: str, level: int = 1) -> int:
    """n_{lU} for one level, computed from the current cells and weights of ``ds``.

    All unit nonrespondents must share one weight.
    """
    k = ds.index(variable)
    u = ds.unit_nr
    n_u = int(u.sum())
    w = np.asarray(ds.weights, dtype=float)
    if n_u == 0:
        return 0
    w_u = float(w[u][0])
    if not np.allclose(w[u], w_u):
        raise MarginError("unit nonrespondents must share a common weight")
    d = ds.variables[k].n_levels
    col = ds.cells[:, k]
    sums = np.array([w[~u & (col == lev)].sum() for lev in range(1, d)])
    return int(allocate_counts(draw.totals, sums, w_u, n_u).counts[level])


def clamp_proportions(counts, n_u: int) -> np.ndarray:
    """Level shares counts / n_u kept inside [0.5/n_u, 1 - 0.5/n_u]."""
    counts = np.asarray(counts, dtype=float)
    lo = 0.5 / n_u
    p = np.clip(counts / n_u, lo, 1 - lo)
    if p.size > 2:
        # renormalize without pushing any level back under the floor
        for _ in range(p.size):
            excess = p.sum() - 1
            big = p > lo
            if abs(excess) < 1e-15 or not big.any():
                break
            p[big] -= excess * p[big] / p[big].sum()
            p = np.maximum(p, lo)
    return p


# -- intercept offsets ------------------------------------------------------------

def solve_intercept_offset(eta, target, weights=None, *, rule: str = "probability"):
    """Offset(s) delta with which the nonrespondents' average predicted
    probabilities equal ``target``.

    Parameters
    ----------
    eta : (m,) or (m, d-1) array
        Linear predictors of the nonrespondent rows under the drawn
        coefficients; 1-d means a Bernoulli model.
    target : float or (d,) array
        Target share of level 1 (Bernoulli) or of every level (multinomial,
        baseline first).
    weights : optional (m,) row multiplicities, e.g. pattern counts.
    rule : ``"probability"`` matches average probabilities exactly;
        ``"linear"`` sets delta = logit(target) - mean(eta) instead.
    """
    eta = np.asarray(eta, dtype=float)
    w = np.ones(eta.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if eta.shape[0] == 0 or w.sum() <= 0:
        raise OffsetError("no nonrespondent rows to match")
    w = w / w.sum()
    if eta.ndim == 1:
        return _offset_binary(eta, float(np.atleast_1d(target)[-1]), w, rule)
    return _offset_multi(eta, np.asarray(target, dtype=float), w, rule)


def _offset_binary(eta, p, w, rule):
    if not 0 < p < 1:
        raise OffsetError(f"target share {p} must lie strictly inside (0, 1)")
    start = logit(p) - w @ eta
    if rule == "linear":
        return float(start)

    def gap(delta):
        return w @ expit(eta + delta) - p

    lo = logit(p) - eta.max() - 1.0
    hi = logit(p) - eta.min() + 1.0
    delta = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(gap(delta)) > OFFSET_TOL:
        raise OffsetError("offset root not found", {"target": p, "gap": gap(delta)})
    return float(delta)


def _offset_multi(eta, p, w, rule):
    d = eta.shape[1] + 1
    if p.size != d or (p <= 0).any() or abs(p.sum() - 1) > 1e-9:
        raise OffsetError("multinomial target must give a positive share to every level")
    delta = np.log(p[1:] / p[0]) - w @ eta
    if rule == "linear":
        return delta

    # gradient of the convex F(delta) = sum w logsumexp([0, eta + delta]) - p[1:] @ delta
    def probs(dl):
        z = np.column_stack([np.zeros(eta.shape[0]), eta + dl])
        return np.exp(z - logsumexp(z, axis=1, keepdims=True))

    def F(dl):
        z = np.column_stack([np.zeros(eta.shape[0]), eta + dl])
        return w @ logsumexp(z, axis=1) - p[1:] @ dl

    val = F(delta)
    for it in range(OFFSET_MAX_ITER):
        P = probs(delta)[:, 1:]
        g = w @ P - p[1:]
        if np.max(np.abs(g)) <= OFFSET_TOL * 1e-2:
            return delta
        H = np.diag(w @ P) - (P * w[:, None]).T @ P
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while t > 1e-10:
            cand = delta - t * step
            cval = F(cand)
            if cval <= val + 1e-15:
                break
            t *= 0.5
        delta, val = cand, cval
    g = w @ probs(delta)[:, 1:] - p[1:]
    if np.max(np.abs(g)) > OFFSET_TOL:
        raise OffsetError("multinomial offset Newton did not converge",
                          {"target": p.tolist(), "gap": g.tolist(), "iterations": OFFSET_MAX_ITER})
    return delta
