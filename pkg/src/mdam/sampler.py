"""Intercept-matching sampler for hybrid-missingness models.

The joint model is a sequence of conditional logit models.  Survey variables
are modeled given U (pattern mixture), with a U offset only for variables
backed by an auxiliary margin.  Item-nonresponse indicators are modeled given
the other survey variables (selection models that never use the variable's
own value).

Every model sees its data through covariate patterns: rows are collapsed to
counts per (pattern, outcome) before fitting, and fitted probabilities are
tabulated per pattern, so a scan costs a few bincounts and small Newton solves
regardless of n.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import MISSING, CsvSchema, SurveyDataset, VariableDef, load_csv, write_csv
from .glm import (
    RIDGE,
    DrawError,
    FitError,
    FittedCoefficients,
    TermSpec,
    draw_coefficients,
    expand_design,
    fit_counts,
    normal_factor,
)
from .margins import (
    MarginError,
    OffsetError,
    allocate_counts,
    clamp_proportions,
    margin_draw,
    resolve_variances,
    solve_intercept_offset,
)

MAX_PATTERNS = 200_000
FORMAT = "mdam-imputations/1"


class SpecError(ValueError):
    """The model specification is inconsistent with itself or the data."""


class ChainError(RuntimeError):
    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"chain aborted at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


# -- specification -------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeModel:
    """Model for one survey variable given earlier variables (and U)."""

    variable: str
    terms: TermSpec = TermSpec()
    has_U_offset: bool = False
    family: str | None = None


@dataclass(frozen=True)
class ItemModel:
    """Logistic model for the item-nonresponse indicator of ``variable``."""

    variable: str
    terms: TermSpec = TermSpec()


@dataclass(frozen=True)
class StructuralRule:
    """Whenever ``trigger`` is item-missing, ``forced`` is item-missing too."""

    trigger: str
    forced: str


@dataclass(frozen=True)
class MeasurementErrorSpec:
    """Over-reporting of a binary variable, stratified by ``stratum``.

    The data column of ``variable`` holds the reported value Z; the sampler
    works with the latent true value in the same column.  A true 1 is always
    reported as 1; a true 0 is reported as 1 with probability theta_c in
    stratum level c, where theta_c ~ Beta(a_c, b_c) a priori.
    """

    variable: str
    stratum: str
    priors: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pri = tuple((float(a), float(b)) for a, b in self.priors)
        if any(a <= 0 or b <= 0 for a, b in pri):
            raise SpecError("Beta prior parameters must be positive")
        object.__setattr__(self, "priors", pri)

    @property
    def prior_means(self) -> np.ndarray:
        return np.array([a / (a + b) for a, b in self.priors])


@dataclass(frozen=True)
class SamplerControls:
    iterations: int = 10_000
    burnin: int = 5_000
    thin: int = 100
    refit_every: int = 1
    offset_rule: str = "probability"
    ridge: float = RIDGE
    weighted_fits: bool = False
    keep_trace: bool = True
    diagnostics: bool = True

    def __post_init__(self):
        if not (0 <= self.burnin < self.iterations) or self.thin < 1 or self.refit_every < 1:
            raise SpecError("need 0 <= burnin < iterations, thin >= 1 and refit_every >= 1")
        if self.offset_rule not in ("probability", "linear"):
            raise SpecError(f"unknown offset rule {self.offset_rule!r}")

    @property
    def L(self) -> int:
        return (self.iterations - self.burnin) // self.thin

    @classmethod
    def desk(cls, **kw) -> "SamplerControls":
        """Short chains for tests and laptops: 2000 iterations, 1000 burn-in, thin 20."""
        return cls(**{"iterations": 2000, "burnin": 1000, "thin": 20, **kw})


@dataclass(frozen=True)
class ModelSpec:
    """The whole sequence of models plus sampler settings.

    ``outcomes`` is the factorization order; each outcome model may only use
    variables that come earlier.  ``item_order`` sets the order in which
    item-missing cells are redrawn; by default variables with lower item
    nonresponse rates go first.
    """

    outcomes: tuple[OutcomeModel, ...]
    items: tuple[ItemModel, ...] = ()
    rules: tuple[StructuralRule, ...] = ()
    measurement_error: MeasurementErrorSpec | None = None
    controls: SamplerControls = SamplerControls()
    item_order: tuple[str, ...] | None = None

    def outcome(self, name: str) -> OutcomeModel:
        for m in self.outcomes:
            if m.variable == name:
                return m
        raise KeyError(name)

    @property
    def margin_variables(self) -> list[str]:
        return [m.variable for m in self.outcomes if m.has_U_offset]

    def to_dict(self) -> dict:
        out = {
            "outcomes": [{"variable": m.variable, "family": m.family, "terms": m.terms.formula(),
                          "U_offset": m.has_U_offset} for m in self.outcomes],
            "item_models": [{"variable": m.variable, "terms": m.terms.formula()} for m in self.items],
            "structural_rules": [{"trigger": r.trigger, "forced": r.forced} for r in self.rules],
            "measurement_error": None,
            "controls": {k: getattr(self.controls, k) for k in SamplerControls.__dataclass_fields__},
            "item_order": list(self.item_order) if self.item_order else None,
        }
        me = self.measurement_error
        if me is not None:
            out["measurement_error"] = {"variable": me.variable, "stratum": me.stratum,
                                        "priors": [list(p) for p in me.priors]}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            outcomes = tuple(
                OutcomeModel(o["variable"], TermSpec.parse(o.get("terms", "I")),
                             bool(o.get("U_offset", False)), o.get("family"))
                for o in d["outcomes"]
            )
            items = tuple(ItemModel(i["variable"], TermSpec.parse(i.get("terms", "I")))
                          for i in d.get("item_models", ()))
            rules = tuple(StructuralRule(r["trigger"], r["forced"])
                          for r in d.get("structural_rules", ()))
            me = d.get("measurement_error")
            me = (MeasurementErrorSpec(me["variable"], me["stratum"], tuple(map(tuple, me["priors"])))
                  if me else None)
            controls = SamplerControls(**d.get("controls", {}))
        except (KeyError, TypeError) as err:
            raise SpecError(f"malformed model specification: {err!r}") from None
        order = d.get("item_order")
        return cls(outcomes, items, rules, me, controls, tuple(order) if order else None)

    def model_hash(self) -> str:
        """Content hash of the model structure (controls excluded)."""
        d = self.to_dict()
        d.pop("controls")
        for o in d["outcomes"]:
            o.pop("family")  # implied by the data
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_controls(self, **kw) -> "ModelSpec":
        return replace(self, controls=replace(self.controls, **kw))


def validate_spec(spec: ModelSpec, ds: SurveyDataset, margins: dict | None = None,
                  *, icin: bool = False) -> ModelSpec:
    """Check ``spec`` against the data and margins; return it with families filled in.

    Raises SpecError naming the offending variable.
    """
    names = ds.names
    levels = {v.name: v.n_levels for v in ds.variables}
    seen: list[str] = []
    outcomes = []
    for m in spec.outcomes:
        if m.variable not in levels:
            raise SpecError(f"outcome model for unknown variable {m.variable!r}")
        if m.variable in seen:
            raise SpecError(f"two outcome models for {m.variable!r}")
        for v in m.terms.variables:
            if v not in levels:
                raise SpecError(f"model for {m.variable!r} uses unknown variable {v!r}")
            if v not in seen:
                raise SpecError(f"model for {m.variable!r} uses {v!r}, which is not modeled earlier")
        fam = "bernoulli" if levels[m.variable] == 2 else "multinomial"
        if m.family is not None and m.family != fam:
            raise SpecError(f"{m.variable!r} has {levels[m.variable]} levels; family must be {fam!r}")
        if ds.variable(m.variable).role == "X" and not m.has_U_offset:
            raise SpecError(f"margin-backed variable {m.variable!r} needs a U offset")
        outcomes.append(replace(m, family=fam))
        seen.append(m.variable)
    missing = [v for v in names if v not in seen]
    if missing:
        raise SpecError(f"no outcome model for {missing}")
    R = ds.item_missing()
    with_items = {m.variable for m in spec.items}
    for m in spec.items:
        if m.variable not in levels:
            raise SpecError(f"item model for unknown variable {m.variable!r}")
        if m.variable in m.terms.variables:
            raise SpecError(f"item model for {m.variable!r} may not use {m.variable!r} itself")
        for v in m.terms.variables:
            if v not in levels:
                raise SpecError(f"item model for {m.variable!r} uses unknown variable {v!r}")
    for k, name in enumerate(names):
        if R[:, k].any() and name not in with_items:
            raise SpecError(f"{name!r} has item nonresponse but no item model")
    for r in spec.rules:
        if r.trigger not in levels or r.forced not in levels:
            raise SpecError(f"structural rule refers to unknown variables: {r}")
        if r.forced not in with_items:
            raise SpecError(f"structural rule forces {r.forced!r}, which has no item model")
        bad = R[:, ds.index(r.trigger)] & ~R[:, ds.index(r.forced)]
        if bad.any():
            raise SpecError(f"data break the rule '{r.trigger} missing => {r.forced} missing' "
                            f"in {int(bad.sum())} rows")
    me = spec.measurement_error
    if me is not None:
        for v in (me.variable, me.stratum):
            if v not in levels:
                raise SpecError(f"measurement-error block uses unknown variable {v!r}")
        if levels[me.variable] != 2:
            raise SpecError(f"measurement error needs a binary variable, not {me.variable!r}")
        if len(me.priors) != levels[me.stratum]:
            raise SpecError(f"need one Beta prior per level of {me.stratum!r}")
    if spec.item_order is not None:
        need = {names[k] for k in range(len(names)) if R[:, k].any()}
        if not need <= set(spec.item_order):
            raise SpecError(f"item_order must list every item-missing variable: {sorted(need)}")
    if not icin:
        margins = margins or {}
        for m in outcomes:
            if m.has_U_offset and m.variable not in margins:
                raise SpecError(f"no auxiliary margin for {m.variable!r}, which has a U offset")
            if m.has_U_offset and margins[m.variable].n_levels != levels[m.variable]:
                raise SpecError(f"margin for {m.variable!r} needs one total per non-baseline level")
    return replace(spec, outcomes=tuple(outcomes))


# -- pattern machinery -----------------------------------------------------------

class _Patterns:
    """Mixed-radix codes for the joint levels of a model's predictors."""

    def __init__(self, variables, terms: TermSpec):
        index = {v.name: k for k, v in enumerate(variables)}
        self.cols = np.array([index[v] for v in terms.variables], dtype=np.intp)
        radix = [variables[c].n_levels for c in self.cols]
        self.mult = np.cumprod([1] + radix[:-1]).astype(np.int64) if radix else np.zeros(0, np.int64)
        self.size = int(np.prod(radix)) if radix else 1
        if self.size > MAX_PATTERNS:
            raise SpecError(f"model over {terms.variables} has too many covariate patterns")
        grid = np.zeros((self.size, len(variables)), dtype=np.int64)
        codes = np.arange(self.size)
        for c, m, r in zip(self.cols, self.mult, radix):
            grid[:, c] = (codes // m) % r
        self.X = expand_design(grid, variables, terms)
        # a square design means one free parameter per pattern
        self.saturated = self.X.shape[0] == self.X.shape[1]
        self.X_inv = np.linalg.inv(self.X) if self.saturated else None

    def codes(self, cells: np.ndarray) -> np.ndarray:
        if self.cols.size == 0:
            return np.zeros(cells.shape[0], dtype=np.int64)
        return cells[:, self.cols] @ self.mult

    def mult_of(self, col: int) -> int:
        hit = np.flatnonzero(self.cols == col)
        return int(self.mult[hit[0]]) if hit.size else 0


class _Model:
    def __init__(self, key: str, kind: str, col: int | None, d: int, patterns: _Patterns):
        self.key = key
        self.kind = kind
        self.col = col
        self.d = d
        self.pat = patterns
        self.fit: FittedCoefficients | None = None
        self.factor = None
        self.coef: np.ndarray | None = None
        self.logtab: np.ndarray | None = None

    def refit(self, codes, y, w, ridge):
        d, P = self.d, self.pat.size
        tab = np.bincount(codes * d + y, weights=w, minlength=P * d).reshape(P, d)
        if self.pat.saturated and (tab > 0).all():
            self.fit, self.factor = _saturated_fit(self.pat, tab)
            return self.fit
        start = None if self.fit is None else self.fit.coef
        try:
            fc = fit_counts(self.pat.X, tab, start=start, ridge=ridge)
        except FitError as err:
            raise FitError(f"model {self.key}: {err}") from None
        if not fc.converged:
            raise FitError(f"model {self.key} did not converge")
        self.fit = fc
        self.factor = normal_factor(fc.cov)
        return fc

    def draw(self, rng):
        self.coef = draw_coefficients(self.fit, rng, factor=self.factor)
        self.logtab = self.table(self.coef)
        return self.coef

    def eta(self, coef, rows=None) -> np.ndarray:
        X = self.pat.X if rows is None else self.pat.X[rows]
        B = np.asarray(coef).reshape(self.d - 1, -1).T
        return X @ B

    def table(self, coef, offset=None) -> np.ndarray:
        """Log-probabilities (patterns, levels) under ``coef`` (+ offset)."""
        eta = self.eta(coef)
        if offset is not None:
            eta = eta + np.asarray(offset)
        return _log_probs(eta)


def _saturated_fit(pat: _Patterns, tab: np.ndarray):
    """Closed-form MLE when every pattern has its own parameters and every
    (pattern, level) cell is occupied: the fitted log-odds are the empirical ones.

    Returns the fit and a square-root factor of its covariance.
    """
    P, d = tab.shape
    logit_emp = np.log(tab[:, 1:]) - np.log(tab[:, :1])
    Xi = pat.X_inv
    B = Xi @ logit_emp
    p = Xi.shape[0]
    m = d - 1
    cov = np.empty((m * p, m * p))
    inv0 = 1.0 / tab[:, 0]
    for a in range(m):
        for b in range(a, m):
            c = inv0 + (1.0 / tab[:, a + 1] if a == b else 0.0)
            blk = (Xi * c) @ Xi.T
            cov[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
            cov[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
    logp = _log_probs(logit_emp)
    fc = FittedCoefficients(B.T.ravel(), cov, float(np.sum(tab * logp)), True, False, 0, d)
    # binary case: cov = Xi diag(c) Xi', so Xi diag(sqrt c) is a factor
    factor = Xi * np.sqrt(inv0 + 1.0 / tab[:, 1]) if m == 1 else normal_factor(cov)
    return fc, factor


def _log_probs(eta: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of [0, eta]."""
    if eta.shape[1] == 1:
        l0 = -np.logaddexp(0.0, eta)
        return np.hstack([l0, eta + l0])
    z = np.hstack([np.zeros((eta.shape[0], 1)), eta])
    mx = z.max(axis=1, keepdims=True)
    return z - (mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True)))


def _draw_categorical(logp: np.ndarray, rng) -> np.ndarray:
    if logp.shape[1] == 2:
        return (rng.random(logp.shape[0]) < np.exp(logp[:, 1])).astype(np.int64)
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    c = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * c[:, -1]
    return np.minimum((c < u[:, None]).sum(axis=1), p.shape[1] - 1)


# -- state -------------------------------------------------------------------------

@dataclass
class SamplerState:
    """Current completed data and parameter draws of one chain.

    Working cells are held as two contiguous blocks, unit respondents
    (``cells_r``) and unit nonrespondents (``cells_u``); ``cells`` reassembles
    them in dataset row order.
    """

    iteration: int
    cells_r: np.ndarray
    cells_u: np.ndarray
    coefs: dict
    offsets: dict
    theta: np.ndarray | None
    counters: Counter = field(default_factory=Counter)
    context: "_Context | None" = field(default=None, repr=False)

    @property
    def cells(self) -> np.ndarray:
        ctx = self.context
        out = np.empty((ctx.ds.n, ctx.K), dtype=np.int64)
        out[ctx.resp_idx] = self.cells_r
        out[ctx.nr_idx] = self.cells_u
        return out

    def completed(self) -> SurveyDataset:
        return self.context.ds.with_cells(self.cells)

    def params(self) -> dict:
        return {
            "coef": {k: v.copy() for k, v in self.coefs.items()},
            "offset": {k: np.array(v, dtype=float).copy() for k, v in self.offsets.items()},
            "theta": None if self.theta is None else self.theta.copy(),
        }


class _Context:
    """Everything about a chain that does not change between scans."""

    def __init__(self, ds: SurveyDataset, spec: ModelSpec, margins: dict | None, icin: bool):
        self.ds = ds
        self.spec = spec
        self.icin = icin
        self.margins = {} if icin else dict(margins or {})
        self.ctrl = spec.controls
        V = ds.variables
        self.K = len(V)
        U = ds.unit_nr
        self.resp_idx = np.flatnonzero(~U)
        self.nr_idx = np.flatnonzero(U)
        self.pos = np.full(ds.n, -1, dtype=np.intp)
        self.pos[self.resp_idx] = np.arange(self.resp_idx.size)
        self.n_r = self.resp_idx.size
        self.n_u = self.nr_idx.size
        self.Rr = ds.item_missing()[self.resp_idx]
        w = np.asarray(ds.weights, dtype=float)
        self.w = w
        self.w_r = w[self.resp_idx]
        self.fit_w = self.w_r if self.ctrl.weighted_fits else None
        self.w_u = None
        if not icin and self.n_u and spec.margin_variables:
            wu = w[self.nr_idx]
            if not (wu[0] > 0 and np.allclose(wu, wu[0], rtol=1e-12)):
                raise SpecError("unit nonrespondents need one common positive weight; "
                                "construct weights first")
            self.w_u = float(wu[0])
        self.unit = _Model("U", "unit", None, 2, _Patterns(V, TermSpec()))
        self.unit_y = U.astype(np.int64)
        self.outcomes = [
            _Model(m.variable, "outcome", ds.index(m.variable), V[ds.index(m.variable)].n_levels,
                   _Patterns(V, m.terms))
            for m in spec.outcomes
        ]
        self.offset_flags = {m.variable: m.has_U_offset for m in spec.outcomes}
        self.by_col = {m.col: m for m in self.outcomes}
        self.items = [_Model("R:" + m.variable, "item", ds.index(m.variable), 2, _Patterns(V, m.terms))
                      for m in spec.items]
        forced = {m.col: np.zeros(self.n_r, dtype=bool) for m in self.items}
        for r in spec.rules:
            forced[ds.index(r.forced)] |= self.Rr[:, ds.index(r.trigger)]
        self.forced = forced
        # respondent rows entering each item model's likelihood (None = all)
        self.item_rows = {c: (np.flatnonzero(~f) if f.any() else None) for c, f in forced.items()}
        self.item_y = {m.col: self.Rr[:, m.col].astype(np.int64) for m in self.items}
        self.dependents = {k: [m for m in self.outcomes + self.items if k in m.pat.cols]
                           for k in range(self.K)}
        rates = self.Rr.mean(axis=0) if self.n_r else np.zeros(self.K)
        if spec.item_order:
            order = [ds.index(v) for v in spec.item_order]
        else:
            pos = {m.col: i for i, m in enumerate(self.outcomes)}
            order = sorted(range(self.K), key=lambda k: (rates[k], pos[k]))
        self.item_order = [k for k in order if self.Rr[:, k].any()]
        self.missing_rows = {k: np.flatnonzero(self.Rr[:, k]) for k in self.item_order}
        me = spec.measurement_error
        self.me = me
        if me is not None:
            self.me_col = ds.index(me.variable)
            self.me_stratum = ds.index(me.stratum)
            obs = ~self.Rr[:, self.me_col]
            self.z_rows = np.flatnonzero(obs)
            self.z = ds.cells[self.resp_idx[self.z_rows], self.me_col].astype(np.int64)
            # reported value per respondent row, -1 where unreported
            self.z_full = np.full(self.n_r, -1, dtype=np.int64)
            self.z_full[self.z_rows] = self.z
            self.prior_a = np.array([a for a, _ in me.priors])
            self.prior_b = np.array([b for _, b in me.priors])

    def fit_rows(self, cells_r, m: _Model):
        rows = self.item_rows[m.col]
        if rows is None:
            return cells_r, self.item_y[m.col], (self.w_r if self.ctrl.weighted_fits else None)
        w = self.w_r[rows] if self.ctrl.weighted_fits else None
        return cells_r[rows], self.item_y[m.col][rows], w


# -- initialization ------------------------------------------------------------------

def _hot_deck_init(ctx: _Context, cells, rng):
    """Fill item-missing respondent cells (in place) from donors that share
    the values of the variable's earlier-ordered predictors, falling back to
    all donors when that cell of the table is empty."""
    w = np.where(ctx.w_r > 0, ctx.w_r, 1.0)
    for m in ctx.outcomes:
        k = m.col
        miss = cells[:, k] == MISSING
        if not miss.any():
            continue
        donors = ~miss
        if not donors.any():
            raise SpecError(f"cannot initialize {m.key!r}: no respondent observes it")
        codes = m.pat.codes(np.where(cells == MISSING, 0, cells))
        for code in np.unique(codes[miss]):
            targets = np.flatnonzero(miss & (codes == code))
            pool = np.flatnonzero(donors & (codes == code))
            if pool.size == 0:
                pool = np.flatnonzero(donors)
            p = w[pool] / w[pool].sum()
            cells[targets, k] = cells[rng.choice(pool, size=targets.size, p=p), k]


def init_state(ds: SurveyDataset, spec: ModelSpec, rng: np.random.Generator, *,
               margins: dict | None = None, icin: bool = False) -> SamplerState:
    """Starting values: MAR hot-deck for item-missing cells, respondent-model
    draws for unit nonrespondents, then maximum-likelihood fits on the
    completed respondents."""
    spec = validate_spec(spec, ds, margins, icin=icin)
    ctx = _Context(ds, spec, margins, icin)
    cr = np.array(ds.cells[ctx.resp_idx], dtype=np.int64)
    cu = np.zeros((ctx.n_u, ctx.K), dtype=np.int64)
    _hot_deck_init(ctx, cr, rng)
    ridge = ctx.ctrl.ridge
    try:
        ctx.unit.refit(np.zeros(ds.n, np.int64), ctx.unit_y, None, ridge)
        ctx.unit.coef = ctx.unit.fit.coef.copy()
        for m in ctx.outcomes:
            m.refit(m.pat.codes(cr), cr[:, m.col], ctx.fit_w, ridge)
            m.coef = m.fit.coef.copy()
            m.logtab = m.table(m.coef)
            if ctx.n_u:
                cu[:, m.col] = _draw_categorical(m.logtab[m.pat.codes(cu)], rng)
        for m in ctx.items:
            c, y, w = ctx.fit_rows(cr, m)
            m.refit(m.pat.codes(c), y, w, ridge)
            m.coef = m.fit.coef.copy()
            m.logtab = m.table(m.coef)
    except FitError as err:
        raise SpecError(f"initial fit failed: {err}") from None
    theta = ctx.me.prior_means if ctx.me is not None else None
    coefs = {"U": ctx.unit.coef.copy()}
    coefs.update({m.key: m.coef.copy() for m in ctx.outcomes})
    coefs.update({m.key: m.coef.copy() for m in ctx.items})
    offsets = {m.key: np.zeros(m.d - 1) for m in ctx.outcomes if ctx.offset_flags[m.key] and not icin}
    return SamplerState(0, cr, cu, coefs, offsets, theta, Counter(), ctx)


# -- one scan ---------------------------------------------------------------------------

def _unit_nr_update(ctx: _Context, st: SamplerState, m: _Model, rng, diag):
    cu = st.cells_u
    k = m.col
    codes_u = m.pat.codes(cu)
    if ctx.icin or not ctx.offset_flags[m.key]:
        cu[:, k] = _draw_categorical(m.logtab[codes_u], rng)
        return
    draw = margin_draw(ctx.margins[m.key], rng, st.iteration)
    sums = np.bincount(st.cells_r[:, k], weights=ctx.w_r, minlength=m.d)[1:]
    alloc = allocate_counts(draw.totals, sums, ctx.w_u, ctx.n_u)
    if alloc.clamped:
        st.counters[f"clamp:{m.key}"] += 1
    if alloc.repaired:
        st.counters[f"repair:{m.key}"] += 1
    p = clamp_proportions(alloc.counts, ctx.n_u)
    pc = np.bincount(codes_u, minlength=m.pat.size)
    used = np.flatnonzero(pc)
    eta = m.eta(m.coef, used)
    if m.d == 2:
        delta = np.atleast_1d(solve_intercept_offset(eta[:, 0], p[1], pc[used],
                                                     rule=ctx.ctrl.offset_rule))
    else:
        delta = solve_intercept_offset(eta, p, pc[used], rule=ctx.ctrl.offset_rule)
    st.offsets[m.key] = delta
    cu[:, k] = _draw_categorical(m.table(m.coef, delta)[codes_u], rng)
    if diag is not None:
        t = st.iteration
        for j, v in enumerate(delta, start=1):
            diag.append((t, f"offset:{m.key}[{j}]", float(v)))
        for j in range(1, m.d):
            diag.append((t, f"target:{m.key}[{j}]", int(alloc.counts[j])))
        diag.append((t, f"clamped:{m.key}", int(alloc.clamped)))


def full_conditional(state: SamplerState, variable: str, rows) -> np.ndarray:
    """Probabilities (rows, levels) of the full conditional of ``variable``
    for unit-respondent ``rows`` (dataset row numbers) under the current
    parameter draws."""
    ctx = state.context
    k = ctx.ds.index(variable)
    pos = ctx.pos[np.asarray(rows, dtype=np.intp)]
    if (pos < 0).any():
        raise ValueError("full conditionals are defined for unit respondents only")
    return np.exp(_log_conditional(ctx, state, k, pos))


def _log_conditional(ctx: _Context, st: SamplerState, k: int, rows: np.ndarray) -> np.ndarray:
    C = st.cells_r[rows]
    C[:, k] = 0
    d = ctx.ds.variables[k].n_levels
    own = ctx.by_col[k]
    logp = own.logtab[own.pat.codes(C)].copy()
    span = np.arange(d)[None, :]
    for m in ctx.dependents[k]:
        idx = m.pat.codes(C)[:, None] + m.pat.mult_of(k) * span
        if m.kind == "outcome":
            logp += m.logtab[idx, C[:, m.col][:, None]]
        else:
            contrib = m.logtab[idx, ctx.item_y[m.col][rows][:, None]]
            if ctx.item_rows[m.col] is not None:
                contrib[ctx.forced[m.col][rows]] = 0.0
            logp += contrib
    if ctx.me is not None and k == ctx.me_stratum:
        z = ctx.z_full[rows]
        hit = (z >= 0) & (C[:, ctx.me_col] == 0)
        with np.errstate(divide="ignore"):
            lt, l1t = np.log(st.theta), np.log1p(-st.theta)
        fac = np.where(z[:, None] == 1, lt[None, :], l1t[None, :])
        logp += np.where(hit[:, None], fac, 0.0)
    mx = logp.max(axis=1, keepdims=True)
    return logp - (mx + np.log(np.exp(logp - mx).sum(axis=1, keepdims=True)))


def true_one_probability(pi, theta):
    """P(V=1 | Z=1) when V=1 is always reported and a true 0 is reported as 1
    with probability ``theta``; ``pi`` is the model probability of V=1."""
    pi = np.asarray(pi, dtype=float)
    return pi / (pi + np.asarray(theta, dtype=float) * (1 - pi))


def _measurement_error_update(ctx: _Context, st: SamplerState, rng):
    cr = st.cells_r
    rows = ctx.z_rows
    v = cr[rows, ctx.me_col]
    c = cr[rows, ctx.me_stratum]
    z = ctx.z
    nc = ctx.prior_a.size
    a = ctx.prior_a + np.bincount(c[(z == 1) & (v == 0)], minlength=nc)
    b = ctx.prior_b + np.bincount(c[(z == 0) & (v == 0)], minlength=nc)
    st.theta = rng.beta(a, b)
    vm = ctx.by_col[ctx.me_col]
    pi = np.exp(vm.logtab[vm.pat.codes(cr[rows]), 1])
    p_true = true_one_probability(pi, st.theta[c])
    u = rng.random(z.size)
    cr[rows, ctx.me_col] = np.where(z == 1, (u < p_true).astype(np.int64), 0)


def update_measurement_error(state: SamplerState, spec: ModelSpec, rng: np.random.Generator):
    """Redraw the misreporting rates, then the latent values of reported 1s."""
    if state.context.me is None:
        raise SpecError("no measurement-error block in the specification")
    _measurement_error_update(state.context, state, rng)
    return state


def step(state: SamplerState, ds: SurveyDataset | None = None, spec: ModelSpec | None = None,
         margins: dict | None = None, rng: np.random.Generator | None = None,
         diagnostics: list | None = None) -> SamplerState:
    """One full scan; updates ``state`` in place and returns it.

    ``ds``, ``spec`` and ``margins`` are fixed when the state is initialized
    and only accepted here for symmetry with :func:`init_state`.
    """
    if rng is None:
        raise ValueError("rng is required")
    ctx = state.context
    st = state
    st.iteration += 1
    t = st.iteration
    refit = (t - 1) % ctx.ctrl.refit_every == 0
    ridge = ctx.ctrl.ridge
    cr = st.cells_r
    try:
        if refit:
            ctx.unit.refit(np.zeros(ctx.ds.n, np.int64), ctx.unit_y, None, ridge)
        st.coefs["U"] = ctx.unit.draw(rng)
        for m in ctx.outcomes:
            if refit:
                m.refit(m.pat.codes(cr), cr[:, m.col], ctx.fit_w, ridge)
            st.coefs[m.key] = m.draw(rng)
            if ctx.n_u:
                _unit_nr_update(ctx, st, m, rng, diagnostics)
        for m in ctx.items:
            if refit:
                c, y, w = ctx.fit_rows(cr, m)
                m.refit(m.pat.codes(c), y, w, ridge)
            st.coefs[m.key] = m.draw(rng)
        for k in ctx.item_order:
            rows = ctx.missing_rows[k]
            cr[rows, k] = _draw_categorical(_log_conditional(ctx, st, k, rows), rng)
        if ctx.me is not None:
            _measurement_error_update(ctx, st, rng)
    except (FitError, DrawError, OffsetError, MarginError) as err:
        raise ChainError(t, err) from err
    if refit:
        for m in ctx.outcomes + ctx.items:
            if m.fit.ridge_used:
                st.counters[f"ridge:{m.key}"] += 1
    if diagnostics is not None:
        for name, marg in ctx.margins.items():
            k = ctx.ds.index(name)
            tot = np.bincount(cr[:, k], weights=ctx.w_r, minlength=marg.n_levels)
            if ctx.n_u:
                tot = tot + ctx.w_u * np.bincount(st.cells_u[:, k], minlength=marg.n_levels)
            for j in range(1, marg.n_levels):
                diagnostics.append((t, f"total:{name}[{j}]", float(tot[j])))
        if st.theta is not None:
            for j, th in enumerate(st.theta):
                diagnostics.append((t, f"theta[{j}]", float(th)))
    return st


# -- runs ------------------------------------------------------------------------------

@dataclass
class MultipleImputations:
    """Completed datasets retained from one chain, with provenance."""

    datasets: list
    iterations: list
    params: list
    mode: str
    spec_hash: str
    seed: int | None = None
    trace: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.datasets)

    def parameter_draws(self) -> list:
        """All post-burn-in parameter draws if kept, else the retained ones."""
        return self.trace if self.trace else self.params

    # serialization -------------------------------------------------------
    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        if not self.datasets:
            raise ValueError("nothing to save")
        variables = self.datasets[0].variables
        schema = _imputation_schema(variables)
        files = []
        width = max(3, len(str(self.L)))
        for i, ds in enumerate(self.datasets, start=1):
            name = f"imputation_{i:0{width}d}.csv"
            write_csv(ds, out / name, schema)
            files.append(name)
        manifest = {
            "format": FORMAT,
            "mode": self.mode,
            "seed": self.seed,
            "spec_hash": self.spec_hash,
            "N": self.datasets[0].N,
            "L": self.L,
            "iterations": list(map(int, self.iterations)),
            "files": files,
            "variables": [{"name": v.name, "levels": list(v.levels), "role": v.role}
                          for v in variables],
            "counters": dict(sorted(self.counters.items())),
            "margins": self.margins,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        draws = {"retained": [_jsonable(p) for p in self.params],
                 "trace": [_jsonable(p) for p in self.trace]}
        (out / "draws.json").write_text(json.dumps(draws) + "\n")
        with (out / "diagnostics.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("iteration", "parameter", "value"))
            for row in self.diagnostics:
                wr.writerow((row[0], row[1], repr(row[2]) if isinstance(row[2], float) else row[2]))
        return out

    @classmethod
    def load(cls, directory) -> "MultipleImputations":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            if manifest.get("format") != FORMAT:
                raise ValueError(f"unknown format {manifest.get('format')!r}")
            variables = tuple(VariableDef(v["name"], tuple(v["levels"]), v.get("role", "Y"))
                              for v in manifest["variables"])
            schema = _imputation_schema(variables)
            datasets = [load_csv(d / f, schema, manifest["N"], completed=True)
                        for f in manifest["files"]]
            draws = json.loads((d / "draws.json").read_text()) if (d / "draws.json").exists() else {}
        except (OSError, KeyError, TypeError, ValueError) as err:
            raise ValueError(f"corrupt imputation directory {d}: {err}") from None
        return cls(datasets, manifest["iterations"],
                   [_from_jsonable(p) for p in draws.get("retained", [])],
                   manifest["mode"], manifest["spec_hash"], manifest.get("seed"),
                   [_from_jsonable(p) for p in draws.get("trace", [])],
                   [], manifest.get("counters", {}), manifest.get("margins", {}))


def _imputation_schema(variables) -> CsvSchema:
    return CsvSchema(tuple(variables), weight_column="weight", unit_nr_column="unit_nr",
                     weight_kind="constructed")


def _jsonable(p: dict) -> dict:
    return {
        "coef": {k: np.asarray(v).tolist() for k, v in p["coef"].items()},
        "offset": {k: np.asarray(v).tolist() for k, v in p["offset"].items()},
        "theta": None if p["theta"] is None else np.asarray(p["theta"]).tolist(),
    }


def _from_jsonable(p: dict) -> dict:
    return {
        "coef": {k: np.array(v) for k, v in p["coef"].items()},
        "offset": {k: np.array(v) for k, v in p["offset"].items()},
        "theta": None if p.get("theta") is None else np.array(p["theta"]),
    }


def _run(ds, spec, margins, rng, icin, seed):
    if not icin and spec.margin_variables:
        missing = [v for v in spec.margin_variables if v not in (margins or {})]
        if missing:
            raise SpecError(f"no auxiliary margin for {missing[0]!r}, which has a U offset")
        margins = resolve_variances({v: margins[v] for v in spec.margin_variables}, ds, rng)
    else:
        margins = {}
    state = init_state(ds, spec, rng, margins=margins, icin=icin)
    ctrl = state.context.ctrl
    diag = [] if ctrl.diagnostics else None
    datasets, iters, params, trace = [], [], [], []
    for _ in range(ctrl.iterations):
        step(state, rng=rng, diagnostics=diag)
        t = state.iteration
        if t <= ctrl.burnin:
            continue
        if ctrl.keep_trace:
            trace.append(state.params())
        if (t - ctrl.burnin) % ctrl.thin == 0:
            datasets.append(state.completed())
            iters.append(t)
            params.append(state.params())
    counters = dict(state.counters)
    summary = {name: {"totals": m.totals.tolist(), "variances": m.variances.tolist(),
                      "source": m.source} for name, m in margins.items()}
    return MultipleImputations(datasets, iters, params, "icin" if icin else "md-am",
                               spec.model_hash(), seed, trace, diag or [], counters, summary)


def run(ds: SurveyDataset, spec: ModelSpec, margins: dict, rng: np.random.Generator,
        *, seed: int | None = None) -> MultipleImputations:
    """Run the intercept-matching chain and keep every ``thin``-th completed
    dataset after burn-in.  Margins without a constraint variance get one
    estimated from ``ds`` first."""
    return _run(ds, spec, margins, rng, False, seed)


def run_icin(ds: SurveyDataset, spec: ModelSpec, rng: np.random.Generator,
             *, seed: int | None = None) -> MultipleImputations:
    """The same chain with every margin step and U offset switched off."""
    return _run(ds, spec, None, rng, True, seed)
