"""Repeated-sampling study of MD-AM against ICIN on probit-generated populations.

A population of N units gets a unit-nonresponse flag U, two binary survey
variables X2 and X1 that depend on U, and an item-nonresponse flag R for X1
that depends on X2 only.  Samples are drawn by Poisson sampling with
synthetic lognormal size measures, imputed under both models and summarized
in the column layout of the usual simulation tables.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit
from scipy.stats import norm

from .dataset import MISSING, SurveyDataset, VariableDef
from .estimate import EstimationError, ht_total, rubin_combine, survey_logit, weighted_proportion
from .glm import TermSpec, fit_logit
from .margins import AuxMargin
from .sampler import (
    ChainError,
    ItemModel,
    MeasurementErrorSpec,
    ModelSpec,
    OutcomeModel,
    SamplerControls,
    SpecError,
    StructuralRule,
    run,
    run_icin,
)
from .weights import weighting_class_adjust, weights_from_adjusted, weights_from_design

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.02


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "weak-a"
    N: int = 133_427
    nu0: float = -1.2
    alpha0: float = 0.3
    alpha1: float = -0.5
    beta0: float = 0.2
    beta1: float = 0.4
    beta2: float = -0.5
    gamma0: float = -1.05
    gamma1: float = 0.2
    weight_sigma: float = 0.5
    expected_n: float = 7000.0
    replicates: int = 100
    regime: str = "design"
    iterations: int = 2000
    burnin: int = 1000
    thin: int = 20

    def __post_init__(self):
        vals = [self.nu0, self.alpha0, self.alpha1, self.beta0, self.beta1, self.beta2,
                self.gamma0, self.gamma1, self.weight_sigma]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("scenario parameters must be finite")
        if self.expected_n < 100 or self.expected_n > self.N:
            raise ValueError("expected sample size must lie in [100, N]")
        if self.regime not in ("design", "adjusted"):
            raise ValueError("regime must be 'design' or 'adjusted'")

    @property
    def controls(self) -> SamplerControls:
        return SamplerControls(self.iterations, self.burnin, self.thin,
                               keep_trace=False, diagnostics=False)


def _grid() -> dict:
    out = {}
    for tag, a1 in (("weak", -0.5), ("strong", -2.0)):
        for letter, (b1, b2) in zip("abcd", ((0.4, -0.5), (0.4, -2.0), (2.0, -0.5), (2.0, -2.0))):
            name = f"{tag}-{letter}"
            out[name] = ScenarioConfig(name=name, alpha1=a1, beta1=b1, beta2=b2)
    return out


# the 2 x 2 x 2 grid over alpha1, beta1 and beta2
SCENARIOS = _grid()


# -- population ----------------------------------------------------------------

@dataclass
class Population:
    U: np.ndarray
    X2: np.ndarray
    X1: np.ndarray
    R: np.ndarray
    N: int

    @property
    def T_X1(self) -> int:
        return int(self.X1.sum())

    @property
    def T_X2(self) -> int:
        return int(self.X2.sum())

    def conditional(self, target: str, t_level: int, given: str, g_level: int) -> float:
        a = getattr(self, target) == t_level
        g = getattr(self, given) == g_level
        return float((a & g).sum() / g.sum())


def generate_population(sc: ScenarioConfig, rng: np.random.Generator) -> Population:
    N = sc.N
    U = rng.random(N) < norm.cdf(sc.nu0)
    X2 = rng.random(N) < norm.cdf(sc.alpha0 + sc.alpha1 * U)
    X1 = rng.random(N) < norm.cdf(sc.beta0 + sc.beta1 * X2 + sc.beta2 * U)
    R = rng.random(N) < norm.cdf(sc.gamma0 + sc.gamma1 * X2)
    return Population(U, X2.astype(np.int64), X1.astype(np.int64), R, N)


def analytic_truth(sc: ScenarioConfig) -> dict:
    """Closed-form moments of the generator."""
    Phi = norm.cdf
    out = {"P(U=1)": Phi(sc.nu0)}
    for u in (0, 1):
        p2 = Phi(sc.alpha0 + sc.alpha1 * u)
        p1 = (1 - p2) * Phi(sc.beta0 + sc.beta2 * u) + p2 * Phi(sc.beta0 + sc.beta1 + sc.beta2 * u)
        out[f"P(X2=1|U={u})"] = p2
        out[f"P(X1=1|U={u})"] = p1
    p2_resp = out["P(X2=1|U=0)"]
    out["P(R=1|U=0)"] = (1 - p2_resp) * Phi(sc.gamma0) + p2_resp * Phi(sc.gamma0 + sc.gamma1)
    pu = out["P(U=1)"]
    out["P(X2=1)"] = (1 - pu) * out["P(X2=1|U=0)"] + pu * out["P(X2=1|U=1)"]
    out["P(X1=1)"] = (1 - pu) * out["P(X1=1|U=0)"] + pu * out["P(X1=1|U=1)"]
    return {k: float(v) for k, v in out.items()}


# -- sampling ---------------------------------------------------------------------

def generate_weights(sc: ScenarioConfig, rng: np.random.Generator):
    """Lognormal size measures and inclusion probabilities summing to the
    expected sample size.  Returns ``(base_weights, pi)``."""
    base = rng.lognormal(0.0, sc.weight_sigma, sc.N) if sc.weight_sigma > 0 else np.ones(sc.N)
    m = sc.expected_n

    def excess(c):
        return np.minimum(1.0, c / base).sum() - m

    hi = base.max() * 2
    if excess(hi) < -0.1:
        raise ValueError("expected sample size is not attainable")
    c = optimize.brentq(excess, 0.0, hi, xtol=1e-12 * hi)
    pi = np.minimum(1.0, c / base)
    if abs(pi.sum() - m) > 0.1:
        raise ValueError("inclusion-probability calibration failed")
    return base, pi


@dataclass
class Sample:
    """One Poisson sample: the analysis dataset and its pre-missing version."""

    ds: SurveyDataset
    full: np.ndarray  # (n, 2) complete X1, X2
    U: np.ndarray
    design_weights: np.ndarray
    R: np.ndarray


SIM_VARIABLES = (VariableDef("X1", ("0", "1"), role="X"), VariableDef("X2", ("0", "1"), role="X"))


def sim_spec(controls: SamplerControls | None = None) -> ModelSpec:
    """Logistic analog of the generator: X2 | U, X1 | X2, U and R | X2."""
    return ModelSpec(
        (OutcomeModel("X2", TermSpec(), True), OutcomeModel("X1", TermSpec(("X2",)), True)),
        (ItemModel("X1", TermSpec(("X2",))),),
        controls=controls or SamplerControls.desk(),
    )


def poisson_sample(pop: Population, pi: np.ndarray, rng: np.random.Generator) -> Sample:
    take = np.flatnonzero(rng.random(pop.N) < pi)
    full = np.column_stack([pop.X1[take], pop.X2[take]])
    U = pop.U[take]
    R = pop.R[take] & ~U
    cells = full.copy()
    cells[R, 0] = MISSING
    cells[U] = MISSING
    w = 1.0 / pi[take]
    ds = SurveyDataset(SIM_VARIABLES, cells, U, np.where(U, 0.0, w), pop.N, weight_kind="design")
    return Sample(ds, full, U, w, R)


# -- estimation on one dataset --------------------------------------------------------

CONDITIONALS = (
    ("X2=0|X1=0", {"X2": 0}, {"X1": 0}),
    ("X2=0|X1=1", {"X2": 0}, {"X1": 1}),
    ("X1=0|X2=0", {"X1": 0}, {"X2": 0}),
    ("X1=0|X2=1", {"X1": 0}, {"X2": 1}),
)
PARAMETERS = ("alpha0", "alpha1", "beta0", "beta1", "beta2", "gamma0", "gamma1")
ESTIMANDS = ("T_X2", "T_X1") + tuple(c[0] for c in CONDITIONALS) + PARAMETERS


def completed_estimates(ds: SurveyDataset, U: np.ndarray, R: np.ndarray) -> dict:
    """(estimate, variance) for every estimand on a completed dataset."""
    out = {"T_X2": ht_total(ds, "X2", 1), "T_X1": ht_total(ds, "X1", 1)}
    for name, tgt, given in CONDITIONALS:
        out[name] = weighted_proportion(ds, tgt, given)
    x1, x2 = ds.column("X1"), ds.column("X2")
    u = U.astype(float)
    w = ds.weights
    one = np.ones(ds.n)
    a, va = survey_logit(np.column_stack([one, u]), x2, w)
    b, vb = survey_logit(np.column_stack([one, x2, u]), x1, w)
    resp = ~U
    g = fit_logit(np.column_stack([one[resp], x2[resp]]), R[resp].astype(float))
    for j, name in enumerate(("alpha0", "alpha1")):
        out[name] = (float(a[j]), float(va[j, j]))
    for j, name in enumerate(("beta0", "beta1", "beta2")):
        out[name] = (float(b[j]), float(vb[j, j]))
    for j, name in enumerate(("gamma0", "gamma1")):
        out[name] = (float(g.coef[j]), float(g.cov[j, j]))
    return out


# -- scenario runs ------------------------------------------------------------------------

@dataclass
class ReplicateResult:
    index: int
    n: int
    n_u: int
    pre: dict
    mdam: dict
    icin: dict
    clamps: dict


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    truth: dict
    rows: list
    replicates: list
    failures: int
    population_moments: dict = field(default_factory=dict)

    @property
    def n_ok(self) -> int:
        return len(self.replicates)

    @property
    def valid(self) -> bool:
        total = self.n_ok + self.failures
        return total > 0 and self.failures < FAILURE_LIMIT * total

    def row(self, estimand: str) -> dict:
        for r in self.rows:
            if r["estimand"] == estimand:
                return r
        raise KeyError(estimand)

    def write_csv(self, path) -> None:
        cols = list(self.rows[0].keys())
        with Path(path).open("w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _analysis_weights(sample: Sample, regime: str) -> SurveyDataset:
    ds = sample.ds
    if regime == "design":
        return weights_from_design(ds).apply(ds)
    # weighting classes by X1, known for every sampled unit in the simulation
    rep = weighting_class_adjust(ds.with_weights(sample.design_weights, "design"), "X1",
                                 classes=sample.full[:, 0])
    adjusted = ds.with_weights(rep.weights, "adjusted")
    return weights_from_adjusted(adjusted).apply(adjusted)


def _pool(mi, U, R) -> dict:
    per = [completed_estimates(d, U, R) for d in mi.datasets]
    out = {}
    for name in ESTIMANDS:
        est = rubin_combine([p[name] for p in per])
        out[name] = {"q": est.q, "T": est.T, "b": est.b, "L": est.L,
                     "lo": est.ci[0], "hi": est.ci[1]}
    return out


def run_replicate(sc: ScenarioConfig, pop: Population, pi: np.ndarray, truth: dict,
                  seed_seq: np.random.SeedSequence, index: int) -> ReplicateResult:
    s_rng, m_rng, i_rng = (np.random.default_rng(s) for s in seed_seq.spawn(3))
    sample = poisson_sample(pop, pi, s_rng)
    full_ds = SurveyDataset(SIM_VARIABLES, sample.full, np.zeros(sample.U.size, bool),
                            sample.design_weights, pop.N, weight_kind="design", completed=True)
    pre = {k: v[0] for k, v in completed_estimates(full_ds, sample.U, sample.R).items()}
    ds = _analysis_weights(sample, sc.regime)
    spec = sim_spec(sc.controls)
    margins = {"X2": AuxMargin("X2", [pop.T_X2], source="population"),
               "X1": AuxMargin("X1", [pop.T_X1], source="population")}
    mi = run(ds, spec, margins, m_rng)
    ic = run_icin(ds, spec, i_rng)
    return ReplicateResult(index, ds.n, ds.n_unit_nr, pre, _pool(mi, sample.U, sample.R),
                           _pool(ic, sample.U, sample.R), dict(mi.counters))


def _safe_replicate(args):
    sc, pop, pi, truth, ss, i = args
    try:
        return run_replicate(sc, pop, pi, truth, ss, i)
    except (ChainError, SpecError, EstimationError, ValueError, np.linalg.LinAlgError) as err:
        log.warning("replicate %d of %s failed: %s", i, sc.name, err)
        return err


def run_scenario(sc: ScenarioConfig, seed: int, *, workers: int = 1) -> ScenarioResult:
    """Generate the population, run every replicate and aggregate.

    Replicates use independent streams spawned from ``seed``; results are
    reduced in replicate order, so the outcome does not depend on ``workers``.
    """
    pop_ss, weight_ss, rep_ss = np.random.SeedSequence(seed).spawn(3)
    pop = generate_population(sc, np.random.default_rng(pop_ss))
    _, pi = generate_weights(sc, np.random.default_rng(weight_ss))
    truth = {"T_X2": float(pop.T_X2), "T_X1": float(pop.T_X1)}
    for name, tgt, given in CONDITIONALS:
        (tv, tl), (gv, gl) = next(iter(tgt.items())), next(iter(given.items()))
        truth[name] = pop.conditional(tv, tl, gv, gl)
    jobs = [(sc, pop, pi, truth, ss, i) for i, ss in enumerate(rep_ss.spawn(sc.replicates))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_safe_replicate, jobs))
    else:
        results = [_safe_replicate(j) for j in jobs]
    good = [r for r in results if isinstance(r, ReplicateResult)]
    failures = len(results) - len(good)
    # parameters have no population value; use the pre-missing average
    for p in PARAMETERS:
        truth[p] = float(np.mean([r.pre[p] for r in good])) if good else float("nan")
    rows = [_summarize(name, truth[name], good) for name in ESTIMANDS]
    moments = {"P(U=1)": float(pop.U.mean()),
               "P(R=1|U=0)": float(pop.R[~pop.U].mean())}
    for u in (0, 1):
        moments[f"P(X2=1|U={u})"] = float(pop.X2[pop.U == u].mean())
        moments[f"P(X1=1|U={u})"] = float(pop.X1[pop.U == u].mean())
    res = ScenarioResult(sc, truth, rows, good, failures, moments)
    if not res.valid:
        log.warning("%s: %d of %d replicates failed", sc.name, failures, len(results))
    return res


def _summarize(name: str, truth: float, reps: list) -> dict:
    def col(method, key):
        return np.array([getattr(r, method)[name][key] for r in reps])

    def sd(x):
        return float(np.std(x, ddof=1)) if len(x) > 1 else float("nan")

    row = {"estimand": name, "truth": truth}
    pre = np.array([r.pre[name] for r in reps])
    for method in ("mdam", "icin"):
        q = col(method, "q")
        lo, hi = col(method, "lo"), col(method, "hi")
        row[f"{method}_estimate"] = float(q.mean())
        row[f"{method}_coverage"] = float(100 * np.mean((lo <= truth) & (truth <= hi)))
    row["pre_sd"] = sd(pre)
    for method in ("mdam", "icin"):
        row[f"{method}_sd"] = sd(col(method, "q"))
    for method in ("mdam", "icin"):
        row[f"{method}_avg_est_sd"] = float(np.sqrt(col(method, "T").mean()))
    for method in ("mdam", "icin"):
        b, L = col(method, "b"), col(method, "L")
        row[f"{method}_sqrt_b_over_L"] = float(np.sqrt(np.mean(b / L)))
    row["replicates"] = len(reps)
    return row


def scenario_to_dict(sc: ScenarioConfig) -> dict:
    return asdict(sc)


def scenario_from_dict(d: dict, base: ScenarioConfig | None = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    known = set(ScenarioConfig.__dataclass_fields__)
    bad = set(d) - known
    if bad:
        raise ValueError(f"unknown scenario fields {sorted(bad)}")
    return replace(base, **d)


# -- synthetic CPS-like data ----------------------------------------------------------------

CPS_VARIABLES = (
    VariableDef("S", ("Male", "Female"), role="X"),
    VariableDef("E", ("White", "Black", "Hispanic", "Rest"), role="X"),
    VariableDef("C", ("HS-", "Some college", "BS+")),
    VariableDef("A", ("18-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+")),
    VariableDef("V", ("Did not vote", "Voted"), role="X"),
)

CPS_PRIORS = ((60.0, 940.0), (130.0, 870.0), (190.0, 810.0))


def cps_spec(controls: SamplerControls | None = None, measurement_error: bool = False) -> ModelSpec:
    """The turnout model: S, E, C, A, V in sequence, U offsets on S, E and V,
    ICIN-style item models and the 'age missing => vote missing' rule."""
    P = TermSpec.parse
    return ModelSpec(
        (
            OutcomeModel("S", P("I"), True),
            OutcomeModel("E", P("I + S"), True),
            OutcomeModel("C", P("I + S + E")),
            OutcomeModel("A", P("I + S + E + C")),
            OutcomeModel("V", P("I + S + E + C + A + S:E + S:C + S:A"), True),
        ),
        (
            ItemModel("E", P("I + S + C + A + V")),
            ItemModel("C", P("I + S + E + A + V")),
            ItemModel("A", P("I + S + E + C")),
            ItemModel("V", P("I + S + E + C + A")),
        ),
        (StructuralRule("A", "V"),),
        MeasurementErrorSpec("V", "C", CPS_PRIORS) if measurement_error else None,
        controls or SamplerControls.desk(),
    )


@dataclass
class SyntheticSurvey:
    ds: SurveyDataset
    margins: dict
    truth: dict
    population_V: np.ndarray | None = None


def _mn_draw(rng, eta):
    z = np.column_stack([np.zeros(eta.shape[0]), eta])
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return (p.cumsum(axis=1) < rng.random(p.shape[0])[:, None]).sum(axis=1)


def synthetic_cps(rng: np.random.Generator, *, N: int = 200_000, expected_n: float = 3000,
                  unit_rate: float = 0.3, misreport: tuple | None = None,
                  weight_sigma: float = 0.4) -> SyntheticSurvey:
    """A finite population shaped like the turnout example and one Poisson
    sample from it, with unit and item nonresponse applied.

    ``misreport`` gives per-education probabilities that a true nonvoter
    reports voting; reported values replace true ones among respondents.
    Margins for S, E and V are exact population totals (true votes).
    """
    U = rng.random(N) < unit_rate
    u = U.astype(float)
    S = (rng.random(N) < expit(0.1 - 0.2 * u)).astype(np.int64)
    E = _mn_draw(rng, np.column_stack([-1.2 + 0.1 * S + 0.3 * u, -2.8 + 0 * S, -2.6 + 0.2 * u]))
    eb, eh, er = (E == 1), (E == 2), (E == 3)
    C = _mn_draw(rng, np.column_stack([0.1 + 0.2 * S - 0.3 * eb - 0.2 * eh,
                                       -0.4 + 0.3 * S - 0.6 * eb - 0.5 * eh + 0.3 * er]))
    base_a = np.array([0.0, 0.0, 0.1, 0.1, 0.0, -0.5, -1.4])
    A = _mn_draw(rng, np.column_stack([base_a[j] - 0.2 * eh + 0.1 * (C == 2) for j in range(1, 7)]))
    eta_v = (-1.0 + 0.2 * S - 0.2 * eb - 0.6 * eh - 0.4 * er + 0.5 * (C == 1) + 1.2 * (C == 2)
             + 0.4 * A - 0.025 * A * A + 0.1 * S * (C == 2) - 0.9 * u)
    V = (rng.random(N) < expit(eta_v)).astype(np.int64)
    cells_pop = np.column_stack([S, E, C, A, V])

    # item nonresponse, ICIN-style
    RE = rng.random(N) < expit(-3.0 + 0.3 * (C == 0) + 0.2 * V)
    RC = rng.random(N) < expit(-2.6 + 0.2 * eh - 0.1 * S)
    RA = rng.random(N) < expit(-2.8 + 0.3 * eb)
    RV = RA | (rng.random(N) < expit(-1.6 - 0.2 * S + 0.2 * eb - 0.3 * (C == 2)))
    Rm = np.column_stack([np.zeros(N, bool), RE, RC, RA, RV])

    reported = V.copy()
    if misreport is not None:
        th = np.asarray(misreport)[C]
        reported = np.where(V == 1, 1, (rng.random(N) < th).astype(np.int64))

    size = rng.lognormal(0, weight_sigma, N)
    c = optimize.brentq(lambda c: np.minimum(1, c / size).sum() - expected_n, 0, size.max() * 2)
    pi = np.minimum(1.0, c / size)
    take = np.flatnonzero(rng.random(N) < pi)
    cells = cells_pop[take].copy()
    cells[:, 4] = reported[take]
    Ut = U[take]
    Rt = Rm[take] & ~Ut[:, None]
    cells[Rt] = MISSING
    cells[Ut] = MISSING
    w = np.where(Ut, 0.0, 1.0 / pi[take])
    ds = SurveyDataset(CPS_VARIABLES, cells, Ut, w, N, weight_kind="design")
    margins = {
        "S": AuxMargin("S", [float((S == 1).sum())], source="population"),
        "E": AuxMargin("E", [float((E == j).sum()) for j in (1, 2, 3)], source="population"),
        "V": AuxMargin("V", [float(V.sum())], source="population"),
    }
    truth = {"turnout": float(V.mean()), "turnout_U1": float(V[U].mean()),
             "turnout_U0": float(V[~U].mean()), "misreport": misreport}
    return SyntheticSurvey(ds, margins, truth, V[take])
