"""Bernoulli- and multinomial-logit maximum likelihood for categorical designs.

Both fitters run Newton-Raphson with step halving on the (optionally
weighted) log-likelihood.  When the unpenalized problem fails to converge or
the information matrix is singular (quasi-separation, common in small
completed datasets) they refit with a small ridge penalty and say so in the
result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import MISSING, VariableDef

RIDGE = 1e-6
MAX_ITER = 100
GRAD_TOL = 1e-8
# |coef| beyond this means the MLE is running off to infinity
DIVERGENT = 15.0


class FitError(RuntimeError):
    pass


class DrawError(RuntimeError):
    pass


@dataclass(frozen=True)
class TermSpec:
    """Predictors of one model: intercept, main effects and pairwise interactions."""

    main: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "main", tuple(self.main))
        object.__setattr__(self, "interactions", tuple(tuple(p) for p in self.interactions))
        for pair in self.interactions:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ValueError(f"bad interaction {pair!r}")

    @property
    def variables(self) -> tuple[str, ...]:
        """Every variable the design depends on, first appearance order."""
        seen: list[str] = []
        for name in list(self.main) + [v for pair in self.interactions for v in pair]:
            if name not in seen:
                seen.append(name)
        return tuple(seen)

    def n_columns(self, levels: dict[str, int]) -> int:
        return (1 + sum(levels[v] - 1 for v in self.main)
                + sum((levels[a] - 1) * (levels[b] - 1) for a, b in self.interactions))

    def column_names(self, variables: Sequence[VariableDef]) -> list[str]:
        by_name = {v.name: v for v in variables}
        names = ["(Intercept)"]
        for v in self.main:
            names += [f"{v}[{lab}]" for lab in by_name[v].levels[1:]]
        for a, b in self.interactions:
            for la in by_name[a].levels[1:]:
                for lb in by_name[b].levels[1:]:
                    names.append(f"{a}[{la}]:{b}[{lb}]")
        return names

    @classmethod
    def parse(cls, text: str) -> "TermSpec":
        """Build from a formula such as ``"I + S + E + S:E"``."""
        main, inter = [], []
        for tok in (t.strip() for t in text.split("+")):
            if tok in ("", "I", "1"):
                continue
            if ":" in tok:
                a, b = (s.strip() for s in tok.split(":"))
                inter.append((a, b))
            else:
                main.append(tok)
        return cls(tuple(main), tuple(inter))

    def formula(self) -> str:
        return " + ".join(["I", *self.main, *(f"{a}:{b}" for a, b in self.interactions)])


@dataclass
class FittedCoefficients:
    """MLE and inverse observed information of one logit model.

    For a multinomial model with ``d`` levels ``coef`` stacks the ``d-1``
    baseline-category coefficient vectors, level 1 first.
    """

    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    converged: bool
    ridge_used: bool = False
    n_iter: int = 0
    n_levels: int = 2
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return self.coef.size

    def coef_matrix(self) -> np.ndarray:
        """Coefficients as (p, d-1)."""
        return self.coef.reshape(self.n_levels - 1, -1).T


def expand_design(cells: np.ndarray, variables: Sequence[VariableDef],
                  terms: TermSpec) -> np.ndarray:
    """Indicator-coded design matrix.

    Columns: intercept, then ``d-1`` indicators per main effect, then
    ``(d1-1)(d2-1)`` products per interaction, each in ``terms`` order.
    """
    cells = np.atleast_2d(np.asarray(cells))
    index = {v.name: k for k, v in enumerate(variables)}
    levels = {v.name: v.n_levels for v in variables}
    used = [index[v] for v in terms.variables]
    if used and (cells[:, used] == MISSING).any():
        raise ValueError("design rows reference missing cells; filter them first")
    n = cells.shape[0]
    cols = [np.ones((n, 1))]
    ind = {}
    for v in terms.variables:
        d = levels[v]
        x = cells[:, index[v]]
        ind[v] = (x[:, None] == np.arange(1, d)[None, :]).astype(float)
    for v in terms.main:
        cols.append(ind[v])
    for a, b in terms.interactions:
        prod = ind[a][:, :, None] * ind[b][:, None, :]
        cols.append(prod.reshape(n, -1))
    return np.hstack(cols)


# -- Bernoulli logit ---------------------------------------------------------

def logit_loglik(beta, X, y, w=None) -> float:
    eta = X @ beta
    w = np.ones(len(y)) if w is None else w
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logit_gradient(beta, X, y, w=None) -> np.ndarray:
    w = np.ones(len(y)) if w is None else w
    return X.T @ (w * (y - expit(X @ beta)))


def logit_hessian(beta, X, w=None) -> np.ndarray:
    """Hessian of the log-likelihood (negative definite)."""
    w = np.ones(X.shape[0]) if w is None else w
    p = expit(X @ beta)
    return -(X.T * (w * p * (1 - p))) @ X


# -- multinomial (baseline-category) logit ------------------------------------

def _lse(eta):
    mx = eta.max(axis=1, keepdims=True)
    return mx + np.log(np.exp(eta - mx).sum(axis=1, keepdims=True))


def _mn_probs(B, X):
    eta = np.column_stack([np.zeros(X.shape[0]), X @ B])
    return np.exp(eta - _lse(eta)), eta


def multinomial_loglik(beta, X, y, n_levels, w=None) -> float:
    B = np.asarray(beta).reshape(n_levels - 1, -1).T
    _, eta = _mn_probs(B, X)
    w = np.ones(len(y)) if w is None else w
    ll = eta[np.arange(len(y)), y] - _lse(eta)[:, 0]
    return float(np.sum(w * ll))


def multinomial_gradient(beta, X, y, n_levels, w=None) -> np.ndarray:
    B = np.asarray(beta).reshape(n_levels - 1, -1).T
    P, _ = _mn_probs(B, X)
    w = np.ones(len(y)) if w is None else w
    Y = np.zeros_like(P)
    Y[np.arange(len(y)), y] = 1.0
    G = X.T @ (w[:, None] * (Y - P)[:, 1:])
    return G.T.ravel()


def multinomial_hessian(beta, X, n_levels, w=None) -> np.ndarray:
    B = np.asarray(beta).reshape(n_levels - 1, -1).T
    P = _mn_probs(B, X)[0][:, 1:]
    w = np.ones(X.shape[0]) if w is None else w
    p = X.shape[1]
    m = n_levels - 1
    H = np.empty((m * p, m * p))
    for a in range(m):
        for b in range(a, m):
            s = P[:, a] * ((a == b) - P[:, b]) * w
            blk = -(X.T * s) @ X
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
            H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
    return H


# -- Newton driver -------------------------------------------------------------

def _newton(f, grad, hess, x0, ridge, max_iter, tol):
    """Maximize f(x) - ridge/2 |x|^2.  Returns (x, value, H, converged, iters)."""
    x = x0.copy()

    def obj(z):
        return f(z) - 0.5 * ridge * z @ z

    val = obj(x)
    eye = np.eye(x.size)
    for it in range(1, max_iter + 1):
        g = grad(x) - ridge * x
        H = hess(x) - ridge * eye
        if np.max(np.abs(g)) <= tol:
            return x, val, H, True, it - 1
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            return x, val, H, False, it
        if not np.all(np.isfinite(step)):
            return x, val, H, False, it
        t = 1.0
        for _ in range(40):
            cand = x + t * step
            cval = obj(cand)
            if np.isfinite(cval) and cval >= val - 1e-12 * (1 + abs(val)):
                break
            t *= 0.5
        else:
            return x, val, H, False, it
        x, val = cand, cval
        if np.max(np.abs(t * step)) < 1e-13 * (1 + np.max(np.abs(x))):
            g = grad(x) - ridge * x
            H = hess(x) - ridge * eye
            ok = np.max(np.abs(g)) <= max(tol, 1e-10 * max(1.0, abs(val)))
            return x, val, H, ok, it
        if np.max(np.abs(x)) > 1e3:
            return x, val, H, False, it
    g = grad(x) - ridge * x
    H = hess(x) - ridge * eye
    return x, val, H, bool(np.max(np.abs(g)) <= tol), max_iter


def _finish(x, val, H, converged, iters, ridge_used, n_levels):
    info = -H
    try:
        cond = np.linalg.cond(info)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e15:
        raise FitError("information matrix is singular (rank-deficient design)")
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return FittedCoefficients(x, cov, float(val), bool(converged), ridge_used, iters, n_levels)


def _fit(f, grad, hess, k, start, ridge, max_iter, tol, n_levels):
    x0 = np.zeros(k) if start is None else np.asarray(start, dtype=float).copy()
    x, val, H, ok, it = _newton(f, grad, hess, x0, 0.0, max_iter, tol)
    if ok and np.max(np.abs(x), initial=0.0) < DIVERGENT:
        try:
            return _finish(x, val, H, ok, it, False, n_levels)
        except FitError:
            pass
    if ridge <= 0:
        if ok:
            return _finish(x, val, H, ok, it, False, n_levels)
        return FittedCoefficients(x, np.full((k, k), np.nan), float(val), False,
                                  False, it, n_levels)
    x, val, H, ok, it2 = _newton(f, grad, hess, np.zeros(k), ridge, max_iter, tol)
    return _finish(x, val, H, ok, it + it2, True, n_levels)


def _check(X, y, w):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y) or len(w) != len(y):
        raise ValueError("design, outcome and weights must have matching rows")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    keep = w > 0
    return X[keep], y[keep], w[keep]


def fit_logit(X, y, w=None, *, start=None, ridge: float = RIDGE,
              max_iter: int = MAX_ITER, tol: float = GRAD_TOL) -> FittedCoefficients:
    """Weighted Bernoulli-logit MLE with inverse observed information."""
    X, y, w = _check(X, y, w)
    y = y.astype(float)
    return _fit(lambda b: logit_loglik(b, X, y, w),
                lambda b: logit_gradient(b, X, y, w),
                lambda b: logit_hessian(b, X, w),
                X.shape[1], start, ridge, max_iter, tol, 2)


def fit_multinomial(X, y, w=None, n_levels: int | None = None, *, start=None,
                    ridge: float = RIDGE, max_iter: int = MAX_ITER,
                    tol: float = GRAD_TOL) -> FittedCoefficients:
    """Weighted baseline-category multinomial-logit MLE (level 0 is baseline)."""
    X, y, w = _check(X, y, w)
    y = y.astype(np.int64)
    d = int(y.max()) + 1 if n_levels is None else int(n_levels)
    if d < 2:
        raise ValueError("need at least two outcome levels")
    C = np.zeros((len(y), d))
    C[np.arange(len(y)), y] = w
    return fit_counts(X, C, start=start, ridge=ridge, max_iter=max_iter, tol=tol)


class _CountsProblem:
    """Baseline-category logit on a count table, caching the last evaluation."""

    def __init__(self, X, C):
        self.X, self.C = X, C
        self.tot = C.sum(axis=1)
        self.m = C.shape[1] - 1
        self._key = None
        self._XX = None

    def _eval(self, beta):
        key = beta.tobytes()
        if key != self._key:
            E = self.X @ beta.reshape(self.m, -1).T
            eta = np.column_stack([np.zeros(E.shape[0]), E])
            lse = _lse(eta)
            self._P = np.exp(eta - lse)[:, 1:]
            self._ll = float(np.sum(self.C[:, 1:] * E) - self.tot @ lse[:, 0])
            self._key = key
        return self._P

    def loglik(self, beta):
        self._eval(beta)
        return self._ll

    def gradient(self, beta):
        P = self._eval(beta)
        return (self.X.T @ (self.C[:, 1:] - self.tot[:, None] * P)).T.ravel()

    def hessian(self, beta):
        P = self._eval(beta)
        W = self.tot[:, None, None] * P[:, :, None] * (np.eye(self.m)[None] - P[:, None, :])
        if self._XX is None:
            self._XX = (self.X[:, :, None] * self.X[:, None, :]).reshape(self.X.shape[0], -1)
        p = self.X.shape[1]
        H = (W.reshape(W.shape[0], -1).T @ self._XX).reshape(self.m, self.m, p, p)
        return -H.transpose(0, 2, 1, 3).reshape(self.m * p, self.m * p)


def fit_counts(X, C, *, start=None, ridge: float = RIDGE, max_iter: int = MAX_ITER,
               tol: float = GRAD_TOL) -> FittedCoefficients:
    """Logit MLE from a table of weighted counts.

    Row i of ``C`` holds the (weighted) number of units with design row
    ``X[i]`` at each outcome level; two columns give the Bernoulli logit.
    """
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != X.shape[0] or C.shape[1] < 2:
        raise ValueError("count table must have one row per design row and >= 2 columns")
    if (C < 0).any() or C.sum() <= 0:
        raise ValueError("counts must be nonnegative with a positive sum")
    keep = C.sum(axis=1) > 0
    prob = _CountsProblem(X[keep], C[keep])
    d = C.shape[1]
    return _fit(prob.loglik, prob.gradient, prob.hessian, X.shape[1] * (d - 1),
                start, ridge, max_iter, tol, d)


def normal_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix L with L @ L.T == cov, for PSD ``cov``."""
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise DrawError("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.max(np.abs(np.diag(cov)), initial=0.0))
    if scale == 0.0:
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov + 1e-12 * scale * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if vals.min(initial=0.0) < -1e-10 * scale:
        raise DrawError("covariance is not positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def draw_coefficients(fc: FittedCoefficients, rng: np.random.Generator, *,
                      allow_unconverged: bool = False, factor: np.ndarray | None = None) -> np.ndarray:
    """One draw from the normal approximation N(coef, cov)."""
    if not fc.converged and not allow_unconverged:
        raise DrawError("fit did not converge")
    L = normal_factor(fc.cov) if factor is None else factor
    return fc.coef + L @ rng.standard_normal(fc.coef.size)
