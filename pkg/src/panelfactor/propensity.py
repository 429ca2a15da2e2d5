"""Feasible estimators of the observation probability ``P(W_it = 1 | S_i)``.

Three estimators are provided: cell frequencies for discrete covariates, a
pooled logit (one time-invariant probability per unit) and one logit per
period.  All of them clamp the returned probabilities to ``[p_floor, 1]`` so
the inverse-probability weights stay bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit, log_expit

from .errors import (
    CellTooSmall,
    DimensionMismatch,
    LogitSeparation,
    NoConvergence,
    NonFiniteValue,
)
from .panel_core import MaskedPanel

__all__ = [
    "CovariateVector",
    "PropensityEstimate",
    "LogitFit",
    "estimate_discrete_freq",
    "estimate_logit_pooled",
    "estimate_logit_per_t",
    "estimate_constant",
    "propensity_from_matrix",
    "use_loadings_as_covariates",
    "fit_logit",
    "MAX_DISCRETE_LEVELS",
]

MAX_DISCRETE_LEVELS = 64
P_FLOOR = 0.01
MIN_CELL = 10
#: Linear predictors beyond this magnitude are treated as a diverging MLE.
SEPARATION_ETA = 15.0
GRAD_TOL = 1e-8
MAX_ITER = 50


@dataclass(frozen=True)
class CovariateVector:
    """Unit-level covariates ``S`` (``N x K``) with a kind per column."""

    values: np.ndarray
    kinds: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DimensionMismatch("covariates must be a vector or an N x K matrix")
        if not np.isfinite(values).all():
            i, k = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValue(i, k)
        kinds = tuple(self.kinds) if len(self.kinds) else ("continuous",) * values.shape[1]
        if len(kinds) != values.shape[1]:
            raise DimensionMismatch("one kind per covariate column is required")
        for k, kind in enumerate(kinds):
            if kind not in ("discrete", "continuous"):
                raise ValueError(f"unknown covariate kind {kind!r}")
            if kind == "discrete" and np.unique(values[:, k]).size > MAX_DISCRETE_LEVELS:
                raise ValueError(
                    f"discrete column {k} has more than {MAX_DISCRETE_LEVELS} levels"
                )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def discrete(cls, values) -> "CovariateVector":
        values = np.asarray(values, dtype=float)
        k = 1 if values.ndim == 1 else values.shape[1]
        return cls(values, ("discrete",) * k)

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def all_discrete(self) -> bool:
        return all(kind == "discrete" for kind in self.kinds)


@dataclass(frozen=True)
class PropensityEstimate:
    probs: np.ndarray
    model: str
    diagnostics: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class LogitFit:
    coef: np.ndarray
    n_iter: int
    grad_norm: float


def _as_covariates(s: Union[CovariateVector, np.ndarray], discrete: bool = False) -> CovariateVector:
    if isinstance(s, CovariateVector):
        return s
    return CovariateVector.discrete(s) if discrete else CovariateVector(s)


def _clamp(probs: np.ndarray, p_floor: float) -> np.ndarray:
    out = np.clip(probs, p_floor, 1.0)
    out.setflags(write=False)
    return out


def _cells(s: CovariateVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    levels, inverse, sizes = np.unique(
        s.values, axis=0, return_inverse=True, return_counts=True
    )
    return levels, inverse.reshape(-1), sizes


def estimate_discrete_freq(
    panel: MaskedPanel,
    s: Union[CovariateVector, np.ndarray],
    min_cell: int = MIN_CELL,
    p_floor: float = P_FLOOR,
) -> PropensityEstimate:
    """Cell frequencies ``p_t(s) = |{i : S_i = s, W_it = 1}| / N_s``.

    With several discrete columns the cells are the distinct covariate rows.
    """
    s = _as_covariates(s, discrete=True)
    if s.n_units != panel.n_units:
        raise DimensionMismatch("covariates must have one row per unit")
    if not s.all_discrete:
        raise ValueError("cell frequencies need discrete covariates")
    levels, cell, sizes = _cells(s)
    small = np.flatnonzero(sizes < min_cell)
    if small.size:
        lvl = levels[small[0]]
        raise CellTooSmall(tuple(lvl) if lvl.size > 1 else float(lvl[0]), sizes[small[0]], min_cell)
    w = panel.mask.astype(float)
    counts = np.zeros((levels.shape[0], panel.n_periods))
    np.add.at(counts, cell, w)
    freq = counts / sizes[:, None]
    diagnostics = {"cell_sizes": sizes.tolist(), "levels": levels.tolist()}
    return PropensityEstimate(_clamp(freq[cell], p_floor), "discrete_freq", diagnostics)


def _design(s: CovariateVector) -> np.ndarray:
    """Intercept plus the non-constant covariate columns.

    Constant columns are collinear with the intercept and are dropped, so a
    constant ``S`` yields the intercept-only model.
    """
    keep = np.ptp(s.values, axis=0) > 0
    return np.column_stack([np.ones(s.n_units), s.values[:, keep]])


def fit_logit(
    x: np.ndarray,
    successes: np.ndarray,
    trials: np.ndarray,
    max_iter: int = MAX_ITER,
    tol: float = GRAD_TOL,
) -> LogitFit:
    """Binomial logistic regression by Newton's method with step halving.

    Convergence is declared when the gradient of the mean log-likelihood
    (per trial) has Euclidean norm below ``tol``.  A linear predictor whose
    magnitude exceeds :data:`SEPARATION_ETA` signals a diverging MLE and
    raises :class:`LogitSeparation`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(successes, dtype=float)
    n = np.asarray(trials, dtype=float)
    total = n.sum()
    if total <= 0:
        raise ValueError("no trials")
    rate = y.sum() / total
    if rate <= 0.0 or rate >= 1.0:
        raise LogitSeparation("the outcome is constant")
    beta = np.zeros(x.shape[1])
    beta[0] = np.log(rate / (1.0 - rate))

    def loglik(b):
        eta = x @ b
        return float((y * log_expit(eta) + (n - y) * log_expit(-eta)).sum() / total)

    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        eta = x @ beta
        p = expit(eta)
        grad = x.T @ (y - n * p) / total
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            if np.abs(eta).max() > SEPARATION_ETA:
                raise LogitSeparation("fitted probabilities are numerically 0 or 1")
            return LogitFit(beta, it - 1, gnorm)
        hess = (x * (n * p * (1.0 - p))[:, None]).T @ x / total
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise LogitSeparation("singular information matrix") from exc
        if not np.isfinite(step).all():
            raise LogitSeparation("singular information matrix")
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-15:
                break
            scale *= 0.5
        beta, ll = cand, ll_new
        if np.abs(x @ beta).max() > 2 * SEPARATION_ETA:
            raise LogitSeparation("linear predictor diverges")
    eta = x @ beta
    gnorm = float(np.linalg.norm(x.T @ (y - n * expit(eta)) / total))
    if gnorm < tol:
        return LogitFit(beta, max_iter, gnorm)
    if np.abs(eta).max() > SEPARATION_ETA:
        raise LogitSeparation("linear predictor diverges")
    raise NoConvergence(f"logit did not converge in {max_iter} iterations (|grad| = {gnorm:.2e})")


def estimate_logit_pooled(
    panel: MaskedPanel,
    s: Union[CovariateVector, np.ndarray],
    p_floor: float = P_FLOOR,
) -> PropensityEstimate:
    """One logit of every ``W_it`` on ``(1, S_i)``; the probability is
    constant over time.  Entries are aggregated per unit into binomial
    counts, which gives the same MLE as the ``N T`` Bernoulli likelihood."""
    s = _as_covariates(s)
    if s.n_units != panel.n_units:
        raise DimensionMismatch("covariates must have one row per unit")
    x = _design(s)
    succ = panel.mask.sum(axis=1).astype(float)
    trials = np.full(panel.n_units, float(panel.n_periods))
    res = fit_logit(x, succ, trials)
    p = expit(x @ res.coef)
    probs = np.repeat(p[:, None], panel.n_periods, axis=1)
    diagnostics = {"coef": res.coef.tolist(), "iterations": res.n_iter}
    return PropensityEstimate(_clamp(probs, p_floor), "logit_pooled", diagnostics)


def estimate_logit_per_t(
    panel: MaskedPanel,
    s: Union[CovariateVector, np.ndarray],
    p_floor: float = P_FLOOR,
    min_cell: int = MIN_CELL,
) -> PropensityEstimate:
    """A separate logit of ``W_t`` on ``(1, S_i)`` for every period.

    A period in which every unit is observed gets ``p = 1``.  A period whose
    fit separates or fails to converge falls back to cell frequencies when
    all covariates are discrete and to the period's observed share
    otherwise; such periods are listed in ``diagnostics["fallback"]``.
    """
    s = _as_covariates(s)
    if s.n_units != panel.n_units:
        raise DimensionMismatch("covariates must have one row per unit")
    x = _design(s)
    w = panel.mask.astype(float)
    n, t_len = panel.shape
    probs = np.empty((n, t_len))
    iters = np.zeros(t_len, dtype=int)
    fallback: list[int] = []
    full: list[int] = []
    freq = None
    ones = np.ones(n)
    for t in range(t_len):
        col = w[:, t]
        if col.all():
            probs[:, t] = 1.0
            full.append(t)
            continue
        try:
            res = fit_logit(x, col, ones)
            probs[:, t] = expit(x @ res.coef)
            iters[t] = res.n_iter
        except (LogitSeparation, NoConvergence):
            fallback.append(t)
            if s.all_discrete:
                if freq is None:
                    freq = estimate_discrete_freq(panel, s, min_cell, p_floor=0.0).probs
                probs[:, t] = freq[:, t]
            else:
                probs[:, t] = col.mean()
    diagnostics = {"iterations": iters.tolist(), "fallback": fallback, "fully_observed": full}
    return PropensityEstimate(_clamp(probs, p_floor), "logit_per_t", diagnostics)


def estimate_constant(panel: MaskedPanel, p_floor: float = P_FLOOR) -> PropensityEstimate:
    """The per-period observed share, identical for every unit."""
    share = panel.mask.mean(axis=0)
    probs = np.repeat(share[None, :], panel.n_units, axis=0)
    return PropensityEstimate(_clamp(probs, p_floor), "constant", {})


def propensity_from_matrix(
    probs: np.ndarray, panel: Optional[MaskedPanel] = None, p_floor: float = P_FLOOR
) -> PropensityEstimate:
    """Wrap user-supplied probabilities (for example the true ones)."""
    probs = np.asarray(probs, dtype=float)
    if panel is not None and probs.shape != panel.shape:
        raise DimensionMismatch("propensity matrix must have the panel's shape")
    if not np.isfinite(probs).all():
        i, t = np.argwhere(~np.isfinite(probs))[0]
        raise NonFiniteValue(i, t)
    return PropensityEstimate(_clamp(probs, p_floor), "given", {})


def use_loadings_as_covariates(model) -> CovariateVector:
    """The estimated loadings as continuous covariates."""
    return CovariateVector(model.loadings, ("continuous",) * model.loadings.shape[1])
