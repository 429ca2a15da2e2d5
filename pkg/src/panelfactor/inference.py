"""Plug-in asymptotic variances and confidence intervals.

Two families of variance estimators are provided.

*Closed forms* (:func:`var_loading`, :func:`var_factor`, :func:`var_common`)
assemble the simplified-model expressions from the plug-in moments
(``Sigma_F``, ``Sigma_Lambda``, ``Sigma_Lambda_t``, ``Xi_F``, ``sigma_e^2``)
and the omega weights of the mask.  They are cheap and transparent.

The *linearized* engine (:class:`LinearizedVariance`) evaluates the variance
of the first-order error expansion of the estimator on the actual mask.  Both
parts of the expansion are linear in independent shocks: the idiosyncratic
errors ``e_it`` and the centred factor products ``G_s = F_s F_s' - Sigma_F``.
Every error is therefore a sum ``(1/T) sum_s <A_s, G_s>`` plus a weighted sum
of ``e``'s, whose variance is ``T^-2 sum_s <A_s, V A_s>`` plus
``sigma_e^2`` times a sum of squares, with ``V`` the covariance of
``vec(G_s)``.  The engine reproduces the closed forms when the mask is
exchangeable over time and is more accurate when it is not (for example
under simultaneous adoption, where the missing block sits in a few periods).

Conventions
-----------
Every :class:`VarianceReport` stores the *asymptotic* variance together with
its convergence rate: ``T`` for loadings and ``delta = min(N, T)`` for
factors and common components.  The standard error is
``sqrt(diag(variance) / rate)``.  Loading and factor reports refer to the
rotated parameterization in which the estimates live; only common components
(and the treatment effects built from them) are free of the rotation.

Vectorisation of ``r x r`` matrices is column-major.  ``F_t F_t'`` is
symmetric, so the fourth-moment matrix ``Xi_F`` does not depend on that
choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .errors import (
    DimensionMismatch,
    NoIdentifiablePeriods,
    OverlapTooSparse,
    PeriodUnidentified,
    SingularMoment,
)
from .factor_est import FactorModel
from .panel_core import (
    MaskedPanel,
    OmegaWeights,
    OverlapStats,
    PeriodOmega,
    compute_omega_weights,
    compute_overlap,
    compute_period_omega,
)

__all__ = [
    "MomentEstimates",
    "ResidualDependenceSpec",
    "VarianceReport",
    "estimate_moments",
    "gamma_obs_factor",
    "gamma_obs_loading",
    "var_loading",
    "var_factor",
    "var_common",
    "common_variance_grid",
    "confidence_interval",
    "LinearizedVariance",
    "PanelInference",
    "PSD_TOL",
]

#: Eigenvalues below ``-PSD_TOL`` trigger a warning when projecting to PSD.
PSD_TOL = 1e-10
#: User dependence sets may hold at most this many pairs per unit and period.
DEP_SET_FACTOR = 10


class IndefiniteVarianceWarning(UserWarning):
    """An assembled variance had a clearly negative eigenvalue."""


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentEstimates:
    """Plug-in moments of a fitted model.

    ``xi_F`` is the raw fourth moment ``(1/T) sum vec(F F') vec(F F')'``;
    ``xi_F_centered`` subtracts ``vec(Sigma_F) vec(Sigma_F)'`` and is the
    covariance of ``vec(F_t F_t')`` that enters every variance formula.
    ``sigma_LSt`` holds ``(1/N) sum_i W_it / p_it^2 Lambda_i Lambda_i'`` and is
    present only when a propensity estimate was supplied.
    """

    sigma_F: np.ndarray
    sigma_L: np.ndarray
    sigma_Lt: np.ndarray
    xi_F: np.ndarray
    xi_F_centered: np.ndarray
    sigma_e2: float
    loadings: np.ndarray
    factors: np.ndarray
    factor_ok: np.ndarray
    n_units: int
    n_periods: int
    sigma_LSt: Optional[np.ndarray] = None

    @property
    def rank(self) -> int:
        return self.sigma_F.shape[0]

    @property
    def delta(self) -> int:
        return min(self.n_units, self.n_periods)

    @property
    def xi4(self) -> np.ndarray:
        """``xi_F_centered`` as an ``r x r x r x r`` tensor ``V[a, b, c, d]``."""
        r = self.rank
        return self.xi_F_centered.reshape(r, r, r, r)


def estimate_moments(
    panel: MaskedPanel, model: FactorModel, propensity=None
) -> MomentEstimates:
    """Plug-in moments from ``Lambda~``, ``F~`` and the residuals.

    Periods whose factor regression is unidentified are skipped in every
    time average.  ``sigma_e2`` is the mean squared residual over the observed
    entries of the identified periods.
    """
    if (model.n_units, model.n_periods) != panel.shape:
        raise DimensionMismatch("model and panel dimensions differ")
    ok = np.asarray(model.factor_ok, dtype=bool)
    if not ok.any():
        raise NoIdentifiablePeriods("no period has an identified factor regression")
    lam = model.loadings
    n, t_len = panel.shape
    r = lam.shape[1]
    f = model.factors[ok]
    sigma_F = f.T @ f / f.shape[0]
    outer = (f[:, :, None] * f[:, None, :]).reshape(f.shape[0], r * r)
    xi = outer.T @ outer / f.shape[0]
    vs = sigma_F.reshape(-1)
    xi_c = xi - np.outer(vs, vs)
    sigma_L = lam.T @ lam / n
    w = panel.mask.astype(float)
    sigma_Lt = np.einsum("it,ia,ib->tab", w, lam, lam, optimize=True) / n
    fz = np.where(ok[:, None], model.factors, 0.0)
    resid = panel.values - lam @ fz.T
    use = panel.observed & ok[None, :]
    sigma_e2 = float((resid[use] ** 2).mean())
    sigma_LSt = None
    if propensity is not None:
        probs = np.asarray(getattr(propensity, "probs", propensity), dtype=float)
        if probs.shape != panel.shape:
            raise DimensionMismatch("propensity matrix must have the panel's shape")
        wts = np.where(panel.observed, 1.0 / np.where(panel.observed, probs, 1.0) ** 2, 0.0)
        sigma_LSt = np.einsum("it,ia,ib->tab", wts, lam, lam, optimize=True) / n
    return MomentEstimates(
        sigma_F=sigma_F,
        sigma_L=sigma_L,
        sigma_Lt=sigma_Lt,
        xi_F=xi,
        xi_F_centered=xi_c,
        sigma_e2=sigma_e2,
        loadings=lam,
        factors=model.factors,
        factor_ok=ok,
        n_units=n,
        n_periods=t_len,
        sigma_LSt=sigma_LSt,
    )


def _inv(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (a + a.T))
    if eig[0] <= max(abs(eig[-1]), 1e-300) * 1e-12:
        raise SingularMoment(f"{what} is not invertible")
    return np.linalg.inv(a)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceReport:
    """An asymptotic variance with its labelled, additive components.

    ``variance == sum(components.values())`` to rounding.  ``weights`` records
    the omega values that entered the assembly (empty for the linearized
    engine, which uses the mask directly).
    """

    target: tuple
    variance: Union[float, np.ndarray]
    rate: float
    components: Mapping[str, Union[float, np.ndarray]]
    weights: Mapping[str, float] = field(default_factory=dict)
    method: str = "closed_form"

    @property
    def se(self) -> Union[float, np.ndarray]:
        v = self.variance
        if np.ndim(v) == 0:
            return float(np.sqrt(max(float(v), 0.0) / self.rate))
        return np.sqrt(np.clip(np.diag(v), 0.0, None) / self.rate)

    @property
    def finite_sample_variance(self) -> Union[float, np.ndarray]:
        return self.variance / self.rate


def _finalize(
    target: tuple,
    components: dict,
    rate: float,
    weights: Optional[dict] = None,
    method: str = "closed_form",
) -> VarianceReport:
    total = sum(components.values())
    if np.ndim(total) == 0:
        total = float(total)
        if total < 0.0:
            if total < -PSD_TOL:
                warnings.warn(
                    f"variance for {target} is negative ({total:.3g}); clamped to zero",
                    IndefiniteVarianceWarning,
                    stacklevel=3,
                )
            components["psd_adjustment"] = -total
            total = 0.0
    else:
        total = 0.5 * (total + total.T)
        vals, vecs = np.linalg.eigh(total)
        if vals[0] < 0.0:
            if vals[0] < -PSD_TOL:
                warnings.warn(
                    f"variance for {target} has eigenvalue {vals[0]:.3g}; projected to PSD",
                    IndefiniteVarianceWarning,
                    stacklevel=3,
                )
            projected = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
            components["psd_adjustment"] = projected - total
            total = projected
    return VarianceReport(target, total, float(rate), components, dict(weights or {}), method)


def confidence_interval(
    report: VarianceReport, point, level: float = 0.95
) -> tuple:
    """``point -/+ z_{(1 + level)/2} * se`` (elementwise for vectors)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    z = norm.ppf(0.5 * (1.0 + level))
    half = z * np.asarray(report.se)
    point = np.asarray(point, dtype=float)
    lo, hi = point - half, point + half
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


# ---------------------------------------------------------------------------
# residual-dependence sets and the sparse Gamma^obs estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualDependenceSpec:
    """Which residual products enter the ``Gamma^obs`` estimators.

    ``mode="diagonal"`` keeps only squared residuals (cross-sectional and
    serial independence).  ``mode="user_sets"`` uses exactly the listed
    pairs:

    * ``cross_sets[t]`` is an iterable of unit pairs ``(i, j)`` whose errors
      are correlated at period ``t``; include ``(i, i)`` for the variance
      terms.
    * ``serial_sets`` is an iterable of ``(i, j, t, s)`` meaning ``e_it`` and
      ``e_js`` are correlated; the loading estimator of unit ``j`` uses the
      entries with ``i == j``.

    Pairs are unordered: ``(i, j)`` and ``(j, i)`` denote the same product and
    are counted in both orders once.  Sets larger than ``10 N`` pairs per
    period (or ``10 N T`` quadruples) are rejected.
    """

    mode: str = "diagonal"
    cross_sets: Optional[Mapping[int, Iterable[tuple]]] = None
    serial_sets: Optional[Iterable[tuple]] = None

    def __post_init__(self):
        if self.mode not in ("diagonal", "user_sets"):
            raise ValueError("mode must be 'diagonal' or 'user_sets'")
        cross = {int(t): _unordered(p) for t, p in (self.cross_sets or {}).items()}
        serial = {}
        for i, j, t, s in self.serial_sets or ():
            if int(i) != int(j):
                key = None
            else:
                key = int(i)
            serial.setdefault(key, set()).add(tuple(sorted((int(t), int(s)))))
        serial.pop(None, None)
        object.__setattr__(self, "cross_sets", cross)
        object.__setattr__(self, "serial_sets", serial)

    def check_size(self, n_units: int, n_periods: int) -> None:
        cap = DEP_SET_FACTOR * n_units
        for t, pairs in self.cross_sets.items():
            if len(pairs) > cap:
                raise ValueError(f"cross-sectional set at period {t} exceeds {cap} pairs")
        total = sum(len(v) for v in self.serial_sets.values())
        if total > DEP_SET_FACTOR * n_units * n_periods:
            raise ValueError("serial dependence set is larger than O(N T)")


def _unordered(pairs) -> set:
    return {tuple(sorted((int(i), int(j)))) for i, j in pairs}


def _residuals(panel: MaskedPanel, model: FactorModel) -> np.ndarray:
    fz = np.where(model.factor_ok[:, None], model.factors, 0.0)
    return np.where(panel.observed, panel.values - model.loadings @ fz.T, 0.0)


def gamma_obs_factor(
    panel: MaskedPanel,
    model: FactorModel,
    dep: Optional[ResidualDependenceSpec],
    t: int,
    propensity=None,
) -> np.ndarray:
    """``(1/N) sum_{(i,j) in E_t} W_it W_jt Lambda_i Lambda_j' e_it e_jt``.

    With a propensity estimate each unit's term is multiplied by ``1/p_it``,
    which gives the estimator for the weighted factor regression.
    """
    dep = dep or ResidualDependenceSpec()
    t = int(t)
    if not model.factor_ok[t]:
        raise PeriodUnidentified(t)
    n = panel.n_units
    lam = model.loadings
    e = _residuals(panel, model)[:, t]
    a = panel.mask[:, t].astype(float) * e
    if propensity is not None:
        probs = np.asarray(getattr(propensity, "probs", propensity), dtype=float)
        a = np.where(panel.mask[:, t] > 0, a / np.where(panel.mask[:, t] > 0, probs[:, t], 1.0), 0.0)
    x = lam * a[:, None]
    if dep.mode == "diagonal":
        return x.T @ x / n
    dep.check_size(*panel.shape)
    out = np.zeros((lam.shape[1], lam.shape[1]))
    for i, j in dep.cross_sets.get(t, ()):
        term = np.outer(x[i], x[j])
        out += term if i == j else term + term.T
    return out / n


def _pair_matrix(panel: MaskedPanel, model: FactorModel) -> np.ndarray:
    """``P[j, t] = (1/N) sum_i W_it W_jt Lambda_i Lambda_i' / q_ij``."""
    stats = model.overlap
    if stats is None or stats.pair_counts.shape[0] != panel.n_units:
        stats = compute_overlap(panel, 1)
    q = stats.pair_ratios
    if (q <= 0).any():
        i, j = np.argwhere(q <= 0)[0]
        raise OverlapTooSparse(i, j, 0, stats.min_overlap)
    n, t_len = panel.shape
    lam = model.loadings
    r = lam.shape[1]
    w = panel.mask.astype(float)
    z = (w[:, :, None, None] * (lam[:, None, :, None] * lam[:, None, None, :])).reshape(n, -1)
    p = ((1.0 / q) @ z).reshape(n, t_len, r, r)
    return p * (w[:, :, None, None] / n)


def gamma_obs_loading(
    panel: MaskedPanel,
    model: FactorModel,
    dep: Optional[ResidualDependenceSpec],
    j: int,
) -> np.ndarray:
    """Sparse plug-in for the observation-noise part of the loading variance.

    Writing ``P_jt = (1/N) sum_i W_it W_jt Lambda_i Lambda_i' / q_ij`` the
    estimator is ``(1/T) sum_{(t,s) in E_j} P_jt F_t F_s' P_js e_jt e_js``.
    In diagonal mode only ``t == s`` enters, giving approximately
    ``omega_jj Sigma_F sigma_e^2`` in the simplified model.
    """
    dep = dep or ResidualDependenceSpec()
    j = int(j)
    t_len = panel.n_periods
    p = _pair_matrix(panel, model)[j]
    fz = np.where(model.factor_ok[:, None], model.factors, 0.0)
    e = _residuals(panel, model)[j]
    v = np.einsum("tab,tb->ta", p, fz) * e[:, None]
    if dep.mode == "diagonal":
        return v.T @ v / t_len
    dep.check_size(*panel.shape)
    out = np.zeros((p.shape[1], p.shape[1]))
    for t, s in dep.serial_sets.get(j, ()):
        term = np.outer(v[t], v[s])
        out += term if t == s else term + term.T
    return out / t_len


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def _vq(a: np.ndarray, v4: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_{abcd} A[..., a, b] V[a, b, c, d] B[..., c, d]``."""
    r = v4.shape[0]
    v2 = v4.reshape(r * r, r * r)
    aa = a.reshape(a.shape[:-2] + (r * r,))
    bb = b.reshape(b.shape[:-2] + (r * r,))
    return np.einsum("...p,pq,...q->...", aa, v2, bb)


def _loading_miss(moments: MomentEstimates, lam_j: np.ndarray, m_inv: np.ndarray) -> np.ndarray:
    """``M (Lambda_j' (x) Sigma_L) V (Lambda_j (x) Sigma_L) M'`` via matrix
    forms: column ``k`` of ``Lambda_j (x) Sigma_L`` is ``vec(Sigma_L e_k Lambda_j')``."""
    r = moments.rank
    sl = moments.sigma_L
    cols = np.einsum("ak,b->kab", sl, lam_j)
    inner = _vq(cols[:, None], moments.xi4, cols[None, :])
    return m_inv @ inner @ m_inv.T


def _factor_miss_inner(moments: MomentEstimates, m_t: np.ndarray, s_lt: np.ndarray) -> np.ndarray:
    """``(I (x) m') (S (x) Sigma_L) V (S (x) Sigma_L) (I (x) m)`` with
    ``m = M' F_t``: column ``k`` of ``S (x) (Sigma_L m)`` is
    ``vec((Sigma_L m)(S e_k)')``."""
    u = moments.sigma_L @ m_t
    cols = np.einsum("a,bk->kab", u, s_lt)
    return _vq(cols[:, None], moments.xi4, cols[None, :])


def _factor_cov_inner(
    moments: MomentEstimates, m_t: np.ndarray, s_lt: np.ndarray, lam_j: np.ndarray
) -> np.ndarray:
    """``(I (x) m') (S (x) Sigma_L) V (Lambda_j (x) Sigma_L)``, an ``r x r``
    matrix (rows from the factor side, columns from the loading side)."""
    u = moments.sigma_L @ m_t
    left = np.einsum("a,bk->kab", u, s_lt)
    right = np.einsum("ak,b->kab", moments.sigma_L, lam_j)
    return _vq(left[:, None], moments.xi4, right[None, :])


def _check_t(moments: MomentEstimates, t: int) -> int:
    t = int(t)
    if not 0 <= t < moments.n_periods:
        raise IndexError(f"period {t} out of range")
    if not moments.factor_ok[t]:
        raise PeriodUnidentified(t)
    return t


def _omega_scalar(omega: OmegaWeights, period: Optional[PeriodOmega], weighting: str, t, j=None):
    if weighting == "global":
        w = float(omega.omega)
        wj = None if j is None else float(omega.omega_j[j])
    elif weighting == "period":
        if period is None:
            raise ValueError("period weighting needs a PeriodOmega")
        w = float(period.omega_t[t])
        wj = None if j is None else float(period.omega_jt[j, t])
    else:
        raise ValueError("weighting must be 'global' or 'period'")
    return w, wj


def var_loading(
    j: int,
    moments: MomentEstimates,
    omega: OmegaWeights,
    gamma_obs: Optional[np.ndarray] = None,
) -> VarianceReport:
    """Asymptotic variance of ``sqrt(T)(Lambda~_j - Lambda_j)``.

    ``omega_jj Sigma_F^-1 sigma_e^2 + (omega_jj - 1) Sigma^miss_{Lambda,j}``.
    When ``gamma_obs`` (from :func:`gamma_obs_loading`) is given it replaces
    the homoskedastic first term, sandwiched by ``Sigma_F^-1 Sigma_L^-1``.
    """
    j = int(j)
    sf_inv = _inv(moments.sigma_F, "Sigma_F")
    sl_inv = _inv(moments.sigma_L, "Sigma_Lambda")
    m_inv = sf_inv @ sl_inv
    w_jj = float(omega.omega_jj[j])
    lam_j = moments.loadings[j]
    if gamma_obs is None:
        obs = w_jj * sf_inv * moments.sigma_e2
    else:
        obs = m_inv @ gamma_obs @ m_inv.T
    miss = (w_jj - 1.0) * _loading_miss(moments, lam_j, m_inv)
    comps = {"obs": obs, "miss": miss}
    return _finalize(("loading", j), comps, moments.n_periods, {"omega_jj": w_jj})


def var_factor(
    t: int,
    moments: MomentEstimates,
    omega: OmegaWeights,
    mode: str = "plain",
    weighting: str = "global",
    period_omega: Optional[PeriodOmega] = None,
    gamma_obs: Optional[np.ndarray] = None,
) -> VarianceReport:
    """Asymptotic variance of ``sqrt(delta)(F~_t - F_t)``.

    ``(delta/N) Sigma^obs_{F,t} + (delta/T)(omega - 1) Sigma^miss_{F,t}``.
    ``mode="weighted"`` uses the propensity-weighted forms, in which the
    outer matrices are ``Sigma_L^-1`` and the observation term is
    ``Sigma_L^-1 Sigma_{L,S,t} Sigma_L^-1 sigma_e^2``.  With
    ``weighting="period"`` the scalar ``omega`` is replaced by the
    period-specific ``omega_t``.
    """
    t = _check_t(moments, t)
    n, t_len, delta = moments.n_units, moments.n_periods, moments.delta
    w, _ = _omega_scalar(omega, period_omega, weighting, t)
    sf_inv = _inv(moments.sigma_F, "Sigma_F")
    sl_inv = _inv(moments.sigma_L, "Sigma_Lambda")
    m_t = (sf_inv @ sl_inv).T @ moments.factors[t]
    if mode == "plain":
        s_lt = moments.sigma_Lt[t]
        s_inv = _inv(s_lt, f"Sigma_Lambda_t at period {t}")
        middle = moments.sigma_e2 * s_inv if gamma_obs is None else s_inv @ gamma_obs @ s_inv
    elif mode == "weighted":
        if moments.sigma_LSt is None and gamma_obs is None:
            raise ValueError("weighted mode needs moments estimated with a propensity")
        s_lt = moments.sigma_L
        s_inv = sl_inv
        if gamma_obs is None:
            middle = sl_inv @ moments.sigma_LSt[t] @ sl_inv * moments.sigma_e2
        else:
            middle = sl_inv @ gamma_obs @ sl_inv
    else:
        raise ValueError("mode must be 'plain' or 'weighted'")
    miss = s_inv @ _factor_miss_inner(moments, m_t, s_lt) @ s_inv
    comps = {"obs": (delta / n) * middle, "miss": (delta / t_len) * (w - 1.0) * miss}
    return _finalize(("factor", t), comps, delta, {"omega": w})


def var_common(
    j: int,
    t: int,
    moments: MomentEstimates,
    omega: OmegaWeights,
    mode: str = "plain",
    weighting: str = "global",
    period_omega: Optional[PeriodOmega] = None,
) -> VarianceReport:
    """Asymptotic variance of ``sqrt(delta)(C~_jt - C_jt)`` from the five
    closed-form pieces (loading obs/miss, factor obs/miss, miss covariance)."""
    j = int(j)
    t = _check_t(moments, t)
    n, t_len, delta = moments.n_units, moments.n_periods, moments.delta
    w, w_j = _omega_scalar(omega, period_omega, weighting, t, j)
    w_jj = float(omega.omega_jj[j])
    sf_inv = _inv(moments.sigma_F, "Sigma_F")
    sl_inv = _inv(moments.sigma_L, "Sigma_Lambda")
    m_inv = sf_inv @ sl_inv
    f_t = moments.factors[t]
    lam_j = moments.loadings[j]
    m_t = m_inv.T @ f_t
    if mode == "plain":
        s_lt = moments.sigma_Lt[t]
        s_inv = _inv(s_lt, f"Sigma_Lambda_t at period {t}")
        obs_f = moments.sigma_e2 * s_inv
    elif mode == "weighted":
        if moments.sigma_LSt is None:
            raise ValueError("weighted mode needs moments estimated with a propensity")
        s_lt = moments.sigma_L
        s_inv = sl_inv
        obs_f = sl_inv @ moments.sigma_LSt[t] @ sl_inv * moments.sigma_e2
    else:
        raise ValueError("mode must be 'plain' or 'weighted'")
    sig_miss_l = _loading_miss(moments, lam_j, m_inv)
    sig_miss_f = s_inv @ _factor_miss_inner(moments, m_t, s_lt) @ s_inv
    cov = s_inv @ _factor_cov_inner(moments, m_t, s_lt, lam_j) @ m_inv.T
    comps = {
        "obs_loading": (delta / t_len) * w_jj * float(f_t @ sf_inv @ f_t) * moments.sigma_e2,
        "miss_loading": (delta / t_len) * (w_jj - 1.0) * float(f_t @ sig_miss_l @ f_t),
        "miss_factor": (delta / t_len) * (w - 1.0) * float(lam_j @ sig_miss_f @ lam_j),
        "miss_cov": -2.0 * (delta / t_len) * (w_j - 1.0) * float(lam_j @ cov @ f_t),
        "obs_factor": (delta / n) * float(lam_j @ obs_f @ lam_j),
    }
    weights = {"omega_jj": w_jj, "omega_j": w_j, "omega": w}
    return _finalize(("common", j, t), comps, delta, weights)


def common_variance_grid(
    moments: MomentEstimates,
    omega: OmegaWeights,
    mode: str = "plain",
    weighting: str = "global",
    period_omega: Optional[PeriodOmega] = None,
) -> np.ndarray:
    """Finite-sample closed-form variance of ``C~_jt`` on the full grid.

    The three ``Xi_F`` quadratic forms of :func:`var_common` all reduce to
    ``q_jt = <u_t Lambda_j', V u_t Lambda_j'>`` with ``u_t = Sigma_L M' F_t``,
    so the grid is ``(1/T)[omega_jj F' Sigma_F^-1 F sigma^2 + c_jt q_jt]
    + (1/N) Lambda_j' Sigma^obs_{F,t} Lambda_j`` with
    ``c_jt = (omega_jj - 1) + (omega - 1) - 2 (omega_j - 1)``.
    Unidentified periods hold ``NaN``.
    """
    n, t_len = moments.n_units, moments.n_periods
    ok = moments.factor_ok
    sf_inv = _inv(moments.sigma_F, "Sigma_F")
    sl_inv = _inv(moments.sigma_L, "Sigma_Lambda")
    m_inv = sf_inv @ sl_inv
    lam = moments.loadings
    fz = np.where(ok[:, None], moments.factors, 0.0)
    u = fz @ m_inv @ moments.sigma_L
    w2 = np.einsum("ta,abcd,tc->tbd", u, moments.xi4, u)
    q = np.einsum("jb,tbd,jd->jt", lam, w2, lam)
    if weighting == "global":
        w_t = np.full(t_len, float(omega.omega))
        w_jt = np.repeat(np.asarray(omega.omega_j)[:, None], t_len, axis=1)
    elif weighting == "period":
        if period_omega is None:
            raise ValueError("period weighting needs a PeriodOmega")
        w_t = np.asarray(period_omega.omega_t)
        w_jt = np.asarray(period_omega.omega_jt)
    else:
        raise ValueError("weighting must be 'global' or 'period'")
    w_jj = np.asarray(omega.omega_jj)[:, None]
    coef = (w_jj - 1.0) + (w_t[None, :] - 1.0) - 2.0 * (w_jt - 1.0)
    ff = np.einsum("ta,ab,tb->t", fz, sf_inv, fz)
    s2 = moments.sigma_e2
    if mode == "plain":
        obs_mid = np.zeros((t_len, moments.rank, moments.rank))
        obs_mid[ok] = np.linalg.inv(moments.sigma_Lt[ok]) * s2
    elif mode == "weighted":
        if moments.sigma_LSt is None:
            raise ValueError("weighted mode needs moments estimated with a propensity")
        obs_mid = sl_inv @ moments.sigma_LSt @ sl_inv * s2
    else:
        raise ValueError("mode must be 'plain' or 'weighted'")
    obs_f = np.einsum("ja,tab,jb->jt", lam, obs_mid, lam)
    var = (w_jj * ff[None, :] * s2 + coef * q) / t_len + obs_f / n
    var = np.clip(var, 0.0, None)
    var[:, ~ok] = np.nan
    return var


# ---------------------------------------------------------------------------
# linearized engine
# ---------------------------------------------------------------------------


class LinearizedVariance:
    """Finite-mask variance of the first-order error expansion.

    With ``M = Sigma_F^-1 Sigma_L^-1``, ``P_js`` as in
    :func:`gamma_obs_loading` and ``K_js = P_js - Sigma_L`` the loading error
    of unit ``j`` is::

        eps_j = M [ (1/T) sum_s P_js F_s e_js + (1/T) sum_s K_js G_s Lambda_j ]

    The factor regression at ``t`` uses weights ``k_it`` (``W_it`` for the
    plain estimator, ``W_it / p_it`` for the weighted one) and with
    ``S_t = (1/N) sum_i k_it Lambda_i Lambda_i'`` its error is
    ``S_t^-1 (1/N) sum_i k_it Lambda_i (e_it - eps_i' F_t)``.

    The ``G``-driven ("miss") part of any linear combination of these errors
    is a functional ``(1/T) sum_s <A_s, G_s>``; the methods below build the
    coefficient matrices ``A_s`` and contract them with the covariance of
    ``vec(G_s)``.  The ``e``-driven ("obs") parts are weighted sums of
    independent errors.  Second-order terms (products of two estimation
    errors) are dropped.
    """

    def __init__(
        self,
        panel: MaskedPanel,
        model: FactorModel,
        moments: Optional[MomentEstimates] = None,
        propensity=None,
    ):
        if model.weighted and propensity is None:
            raise ValueError("the weighted estimator needs its propensity estimate")
        self.panel = panel
        self.model = model
        self.moments = moments or estimate_moments(panel, model, propensity)
        mo = self.moments
        self.n, self.t_len = panel.shape
        self.r = model.rank
        self.lam = model.loadings
        self.fz = np.where(mo.factor_ok[:, None], model.factors, 0.0)
        self.w = panel.mask.astype(float)
        if model.weighted:
            probs = np.asarray(getattr(propensity, "probs", propensity), dtype=float)
            obs = panel.observed
            self.kappa = np.where(obs, 1.0 / np.where(obs, probs, 1.0), 0.0)
        else:
            self.kappa = self.w
        lam = self.lam
        self.s_kt = np.einsum("it,ia,ib->tab", self.kappa, lam, lam, optimize=True) / self.n
        self.s_k2t = np.einsum("it,ia,ib->tab", self.kappa**2, lam, lam, optimize=True) / self.n
        sf_inv = _inv(mo.sigma_F, "Sigma_F")
        sl_inv = _inv(mo.sigma_L, "Sigma_Lambda")
        self.m_inv = sf_inv @ sl_inv
        self.mvecs = self.fz @ self.m_inv  # row t is (M' F_t)'
        self.v4 = mo.xi4
        self.v2 = mo.xi_F_centered
        self.p = _pair_matrix(panel, model)
        self.k = self.p - mo.sigma_L
        self._bk: dict[int, np.ndarray] = {}
        self._sinv = np.zeros((self.t_len, self.r, self.r))
        ok = mo.factor_ok
        for t in np.flatnonzero(ok):
            self._sinv[t] = _inv(self.s_kt[t], f"factor Gram matrix at period {t}")
        self._obs_mid = self._sinv @ self.s_k2t @ self._sinv

    # -- building blocks -------------------------------------------------
    def m_vec(self, t: int) -> np.ndarray:
        return self.mvecs[t]

    def sigma_lt_inv(self, t: int) -> np.ndarray:
        return self._sinv[_check_t(self.moments, t)]

    def factor_miss_coef(self, t: int) -> np.ndarray:
        """``B[k, s]`` (shape ``r x T x r x r``): the miss part of component
        ``k`` of the factor error at ``t`` is ``(1/T) sum_s <B[k, s], G_s>``."""
        t = _check_t(self.moments, t)
        if t not in self._bk:
            n, t_len, r = self.n, self.t_len, self.r
            x = self.kappa[:, t, None] * (self.lam @ self._sinv[t])
            km = np.einsum("isac,c->isa", self.k, self.mvecs[t], optimize=True)
            xl = (x[:, :, None] * self.lam[:, None, :]).reshape(n, r * r)
            b = -(xl.T @ km.reshape(n, t_len * r)) / n
            self._bk[t] = b.reshape(r, r, t_len, r).transpose(0, 2, 3, 1)
        return self._bk[t]

    def loading_miss_coef(self, j: int, t: int) -> np.ndarray:
        """``A[s]`` with the miss part of ``F_t' eps_j`` equal to
        ``(1/T) sum_s <A[s], G_s>``."""
        return self.loading_functional_coef(j, self.fz[t])

    def loading_functional_coef(self, j: int, x: np.ndarray) -> np.ndarray:
        """Miss coefficients of ``x' eps_j``: ``A[s] = (K_js M' x) Lambda_j'``."""
        km = self.k[j] @ (self.m_inv.T @ x)
        return km[:, :, None] * self.lam[j][None, None, :]

    def loading_functional_obs(self, j: int, x: np.ndarray) -> np.ndarray:
        """Weights on ``e_js`` of ``x' eps_j``: ``(1/T) x' M P_js F_s``."""
        return np.einsum("a,sab,sb->s", self.m_inv.T @ x, self.p[j], self.fz) / self.t_len

    def factor_functional_coef(self, v: np.ndarray) -> np.ndarray:
        """Miss coefficients of ``sum_u v_u' f_u`` for a ``T x r`` matrix ``v``
        of weights on the factor errors ``f_u`` (rows at unidentified periods
        must be zero)."""
        v = np.asarray(v, dtype=float)
        sv = np.einsum("uab,ub->ua", self._sinv, v)
        z = self.kappa * (self.lam @ sv.T)  # z[i, u] = k_iu Lambda_i' S_u^-1 v_u
        nu = z @ self.mvecs  # nu[i] = sum_u z[i, u] M' F_u
        kn = np.einsum("isac,ic->isa", self.k, nu, optimize=True)
        return -np.einsum("isa,ib->sab", kn, self.lam, optimize=True) / self.n

    def factor_functional_obs_var(self, v1: np.ndarray, v2: Optional[np.ndarray] = None) -> float:
        """``sigma_e^2 / N sum_u v1_u' S_u^-1 S2_u S_u^-1 v2_u`` (covariance of the
        ``e`` parts of two factor functionals)."""
        v2 = v1 if v2 is None else v2
        val = np.einsum("ua,uab,ub->", v1, self._obs_mid, v2)
        return self.moments.sigma_e2 * float(val) / self.n

    def quad(self, a: np.ndarray, b: Optional[np.ndarray] = None) -> float:
        """``T^-2 sum_s <A_s, V B_s>``: covariance of two miss functionals."""
        b = a if b is None else b
        return float(_vq(a, self.v4, b).sum()) / self.t_len**2

    # -- reports ---------------------------------------------------------
    def loading(self, j: int) -> VarianceReport:
        j = int(j)
        t_len, s2 = self.t_len, self.moments.sigma_e2
        g = np.einsum("sab,sb->sa", self.p[j], self.fz) @ self.m_inv.T
        obs = s2 * (g.T @ g) / t_len**2
        vj = np.einsum("b,abcd,d->ac", self.lam[j], self.v4, self.lam[j])
        km = self.k[j] @ self.m_inv.T  # [s, a, k]
        miss = np.einsum("sak,ac,scl->kl", km, vj, km) / t_len**2
        comps = {"obs": t_len * obs, "miss": t_len * miss}
        return _finalize(("loading", j), comps, t_len, method="linearized")

    def factor(self, t: int) -> VarianceReport:
        t = _check_t(self.moments, t)
        n, delta = self.n, self.moments.delta
        obs = self.moments.sigma_e2 * self._obs_mid[t] / n
        b = self.factor_miss_coef(t)
        miss = _vq(b[:, None], self.v4, b[None, :]).sum(axis=-1) / self.t_len**2
        comps = {"obs": delta * obs, "miss": delta * miss}
        return _finalize(("factor", t), comps, delta, method="linearized")

    def common(self, j: int, t: int) -> VarianceReport:
        j = int(j)
        t = _check_t(self.moments, t)
        n, t_len, delta = self.n, self.t_len, self.moments.delta
        s2 = self.moments.sigma_e2
        lam_j = self.lam[j]
        g = self.loading_functional_obs(j, self.fz[t])
        h = float(lam_j @ self._obs_mid[t] @ lam_j)
        h_cross = self.kappa[j, t] * float(lam_j @ self._sinv[t] @ lam_j)
        a_l = self.loading_miss_coef(j, t)
        a_f = np.einsum("k,ksab->sab", lam_j, self.factor_miss_coef(t))
        comps = {
            "obs_loading": delta * s2 * float(g @ g),
            "miss_loading": delta * self.quad(a_l),
            "miss_factor": delta * self.quad(a_f),
            "miss_cov": 2.0 * delta * self.quad(a_l, a_f),
            "obs_factor": delta * s2 * h / n,
            "obs_cross": delta * 2.0 * s2 * self.w[j, t] * g[t] * h_cross / n,
        }
        return _finalize(("common", j, t), comps, delta, method="linearized")

    def common_variance_column(self, t: int) -> np.ndarray:
        """Finite-sample variance of ``C~_jt`` for every unit ``j`` at ``t``."""
        t = _check_t(self.moments, t)
        n, t_len, r = self.n, self.t_len, self.r
        s2 = self.moments.sigma_e2
        m_t = self.mvecs[t]
        km = np.einsum("jsac,c->jsa", self.k, m_t, optimize=True)
        a = km[:, :, :, None] * self.lam[:, None, None, :]
        bk = self.factor_miss_coef(t).reshape(r, t_len * r * r)
        a += (self.lam @ bk).reshape(n, t_len, r, r)
        flat = a.reshape(n * t_len, r * r)
        miss = np.einsum("xp,xp->x", flat @ self.v2, flat).reshape(n, t_len).sum(axis=1)
        g = np.einsum("a,jsab,sb->js", m_t, self.p, self.fz, optimize=True) / t_len
        h = np.einsum("ja,ab,jb->j", self.lam, self._obs_mid[t], self.lam)
        h_cross = self.kappa[:, t] * np.einsum("ja,ab,jb->j", self.lam, self._sinv[t], self.lam)
        obs = s2 * (g**2).sum(axis=1) + s2 * h / n
        obs += 2.0 * s2 * self.w[:, t] * g[:, t] * h_cross / n
        return np.clip(miss / t_len**2 + obs, 0.0, None)


# ---------------------------------------------------------------------------
# convenience front end
# ---------------------------------------------------------------------------


class PanelInference:
    """Bundle of moments, omega weights and (optionally) the linearized
    engine for one fitted model.

    ``method="linearized"`` (default) uses :class:`LinearizedVariance`;
    ``method="closed_form"`` uses the closed-form plug-ins with
    ``weighting`` ``"period"`` (default) or ``"global"``.
    """

    def __init__(
        self,
        panel: MaskedPanel,
        model: FactorModel,
        propensity=None,
        method: Optional[str] = None,
        weighting: str = "period",
    ):
        self.panel = panel
        self.model = model
        self.mode = "weighted" if model.weighted else "plain"
        method = method or "linearized"
        if method not in ("linearized", "closed_form"):
            raise ValueError("method must be 'linearized' or 'closed_form'")
        if model.weighted and propensity is None:
            raise ValueError("the weighted estimator needs its propensity estimate")
        self.method = method
        self.weighting = weighting
        self.propensity = propensity
        self.moments = estimate_moments(panel, model, propensity)
        stats = model.overlap if model.overlap is not None else compute_overlap(panel, 1)
        self.omega = compute_omega_weights(panel, stats)
        cross = None
        if model.weighted:
            probs = np.asarray(getattr(propensity, "probs", propensity), dtype=float)
            cross = np.where(panel.observed, 1.0 / np.where(panel.observed, probs, 1.0), 0.0)
        self.period_omega = compute_period_omega(panel, stats, cross)
        self.engine = None
        if method == "linearized":
            self.engine = LinearizedVariance(panel, model, self.moments, propensity)

    def loading(self, j: int) -> VarianceReport:
        if self.engine is not None:
            return self.engine.loading(j)
        return var_loading(j, self.moments, self.omega)

    def factor(self, t: int) -> VarianceReport:
        if self.engine is not None:
            return self.engine.factor(t)
        return var_factor(t, self.moments, self.omega, self.mode, self.weighting, self.period_omega)

    def common(self, j: int, t: int) -> VarianceReport:
        if self.engine is not None:
            return self.engine.common(j, t)
        return var_common(j, t, self.moments, self.omega, self.mode, self.weighting, self.period_omega)

    def common_se(self, entries: Optional[np.ndarray] = None) -> np.ndarray:
        """Standard errors of ``C~`` on an ``N x T`` grid.

        ``entries`` is a boolean mask selecting the cells to compute (all by
        default); other cells and unidentified periods hold ``NaN``.
        """
        n, t_len = self.panel.shape
        sel = np.ones((n, t_len), dtype=bool) if entries is None else np.asarray(entries, bool)
        out = np.full((n, t_len), np.nan)
        ok = self.moments.factor_ok
        if self.engine is None:
            var = common_variance_grid(
                self.moments, self.omega, self.mode, self.weighting, self.period_omega
            )
            out[sel] = np.sqrt(var[sel])
            return out
        for t in np.flatnonzero(sel.any(axis=0) & ok):
            rows = np.flatnonzero(sel[:, t])
            out[rows, t] = np.sqrt(self.engine.common_variance_column(t)[rows])
        return out
