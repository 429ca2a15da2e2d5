"""Treatment-effect estimation and tests under a shared-factor model.

Control outcomes follow ``Y0_it = Lambda0_i' F_t + e_it`` and treated outcomes
``Y1_it = Lambda1_i' F_t + e_it``: the treatment may change the loadings but
not the factors.  The factor model is fitted on the control entries only
(treated entries are treated as missing), and each treated unit's loadings
are re-estimated by a time-series regression of its treated outcomes on the
fitted factors.

Three effects are tested for a unit ``i``: the individual effect
``tau_it = (Lambda1_i - Lambda0_i)' F_t``, the average effect over the
treated periods, and the coefficient difference of a regression of the
treated and control common components on user covariates ``Z``.

Variance
--------
Up to first order every estimation error is a linear combination of four
independent sources: the treated noise of unit ``i`` (entering
``Lambda1~_i``), the control noise of unit ``i`` (entering ``Lambda0~_i``),
the cross-sectional noise entering each ``F~_u``, and the centred factor
products ``G_s`` that couple all of them.  Writing ``x`` for the direction
in which the loading difference is read (``F~_t`` for the individual test,
``R' e_l`` with ``R = Sigma_Z^-1 Sigma_FZ`` for the ``Z``-weighted one) the
error is::

    x'(b - eta - g) + sum_u v_u' f_u

with ``b`` the treated-noise part of ``Lambda1~``, ``eta`` the control
loading error, ``g = Sigma_F1^-1 (1/T1) sum_u F~_u (Lambda1' f_u)`` the part
of ``Lambda1~`` driven by the factor errors ``f_u``, and ``v_u`` collecting
the effect of ``f_u`` on the target.  The variance of each piece is
evaluated by :class:`~panelfactor.inference.LinearizedVariance`.

With ``null_imposed=True`` (the default) the variance is computed under
``Lambda1_i = Lambda0_i``: ``Lambda1`` is replaced by ``Lambda0~_i`` and the
terms proportional to the loading difference vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from scipy.stats import norm

from .errors import (
    DimensionMismatch,
    NotTreatedAt,
    PeriodUnidentified,
    ScheduleMismatch,
    SingularZ,
    TreatedWindowTooShort,
)
from .factor_est import FactorModel, fit
from .inference import LinearizedVariance, estimate_moments
from .panel_core import MaskedPanel

__all__ = [
    "TreatmentPanel",
    "EffectTestResult",
    "TreatmentContext",
    "control_panel",
    "fit_control",
    "estimate_treated_loadings",
    "treated_periods",
    "test_individual",
    "test_weighted",
    "test_average",
    "fit_separate_models",
]

ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass(frozen=True)
class TreatmentPanel:
    """Outcomes with an absorbing adoption schedule.

    ``adopt_time[i]`` is the number of control periods of unit ``i``: with
    zero-based period indices, entry ``(i, t)`` is treated iff
    ``t >= adopt_time[i]``, and ``adopt_time[i] == T`` means never treated.
    An explicit boolean ``treated`` matrix may be supplied instead for units
    that switch in and out of treatment; it then takes precedence.
    ``NaN`` outcomes are missing irrespective of treatment.
    """

    outcomes: np.ndarray
    adopt_time: Optional[np.ndarray] = None
    treated: Optional[np.ndarray] = None
    covariates: Optional[object] = None

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float, copy=True)
        if y.ndim != 2:
            raise DimensionMismatch("outcomes must be an N x T matrix")
        n, t_len = y.shape
        if self.treated is not None:
            d = np.asarray(self.treated, dtype=bool)
            if d.shape != y.shape:
                raise ScheduleMismatch("treated matrix must have the outcomes' shape")
            first = np.where(d.any(axis=1), d.argmax(axis=1), t_len)
        else:
            if self.adopt_time is None:
                raise ScheduleMismatch("either adopt_time or treated must be given")
            first = np.asarray(self.adopt_time)
            if first.shape != (n,):
                raise ScheduleMismatch(f"adopt_time must have {n} entries, got {first.shape}")
            if not np.issubdtype(first.dtype, np.integer):
                if not np.all(np.mod(first, 1) == 0):
                    raise ScheduleMismatch("adoption times must be integers")
                first = first.astype(int)
            if (first < 0).any() or (first > t_len).any():
                raise ScheduleMismatch(f"adoption times must lie in [0, {t_len}]")
            d = np.arange(t_len)[None, :] >= first[:, None]
        y.setflags(write=False)
        d = d.copy()
        d.setflags(write=False)
        first = np.asarray(first, dtype=int).copy()
        first.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treated", d)
        object.__setattr__(self, "adopt_time", first)

    @property
    def shape(self) -> tuple[int, int]:
        return self.outcomes.shape

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.outcomes)

    @property
    def control_mask(self) -> np.ndarray:
        return self.observed & ~self.treated

    @property
    def ever_treated(self) -> np.ndarray:
        return (self.treated & self.observed).any(axis=1)


@dataclass(frozen=True)
class EffectTestResult:
    """A treatment-effect estimate with its test statistic.

    ``se`` already includes the convergence rate (it is the standard error of
    the estimate itself); ``components`` holds the finite-sample variance
    pieces, which add up to ``se**2`` (for vector estimates, to the
    covariance matrix whose diagonal is ``se**2``).
    """

    estimate: Union[float, np.ndarray]
    se: Union[float, np.ndarray]
    z_stat: Union[float, np.ndarray]
    p_value: Union[float, np.ndarray]
    null_imposed: bool
    components: Mapping[str, Union[float, np.ndarray]] = field(default_factory=dict)
    alternative: str = "two-sided"
    target: tuple = ()


def control_panel(tp: TreatmentPanel) -> MaskedPanel:
    """The control entries as a masked panel."""
    mask = tp.control_mask
    return MaskedPanel(np.where(mask, tp.outcomes, 0.0), mask)


def fit_control(tp: TreatmentPanel, rank, **options) -> FactorModel:
    """Fit the factor model on the control entries (treated ones missing).

    ``options`` are passed to :func:`panelfactor.factor_est.fit`.
    """
    return fit(control_panel(tp), rank, **options)


def treated_periods(tp: TreatmentPanel, model: FactorModel, i: int) -> np.ndarray:
    """Observed treated periods of unit ``i`` with identified factors; the
    rows of a ``Z`` matrix are indexed by these periods."""
    i = int(i)
    return np.flatnonzero(tp.treated[i] & tp.observed[i] & model.factor_ok)


def _treated_loading(tp: TreatmentPanel, model: FactorModel, i: int):
    periods = treated_periods(tp, model, i)
    r = model.rank
    if periods.size < r:
        raise TreatedWindowTooShort(i, periods.size, r)
    f = model.factors[periods]
    gram = f.T @ f
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= eig[-1] * 1e-10:
        raise TreatedWindowTooShort(i, periods.size, r)
    lam1 = np.linalg.solve(gram, f.T @ tp.outcomes[i, periods])
    return lam1, periods, gram


def estimate_treated_loadings(tp: TreatmentPanel, model: FactorModel) -> np.ndarray:
    """``Lambda1~_i = (sum_u F~_u F~_u')^-1 sum_u F~_u Y_iu`` over the treated
    periods of each ever-treated unit; rows of never-treated units are
    ``NaN``."""
    if (model.n_units, model.n_periods) != tp.shape:
        raise DimensionMismatch("model and treatment panel dimensions differ")
    out = np.full((model.n_units, model.rank), np.nan)
    for i in np.flatnonzero(tp.ever_treated):
        out[i] = _treated_loading(tp, model, i)[0]
    return out


class TreatmentContext:
    """Shared state for the tests on one (treatment panel, control model)
    pair: the linearized variance engine and the pooled residual variance."""

    def __init__(self, tp: TreatmentPanel, model: FactorModel, propensity=None):
        if (model.n_units, model.n_periods) != tp.shape:
            raise DimensionMismatch("model and treatment panel dimensions differ")
        self.tp = tp
        self.model = model
        self.propensity = propensity
        self.panel = control_panel(tp)
        self.moments = estimate_moments(self.panel, model, propensity)
        self.engine = LinearizedVariance(self.panel, model, self.moments, propensity)
        self._lam1: dict[int, tuple] = {}

    @classmethod
    def of(cls, tp: TreatmentPanel, model: FactorModel, propensity=None) -> "TreatmentContext":
        ctx = model._cache.get("treatment_context")
        if ctx is None or ctx.tp is not tp or ctx.propensity is not propensity:
            ctx = cls(tp, model, propensity)
            model._cache["treatment_context"] = ctx
        return ctx

    def treated_loading(self, i: int):
        if i not in self._lam1:
            self._lam1[i] = _treated_loading(self.tp, self.model, i)
        return self._lam1[i]

    def error_covariance(
        self,
        i: int,
        xs: np.ndarray,
        vs: np.ndarray,
        periods: np.ndarray,
        gram: np.ndarray,
        lam1: np.ndarray,
    ) -> dict:
        """Finite-sample covariance of the errors ``x_l'(b - eta - g) +
        sum_u v_lu' f_u`` for ``l = 1..L``.

        ``xs`` is ``L x r``, ``vs`` is ``L x T x r``.  Returns the four
        additive components as ``L x L`` matrices.
        """
        eng = self.engine
        s2 = self.moments.sigma_e2
        n_l = xs.shape[0]
        t_len = eng.t_len
        f_s = eng.fz[periods]
        sf1_inv = np.linalg.inv(gram / periods.size)
        # add the g-part: x' g = (1/T1) sum_u (x' Sigma_F1^-1 F_u)(Lambda1' f_u)
        c = xs @ sf1_inv @ f_s.T / periods.size  # L x T1
        v_tot = np.array(vs, dtype=float, copy=True)
        v_tot[:, periods, :] -= c[:, :, None] * lam1[None, None, :]
        # treated noise
        treated = s2 * xs @ np.linalg.inv(gram) @ xs.T
        # control-loading noise
        gl = np.stack([eng.loading_functional_obs(i, x) for x in xs])
        loading_obs = s2 * gl @ gl.T
        # cross-sectional noise in the factors
        factor_obs = np.empty((n_l, n_l))
        for a in range(n_l):
            for b in range(a, n_l):
                factor_obs[a, b] = factor_obs[b, a] = eng.factor_functional_obs_var(v_tot[a], v_tot[b])
        # factor-product shocks
        coefs = [
            eng.factor_functional_coef(v_tot[a]) - eng.loading_functional_coef(i, xs[a])
            for a in range(n_l)
        ]
        miss = np.empty((n_l, n_l))
        for a in range(n_l):
            for b in range(a, n_l):
                miss[a, b] = miss[b, a] = eng.quad(coefs[a], coefs[b])
        return {
            "treated_noise": treated,
            "control_loading_obs": loading_obs,
            "factor_obs": factor_obs,
            "miss": miss,
        }


def _p_value(z, alternative: str):
    if alternative == "two-sided":
        return 2.0 * norm.sf(np.abs(z))
    if alternative == "greater":
        return norm.sf(z)
    if alternative == "less":
        return norm.cdf(z)
    raise ValueError(f"alternative must be one of {ALTERNATIVES}")


def _result(estimate, cov_parts: dict, null_imposed: bool, alternative: str, target, scalar: bool):
    total = sum(cov_parts.values())
    var = np.clip(np.diag(total), 0.0, None)
    se = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, estimate / se, np.where(estimate == 0, 0.0, np.inf * np.sign(estimate)))
    p = _p_value(z, alternative)
    if scalar:
        comps = {k: float(v[0, 0]) for k, v in cov_parts.items()}
        return EffectTestResult(
            float(estimate[0]), float(se[0]), float(z[0]), float(p[0]),
            null_imposed, comps, alternative, target,
        )
    return EffectTestResult(estimate, se, z, p, null_imposed, cov_parts, alternative, target)


def test_individual(
    tp: TreatmentPanel,
    model: FactorModel,
    i: int,
    t: int,
    null_imposed: bool = True,
    alternative: str = "two-sided",
    propensity=None,
) -> EffectTestResult:
    """Test ``H0: C1_it - C0_it = 0`` for a treated entry ``(i, t)``.

    The estimate is ``(Lambda1~_i - Lambda0~_i)' F~_t``.
    """
    i, t = int(i), int(t)
    n, t_len = tp.shape
    if not (0 <= i < n and 0 <= t < t_len) or not tp.treated[i, t]:
        raise NotTreatedAt(i, t)
    if not model.factor_ok[t]:
        raise PeriodUnidentified(t)
    ctx = TreatmentContext.of(tp, model, propensity)
    lam1, periods, gram = ctx.treated_loading(i)
    lam0 = model.loadings[i]
    delta = lam1 - lam0
    f_t = model.factors[t]
    estimate = np.array([float(delta @ f_t)])
    xs = f_t[None, :]
    vs = np.zeros((1, t_len, model.rank))
    if not null_imposed:
        vs[0, t] += delta
    lam_g = lam0 if null_imposed else lam1
    parts = ctx.error_covariance(i, xs, vs, periods, gram, lam_g)
    return _result(estimate, parts, null_imposed, alternative, ("individual", i, t), True)


def test_weighted(
    tp: TreatmentPanel,
    model: FactorModel,
    i: int,
    z: np.ndarray,
    null_imposed: bool = True,
    alternative: str = "two-sided",
    propensity=None,
) -> EffectTestResult:
    """Test ``H0: beta1_i - beta0_i = 0`` where ``beta`` are the coefficients
    of regressing the treated and the control common components of unit
    ``i`` over its treated periods on ``Z``.

    ``z`` has one row per period in :func:`treated_periods` and ``L``
    columns.  The estimate is ``Sigma_Z^-1 Sigma_FZ (Lambda1~_i - Lambda0~_i)``.
    """
    i = int(i)
    if not tp.ever_treated[i]:
        raise NotTreatedAt(i)
    ctx = TreatmentContext.of(tp, model, propensity)
    lam1, periods, gram = ctx.treated_loading(i)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != periods.size:
        raise DimensionMismatch(
            f"Z has {z.shape[0]} rows but unit {i} has {periods.size} usable treated periods"
        )
    t1 = periods.size
    sz = z.T @ z / t1
    eig = np.linalg.eigvalsh(sz)
    if eig[0] <= max(eig[-1], 1e-300) * 1e-12:
        raise SingularZ("Z'Z is singular")
    f_s = model.factors[periods]
    sfz = z.T @ f_s / t1
    sz_inv = np.linalg.inv(sz)
    rmat = sz_inv @ sfz
    lam0 = model.loadings[i]
    delta = lam1 - lam0
    estimate = rmat @ delta
    n_l = z.shape[1]
    vs = np.zeros((n_l, tp.shape[1], model.rank))
    if not null_imposed:
        zz = z @ sz_inv.T / t1  # row u: (Sigma_Z^-1 Z_u)' / T1
        for l in range(n_l):
            vs[l, periods, :] += zz[:, l, None] * delta[None, :]
    lam_g = lam0 if null_imposed else lam1
    parts = ctx.error_covariance(i, rmat, vs, periods, gram, lam_g)
    return _result(estimate, parts, null_imposed, alternative, ("weighted", i), False)


def test_average(
    tp: TreatmentPanel,
    model: FactorModel,
    i: int,
    null_imposed: bool = True,
    alternative: str = "two-sided",
    propensity=None,
) -> EffectTestResult:
    """Average effect over the treated periods: :func:`test_weighted` with
    ``Z`` a column of ones, returned as scalars."""
    if not tp.ever_treated[int(i)]:
        raise NotTreatedAt(int(i))
    ctx = TreatmentContext.of(tp, model, propensity)
    periods = ctx.treated_loading(int(i))[1]
    res = test_weighted(tp, model, i, np.ones((periods.size, 1)), null_imposed, alternative, propensity)
    comps = {k: float(np.asarray(v)[0, 0]) for k, v in res.components.items()}
    return EffectTestResult(
        float(res.estimate[0]), float(res.se[0]), float(res.z_stat[0]), float(res.p_value[0]),
        null_imposed, comps, alternative, ("average", int(i)),
    )


def fit_separate_models(tp: TreatmentPanel, rank, **options):
    """Fit one factor model on the control entries and another on the treated
    entries, returning ``(control_model, treated_model, tau)``.

    The treated model is fitted on the sub-panel of ever-treated units and
    periods with at least one treated entry; ``tau = C1~ - C0~`` is ``N x T``
    and ``NaN`` outside that sub-panel.  This covers the regime in which
    treatment may change the factors too.  Only point estimates are
    produced: the cross-covariance between the two fits is not estimated.
    """
    control = fit_control(tp, rank, **options)
    tmask = tp.treated & tp.observed
    rows = np.flatnonzero(tmask.any(axis=1))
    cols = np.flatnonzero(tmask.any(axis=0))
    sub = tmask[np.ix_(rows, cols)]
    treated_panel = MaskedPanel(np.where(sub, tp.outcomes[np.ix_(rows, cols)], 0.0), sub)
    treated = fit(treated_panel, rank, **options)
    tau = np.full(tp.shape, np.nan)
    tau[np.ix_(rows, cols)] = treated.common() - control.common()[np.ix_(rows, cols)]
    return control, treated, tau
