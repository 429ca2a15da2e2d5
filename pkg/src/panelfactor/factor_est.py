"""Loadings by PCA on the reweighted covariance, factors by cross-sectional
regression, imputation, rank selection and iterative refinement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Union

import numpy as np

from .covariance import ReweightedCovariance, pairwise_covariance
from .errors import (
    DimensionMismatch,
    EigenFailure,
    PeriodUnidentified,
    PropensityUnderflow,
    RankTooLarge,
    SpectrumDegenerate,
)
from .panel_core import MaskedPanel, OverlapStats, compute_overlap

if TYPE_CHECKING:  # pragma: no cover
    from .propensity import PropensityEstimate

__all__ = [
    "FactorModel",
    "ImputedPanel",
    "RankSelectionWarning",
    "estimate_loadings",
    "estimate_factors",
    "estimate_factors_weighted",
    "fit",
    "impute",
    "select_rank",
    "iterate_refine",
    "RCOND_TOL",
    "P_FLOOR",
]

#: Reciprocal condition number below which a period's Gram matrix is singular.
RCOND_TOL = 1e-10
#: Smallest admissible propensity in the weighted regression.
P_FLOOR = 0.01


class RankSelectionWarning(UserWarning):
    """The eigenvalue-ratio criterion found no clear gap."""


@dataclass(frozen=True)
class FactorModel:
    """Estimated loadings ``(N x r)``, factors ``(T x r)`` and eigenvalues.

    Rows of ``factors`` at periods with ``factor_ok == False`` hold ``NaN``.
    """

    loadings: np.ndarray
    factors: np.ndarray
    eigenvalues: np.ndarray
    rank: int
    weighted: bool = False
    factor_ok: np.ndarray = None
    overlap: Optional[OverlapStats] = field(default=None, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.factor_ok is None:
            object.__setattr__(self, "factor_ok", np.isfinite(self.factors).all(axis=1))

    @property
    def n_units(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_periods(self) -> int:
        return self.factors.shape[0]

    def common(self) -> np.ndarray:
        """``C~ = Lambda~ F~'`` with ``NaN`` columns at unidentified periods."""
        return self.loadings @ self.factors.T


@dataclass(frozen=True)
class ImputedPanel:
    completed: np.ndarray
    common: np.ndarray
    residuals: np.ndarray
    factor_ok: np.ndarray


def _sign_normalize(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _top_eigen(matrix: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        vals, vecs = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise EigenFailure(str(exc)) from exc
    if not (np.isfinite(vals).all() and np.isfinite(vecs).all()):
        raise EigenFailure("eigendecomposition returned non-finite values")
    order = np.argsort(-vals, kind="stable")[:k]
    return vals[order], vecs[:, order]


def estimate_loadings(cov: ReweightedCovariance, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Lambda~, V~)``: ``sqrt(N)`` times the leading eigenvectors of
    ``Sigma~ / N`` and the matching eigenvalues in descending order."""
    n = cov.n_units
    rank = int(rank)
    if rank < 1 or rank > min(n, cov.n_periods):
        raise RankTooLarge(f"rank {rank} is outside [1, min(N, T)] = [1, {min(n, cov.n_periods)}]")
    vals, vecs = _top_eigen(np.asarray(cov.matrix) / n, rank)
    loadings = np.sqrt(n) * _sign_normalize(vecs)
    return loadings, vals


def _solve_periods(gram: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the per-period normal equations, flagging near-singular ones."""
    t_len, r, _ = gram.shape
    eig = np.linalg.eigvalsh(gram)
    top = eig[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        rcond = np.where(top > 0, eig[:, 0] / top, 0.0)
    ok = rcond >= RCOND_TOL
    out = np.full((t_len, r), np.nan)
    if ok.any():
        out[ok] = np.linalg.solve(gram[ok], rhs[ok][..., None])[..., 0]
    return out, ok


def _regress_factors(panel: MaskedPanel, loadings: np.ndarray, weights: np.ndarray):
    loadings = np.asarray(loadings, dtype=float)
    if loadings.ndim != 2 or loadings.shape[0] != panel.n_units:
        raise DimensionMismatch("loadings must be an N x r matrix for this panel")
    gram = np.einsum("it,ia,ib->tab", weights, loadings, loadings, optimize=True)
    rhs = (weights * panel.values).T @ loadings
    return _solve_periods(gram, rhs)


def estimate_factors(panel: MaskedPanel, loadings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """OLS of each period's observed outcomes on the observed units' loadings."""
    return _regress_factors(panel, loadings, panel.mask.astype(float))


def estimate_factors_weighted(
    panel: MaskedPanel,
    loadings: np.ndarray,
    prop: "PropensityEstimate",
    p_floor: float = P_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares with weights ``W_it / p_it``."""
    probs = np.asarray(prop.probs if hasattr(prop, "probs") else prop, dtype=float)
    if probs.shape != panel.shape:
        raise DimensionMismatch("propensity matrix must have the panel's shape")
    w = panel.observed
    low = w & ~(probs >= p_floor)
    if low.any():
        i, t = np.argwhere(low)[0]
        raise PropensityUnderflow(i, t, float(probs[i, t]), p_floor)
    weights = np.where(w, 1.0 / np.where(w, probs, 1.0), 0.0)
    return _regress_factors(panel, loadings, weights)


def select_rank(
    cov: ReweightedCovariance, r_max: int, weak_ratio: float = 1.5
) -> int:
    """Eigenvalue-ratio rank choice: ``argmax_{k <= r_max} lambda_k / lambda_{k+1}``.

    Raises :class:`SpectrumDegenerate` when every ratio agrees to within a
    relative ``1e-8`` (no ratio is informative).  When the winning ratio is
    below ``weak_ratio`` the choice is returned with a
    :class:`RankSelectionWarning`, since pure noise spectra produce ratios
    close to one.
    """
    n = cov.n_units
    r_max = int(r_max)
    if r_max < 1 or r_max >= min(n, cov.n_periods) / 2:
        raise RankTooLarge(f"r_max must satisfy 1 <= r_max < min(N, T) / 2, got {r_max}")
    vals, _ = _top_eigen(np.asarray(cov.matrix) / n, r_max + 1)
    floor = max(abs(vals[0]), np.finfo(float).tiny) * 1e-14
    ratios = vals[:-1] / np.maximum(vals[1:], floor)
    if ratios.max() <= ratios.min() * (1.0 + 1e-8):
        raise SpectrumDegenerate("all eigenvalue ratios coincide; no rank is favoured")
    k = int(np.argmax(ratios)) + 1
    if ratios[k - 1] < weak_ratio:
        warnings.warn(
            f"largest eigenvalue ratio {ratios[k - 1]:.3f} is below {weak_ratio}; "
            "the panel shows no clear factor structure",
            RankSelectionWarning,
            stacklevel=2,
        )
    return k


def _default_r_max(n: int, t: int) -> int:
    return max(1, min(8, (min(n, t) - 1) // 2))


def fit(
    panel: MaskedPanel,
    rank: Union[int, str],
    *,
    weighted: bool = False,
    propensity: Optional["PropensityEstimate"] = None,
    min_overlap: Optional[int] = None,
    demean: bool = False,
    p_floor: float = P_FLOOR,
    r_max: Optional[int] = None,
) -> FactorModel:
    """Overlap counts -> reweighted covariance -> PCA loadings -> factors."""
    stats = compute_overlap(panel, min_overlap)
    cov = pairwise_covariance(panel, stats, demean=demean)
    if isinstance(rank, str):
        if rank != "auto":
            raise RankTooLarge(f"rank must be a positive integer or 'auto', got {rank!r}")
        rank = select_rank(cov, r_max or _default_r_max(*panel.shape))
    loadings, eigenvalues = estimate_loadings(cov, rank)
    if weighted:
        if propensity is None:
            raise ValueError("the weighted estimator needs a propensity estimate")
        factors, ok = estimate_factors_weighted(panel, loadings, propensity, p_floor)
    else:
        factors, ok = estimate_factors(panel, loadings)
    return FactorModel(loadings, factors, eigenvalues, int(rank), bool(weighted), ok, stats)


def impute(panel: MaskedPanel, model: FactorModel) -> ImputedPanel:
    """Fill the missing entries with the estimated common component."""
    if (model.n_units, model.n_periods) != panel.shape:
        raise DimensionMismatch(
            f"model is {model.n_units} x {model.n_periods}, panel is {panel.shape}"
        )
    common = model.common()
    w = panel.observed
    completed = np.where(w, panel.values, common)
    residuals = np.where(w, panel.values - common, np.nan)
    return ImputedPanel(completed, common, residuals, model.factor_ok.copy())


def _full_pca(x: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, t_len = x.shape
    sigma = (x @ x.T) / t_len
    vals, vecs = _top_eigen(0.5 * (sigma + sigma.T) / n, rank)
    loadings = np.sqrt(n) * _sign_normalize(vecs)
    factors = x.T @ loadings / n
    return loadings, factors, vals


def iterate_refine(panel: MaskedPanel, model: FactorModel, n_iter: int) -> FactorModel:
    """Alternate between filling missing entries with ``C~`` and re-running
    PCA on the completed panel.

    Point estimation only: the refined model carries no inferential theory.
    Observed entries are never altered.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    if not model.factor_ok.all():
        raise PeriodUnidentified(int(np.flatnonzero(~model.factor_ok)[0]))
    w = panel.observed
    current = model
    for _ in range(int(n_iter)):
        completed = np.where(w, panel.values, current.common())
        loadings, factors, vals = _full_pca(completed, model.rank)
        current = FactorModel(
            loadings,
            factors,
            vals,
            model.rank,
            False,
            np.ones(panel.n_periods, dtype=bool),
            model.overlap,
        )
    return current
