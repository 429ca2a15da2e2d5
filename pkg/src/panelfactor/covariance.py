"""Pairwise-overlap covariance estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue, OverlapTooSparse
from .panel_core import MaskedPanel, OverlapStats

__all__ = ["ReweightedCovariance", "pairwise_covariance", "zero_fill_covariance"]


@dataclass(frozen=True)
class ReweightedCovariance:
    """``Sigma~_ij = |Q_ij|^-1 sum_{t in Q_ij} Y_it Y_jt`` for all unit pairs."""

    matrix: np.ndarray
    source_counts: OverlapStats
    demeaned: bool = False

    @property
    def n_units(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_periods(self) -> int:
        return self.source_counts.n_periods


def _observed_values(panel: MaskedPanel, demean: bool) -> np.ndarray:
    w = panel.observed
    y = np.where(w, panel.values, 0.0)
    if not np.isfinite(y).all():
        i, t = np.argwhere(~np.isfinite(y))[0]
        raise NonFiniteValue(i, t)
    if demean:
        means = y.sum(axis=1) / w.sum(axis=1)
        y = np.where(w, y - means[:, None], 0.0)
    return y


def pairwise_covariance(
    panel: MaskedPanel, stats: OverlapStats, demean: bool = False
) -> ReweightedCovariance:
    """Average ``Y_it Y_jt`` over the periods where both units are observed.

    The zero-filled product ``Y~ Y~'`` already sums over exactly the jointly
    observed periods, so a single matrix product followed by an elementwise
    division by the overlap counts gives every entry.  The result is
    symmetrised explicitly because floating-point summation order is not.

    ``demean`` subtracts each unit's mean over its observed entries first; the
    default keeps raw second moments, which is what the factor model needs
    when factor means are absorbed into the factors.
    """
    counts = stats.pair_counts
    n = panel.n_units
    if counts.shape != (n, n):
        raise DimensionMismatch("overlap statistics do not match the panel")
    low = np.triu(counts < stats.min_overlap)
    if low.any():
        i, j = np.argwhere(low)[0]
        raise OverlapTooSparse(i, j, int(counts[i, j]), stats.min_overlap)
    y = _observed_values(panel, demean)
    sigma = (y @ y.T) / counts
    sigma = 0.5 * (sigma + sigma.T)
    sigma.setflags(write=False)
    return ReweightedCovariance(sigma, stats, demean)


def zero_fill_covariance(panel: MaskedPanel) -> np.ndarray:
    """The naive ``(1/T) Y~ Y~'`` with zeros imputed at missing entries."""
    y = _observed_values(panel, False)
    sigma = (y @ y.T) / panel.n_periods
    return 0.5 * (sigma + sigma.T)
