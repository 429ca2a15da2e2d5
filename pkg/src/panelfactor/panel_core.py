"""Masked panels, pairwise overlap bookkeeping and the omega weights.

The omega weights summarise how unevenly the observation mask spreads the
time-series averaging across unit pairs.  With ``q_ij = |Q_ij| / T`` and the
four-way overlap ``q_{ij,kl} = (1/T) sum_t W_it W_jt W_kt W_lt`` they are

* ``omega_jj = N^-2 sum_{i,l} q_{ij,lj} / (q_ij q_lj)``
* ``omega_j  = N^-3 sum_{i,l,k} q_{li,kj} / (q_li q_kj)``
* ``omega    = N^-4 sum_{i,l,j,k} q_{li,kj} / (q_li q_kj)``

Pulling the sum over ``t`` outside turns each of them into a product of
per-period row sums, which costs O(N^2 T) instead of O(N^4 T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegeneratePanel, DimensionMismatch, NonFiniteValue, OverlapTooSparse

__all__ = [
    "MaskedPanel",
    "OverlapStats",
    "OmegaWeights",
    "PeriodOmega",
    "default_min_overlap",
    "compute_overlap",
    "compute_omega_weights",
    "compute_period_omega",
]

#: Numerical slack allowed below the population lower bound of 1.
OMEGA_SLACK = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MaskedPanel:
    """An ``N x T`` outcome matrix with a 0/1 observation mask.

    Missing entries of ``values`` are stored as ``0.0`` and are never read as
    data; use :meth:`from_array` to build a panel from a matrix with ``NaN``
    marking the missing cells.
    """

    values: np.ndarray
    mask: np.ndarray
    unit_ids: tuple = ()
    time_ids: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        mask = np.asarray(self.mask)
        if values.ndim != 2 or mask.shape != values.shape:
            raise DimensionMismatch(
                f"values {values.shape} and mask {mask.shape} must be equal 2-d shapes"
            )
        mask = mask.astype(bool)
        n, t = values.shape
        if n < 2 or t < 2:
            raise DegeneratePanel(f"panel must be at least 2 x 2, got {n} x {t}")
        bad = mask & ~np.isfinite(values)
        if bad.any():
            i, s = np.argwhere(bad)[0]
            raise NonFiniteValue(i, s)
        empty_rows = np.flatnonzero(~mask.any(axis=1))
        if empty_rows.size:
            raise DegeneratePanel(f"unit {empty_rows[0]} has no observed entries")
        empty_cols = np.flatnonzero(~mask.any(axis=0))
        if empty_cols.size:
            raise DegeneratePanel(f"period {empty_cols[0]} has no observed entries")
        values[~mask] = 0.0
        unit_ids = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(n))
        time_ids = tuple(self.time_ids) if len(self.time_ids) else tuple(range(t))
        if len(unit_ids) != n or len(time_ids) != t:
            raise DimensionMismatch("unit_ids / time_ids do not match the panel shape")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask.astype(np.uint8)))
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "time_ids", time_ids)

    @classmethod
    def from_array(
        cls,
        values: np.ndarray,
        mask: Optional[np.ndarray] = None,
        unit_ids: Sequence = (),
        time_ids: Sequence = (),
    ) -> "MaskedPanel":
        values = np.asarray(values, dtype=float)
        if mask is None:
            mask = np.isfinite(values)
        values = np.where(np.asarray(mask, dtype=bool), values, 0.0)
        return cls(values, mask, tuple(unit_ids), tuple(time_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_periods(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean view of the mask."""
        return self.mask.astype(bool)

    def with_nan(self) -> np.ndarray:
        """Values with ``NaN`` at the missing entries."""
        out = self.values.astype(float, copy=True)
        out[~self.observed] = np.nan
        return out

    def with_mask(self, mask: np.ndarray) -> "MaskedPanel":
        """A panel over the same values restricted to a (sub)mask."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.shape:
            raise DimensionMismatch("mask shape differs from panel shape")
        if (mask & ~self.observed).any():
            raise DimensionMismatch("the new mask observes entries that are missing")
        return MaskedPanel(self.values, mask, self.unit_ids, self.time_ids)


@dataclass(frozen=True)
class OverlapStats:
    """Pairwise overlap counts ``|Q_ij|`` and ratios ``q_ij = |Q_ij| / T``."""

    pair_counts: np.ndarray
    pair_ratios: np.ndarray
    min_overlap: int
    n_periods: int


@dataclass(frozen=True)
class OmegaWeights:
    """Empirical omega weights of an observation mask."""

    omega_jj: np.ndarray
    omega_j: np.ndarray
    omega: float


@dataclass(frozen=True)
class PeriodOmega:
    """Period-resolved versions of ``omega`` and ``omega_j``.

    ``omega_t[t]`` replaces the scalar ``omega`` in the factor variance at
    period ``t`` and ``omega_jt[j, t]`` replaces ``omega_j`` in the covariance
    term of the common component ``(j, t)``.  Both average back to the global
    weights when every period carries the same cross-sectional weight.
    """

    omega_t: np.ndarray
    omega_jt: np.ndarray
    weighted: bool = False
    pair_weights: np.ndarray = field(default=None, repr=False)


def default_min_overlap(n_periods: int) -> int:
    return max(2, math.ceil(0.05 * n_periods))


def compute_overlap(panel: MaskedPanel, min_overlap: Optional[int] = None) -> OverlapStats:
    """Count the periods each pair of units is jointly observed.

    Raises :class:`OverlapTooSparse` naming the first pair (in row-major order
    of the upper triangle) whose count falls below ``min_overlap``.
    """
    t_len = panel.n_periods
    floor = default_min_overlap(t_len) if min_overlap is None else int(min_overlap)
    if floor < 1:
        raise ValueError("min_overlap must be a positive integer")
    w = panel.mask.astype(np.int64)
    counts = w @ w.T
    low = np.triu(counts < floor)
    if low.any():
        i, j = np.argwhere(low)[0]
        raise OverlapTooSparse(i, j, int(counts[i, j]), floor)
    ratios = counts / float(t_len)
    return OverlapStats(_readonly(counts), _readonly(ratios), floor, t_len)


def _row_sums(panel: MaskedPanel, stats: OverlapStats) -> tuple[np.ndarray, np.ndarray]:
    q = stats.pair_ratios
    if (q <= 0).any():
        i, j = np.argwhere(q <= 0)[0]
        raise OverlapTooSparse(i, j, 0, stats.min_overlap)
    w = panel.mask.astype(float)
    inv_q = 1.0 / q
    # v[j, t] = sum_i W_it / q_ij
    v = inv_q @ w
    return w, v


def compute_omega_weights(panel: MaskedPanel, stats: OverlapStats) -> OmegaWeights:
    n, t_len = panel.shape
    w, v = _row_sums(panel, stats)
    u = w * v  # u[j, t] = sum_k W_kt W_jt / q_kj
    s = u.sum(axis=0)  # s[t] = sum_{l, i} W_lt W_it / q_li
    omega_jj = (w * (v / n) ** 2).sum(axis=1) / t_len
    omega_j = (u @ s) / (n**3 * t_len)
    omega = float((s**2).sum() / (n**4 * t_len))
    return OmegaWeights(_readonly(omega_jj), _readonly(omega_j), omega)


def compute_period_omega(
    panel: MaskedPanel,
    stats: OverlapStats,
    cross_weights: Optional[np.ndarray] = None,
) -> PeriodOmega:
    """Period-specific omega weights.

    ``cross_weights`` are the per-entry weights of the cross-sectional factor
    regression: the mask itself for the plain estimator (default) or
    ``W / p`` for the propensity-weighted one.  With
    ``a[t, s] = N^-2 sum_i k_it W_is v_is / mean_i(k_it)`` the weights are
    ``omega_t = mean_s a[t, s]^2`` and
    ``omega_jt = mean_s (W_js v_js / N) a[t, s]``.
    """
    n, t_len = panel.shape
    w, v = _row_sums(panel, stats)
    u = w * v
    weighted = cross_weights is not None
    kappa = w if cross_weights is None else np.asarray(cross_weights, dtype=float)
    if kappa.shape != w.shape:
        raise DimensionMismatch("cross_weights must have the panel's shape")
    k_mean = kappa.mean(axis=0)
    a = (kappa.T @ u) / (n * n) / k_mean[:, None]
    omega_t = (a**2).mean(axis=1)
    omega_jt = (u / n) @ a.T / t_len
    return PeriodOmega(_readonly(omega_t), _readonly(omega_jt), weighted, _readonly(a))
