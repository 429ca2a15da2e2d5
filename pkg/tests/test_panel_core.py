import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factories import block_mask, masked, omega_oracle, random_mask
from panelfactor.errors import DegeneratePanel, DimensionMismatch, NonFiniteValue, OverlapTooSparse
from panelfactor.panel_core import (
    OMEGA_SLACK,
    MaskedPanel,
    compute_omega_weights,
    compute_overlap,
    compute_period_omega,
    default_min_overlap,
)


@st.composite
def small_masks(draw, max_n=8, max_t=8, min_t=2):
    n = draw(st.integers(2, max_n))
    t = draw(st.integers(min_t, max_t))
    seed = draw(st.integers(0, 2**32 - 1))
    p = draw(st.floats(0.3, 1.0))
    mask = random_mask(n, t, p, seed)
    # every pair must overlap at least once for the omega weights to exist
    mask[:, 0] = True
    return mask


class TestMaskedPanel:
    def test_missing_values_are_zeroed_and_readonly(self):
        y = np.array([[1.0, np.nan], [2.0, 3.0]])
        panel = MaskedPanel.from_array(y)
        assert panel.values[0, 1] == 0.0
        assert panel.mask.dtype == np.uint8
        assert not panel.values.flags.writeable
        assert np.isnan(panel.with_nan()[0, 1])

    def test_default_ids(self):
        panel = MaskedPanel(np.ones((2, 3)), np.ones((2, 3)))
        assert panel.unit_ids == (0, 1)
        assert panel.time_ids == (0, 1, 2)

    def test_rejects_empty_row_and_column(self):
        with pytest.raises(DegeneratePanel):
            MaskedPanel(np.ones((2, 3)), np.array([[1, 1, 1], [0, 0, 0]]))
        with pytest.raises(DegeneratePanel):
            MaskedPanel(np.ones((2, 3)), np.array([[1, 0, 1], [1, 0, 1]]))

    def test_rejects_tiny_and_mismatched(self):
        with pytest.raises(DegeneratePanel):
            MaskedPanel(np.ones((1, 3)), np.ones((1, 3)))
        with pytest.raises(DimensionMismatch):
            MaskedPanel(np.ones((2, 3)), np.ones((3, 2)))

    def test_non_finite_observed_entry(self):
        y = np.ones((3, 3))
        y[1, 2] = np.inf
        with pytest.raises(NonFiniteValue) as info:
            MaskedPanel(y, np.ones((3, 3)))
        assert (info.value.i, info.value.t) == (1, 2)

    def test_non_finite_missing_entry_is_ignored(self):
        y = np.ones((3, 3))
        y[1, 2] = np.nan
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 2] = False
        assert MaskedPanel(y, mask).values[1, 2] == 0.0

    def test_with_mask_only_shrinks(self):
        panel = MaskedPanel(np.ones((2, 2)), np.array([[1, 0], [1, 1]]))
        with pytest.raises(DimensionMismatch):
            panel.with_mask(np.ones((2, 2), dtype=bool))


class TestOverlap:
    def test_fully_observed_counts(self):
        stats = compute_overlap(MaskedPanel(np.ones((3, 5)), np.ones((3, 5))), 1)
        assert (stats.pair_counts == 5).all()
        assert (stats.pair_ratios == 1.0).all()

    def test_two_block_counts(self):
        n, t, n0, t0 = 6, 10, 3, 7
        mask = block_mask(n, t, n0, t0)
        counts = compute_overlap(masked(np.ones((n, t)), mask), 1).pair_counts
        for i in range(n):
            for j in range(n):
                expected = t0 if (i < n0 or j < n0) else t
                assert counts[i, j] == expected

    @given(small_masks())
    @settings(max_examples=60, deadline=None)
    def test_counts_match_loop_oracle(self, mask):
        n, t = mask.shape
        counts = compute_overlap(masked(np.ones((n, t)), mask), 1).pair_counts
        oracle = np.zeros((n, n), dtype=int)
        for i in range(n):
            for j in range(n):
                for s in range(t):
                    oracle[i, j] += int(mask[i, s] and mask[j, s])
        assert np.array_equal(counts, oracle)
        assert np.array_equal(counts, counts.T)
        assert np.array_equal(np.diag(counts), mask.sum(axis=1))

    @given(small_masks(), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_adding_observations_never_decreases_counts(self, mask, seed):
        n, t = mask.shape
        extra = mask | (np.random.default_rng(seed).random((n, t)) < 0.3)
        before = compute_overlap(masked(np.ones((n, t)), mask), 1).pair_counts
        after = compute_overlap(masked(np.ones((n, t)), extra), 1).pair_counts
        assert (after >= before).all()

    def test_sparse_pair_is_reported(self):
        mask = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 1, 1, 1]], dtype=bool)
        with pytest.raises(OverlapTooSparse) as info:
            compute_overlap(masked(np.ones((3, 4)), mask), 1)
        assert (info.value.i, info.value.j) == (0, 1)

    def test_default_floor(self):
        assert default_min_overlap(10) == 2
        assert default_min_overlap(100) == 5
        assert default_min_overlap(101) == 6


class TestOmegaWeights:
    def test_full_observation_gives_ones(self):
        panel = MaskedPanel(np.ones((5, 7)), np.ones((5, 7)))
        om = compute_omega_weights(panel, compute_overlap(panel, 1))
        assert np.all(om.omega_jj == 1.0)
        assert np.all(om.omega_j == 1.0)
        assert om.omega == 1.0

    def test_deterministic_mask_matches_quadruple_loop(self):
        mask = np.array(
            [
                [1, 1, 1, 1, 1, 1],
                [1, 1, 1, 1, 0, 0],
                [1, 1, 0, 1, 1, 0],
                [1, 0, 1, 1, 1, 1],
                [1, 1, 1, 0, 0, 0],
            ],
            dtype=bool,
        )
        panel = masked(np.ones(mask.shape), mask)
        om = compute_omega_weights(panel, compute_overlap(panel, 1))
        o_jj, o_j, o = omega_oracle(mask)
        np.testing.assert_allclose(om.omega_jj, o_jj, rtol=0, atol=1e-12)
        np.testing.assert_allclose(om.omega_j, o_j, rtol=0, atol=1e-12)
        assert abs(om.omega - o) < 1e-12

    @given(small_masks())
    @settings(max_examples=50, deadline=None)
    def test_factorization_matches_oracle(self, mask):
        panel = masked(np.ones(mask.shape), mask)
        om = compute_omega_weights(panel, compute_overlap(panel, 1))
        o_jj, o_j, o = omega_oracle(mask)
        np.testing.assert_allclose(om.omega_jj, o_jj, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(om.omega_j, o_j, rtol=1e-12, atol=1e-12)
        assert abs(om.omega - o) <= 1e-12 * max(1.0, o)

    @given(small_masks())
    @settings(max_examples=50, deadline=None)
    def test_weights_are_at_least_one(self, mask):
        panel = masked(np.ones(mask.shape), mask)
        om = compute_omega_weights(panel, compute_overlap(panel, 1))
        assert (om.omega_jj >= 1 - OMEGA_SLACK).all()
        assert (om.omega_j >= 1 - OMEGA_SLACK).all()
        assert om.omega >= 1 - OMEGA_SLACK

    def test_missing_at_random_limits(self):
        mask = random_mask(500, 500, 0.75, seed=11)
        panel = masked(np.ones(mask.shape), mask)
        om = compute_omega_weights(panel, compute_overlap(panel))
        assert abs(om.omega_jj.mean() / (4 / 3) - 1) < 0.05
        assert abs(om.omega_j.mean() - 1) < 0.05
        assert abs(om.omega - 1) < 0.05

    def test_two_block_loading_weight(self):
        n, t, n0, t0 = 40, 40, 20, 30
        panel = masked(np.ones((n, t)), block_mask(n, t, n0, t0))
        om = compute_omega_weights(panel, compute_overlap(panel, 1))
        # a unit observed only up to t0 averages every pair over t0 periods
        np.testing.assert_allclose(om.omega_jj[:n0], t / t0, rtol=1e-12)


class TestPeriodOmega:
    def test_full_observation_gives_ones(self):
        panel = MaskedPanel(np.ones((4, 6)), np.ones((4, 6)))
        po = compute_period_omega(panel, compute_overlap(panel, 1))
        np.testing.assert_allclose(po.omega_t, 1.0, rtol=1e-14)
        np.testing.assert_allclose(po.omega_jt, 1.0, rtol=1e-14)
        assert not po.weighted

    def test_cross_weights_shape_checked(self):
        panel = MaskedPanel(np.ones((4, 6)), np.ones((4, 6)))
        with pytest.raises(DimensionMismatch):
            compute_period_omega(panel, compute_overlap(panel, 1), np.ones((3, 6)))

    def test_constant_weights_equal_plain(self):
        mask = random_mask(12, 15, 0.7, seed=3)
        mask[:, 0] = True
        panel = masked(np.ones(mask.shape), mask)
        stats = compute_overlap(panel, 1)
        plain = compute_period_omega(panel, stats)
        scaled = compute_period_omega(panel, stats, 2.5 * mask)
        np.testing.assert_allclose(plain.omega_t, scaled.omega_t, rtol=1e-12)
        np.testing.assert_allclose(plain.omega_jt, scaled.omega_jt, rtol=1e-12)
