import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panelfactor import simulate as sim
from panelfactor.errors import DegenerateMask, InvalidScenario


def tiny(task="imputation", **overrides):
    data = {
        "name": "tiny",
        "task": task,
        "dgp": {"n_units": 30, "n_periods": 30, "rank": 1},
        "pattern": {"kind": "random", "params": {"prob": 0.8}},
        "reps": 100,
        "seed": 5,
    }
    data.update(overrides)
    return sim.Scenario.from_dict(data)


class TestGenPanel:
    def test_deterministic(self):
        spec = sim.DgpSpec(20, 15, rank=2, treatment=sim.TreatmentSpec(0.2, 1.0))
        a, b = sim.gen_panel(spec, 3), sim.gen_panel(spec, 3)
        for name in ("outcomes", "loadings", "factors", "s", "noise", "treated_outcomes", "treated_loadings"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_noiseless_rank(self):
        out = sim.gen_panel(sim.DgpSpec(25, 30, rank=3, noise_sd=0.0), 1)
        s = np.linalg.svd(out.outcomes, compute_uv=False)
        assert np.sum(s > 1e-10 * s[0]) == 3

    def test_factor_variance_law_of_large_numbers(self):
        out = sim.gen_panel(sim.DgpSpec(2, 10_000, factor_sd=1.7, factor_mean=0.3), 2)
        assert abs(out.factors.var() / 1.7**2 - 1) < 0.05
        assert abs(out.factors.mean() - 0.3) < 0.05

    def test_treatment_does_not_change_control_draws(self):
        plain = sim.gen_panel(sim.DgpSpec(10, 12), 4)
        treated = sim.gen_panel(sim.DgpSpec(10, 12, treatment=sim.TreatmentSpec(0.5)), 4)
        assert np.array_equal(plain.outcomes, treated.outcomes)
        np.testing.assert_allclose(treated.treated_loadings - treated.loadings, 0.5)
        np.testing.assert_allclose(treated.treated_outcomes - treated.outcomes, 0.5 * treated.factors.T.repeat(10, 0))

    def test_characteristic(self):
        out = sim.gen_panel(sim.DgpSpec(50, 5, rank=2, s_column=0, s_threshold=0.2), 5)
        assert np.array_equal(out.s, (out.loadings[:, 0] >= 0.2).astype(int))

    @pytest.mark.parametrize(
        "kwargs",
        [{"n_units": 0, "n_periods": 5}, {"n_units": 5, "n_periods": 5, "noise_sd": -1},
         {"n_units": 5, "n_periods": 5, "factor_sd": 0}, {"n_units": 5, "n_periods": 5, "s_column": 3}],
    )
    def test_invalid_specs(self, kwargs):
        with pytest.raises(InvalidScenario):
            sim.DgpSpec(**kwargs)

    def test_invalid_shift(self):
        with pytest.raises(InvalidScenario):
            sim.TreatmentSpec(0.0, -1.0)


class TestPatterns:
    def test_random_full(self):
        mask = sim.gen_mask(10, 8, sim.PatternSpec("random", {"prob": 1.0}), seed=0)
        assert mask.all()

    def test_conditional_random_rates(self):
        n = t = 500
        out = sim.gen_panel(sim.DgpSpec(n, t), 6)
        pattern = sim.PatternSpec("random", s1={"prob": 0.75}, s0={"prob": 0.5})
        mask = sim.gen_mask(n, t, pattern, out.s, seed=7)
        for level, p in ((1, 0.75), (0, 0.5)):
            rows = out.s == level
            rate = mask[rows].mean()
            assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / mask[rows].size)
        np.testing.assert_allclose(sim.true_propensity(n, t, pattern, out.s)[out.s == 1], 0.75)

    @pytest.mark.parametrize("n", [50, 100, 333])
    def test_staggered_share(self, n):
        t = 200
        mask = sim.gen_mask(n, t, sim.PatternSpec("staggered"), seed=8)
        share = 1 - mask[:, t // 2].mean()
        assert abs(share - 0.4) <= 2 / n
        assert np.all(np.diff(mask.astype(int), axis=1) <= 0)  # absorbing
        assert mask[:, : int(0.1 * t)].all()

    def test_staggered_true_propensity_matches_share(self):
        t = 100
        pattern = sim.PatternSpec("staggered")
        probs = sim.true_propensity(200, t, pattern)
        mask = sim.gen_mask(200, t, pattern, seed=9)
        np.testing.assert_allclose(probs[0], mask.mean(axis=0))

    def test_simultaneous_schedule(self):
        pattern = sim.PatternSpec("simultaneous", {"fraction": 0.3, "start": 0.5})
        adopt = sim.gen_schedule(40, 20, pattern, seed=10)
        assert (adopt == 10).sum() == 12 and (adopt == 20).sum() == 28

    def test_conditional_simultaneous(self):
        s = np.r_[np.ones(40, int), np.zeros(40, int)]
        pattern = sim.PatternSpec("simultaneous", s1={"fraction": 0.25, "start": 0.75}, s0={"fraction": 0.625, "start": 0.375})
        adopt = sim.gen_schedule(80, 40, pattern, s, seed=11)
        assert (adopt[:40] == 30).sum() == 10
        assert (adopt[40:] == 15).sum() == 25

    def test_block_takes_leading_units(self):
        adopt = sim.gen_schedule(10, 8, sim.PatternSpec("block", {"fraction": 0.5, "start": 0.5}))
        assert adopt.tolist() == [4] * 5 + [8] * 5

    def test_degenerate_mask(self):
        with pytest.raises(DegenerateMask):
            sim.gen_mask(5, 4, sim.PatternSpec("simultaneous", {"fraction": 1.0, "start": 0.0}), seed=0)

    def test_conditional_needs_s(self):
        with pytest.raises(InvalidScenario):
            sim.gen_mask(5, 4, sim.PatternSpec("random", s1={"prob": 0.5}, s0={"prob": 0.5}))

    @pytest.mark.parametrize(
        "kind,params",
        [("random", {"prob": 0.0}), ("random", {"fraction": 0.5}), ("staggered", {"start": 1.0}),
         ("simultaneous", {"fraction": 1.5}), ("spiral", {})],
    )
    def test_invalid_patterns(self, kind, params):
        with pytest.raises(InvalidScenario):
            sim.PatternSpec(kind, params)

    @given(st.integers(0, 2**31), st.floats(0.05, 0.95))
    @settings(max_examples=30, deadline=None)
    def test_random_pattern_is_seed_deterministic(self, seed, prob):
        pattern = sim.PatternSpec("random", {"prob": prob})
        try:
            a = sim.gen_mask(12, 10, pattern, seed=seed)
        except DegenerateMask:
            return
        assert np.array_equal(a, sim.gen_mask(12, 10, pattern, seed=seed))


class TestScenarios:
    def test_round_trip(self):
        scenario = tiny(task="treatment", pattern={"kind": "simultaneous"}, dgp={
            "n_units": 30, "n_periods": 30, "factor_mean": [0.1], "treatment": {"shift_mean": 0.5}})
        again = sim.Scenario.from_dict(json.loads(json.dumps(scenario.to_dict())))
        assert again == scenario

    def test_bundled_scenarios_load(self):
        names = sim.bundled_scenarios()
        assert "table_power_100_100" in names
        for name in names:
            sim.load_scenario(name)

    @pytest.mark.parametrize(
        "change",
        [{"task": "forecast"}, {"estimator": "weighted"}, {"propensity": "kernel"}, {"level": 1.0},
         {"reps": 0}, {"colour": "red"}, {"variance": "bootstrap"}],
    )
    def test_invalid_scenarios(self, change):
        data = tiny().to_dict()
        data.update(change)
        with pytest.raises(InvalidScenario):
            sim.Scenario.from_dict(data)

    def test_treatment_needs_adoption_pattern(self):
        with pytest.raises(InvalidScenario):
            tiny(task="treatment")

    def test_missing_key_and_unknown_name(self, tmp_path):
        data = tiny().to_dict()
        del data["dgp"]
        with pytest.raises(InvalidScenario):
            sim.Scenario.from_dict(data)
        with pytest.raises(InvalidScenario):
            sim.load_scenario("no_such_scenario")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(InvalidScenario):
            sim.load_scenario(bad)

    def test_sweep_expansion(self):
        scenario = tiny(sweep={"size": [20, 40]})
        subs = sim.expand_scenario(scenario)
        assert [s.dgp.n_units for s in subs] == [20, 40]
        assert [s.dgp.n_periods for s in subs] == [20, 40]
        shift = tiny(task="treatment", pattern={"kind": "simultaneous"}, sweep={"shift_mean": [0.0, 1.0]})
        assert [s.dgp.treatment.shift_mean for s in sim.expand_scenario(shift)] == [0.0, 1.0]
        with pytest.raises(InvalidScenario):
            sim.expand_scenario(tiny(sweep={"colour": [1]}))


class TestMonteCarlo:
    def test_reproducible_and_worker_independent(self):
        scenario = tiny()
        a = sim.run_reps(scenario, 6, workers=1)
        b = sim.run_reps(scenario, 6, workers=1)
        c = sim.run_reps(scenario, 6, workers=2)
        assert a == b == c

    def test_minimum_reps(self):
        with pytest.raises(InvalidScenario):
            sim.run_monte_carlo(tiny(), reps=50)

    def test_proportion_standard_error(self):
        records = [sim.RepRecord(k, {"reject_individual": float(k < 30)}) for k in range(100)]
        scenario = tiny(task="treatment", pattern={"kind": "simultaneous"}, test={"kinds": ["individual"]})
        size = [r for r in sim.summarize(scenario, records) if r.metric == "size"][0]
        assert size.value == 0.3
        assert abs(size.mc_se - np.sqrt(0.3 * 0.7 / 100)) < 1e-15

    def test_failures_are_tallied(self):
        records = [sim.RepRecord(0, {"rel_mse_all": 0.1}), sim.RepRecord(1, {}, "DegenerateMask")]
        reports = sim.summarize(tiny(), records)
        assert all(r.failures == 1 for r in reports)
        assert reports[0].detail["errors"] == {"DegenerateMask": 1}

    def test_full_observation_coverage(self):
        scenario = tiny(task="inference", pattern={"kind": "random", "params": {"prob": 1.0}})
        reports = sim.run_monte_carlo(scenario)
        cover = [r for r in reports if r.metric == "coverage" and r.detail["key"] == "cover_obs"][0]
        assert cover.reps == 100
        assert abs(cover.value - 0.95) <= 3 * np.sqrt(0.95 * 0.05 / 100)
        assert 0.0 <= cover.value <= 1.0

    def test_imputation_metrics(self):
        reports = sim.run_monte_carlo(tiny())
        keys = {r.detail["key"] for r in reports}
        assert keys == {"rel_mse_obs", "rel_mse_miss", "rel_mse_all"}
        assert all(r.failures == 0 and r.value > 0 for r in reports)
