"""Synthetic factor panels, observation patterns and a Monte Carlo driver.

The data-generating process is ``Y_it = Lambda_i' F_t + e_it`` with Gaussian
factors, loadings and noise.  A binary unit characteristic
``S_i = 1(Lambda_{i,k} >= threshold)`` lets the observation pattern depend on
the loadings.  Patterns come in four kinds:

``random``
    entries observed independently with probability ``prob``.
``simultaneous``
    a share ``fraction`` of the units adopts treatment at ``start * T``.
``staggered``
    nobody is treated before ``start * T``; afterwards the treated share
    grows linearly as ``(t - start * T) / (scale * T)``, so a share
    ``1 - (1 - start) / scale`` of the units is never treated.
``block``
    the first ``round(fraction * N)`` units (in index order) adopt at
    ``start * T``; a deterministic two-block layout.

Each kind takes its parameters either once for every unit (``params``) or
per ``S`` group (``s1`` and ``s0``).  For the treatment kinds the control
panel misses the treated entries, so the same pattern drives both the
imputation and the treatment experiments.

Monte Carlo replications draw their randomness from
``SeedSequence(seed).spawn(reps)``, so the results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import kstest, norm

from .errors import DegenerateMask, InvalidScenario, PanelDataError
from .factor_est import fit
from .inference import PanelInference
from .panel_core import MaskedPanel
from .propensity import (
    CovariateVector,
    estimate_constant,
    estimate_discrete_freq,
    estimate_logit_per_t,
    estimate_logit_pooled,
    propensity_from_matrix,
)
from .treatment import (
    TreatmentPanel,
    fit_control,
    test_average,
    test_individual,
    treated_periods,
)

__all__ = [
    "TreatmentSpec",
    "DgpSpec",
    "PatternSpec",
    "SimulatedPanel",
    "McReport",
    "Scenario",
    "RepRecord",
    "gen_panel",
    "gen_schedule",
    "gen_mask",
    "true_propensity",
    "run_reps",
    "run_monte_carlo",
    "summarize",
    "load_scenario",
    "bundled_scenarios",
    "expand_scenario",
    "MIN_REPS",
]

MIN_REPS = 100
PATTERN_KINDS = ("random", "simultaneous", "staggered", "block")
TASKS = ("imputation", "inference", "treatment")
PROPENSITY_MODELS = ("discrete_freq", "logit_pooled", "logit_per_t", "constant", "true")

_PATTERN_KEYS = {
    "random": {"prob"},
    "simultaneous": {"fraction", "start"},
    "staggered": {"start", "scale"},
    "block": {"fraction", "start"},
}
_PATTERN_DEFAULTS = {
    "random": {"prob": 0.75},
    "simultaneous": {"fraction": 0.5, "start": 0.5},
    "staggered": {"start": 0.1, "scale": 1.0},
    "block": {"fraction": 0.5, "start": 0.75},
}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TreatmentSpec:
    """Treated loadings ``Lambda1_i = Lambda0_i + delta_i`` with every
    component of ``delta_i`` drawn from ``N(shift_mean, shift_sd^2)``; a
    zero ``shift_sd`` gives the constant shift ``shift_mean``."""

    shift_mean: float = 0.0
    shift_sd: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.shift_mean) and math.isfinite(self.shift_sd)):
            raise InvalidScenario("treatment shift parameters must be finite")
        if self.shift_sd < 0:
            raise InvalidScenario("shift_sd must be non-negative")

    @property
    def is_null(self) -> bool:
        return self.shift_mean == 0.0 and self.shift_sd == 0.0


@dataclass(frozen=True)
class DgpSpec:
    """Gaussian factor model ``Y = Lambda F' + e``.

    ``factor_mean`` may be a scalar (shared by all factors) or one value per
    factor.  ``S_i = 1(Lambda_{i, s_column} >= s_threshold)``.
    """

    n_units: int
    n_periods: int
    rank: int = 1
    factor_mean: Union[float, tuple] = 0.0
    factor_sd: float = 1.0
    loading_mean: float = 0.0
    loading_sd: float = 1.0
    noise_sd: float = 1.0
    s_column: int = -1
    s_threshold: float = 0.0
    treatment: Optional[TreatmentSpec] = None

    def __post_init__(self):
        for name in ("n_units", "n_periods", "rank"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidScenario(f"{name} must be a positive integer, got {value!r}")
        if self.factor_sd <= 0 or self.loading_sd <= 0:
            raise InvalidScenario("factor_sd and loading_sd must be positive")
        if self.noise_sd < 0:
            raise InvalidScenario("noise_sd must be non-negative")
        mean = np.broadcast_to(np.asarray(self.factor_mean, dtype=float), (self.rank,))
        if not np.isfinite(mean).all():
            raise InvalidScenario("factor_mean must be finite")
        if not -self.rank <= self.s_column < self.rank:
            raise InvalidScenario(f"s_column {self.s_column} is outside the rank {self.rank}")
        if isinstance(self.treatment, Mapping):
            object.__setattr__(self, "treatment", TreatmentSpec(**self.treatment))

    @property
    def factor_mean_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.factor_mean, dtype=float), (self.rank,)).copy()


@dataclass(frozen=True)
class PatternSpec:
    """Observation pattern; see the module docstring for the kinds.

    ``params`` applies to every unit.  Giving ``s1`` and ``s0`` instead makes
    the pattern conditional on ``S``.  Missing keys take the kind's defaults.
    """

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    s1: Optional[Mapping[str, float]] = None
    s0: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise InvalidScenario(f"pattern kind must be one of {PATTERN_KINDS}, got {self.kind!r}")
        if (self.s1 is None) != (self.s0 is None):
            raise InvalidScenario("conditional patterns need both s1 and s0")
        for group in self._groups():
            self._validate(group)

    def _groups(self) -> list:
        return [self.params] if self.s1 is None else [self.s1, self.s0]

    def _validate(self, group: Mapping[str, float]) -> None:
        unknown = set(group) - _PATTERN_KEYS[self.kind]
        if unknown:
            raise InvalidScenario(f"unknown {self.kind} pattern parameters {sorted(unknown)}")
        p = {**_PATTERN_DEFAULTS[self.kind], **group}
        if self.kind == "random" and not 0.0 < p["prob"] <= 1.0:
            raise InvalidScenario("prob must lie in (0, 1]")
        if self.kind in ("simultaneous", "block"):
            if not 0.0 <= p["fraction"] <= 1.0 or not 0.0 <= p["start"] <= 1.0:
                raise InvalidScenario("fraction and start must lie in [0, 1]")
        if self.kind == "staggered":
            if not 0.0 <= p["start"] < 1.0:
                raise InvalidScenario("staggered start must lie in [0, 1)")
            if p["scale"] <= 0:
                raise InvalidScenario("staggered scale must be positive")

    @property
    def conditional(self) -> bool:
        return self.s1 is not None

    @property
    def is_treatment(self) -> bool:
        return self.kind != "random"

    def group_params(self, s_value: Optional[int] = None) -> dict:
        if not self.conditional:
            group = self.params
        else:
            group = self.s1 if s_value else self.s0
        return {**_PATTERN_DEFAULTS[self.kind], **group}


@dataclass(frozen=True)
class SimulatedPanel:
    """Ground truth of one draw.  ``treated_outcomes`` and
    ``treated_loadings`` are ``None`` without a treatment spec."""

    outcomes: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    s: np.ndarray
    noise: np.ndarray
    treated_outcomes: Optional[np.ndarray] = None
    treated_loadings: Optional[np.ndarray] = None

    @property
    def common(self) -> np.ndarray:
        return self.loadings @ self.factors.T

    @property
    def treated_common(self) -> Optional[np.ndarray]:
        if self.treated_loadings is None:
            return None
        return self.treated_loadings @ self.factors.T


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------
def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_panel(spec: DgpSpec, seed) -> SimulatedPanel:
    """Draw loadings, factors and noise; deterministic given ``seed``.

    The draws happen in a fixed order (loadings, factors, noise, shifts), so
    adding a treatment spec does not change the control panel.
    """
    rng = _rng(seed)
    n, t_len, r = spec.n_units, spec.n_periods, spec.rank
    lam = spec.loading_mean + spec.loading_sd * rng.standard_normal((n, r))
    f = spec.factor_mean_vector + spec.factor_sd * rng.standard_normal((t_len, r))
    e = spec.noise_sd * rng.standard_normal((n, t_len))
    s = (lam[:, spec.s_column] >= spec.s_threshold).astype(int)
    y = lam @ f.T + e
    y1 = lam1 = None
    if spec.treatment is not None:
        tr = spec.treatment
        delta = tr.shift_mean + tr.shift_sd * rng.standard_normal((n, r))
        lam1 = lam + delta
        y1 = lam1 @ f.T + e
    return SimulatedPanel(y, lam, f, s, e, y1, lam1)


def _group_units(n: int, pattern: PatternSpec, s: Optional[np.ndarray]):
    if not pattern.conditional:
        return [(np.arange(n), pattern.group_params())]
    if s is None:
        raise InvalidScenario("a conditional pattern needs the characteristic S")
    s = np.asarray(s)
    if s.shape != (n,):
        raise InvalidScenario(f"S must have {n} entries")
    return [
        (np.flatnonzero(s == 1), pattern.group_params(1)),
        (np.flatnonzero(s != 1), pattern.group_params(0)),
    ]


def _staggered_times(m: int, t_len: int, start: float, scale: float) -> np.ndarray:
    """Adoption times for ``m`` ranked units: unit ``k`` adopts at the first
    period in which ``floor(m * share(t)) > k``."""
    k = np.arange(1, m + 1)
    times = np.ceil(start * t_len + scale * t_len * k / m - 1e-9).astype(int)
    return np.where(times >= t_len, t_len, np.maximum(times, 0))


def gen_schedule(
    n: int, t_len: int, pattern: PatternSpec, s: Optional[np.ndarray] = None, seed=None
) -> np.ndarray:
    """Adoption times (number of control periods, ``T`` for never treated)
    for the treatment kinds."""
    if not pattern.is_treatment:
        raise InvalidScenario("random patterns have no adoption schedule")
    rng = _rng(seed)
    adopt = np.full(n, t_len, dtype=int)
    for units, p in _group_units(n, pattern, s):
        m = units.size
        if m == 0:
            continue
        if pattern.kind in ("simultaneous", "block"):
            k = int(round(p["fraction"] * m))
            chosen = units[:k] if pattern.kind == "block" else rng.choice(units, k, replace=False)
            adopt[chosen] = int(round(p["start"] * t_len))
        else:
            order = rng.permutation(units)
            adopt[order] = _staggered_times(m, t_len, p["start"], p["scale"])
    return adopt


def _check_mask(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(~mask.any(axis=1))
    if rows.size:
        raise DegenerateMask(f"unit {rows[0]} is never observed")
    cols = np.flatnonzero(~mask.any(axis=0))
    if cols.size:
        raise DegenerateMask(f"period {cols[0]} has no observed unit")
    return mask


def gen_mask(
    n: int, t_len: int, pattern: PatternSpec, s: Optional[np.ndarray] = None, seed=None
) -> np.ndarray:
    """Boolean ``N x T`` observation mask (for the treatment kinds, the
    control entries).  Raises :class:`DegenerateMask` when a unit or a
    period ends up with no observation."""
    rng = _rng(seed)
    if pattern.kind == "random":
        mask = np.zeros((n, t_len), dtype=bool)
        for units, p in _group_units(n, pattern, s):
            mask[units] = rng.random((units.size, t_len)) < p["prob"]
    else:
        adopt = gen_schedule(n, t_len, pattern, s, rng)
        mask = np.arange(t_len)[None, :] < adopt[:, None]
    return _check_mask(mask)


def true_propensity(
    n: int, t_len: int, pattern: PatternSpec, s: Optional[np.ndarray] = None
) -> np.ndarray:
    """``P(W_it = 1 | S_i)`` implied by the pattern (treating the selected
    share of a simultaneous group as a probability)."""
    probs = np.empty((n, t_len))
    t = np.arange(t_len)
    for units, p in _group_units(n, pattern, s):
        if pattern.kind == "random":
            row = np.full(t_len, p["prob"])
        elif pattern.kind in ("simultaneous", "block"):
            row = np.where(t >= int(round(p["start"] * t_len)), 1.0 - p["fraction"], 1.0)
        else:
            m = max(units.size, 1)
            treated = (t[None, :] >= _staggered_times(m, t_len, p["start"], p["scale"])[:, None]).mean(axis=0)
            row = 1.0 - treated
        probs[units] = row
    return probs


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TestSpec:
    """Which treatment test to run in a treatment scenario."""

    kinds: tuple = ("individual", "average")
    null_imposed: bool = True
    alpha: float = 0.05
    alternative: str = "two-sided"

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if not kinds or set(kinds) - {"individual", "average"}:
            raise InvalidScenario("test kinds must be 'individual' and/or 'average'")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidScenario("alpha must lie in (0, 1)")
        if self.alternative not in ("two-sided", "greater", "less"):
            raise InvalidScenario(f"unknown alternative {self.alternative!r}")
        object.__setattr__(self, "kinds", kinds)


@dataclass(frozen=True)
class Scenario:
    """A declarative Monte Carlo experiment (see :func:`Scenario.from_dict`).

    ``sweep`` maps one DGP or treatment field (``"n_units"``,
    ``"shift_mean"``...) to a list of values; :func:`expand_scenario` turns it
    into one scenario per value.
    """

    name: str
    task: str
    dgp: DgpSpec
    pattern: PatternSpec
    rank: Optional[int] = None
    estimator: str = "plain"
    propensity: Optional[str] = None
    reps: int = MIN_REPS
    seed: int = 0
    level: float = 0.95
    variance: str = "linearized"
    test: TestSpec = field(default_factory=TestSpec)
    sweep: Optional[Mapping[str, Sequence]] = None
    hist_bins: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidScenario(f"task must be one of {TASKS}, got {self.task!r}")
        if self.estimator not in ("plain", "weighted"):
            raise InvalidScenario("estimator must be 'plain' or 'weighted'")
        if self.estimator == "weighted" and self.propensity is None:
            raise InvalidScenario("the weighted estimator needs a propensity model")
        if self.propensity is not None and self.propensity not in PROPENSITY_MODELS:
            raise InvalidScenario(f"propensity must be one of {PROPENSITY_MODELS}")
        if self.task == "treatment":
            if not self.pattern.is_treatment:
                raise InvalidScenario("treatment scenarios need an adoption pattern")
            if self.dgp.treatment is None:
                object.__setattr__(self, "dgp", replace(self.dgp, treatment=TreatmentSpec()))
        if self.variance not in ("linearized", "closed_form"):
            raise InvalidScenario("variance must be 'linearized' or 'closed_form'")
        if not 0.0 < self.level < 1.0:
            raise InvalidScenario("level must lie in (0, 1)")
        if int(self.reps) != self.reps or self.reps < 1:
            raise InvalidScenario("reps must be a positive integer")

    @property
    def fit_rank(self) -> int:
        return int(self.rank or self.dgp.rank)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scenario":
        data = copy.deepcopy(dict(data))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidScenario(f"unknown scenario keys {sorted(unknown)}")
        try:
            dgp = dict(data.pop("dgp"))
            pattern = dict(data.pop("pattern"))
            name = data.pop("name")
            task = data.pop("task")
        except KeyError as exc:
            raise InvalidScenario(f"scenario is missing {exc.args[0]!r}") from None
        try:
            if dgp.get("treatment") is not None:
                dgp["treatment"] = TreatmentSpec(**dgp["treatment"])
            if isinstance(dgp.get("factor_mean"), list):
                dgp["factor_mean"] = tuple(dgp["factor_mean"])
            test = TestSpec(**data.pop("test", {}))
            return cls(name, task, DgpSpec(**dgp), PatternSpec(**pattern), test=test, **data)
        except TypeError as exc:
            raise InvalidScenario(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["test"]["kinds"] = list(self.test.kinds)
        if isinstance(out["dgp"]["factor_mean"], tuple):
            out["dgp"]["factor_mean"] = list(out["dgp"]["factor_mean"])
        for key in ("s1", "s0"):
            if out["pattern"][key] is None:
                del out["pattern"][key]
        return out


def expand_scenario(scenario: Scenario) -> list:
    """One scenario per value of the (single) sweep key."""
    if not scenario.sweep:
        return [scenario]
    if len(scenario.sweep) != 1:
        raise InvalidScenario("sweep must name exactly one field")
    (key, values), = scenario.sweep.items()
    out = []
    for value in values:
        if key in {f.name for f in fields(DgpSpec)}:
            dgp = replace(scenario.dgp, **{key: value})
        elif key in {f.name for f in fields(TreatmentSpec)}:
            base = scenario.dgp.treatment or TreatmentSpec()
            dgp = replace(scenario.dgp, treatment=replace(base, **{key: value}))
        elif key == "size":
            dgp = replace(scenario.dgp, n_units=int(value), n_periods=int(value))
        else:
            raise InvalidScenario(f"cannot sweep over {key!r}")
        out.append(replace(scenario, name=f"{scenario.name}[{key}={value}]", dgp=dgp, sweep=None))
    return out


def _scenario_dir():
    return resources.files("panelfactor").joinpath("scenarios")


def bundled_scenarios() -> list:
    """Names of the scenarios shipped with the package."""
    return sorted(p.name[:-5] for p in _scenario_dir().iterdir() if p.name.endswith(".json"))


def load_scenario(source: Union[str, Path, Mapping]) -> Scenario:
    """Load a scenario from a mapping, a JSON file or a bundled name."""
    if isinstance(source, Mapping):
        return Scenario.from_dict(source)
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    else:
        bundled = _scenario_dir().joinpath(f"{source}.json")
        if not bundled.is_file():
            raise InvalidScenario(f"no scenario file or bundled scenario named {str(source)!r}")
        text = bundled.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"scenario is not valid JSON: {exc}") from None
    return Scenario.from_dict(data)


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RepRecord:
    """Per-replication outcome: scalar metrics, standardized draws (for
    normality checks and histograms) or the name of the error raised."""

    index: int
    values: Mapping[str, float] = field(default_factory=dict)
    error: Optional[str] = None


def _propensity(scenario: Scenario, panel: MaskedPanel, sim: SimulatedPanel):
    if scenario.propensity is None:
        return None
    model = scenario.propensity
    if model == "discrete_freq":
        return estimate_discrete_freq(panel, CovariateVector.discrete(sim.s))
    if model == "logit_pooled":
        return estimate_logit_pooled(panel, sim.s)
    if model == "logit_per_t":
        return estimate_logit_per_t(panel, CovariateVector.discrete(sim.s))
    if model == "constant":
        return estimate_constant(panel)
    n, t_len = panel.shape
    return propensity_from_matrix(true_propensity(n, t_len, scenario.pattern, sim.s), panel)


def _rel_mse(est: np.ndarray, truth: np.ndarray, sel: np.ndarray) -> float:
    den = float((truth[sel] ** 2).sum())
    return float(((est[sel] - truth[sel]) ** 2).sum()) / den if den > 0 else float("nan")


def _rotation(model, lam: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``H`` with ``Lambda~ ~ Lambda H'`` and ``F~ ~ F H^-1``."""
    n, t_len = lam.shape[0], f.shape[0]
    return np.diag(1.0 / model.eigenvalues) @ (model.loadings.T @ lam / n) @ (f.T @ f / t_len)


def _rep_imputation(scenario, sim, panel, model, out):
    c = sim.common
    est = model.common()
    w = panel.observed
    ok = np.broadcast_to(model.factor_ok[None, :], w.shape)
    out["rel_mse_obs"] = _rel_mse(est, c, w & ok)
    out["rel_mse_miss"] = _rel_mse(est, c, ~w & ok)
    out["rel_mse_all"] = _rel_mse(est, c, ok)
    out["unidentified_periods"] = float((~model.factor_ok).sum())


def _rep_inference(scenario, sim, panel, model, prop, rng, out):
    inf = PanelInference(panel, model, prop, method=scenario.variance)
    z_crit = norm.ppf(0.5 + scenario.level / 2)
    c = sim.common
    est = model.common()
    h = _rotation(model, sim.loadings, sim.factors)
    lam_true = sim.loadings @ h.T
    f_true = sim.factors @ np.linalg.inv(h)
    w = panel.observed & model.factor_ok[None, :]
    miss = ~panel.observed & model.factor_ok[None, :]
    for label, sel in (("obs", w), ("miss", miss)):
        cells = np.argwhere(sel)
        if cells.size == 0:
            continue
        j, t = cells[rng.integers(len(cells))]
        rc = inf.common(j, t)
        z = (est[j, t] - c[j, t]) / rc.se
        out[f"z_common_{label}"] = float(z)
        out[f"cover_{label}"] = float(abs(z) <= z_crit)
        rl = inf.loading(j)
        out[f"z_loading_{label}"] = float((model.loadings[j, 0] - lam_true[j, 0]) / rl.se[0])
        rf = inf.factor(t)
        out[f"z_factor_{label}"] = float((model.factors[t, 0] - f_true[t, 0]) / rf.se[0])
    if miss.any():
        se = inf.common_se(miss)
        err = np.abs(est - c)[miss]
        out["cover_miss_all"] = float(np.mean(err <= z_crit * se[miss]))


def _rep_treatment(scenario, sim, rng, out):
    t_len = scenario.dgp.n_periods
    adopt = gen_schedule(scenario.dgp.n_units, t_len, scenario.pattern, sim.s, rng)
    d = np.arange(t_len)[None, :] >= adopt[:, None]
    _check_mask(~d)
    y = np.where(d, sim.treated_outcomes, sim.outcomes)
    tp = TreatmentPanel(y, adopt)
    model = fit_control(tp, scenario.fit_rank)
    candidates = [
        i for i in np.flatnonzero(tp.ever_treated)
        if treated_periods(tp, model, i).size > model.rank
    ]
    if not candidates:
        raise DegenerateMask("no treated unit has a usable treated window")
    i = int(candidates[rng.integers(len(candidates))])
    spec = scenario.test
    if "individual" in spec.kinds:
        periods = treated_periods(tp, model, i)
        t = int(periods[rng.integers(periods.size)])
        res = test_individual(tp, model, i, t, spec.null_imposed, spec.alternative)
        out["z_individual"] = res.z_stat
        out["reject_individual"] = float(res.p_value < spec.alpha)
    if "average" in spec.kinds:
        res = test_average(tp, model, i, spec.null_imposed, spec.alternative)
        out["z_average"] = res.z_stat
        out["reject_average"] = float(res.p_value < spec.alpha)


def _one_rep(args) -> RepRecord:
    scenario, index, seq = args
    panel_seq, mask_seq, pick_seq = seq.spawn(3)
    out: dict = {}
    try:
        sim = gen_panel(scenario.dgp, np.random.default_rng(panel_seq))
        if scenario.task == "treatment":
            _rep_treatment(scenario, sim, np.random.default_rng(mask_seq), out)
            return RepRecord(index, out)
        n, t_len = sim.outcomes.shape
        mask = gen_mask(n, t_len, scenario.pattern, sim.s, np.random.default_rng(mask_seq))
        panel = MaskedPanel(sim.outcomes, mask)
        prop = _propensity(scenario, panel, sim)
        model = fit(
            panel, scenario.fit_rank, weighted=scenario.estimator == "weighted", propensity=prop
        )
        _rep_imputation(scenario, sim, panel, model, out)
        if scenario.task == "inference":
            _rep_inference(scenario, sim, panel, model, prop, np.random.default_rng(pick_seq), out)
    except (PanelDataError, np.linalg.LinAlgError) as exc:
        return RepRecord(index, out, type(exc).__name__)
    return RepRecord(index, out)


def run_reps(scenario: Scenario, reps: Optional[int] = None, workers: int = 1) -> list:
    """Run the replications of one (unswept) scenario and return their
    :class:`RepRecord` list in replication order."""
    if scenario.sweep:
        raise InvalidScenario("expand swept scenarios with expand_scenario first")
    reps = int(reps or scenario.reps)
    seqs = np.random.SeedSequence(scenario.seed).spawn(reps)
    jobs = [(scenario, k, seqs[k]) for k in range(reps)]
    if workers <= 1:
        return [_one_rep(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class McReport:
    """One Monte Carlo summary number with its Monte Carlo standard error.

    For proportions ``mc_se = sqrt(v (1 - v) / reps)``; for averages it is
    the sample standard deviation over ``sqrt(reps)``; for KS statistics it
    is ``NaN`` and ``detail["p_value"]`` holds the test's p-value.
    """

    metric: str
    value: float
    mc_se: float
    reps: int
    scenario: str
    failures: int = 0
    detail: Mapping[str, Any] = field(default_factory=dict)


def _proportion(values: np.ndarray) -> tuple[float, float]:
    v = float(values.mean())
    return v, math.sqrt(v * (1.0 - v) / values.size)


def _average(values: np.ndarray) -> tuple[float, float]:
    sd = float(values.std(ddof=1)) if values.size > 1 else float("nan")
    return float(values.mean()), sd / math.sqrt(values.size)


def _column(records: list, key: str) -> np.ndarray:
    vals = [r.values[key] for r in records if key in r.values and r.error is None]
    return np.asarray(vals, dtype=float)


def summarize(scenario: Scenario, records: list) -> list:
    """Aggregate replication records into :class:`McReport` objects."""
    fails = sum(r.error is not None for r in records)
    errors: dict = {}
    for r in records:
        if r.error is not None:
            errors[r.error] = errors.get(r.error, 0) + 1
    out: list = []

    def add(metric, key, kind, **detail):
        vals = _column(records, key)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            return
        if kind == "prop":
            value, se = _proportion(vals)
        elif kind == "avg":
            value, se = _average(vals)
        else:
            res = kstest(vals, "norm")
            value, se = float(res.statistic), float("nan")
            detail = {**detail, "p_value": float(res.pvalue), "sd": float(vals.std(ddof=1))}
            if scenario.hist_bins:
                counts, edges = np.histogram(vals, bins=scenario.hist_bins, range=(-4, 4))
                detail["histogram"] = {"counts": counts.tolist(), "edges": edges.tolist()}
        out.append(McReport(metric, value, se, int(vals.size), scenario.name, fails, {"key": key, **detail}))

    if scenario.task in ("imputation", "inference"):
        for part in ("obs", "miss", "all"):
            add("rel_mse", f"rel_mse_{part}", "avg", entries=part)
    if scenario.task == "inference":
        add("coverage", "cover_miss", "prop", entries="random missing entry")
        add("coverage", "cover_obs", "prop", entries="random observed entry")
        add("coverage", "cover_miss_all", "avg", entries="all missing entries")
        for quantity in ("loading", "factor", "common"):
            for part in ("obs", "miss"):
                add("ks_stat", f"z_{quantity}_{part}", "ks", quantity=quantity, entries=part)
    if scenario.task == "treatment":
        metric = "size" if scenario.dgp.treatment.is_null else "power"
        for kind in scenario.test.kinds:
            add(metric, f"reject_{kind}", "prop", test=kind, alpha=scenario.test.alpha)
            add("ks_stat", f"z_{kind}", "ks", test=kind)
    if errors:
        for rep in out:
            rep.detail.setdefault("errors", errors)  # type: ignore[union-attr]
    return out


def run_monte_carlo(
    scenario: Union[Scenario, Mapping, str, Path],
    reps: Optional[int] = None,
    parallel_workers: int = 1,
) -> list:
    """Run a scenario (all sweep values) and return its :class:`McReport`
    list.  At least :data:`MIN_REPS` replications are required."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    reps = int(reps or scenario.reps)
    if reps < MIN_REPS:
        raise InvalidScenario(f"at least {MIN_REPS} replications are required, got {reps}")
    reports: list = []
    for sub in expand_scenario(scenario):
        reports.extend(summarize(sub, run_reps(sub, reps, parallel_workers)))
    return reports
