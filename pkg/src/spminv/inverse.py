"""Inference of cycle-dependent scaling factors from discharge curves.

Each cycle is fitted by several independent CMA-ES runs started uniformly in
the search box.  The lower-objective half of the runs is kept as the
ensemble summarizing that cycle.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .es import CMAES
from .lepinn import ConditioningError, FeatureBasis
from .params import FACTOR_BOUNDS, FACTOR_NAMES, ParameterError, ScalingFactors
from .voltage import CurveError, DischargeCurve, ForwardModel, SurrogateEngine

logger = logging.getLogger(__name__)

CLAMP_PENALTY = 10.0
MIN_SAMPLES = 10
LOG_ENCODED = ("eta_Dp", "eta_Dn")


class EmptyCurveError(CurveError):
    pass


# ------------------------------------------------------------ search space

@dataclass(frozen=True)
class FactorAxis:
    name: str
    lo: float
    hi: float
    encoding: str = "linear"

    def __post_init__(self):
        if self.encoding not in ("linear", "log"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if not self.lo < self.hi or (self.encoding == "log" and self.lo <= 0):
            raise ValueError(f"invalid bounds for {self.name}")

    def encode(self, value):
        return np.log10(value) if self.encoding == "log" else np.asarray(value, dtype=float)

    def decode(self, z):
        return 10.0 ** z if self.encoding == "log" else z

    @property
    def encoded_bounds(self) -> tuple[float, float]:
        return float(self.encode(self.lo)), float(self.encode(self.hi))


@dataclass(frozen=True)
class SearchSpace:
    """Box over scaling factors, searched in encoded (log or linear) coordinates."""

    axes: tuple[FactorAxis, ...]

    @classmethod
    def default(cls, names=FACTOR_NAMES, bounds=None, log_encoded=LOG_ENCODED) -> "SearchSpace":
        bounds = dict(FACTOR_BOUNDS, **(bounds or {}))
        return cls(tuple(FactorAxis(n, *bounds[n], "log" if n in log_encoded else "linear")
                         for n in names))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([a.encoded_bounds[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a.encoded_bounds[1] for a in self.axes])

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def encode(self, factors: ScalingFactors) -> np.ndarray:
        d = factors.as_dict()
        return np.array([float(a.encode(d[a.name])) for a in self.axes])

    def clamp(self, z) -> tuple[np.ndarray, float]:
        """Clamp to the encoded box; also returns the squared distance moved."""
        z = np.asarray(z, dtype=float)
        zc = np.clip(z, self.lower, self.upper)
        return zc, float(np.sum(((z - zc) / self.width) ** 2))

    def decode(self, z, base: ScalingFactors | None = None) -> ScalingFactors:
        zc, _ = self.clamp(z)
        values = (base or ScalingFactors(1.0, 1.0, 1.0, 1.0)).as_dict()
        for a, zi in zip(self.axes, zc):
            values[a.name] = float(min(max(a.decode(zi), a.lo), a.hi))
        return ScalingFactors(**values)

    def sample(self, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


# ------------------------------------------------------------ objective

@dataclass(frozen=True)
class ObjectiveValue:
    mse: float
    penalty: float
    clamped_fraction: float

    @property
    def total(self) -> float:
        return self.mse + self.penalty


class InverseProblem:
    """Voltage misfit of a candidate factor set against one observed curve."""

    def __init__(self, observed: DischargeCurve, model: ForwardModel):
        curve = observed.truncate_horizon(model.horizon)
        if len(curve) == 0:
            raise EmptyCurveError("no usable samples within the simulation horizon")
        if len(curve) < MIN_SAMPLES:
            raise EmptyCurveError(f"need at least {MIN_SAMPLES} samples, got {len(curve)}")
        self.observed = curve
        self.model = model

    def evaluate(self, factors: ScalingFactors) -> ObjectiveValue:
        syn = self.model.simulate(factors, self.observed.time)
        resid = syn.curve.voltage - self.observed.voltage
        frac = syn.clamped_fraction
        return ObjectiveValue(float(np.mean(resid * resid)), CLAMP_PENALTY * frac * frac, frac)

    def __call__(self, factors: ScalingFactors) -> float:
        return self.evaluate(factors).total


def objective(factors: ScalingFactors, observed: DischargeCurve, basis_or_model) -> float:
    """Mean squared voltage error plus the clamping penalty, in V^2."""
    return InverseProblem(observed, _as_model(basis_or_model))(factors)


def _as_model(obj) -> ForwardModel:
    if isinstance(obj, ForwardModel):
        return obj
    if isinstance(obj, FeatureBasis):
        return ForwardModel(SurrogateEngine(obj))
    raise TypeError("expected a FeatureBasis or ForwardModel")


# ------------------------------------------------------------ single run

@dataclass
class InferenceRun:
    seed: list
    factors: ScalingFactors
    mse: float
    objective: float
    clamped_fraction: float
    trace: list[float]
    status: str
    restart: int = 0

    def to_dict(self) -> dict:
        return {"restart": self.restart, "seed": list(self.seed), "factors": self.factors.as_dict(),
                "mse": self.mse, "objective": self.objective,
                "clamped_fraction": self.clamped_fraction, "status": self.status,
                "trace": self.trace}


def run_cmaes(problem: InverseProblem, space: SearchSpace, seed, generations: int = 50,
              popsize: int = 20, restart: int = 0, base: ScalingFactors | None = None) -> InferenceRun:
    """One CMA-ES run from a uniform random start in the encoded box."""
    rng = np.random.default_rng(seed)
    z0 = space.sample(rng)
    es = CMAES(z0, 0.3 * space.width, popsize, seed=rng)
    best_total, best_z, best_val = np.inf, z0, None
    trace = []
    for _ in range(generations):
        Z = es.ask()
        ranked = np.empty(len(Z))
        for k, z in enumerate(Z):
            zc, dist = space.clamp(z)
            try:
                val = problem.evaluate(space.decode(zc, base))
            except (ConditioningError, ParameterError) as exc:
                logger.debug("candidate rejected: %s", exc)
                ranked[k] = np.inf
                continue
            # distance outside the box only steers the search, it is never reported
            ranked[k] = val.total + dist
            if val.total < best_total:
                best_total, best_z, best_val = val.total, zc, val
        es.tell(Z, ranked)
        trace.append(best_total)
    if best_val is None:
        return InferenceRun(_seed_list(seed), space.decode(z0, base), math.inf, math.inf, 1.0,
                            trace, "penalized", restart)
    step = es.sigma * float(es.D.max())
    if best_val.penalty > 0:
        status = "penalized"
    elif step < 1e-2 * float(space.width.min()):
        status = "converged"
    else:
        status = "stalled"
    return InferenceRun(_seed_list(seed), space.decode(best_z, base), best_val.mse, best_val.total,
                        best_val.clamped_fraction, trace, status, restart)


def _seed_list(seed):
    return [int(s) for s in np.atleast_1d(seed)]


# ------------------------------------------------------------ per cycle

@dataclass
class CycleInference:
    battery_id: str
    cycle: int
    runs: list[InferenceRun]
    filtered_index: list[int]
    summary: dict
    capacity_ah: float
    status: str = "ok"
    error: str | None = None

    @property
    def filtered(self) -> list[InferenceRun]:
        return [self.runs[i] for i in self.filtered_index]

    @property
    def excluded(self) -> list[InferenceRun]:
        keep = set(self.filtered_index)
        return [r for i, r in enumerate(self.runs) if i not in keep]

    def median_factors(self) -> ScalingFactors:
        return ScalingFactors(**{n: self.summary[n]["median"] for n in FACTOR_NAMES}, unbounded=True)

    def to_dict(self) -> dict:
        return {"battery_id": self.battery_id, "cycle": self.cycle, "status": self.status,
                "error": self.error, "capacity_Ah": self.capacity_ah,
                "runs": [r.to_dict() for r in self.runs], "filtered": self.filtered_index,
                "summary": self.summary}


def filter_runs(runs: list[InferenceRun]) -> list[int]:
    """Indices of the lowest-objective ceil(n/2) runs (stable on ties)."""
    order = np.argsort([r.objective for r in runs], kind="stable")
    return sorted(int(i) for i in order[: math.ceil(len(runs) / 2)])


def summarize(runs: list[InferenceRun]) -> dict:
    out = {}
    for name in FACTOR_NAMES:
        v = np.array([r.factors.as_dict()[name] for r in runs])
        out[name] = {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max())}
    m = np.array([r.mse for r in runs])
    out["mse"] = {"min": float(m.min()), "median": float(np.median(m)), "max": float(m.max())}
    return out


def restart_seed(master: int, cycle: int, restart: int) -> list[int]:
    return [int(master), int(cycle), int(restart)]


def infer_cycle(observed: DischargeCurve, basis_or_model, restarts: int = 20, seed: int = 0,
                generations: int = 50, population: int = 20, space: SearchSpace | None = None,
                jobs: int = 1) -> CycleInference:
    if restarts < 4 or restarts % 2:
        raise ValueError("restarts must be an even number >= 4")
    model = _as_model(basis_or_model)
    space = space or SearchSpace.default()
    problem = InverseProblem(observed, model)
    seeds = [restart_seed(seed, observed.cycle, i) for i in range(restarts)]

    def one(i):
        return run_cmaes(problem, space, seeds[i], generations, population, restart=i)

    if jobs == 1:
        runs = [one(i) for i in range(restarts)]
    else:
        from joblib import Parallel, delayed
        runs = Parallel(n_jobs=jobs)(delayed(one)(i) for i in range(restarts))
    keep = filter_runs(runs)
    status = "penalized" if all(r.status == "penalized" for r in runs) else "ok"
    if status == "penalized":
        logger.warning("cycle %s: every run was penalized", observed.cycle)
    return CycleInference(observed.battery_id, observed.cycle, runs, keep,
                          summarize([runs[i] for i in keep]), problem.observed.capacity_ah, status)


# ------------------------------------------------------------ diagnostics

def normalized_error(factors: ScalingFactors, truth: ScalingFactors, space: SearchSpace) -> float:
    """RMS over factors of the encoded-coordinate error divided by the encoded box width."""
    return float(np.sqrt(np.mean(((space.encode(factors) - space.encode(truth)) / space.width) ** 2)))


def rank_average(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_by_ranks(x, y) -> float:
    """Pearson correlation of average ranks; nan if either input is constant."""
    rx, ry = rank_average(x), rank_average(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry / denom) if denom > 0 else math.nan


@dataclass
class CorrelationRow:
    threshold: float
    n_runs: int
    rho: float
    rho_check: float
    defined: bool


def correlation_diagnostics(runs: list[InferenceRun], truth: ScalingFactors,
                            space: SearchSpace | None = None,
                            thresholds=(100, 75, 50, 25)) -> list[CorrelationRow]:
    """Spearman rho between run objective and normalized error, per percentile cut."""
    if truth is None:
        raise ValueError("correlation diagnostics need the true factors")
    if len(runs) < 20:
        raise ValueError("need at least 20 runs")
    space = space or SearchSpace.default()
    obj = np.array([r.objective for r in runs])
    err = np.array([normalized_error(r.factors, truth, space) for r in runs])
    order = np.argsort(obj, kind="stable")
    rows = []
    for pct in thresholds:
        keep = order[: max(2, math.ceil(len(runs) * pct / 100))]
        x, y = obj[keep], err[keep]
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            rows.append(CorrelationRow(pct, len(keep), math.nan, math.nan, False))
            continue
        rho = float(stats.spearmanr(x, y).statistic)
        rows.append(CorrelationRow(pct, len(keep), rho, spearman_by_ranks(x, y), True))
    return rows


# ------------------------------------------------------------ sensitivity

@dataclass
class SensitivityResult:
    reference: ScalingFactors
    times: np.ndarray
    base_voltage: np.ndarray
    curves: dict  # factor -> {delta: voltage array}
    max_deviation: dict  # factor -> max |dV| over all deltas

    def rows(self):
        for name, fam in self.curves.items():
            for delta, v in fam.items():
                yield name, delta, _max_dev(self.base_voltage, v, self.cutoff)

    cutoff: float = 2.7


def _max_dev(base, other, cutoff) -> float:
    # compare only while both curves are above the cutoff
    valid = (base >= cutoff) & (other >= cutoff)
    if not valid.any():
        return 0.0
    end = np.argmin(valid) if not valid.all() else len(valid)
    return float(np.max(np.abs(other[:end] - base[:end]))) if end else 0.0


def sensitivity_scan(reference: ScalingFactors, basis_or_model, deltas=(-0.1, 0.1),
                     factors=("eta_Dp", "eta_Dn", "eta_Gp", "eta_cmaxp"),
                     times_s=None) -> SensitivityResult:
    """One-at-a-time relative perturbations of each factor around ``reference``."""
    model = _as_model(basis_or_model)
    times = np.linspace(0.0, model.horizon, 361) if times_s is None else np.asarray(times_s, float)
    base = model.simulate(reference, times).curve.voltage
    curves, maxdev = {}, {}
    ref = reference.as_dict()
    for name in factors:
        fam = {}
        for d in deltas:
            vals = dict(ref)
            vals[name] = ref[name] * (1.0 + d)
            fam[float(d)] = model.simulate(ScalingFactors(**vals, unbounded=True), times).curve.voltage
        curves[name] = fam
        maxdev[name] = max(_max_dev(base, v, 2.7) for v in fam.values())
    return SensitivityResult(reference, times, base, curves, maxdev)


# ------------------------------------------------------------ battery series

@dataclass
class BatteryInference:
    battery_id: str
    basis_id: str
    protocol: dict
    cycles: list[CycleInference] = field(default_factory=list)
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"battery_id": self.battery_id, "basis_id": self.basis_id,
                "protocol": self.protocol, "status": self.status,
                "cycles": [c.to_dict() for c in self.cycles]}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def summary_rows(self):
        for c in self.cycles:
            if c.status == "failed":
                continue
            for name in FACTOR_NAMES:
                s = c.summary[name]
                yield {"battery": self.battery_id, "cycle": c.cycle, "factor": name,
                       "min": s["min"], "median": s["median"], "max": s["max"],
                       "mse_median": c.summary["mse"]["median"], "capacity_Ah": c.capacity_ah}

    def write_csv(self, path) -> None:
        cols = ["battery", "cycle", "factor", "min", "median", "max", "mse_median", "capacity_Ah"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.summary_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def infer_battery(curves, basis_or_model, restarts: int = 20, seed: int = 0, generations: int = 50,
                  population: int = 20, jobs: int = 1, basis_id: str = "") -> BatteryInference:
    """Independent inference for every cycle; failures are recorded, not raised."""
    curves = list(curves)
    protocol = {"restarts": restarts, "seed": seed, "generations": generations,
                "population": population}
    battery = curves[0].battery_id if curves else ""
    result = BatteryInference(battery, basis_id, protocol)
    if not curves:
        logger.warning("no discharge cycles to infer")
        result.status = "empty"
        return result
    model = _as_model(basis_or_model)
    for curve in curves:
        try:
            ci = infer_cycle(curve, model, restarts, seed, generations, population, jobs=jobs)
        except (CurveError, ValueError) as exc:
            logger.warning("cycle %s failed: %s", curve.cycle, exc)
            ci = CycleInference(curve.battery_id, curve.cycle, [], [], {}, curve.capacity_ah,
                                "failed", str(exc))
        result.cycles.append(ci)
    return result


# ------------------------------------------------------------ estimator

class ScalingFactorInference(BaseEstimator, RegressorMixin):
    """Fit scaling factors to one discharge curve.

    ``fit(curve)`` runs the restart ensemble; ``predict(times)`` returns the
    terminal voltage at the filtered-median factors.
    """

    def __init__(self, basis=None, restarts=20, generations=50, population=20,
                 random_state=0, jobs=1):
        self.basis = basis
        self.restarts = restarts
        self.generations = generations
        self.population = population
        self.random_state = random_state
        self.jobs = jobs

    def fit(self, X, y=None):
        if not isinstance(X, DischargeCurve):
            raise TypeError("fit expects a DischargeCurve")
        self.model_ = _as_model(self.basis)
        self.cycle_ = infer_cycle(X, self.model_, self.restarts, self.random_state,
                                  self.generations, self.population, jobs=self.jobs)
        self.factors_ = self.cycle_.median_factors()
        return self

    def predict(self, X):
        check_is_fitted(self, "factors_")
        t = np.asarray(X, dtype=float).ravel()
        return self.model_.simulate(self.factors_, t).curve.voltage

    def score(self, X, y=None):
        """Negative objective of the fitted factors on curve ``X``."""
        check_is_fitted(self, "factors_")
        return -InverseProblem(X, self.model_)(self.factors_)
