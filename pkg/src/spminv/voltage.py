"""Terminal voltage from surface stoichiometries, and discharge-curve synthesis."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .lepinn import FeatureBasis, PhysicsSolver
from .params import CellConstants, CellModel, ElectrodeParams, ElectrodeTask, ScalingFactors
from .reference import SolverGrid, solve_reference

logger = logging.getLogger(__name__)

STOICH_CLAMP = 1e-4
CUTOFF_V = 2.7
SANITY_BAND = (2.0, 4.5)
IMPLAUSIBLE_FRACTION = 0.2
DEFAULT_CURVES = {"positive": "lco_dualfoil.json", "negative": "graphite_chen2020.json"}


class CurveDomainError(ValueError):
    pass


class CurveError(ValueError):
    """A discharge curve violates its invariants."""


# ------------------------------------------------------------ OCP curves

_TERM_FUNCS = {
    "const": lambda x, a, **_: np.full_like(x, a),
    "tanh": lambda x, a, b, c: a * np.tanh(b * x + c),
    "exp": lambda x, a, b, c: a * np.exp(b * x + c),
}


@dataclass(frozen=True, eq=False)
class EquilibriumPotentialCurve:
    """Open-circuit potential U(x) of one electrode.

    Either a list of closed-form terms or a lookup table interpolated with a
    monotone cubic (PCHIP).
    """

    id: str
    kind: str
    terms: tuple = ()
    table: np.ndarray | None = None
    domain: tuple[float, float] = (0.0, 1.0)
    used_interval: tuple[float, float] | None = None
    source: str = ""

    def __post_init__(self):
        if self.kind not in ("terms", "table"):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        lo, hi = (float(v) for v in self.domain)
        if not lo < hi:
            raise ValueError("curve domain must satisfy lo < hi")
        object.__setattr__(self, "domain", (lo, hi))
        if self.used_interval is not None:
            object.__setattr__(self, "used_interval", tuple(float(v) for v in self.used_interval))
        if self.kind == "terms":
            if not self.terms:
                raise ValueError("term curve needs at least one term")
            for term in self.terms:
                if term.get("type") not in _TERM_FUNCS:
                    raise ValueError(f"unknown term type {term.get('type')!r}")
            object.__setattr__(self, "terms", tuple(dict(t) for t in self.terms))
        else:
            tab = np.asarray(self.table, dtype=float)
            if tab.ndim != 2 or tab.shape[1] != 2 or len(tab) < 2:
                raise ValueError("table must be an (n, 2) array of (x, U)")
            if np.any(np.diff(tab[:, 0]) <= 0):
                raise ValueError("table x values must be strictly increasing")
            object.__setattr__(self, "table", tab)
            object.__setattr__(self, "_interp", PchipInterpolator(tab[:, 0], tab[:, 1], extrapolate=False))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        if np.any(x < lo) or np.any(x > hi):
            raise CurveDomainError(f"{self.id}: stoichiometry outside [{lo}, {hi}]")
        if self.kind == "terms":
            u = np.zeros_like(x)
            for term in self.terms:
                kw = {k: v for k, v in term.items() if k != "type"}
                u = u + _TERM_FUNCS[term["type"]](x, **kw)
        else:
            u = self._interp(x)
        if not np.all(np.isfinite(u)):
            raise CurveDomainError(f"{self.id}: non-finite potential")
        return u

    def tabulate(self, n: int = 2000) -> "EquilibriumPotentialCurve":
        x = np.linspace(*self.domain, n)
        return EquilibriumPotentialCurve(f"{self.id}-table{n}", "table",
                                         table=np.column_stack([x, self(x)]), domain=self.domain,
                                         used_interval=self.used_interval, source=self.source)

    def is_decreasing(self, n: int = 1000) -> bool:
        lo, hi = self.used_interval or self.domain
        return bool(np.all(np.diff(self(np.linspace(lo, hi, n))) <= 0))

    # file format ----------------------------------------------------------
    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "domain": list(self.domain), "source": self.source}
        if self.used_interval is not None:
            d["used_interval"] = list(self.used_interval)
        if self.kind == "terms":
            d["terms"] = [dict(t) for t in self.terms]
        else:
            d["table"] = self.table.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EquilibriumPotentialCurve":
        return cls(id=d["id"], kind=d["kind"], terms=tuple(d.get("terms", ())),
                   table=d.get("table"), domain=tuple(d.get("domain", (0.0, 1.0))),
                   used_interval=d.get("used_interval"), source=d.get("source", ""))

    @classmethod
    def load(cls, path: str | Path) -> "EquilibriumPotentialCurve":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def builtin(cls, name: str) -> "EquilibriumPotentialCurve":
        text = resources.files("spminv").joinpath("data", name).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


def default_curves() -> tuple[EquilibriumPotentialCurve, EquilibriumPotentialCurve]:
    return (EquilibriumPotentialCurve.builtin(DEFAULT_CURVES["positive"]),
            EquilibriumPotentialCurve.builtin(DEFAULT_CURVES["negative"]))


# ------------------------------------------------------------ voltage

@dataclass(eq=False)
class VoltagePoint:
    """Voltage breakdown; every field is an array over time samples."""

    time: np.ndarray
    ocv: np.ndarray
    overvoltage: np.ndarray
    voltage: np.ndarray
    y_p: np.ndarray
    x_n: np.ndarray
    clamped: np.ndarray

    @property
    def clamped_fraction(self) -> float:
        return float(np.mean(self.clamped)) if self.clamped.size else 0.0


def kinetic_overpotential(current: float, geometric: float, exchange: float,
                          constants: CellConstants) -> float:
    """(2 R_g K / F) asinh(I G / (2 j))."""
    thermal = 2.0 * constants.gas_constant * constants.temperature / constants.faraday
    return thermal * math.asinh(current * geometric / (2.0 * exchange))


def overvoltage(pos: ElectrodeParams, neg: ElectrodeParams, constants: CellConstants) -> float:
    """Kinetic plus film losses; positive under discharge (I > 0)."""
    I = constants.current
    return (kinetic_overpotential(I, pos.geometric_coefficient, pos.exchange_current_density, constants)
            + kinetic_overpotential(I, neg.geometric_coefficient, neg.exchange_current_density, constants)
            + constants.film_resistance * I)


def terminal_voltage(y_p, x_n, pos: ElectrodeParams, neg: ElectrodeParams,
                     constants: CellConstants, u_p: EquilibriumPotentialCurve,
                     u_n: EquilibriumPotentialCurve, time=None) -> VoltagePoint:
    """V = U_p(y_p) - U_n(x_n) - eta_p - eta_n - R_f I, with I > 0 on discharge.

    Stoichiometries are clamped to [1e-4, 1 - 1e-4]; clamped samples are
    flagged in the result.
    """
    y_p = np.atleast_1d(np.asarray(y_p, dtype=float))
    x_n = np.atleast_1d(np.asarray(x_n, dtype=float))
    if not (np.all(np.isfinite(y_p)) and np.all(np.isfinite(x_n))):
        raise CurveDomainError("non-finite stoichiometry")
    lo, hi = STOICH_CLAMP, 1.0 - STOICH_CLAMP
    yc, xc = np.clip(y_p, lo, hi), np.clip(x_n, lo, hi)
    clamped = (yc != y_p) | (xc != x_n)
    if clamped.any():
        logger.debug("clamped %d of %d stoichiometry samples", int(clamped.sum()), clamped.size)
    ocv = u_p(yc) - u_n(xc)
    ovm = overvoltage(pos, neg, constants)
    time = np.arange(len(ocv), dtype=float) if time is None else np.asarray(time, dtype=float)
    return VoltagePoint(time, ocv, np.full_like(ocv, ovm), ocv - ovm, yc, xc, clamped)


# ------------------------------------------------------------ curves

@dataclass(eq=False)
class DischargeCurve:
    """Constant-current discharge samples of one cycle."""

    time: np.ndarray
    voltage: np.ndarray
    current: float = 1.35
    cycle: int = 0
    battery_id: str = "synthetic"
    cutoff: float = CUTOFF_V
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).ravel()
        self.voltage = np.asarray(self.voltage, dtype=float).ravel()
        if self.time.shape != self.voltage.shape:
            raise CurveError("time and voltage lengths differ")
        if not (np.all(np.isfinite(self.time)) and np.all(np.isfinite(self.voltage))):
            raise CurveError("non-finite samples")
        if np.any(np.diff(self.time) <= 0):
            raise CurveError("time must be strictly increasing")

    def __len__(self):
        return len(self.time)

    def check(self) -> None:
        """Measured-curve invariants: sanity band and final sample at/above cutoff."""
        if len(self) == 0:
            raise CurveError("empty curve")
        lo, hi = SANITY_BAND
        if self.voltage.min() < lo or self.voltage.max() > hi:
            raise CurveError(f"voltage outside the [{lo}, {hi}] V sanity band")
        if self.voltage[-1] < self.cutoff:
            raise CurveError("last sample is below the cutoff voltage")

    @property
    def duration(self) -> float:
        return float(self.time[-1]) if len(self) else 0.0

    @property
    def capacity_ah(self) -> float:
        return self.current * self.duration / 3600.0

    def truncate_cutoff(self) -> "DischargeCurve":
        """Keep samples up to the last one before the voltage first drops below cutoff."""
        below = np.nonzero(self.voltage < self.cutoff)[0]
        end = below[0] if below.size else len(self)
        return self._subset(slice(0, end))

    def truncate_horizon(self, horizon: float) -> "DischargeCurve":
        keep = self.time <= horizon
        if not keep.all():
            logger.warning("cycle %s: %d samples beyond %.0f s dropped", self.cycle,
                           int((~keep).sum()), horizon)
        return self._subset(keep)

    def decimate(self, max_samples: int = 600) -> "DischargeCurve":
        if len(self) <= max_samples:
            return self
        stride = math.ceil(len(self) / max_samples)
        return self._subset(slice(0, None, stride))

    def _subset(self, index) -> "DischargeCurve":
        return DischargeCurve(self.time[index], self.voltage[index], self.current, self.cycle,
                              self.battery_id, self.cutoff, self.status, dict(self.meta))

    def shifted(self, delta: float) -> "DischargeCurve":
        return DischargeCurve(self.time, self.voltage + delta, self.current, self.cycle,
                              self.battery_id, self.cutoff, self.status, dict(self.meta))


# ------------------------------------------------------------ forward engines

class SurrogateEngine:
    """Surface concentration from a fine-tuned basis (mesh-free in time)."""

    name = "surrogate"

    def __init__(self, basis: FeatureBasis, colloc=None):
        self.basis = basis
        self.solver = PhysicsSolver(basis, colloc)

    def surface(self, task: ElectrodeTask, t_hat: np.ndarray) -> np.ndarray:
        w = self.solver.weights(task.alpha, task.beta)
        return self.solver.surface_values(w, t_hat)


class ReferenceEngine:
    """Surface concentration from the finite-volume solver.

    The solve runs on a fine uniform time grid and is interpolated to the
    query times with a cubic spline.
    """

    name = "reference"

    def __init__(self, grid: SolverGrid = SolverGrid(n_r=512, n_t=721, substeps=4)):
        self.grid = grid

    def surface(self, task: ElectrodeTask, t_hat: np.ndarray) -> np.ndarray:
        fld = solve_reference(task.alpha, task.beta, self.grid, radii=np.array([1.0]))
        return CubicSpline(fld.times, fld.values[:, 0])(t_hat)


@dataclass(eq=False)
class Synthesis:
    curve: DischargeCurve
    point: VoltagePoint
    surface_p: np.ndarray
    surface_n: np.ndarray

    @property
    def clamped_fraction(self) -> float:
        return self.point.clamped_fraction


class ForwardModel:
    """Scaling factors -> terminal voltage at arbitrary times (seconds)."""

    def __init__(self, engine, cell: CellModel | None = None,
                 u_p: EquilibriumPotentialCurve | None = None,
                 u_n: EquilibriumPotentialCurve | None = None):
        self.engine = engine
        self.cell = cell or CellModel.from_config()
        dp, dn = default_curves()
        self.u_p = u_p or dp
        self.u_n = u_n or dn

    @property
    def horizon(self) -> float:
        return self.cell.constants.horizon

    def simulate(self, factors: ScalingFactors, times_s) -> Synthesis:
        times_s = np.asarray(times_s, dtype=float)
        t_hat = times_s / self.horizon
        task_p, task_n = self.cell.tasks(factors)
        c_p = self.engine.surface(task_p, t_hat)
        c_n = self.engine.surface(task_n, t_hat)
        pos, neg = task_p.params, task_n.params
        y_p = c_p * pos.initial_concentration / pos.max_concentration
        x_n = c_n * neg.initial_concentration / neg.max_concentration
        point = terminal_voltage(y_p, x_n, pos, neg, self.cell.constants, self.u_p, self.u_n, times_s)
        status = "implausible-parameters" if point.clamped_fraction > IMPLAUSIBLE_FRACTION else "ok"
        curve = DischargeCurve(times_s, point.voltage, self.cell.constants.current, status=status,
                               meta={"factors": factors.as_dict(), "engine": self.engine.name})
        return Synthesis(curve, point, c_p, c_n)


def synthesize_vt(factors: ScalingFactors, engine, times_s=None, cell: CellModel | None = None,
                  cutoff: float | None = CUTOFF_V, **curves) -> DischargeCurve:
    """Synthesize a discharge curve; ``engine`` is a FeatureBasis, engine object or "reference"."""
    if isinstance(engine, FeatureBasis):
        engine = SurrogateEngine(engine)
    elif engine == "reference":
        engine = ReferenceEngine()
    model = ForwardModel(engine, cell, **curves)
    if times_s is None:
        times_s = np.linspace(0.0, model.horizon, 61)
    curve = model.simulate(factors, times_s).curve
    return curve.truncate_cutoff() if cutoff is not None else curve


# Factor sets for early, middle and late stages of degradation
STAGE_FACTORS = {
    "early": ScalingFactors(2.5, 0.25, 2.5, 1.0),
    "middle": ScalingFactors(1.5, 0.1, 3.5, 1.0),
    "late": ScalingFactors(0.3, 0.03, 3.5, 1.0),
}
