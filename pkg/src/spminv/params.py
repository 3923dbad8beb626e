"""Physical parameters, scaling factors and nondimensionalization for the SPM.

Reference values describe an LCO / graphite cell.  Fixed scaling factors
(particle radius, exchange current density, ...) are folded in once when the
configuration is loaded; only the four cycle-dependent factors vary during
inference.
"""
from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import yaml

logger = logging.getLogger(__name__)

FARADAY = 96485.0
GAS_CONSTANT = 8.3145
HORIZON_S = 3600.0
GEOMETRY_RTOL = 1e-12


class ParameterError(ValueError):
    """Raised for non-physical or inconsistent parameter values."""


class RangeError(ParameterError):
    """A scaling factor lies outside its declared range."""


class SingularParameterError(ParameterError):
    """A parameter value makes the nondimensional problem singular."""


class ElectrodeKind(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def flux_sign(self) -> int:
        # positive electrode is lithiated during discharge
        return 1 if self is ElectrodeKind.POSITIVE else -1


@dataclass(frozen=True)
class ElectrodeParams:
    """Dimensional parameters of one electrode.

    ``geometric_coefficient`` is R / (3 eps A L).  When the volume fraction,
    area and thickness are all given it must agree with them.
    """

    diffusion_coefficient: float
    particle_radius: float
    initial_concentration: float
    max_concentration: float
    geometric_coefficient: float
    exchange_current_density: float
    volume_fraction: float | None = None
    area: float | None = None
    thickness: float | None = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{f.name} must be finite and > 0, got {value!r}")
        if self.initial_concentration > self.max_concentration:
            raise ParameterError("initial_concentration exceeds max_concentration")
        if self.has_geometry:
            expected = geometric_coefficient(
                self.particle_radius, self.volume_fraction, self.area, self.thickness
            )
            if abs(self.geometric_coefficient - expected) > GEOMETRY_RTOL * self.geometric_coefficient:
                raise ParameterError(
                    f"geometric_coefficient {self.geometric_coefficient!r} inconsistent with "
                    f"R/(3 eps A L) = {expected!r}"
                )

    @property
    def has_geometry(self) -> bool:
        return None not in (self.volume_fraction, self.area, self.thickness)

    @classmethod
    def from_geometry(cls, *, diffusion_coefficient, particle_radius, initial_concentration,
                      max_concentration, exchange_current_density, volume_fraction, area,
                      thickness) -> "ElectrodeParams":
        return cls(
            diffusion_coefficient=diffusion_coefficient,
            particle_radius=particle_radius,
            initial_concentration=initial_concentration,
            max_concentration=max_concentration,
            geometric_coefficient=geometric_coefficient(
                particle_radius, volume_fraction, area, thickness),
            exchange_current_density=exchange_current_density,
            volume_fraction=volume_fraction,
            area=area,
            thickness=thickness,
        )


def geometric_coefficient(radius: float, volume_fraction: float, area: float,
                          thickness: float) -> float:
    return radius / (3.0 * volume_fraction * area * thickness)


@dataclass(frozen=True)
class CellConstants:
    current: float = 1.35
    faraday: float = FARADAY
    temperature: float = 298.15
    gas_constant: float = GAS_CONSTANT
    film_resistance: float = 0.01
    horizon: float = HORIZON_S

    def __post_init__(self):
        for name in ("faraday", "temperature", "gas_constant", "horizon"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.film_resistance < 0:
            raise ParameterError("film_resistance must be >= 0")
        if self.current < 0:
            raise ParameterError("current must be >= 0 (positive means discharge)")


FACTOR_NAMES = ("eta_Dp", "eta_Dn", "eta_Gp", "eta_cmaxp")
FACTOR_BOUNDS: dict[str, tuple[float, float]] = {
    "eta_Dp": (1e-1, 1e1),
    "eta_Dn": (1e-2, 1e1),
    "eta_Gp": (1.0, 4.0),
    "eta_cmaxp": (0.8, 1.2),
}


@dataclass(frozen=True)
class ScalingFactors:
    """The four cycle-dependent scaling factors.

    Construction checks the declared ranges unless ``unbounded=True``, which
    sensitivity studies use to step slightly outside them.
    """

    eta_Dp: float = 1.0
    eta_Dn: float = 1.0
    eta_Gp: float = 1.0
    eta_cmaxp: float = 1.0
    unbounded: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in FACTOR_NAMES:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise RangeError(f"{name} must be finite and > 0, got {value!r}")
            lo, hi = FACTOR_BOUNDS[name]
            if not self.unbounded and not lo <= value <= hi:
                raise RangeError(f"{name}={value!r} outside [{lo}, {hi}]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, n) for n in FACTOR_NAMES)

    def as_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in FACTOR_NAMES}

    @classmethod
    def from_sequence(cls, values, unbounded: bool = False) -> "ScalingFactors":
        return cls(*(float(v) for v in values), unbounded=unbounded)


@dataclass(frozen=True)
class ElectrodeTask:
    """One electrode's diffusion problem, with its nondimensional pair."""

    kind: ElectrodeKind
    params: ElectrodeParams
    surface_flux: float
    horizon: float = HORIZON_S
    alpha: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        alpha, beta = nondimensionalize(
            self.params.diffusion_coefficient, self.params.particle_radius,
            self.params.initial_concentration, self.surface_flux, self.horizon)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def for_electrode(cls, kind: ElectrodeKind, params: ElectrodeParams,
                      constants: CellConstants) -> "ElectrodeTask":
        flux = surface_flux(kind, params, constants)
        return cls(kind=kind, params=params, surface_flux=flux, horizon=constants.horizon)


def surface_flux(kind: ElectrodeKind, params: ElectrodeParams, constants: CellConstants) -> float:
    """J_p = +(I/F) G_p and J_n = -(I/F) G_n, with I > 0 on discharge."""
    return kind.flux_sign * constants.current / constants.faraday * params.geometric_coefficient


def nondimensionalize(diffusion_coefficient: float, particle_radius: float,
                      initial_concentration: float, surface_flux: float,
                      horizon: float = HORIZON_S) -> tuple[float, float]:
    """Return ``(alpha, beta)`` for the unit-sphere, unit-time problem.

    alpha = D T / R^2 and beta = J R / (D C), so that the normalized field
    obeys dc/dt = alpha lap(c), c(r, 0) = 1, dc/dr(1, t) = beta.
    """
    if diffusion_coefficient == 0:
        raise SingularParameterError("diffusion coefficient is zero")
    for name, value in (("diffusion_coefficient", diffusion_coefficient),
                        ("particle_radius", particle_radius),
                        ("initial_concentration", initial_concentration),
                        ("horizon", horizon)):
        if not value > 0:
            raise ParameterError(f"{name} must be > 0, got {value!r}")
    alpha = diffusion_coefficient * horizon / particle_radius**2
    beta = surface_flux * particle_radius / (diffusion_coefficient * initial_concentration)
    return alpha, beta


# Reference values for the LCO cathode / graphite anode and the fixed
# (cycle-independent) scaling factors applied on top of them.
DEFAULT_CONFIG: dict = {
    "positive": {
        "diffusion_coefficient": 3.9e-14,
        "max_concentration": 51000.0,
        "initial_concentration": 30730.0,
        "particle_radius": 3.0e-6,
        "exchange_current_density": 1.0e-1,
        "volume_fraction": 0.689,
        "area": 0.1,
        "thickness": 7.2e-5,
    },
    "negative": {
        "diffusion_coefficient": 3.9e-14,
        "max_concentration": 30555.0,
        "initial_concentration": 29866.0,
        "particle_radius": 5.86e-6,
        "exchange_current_density": 7.7e-2,
        "volume_fraction": 0.75,
        "area": 0.1,
        "thickness": 8.3e-5,
    },
    "constants": {
        "current": 1.35,
        "faraday": FARADAY,
        "temperature": 298.15,
        "gas_constant": GAS_CONSTANT,
        "film_resistance": 0.020,
        "horizon": HORIZON_S,
    },
    "fixed_factors": {
        "C_p": 0.82,
        "R_p": 5.0,
        "j_p": 2.5,
        "R_n": 2.0,
        "j_n": 3.2,
        "G_n": 2.8,
        "R_f": 0.5,
    },
    # scale G_p directly (True) or re-derive it from scaled geometry (False)
    "scale_geometric_directly": True,
}

_FIXED_TARGETS = {
    "C_p": ("positive", "initial_concentration"),
    "R_p": ("positive", "particle_radius"),
    "j_p": ("positive", "exchange_current_density"),
    "R_n": ("negative", "particle_radius"),
    "j_n": ("negative", "exchange_current_density"),
    "C_n": ("negative", "initial_concentration"),
    "cmax_n": ("negative", "max_concentration"),
    "G_n": ("negative", "geometric_coefficient"),
    "G_p": ("positive", "geometric_coefficient"),
    "R_f": ("constants", "film_resistance"),
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ParameterError(f"unknown configuration key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ParameterError(f"configuration key {key!r} must be a mapping")
            for sub in value:
                if sub not in out[key] and key != "fixed_factors":
                    raise ParameterError(f"unknown configuration key {key}.{sub}")
            out[key].update(value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class CellModel:
    """Cell reference state after fixed factors: both electrodes + constants.

    This is what the cycle-dependent factors are applied to.
    """

    positive: ElectrodeParams
    negative: ElectrodeParams
    constants: CellConstants
    scale_geometric_directly: bool = True

    @classmethod
    def from_config(cls, config: Mapping | None = None) -> "CellModel":
        cfg = _merge(DEFAULT_CONFIG, config or {})
        fixed = cfg["fixed_factors"]
        for name in fixed:
            if name not in _FIXED_TARGETS:
                raise ParameterError(f"unknown fixed factor {name!r}")

        def factor(name):
            value = float(fixed.get(name, 1.0))
            if not value > 0:
                raise ParameterError(f"fixed factor {name} must be > 0")
            return value

        electrodes = {}
        for side, suffix in (("positive", "p"), ("negative", "n")):
            raw = dict(cfg[side])
            raw["particle_radius"] *= factor(f"R_{suffix}")
            raw["exchange_current_density"] *= factor(f"j_{suffix}")
            raw["initial_concentration"] *= factor(f"C_{suffix}")
            if side == "negative":
                raw["max_concentration"] *= factor("cmax_n")
            ref = ElectrodeParams.from_geometry(**{k: float(v) for k, v in raw.items()})
            g_factor = factor(f"G_{suffix}")
            if g_factor != 1.0:
                # the lumped coefficient no longer matches its components
                ref = replace(ref, geometric_coefficient=ref.geometric_coefficient * g_factor,
                              volume_fraction=None, area=None, thickness=None)
            electrodes[side] = ref
        consts = dict(cfg["constants"])
        consts["film_resistance"] *= factor("R_f")
        constants = CellConstants(**{k: float(v) for k, v in consts.items()})
        if constants.horizon != HORIZON_S:
            logger.info("using non-default horizon T=%g s", constants.horizon)
        return cls(electrodes["positive"], electrodes["negative"], constants,
                   bool(cfg["scale_geometric_directly"]))

    @classmethod
    def from_file(cls, path: str | Path) -> "CellModel":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        cell = data.get("cell", data) if isinstance(data, Mapping) else None
        if not isinstance(cell, Mapping):
            raise ParameterError(f"{path}: expected a mapping")
        return cls.from_config(cell)

    def apply_scaling(self, factors: ScalingFactors) -> tuple[ElectrodeParams, ElectrodeParams]:
        """Effective (positive, negative) parameters for the given factors."""
        pos, neg = self.positive, self.negative
        pos_kw = dict(
            diffusion_coefficient=pos.diffusion_coefficient * factors.eta_Dp,
            max_concentration=pos.max_concentration * factors.eta_cmaxp,
        )
        if self.scale_geometric_directly or not pos.has_geometry:
            pos_kw.update(geometric_coefficient=pos.geometric_coefficient * factors.eta_Gp)
            if factors.eta_Gp != 1.0:
                pos_kw.update(volume_fraction=None, area=None, thickness=None)
        else:
            # attribute the change to the particle radius, keeping R/(3 eps A L) exact
            radius = pos.particle_radius * factors.eta_Gp
            pos_kw.update(particle_radius=radius, geometric_coefficient=geometric_coefficient(
                radius, pos.volume_fraction, pos.area, pos.thickness))
        if pos_kw["max_concentration"] < pos.initial_concentration:
            raise ParameterError("eta_cmaxp pushes c_max,p below the initial concentration")
        pos_eff = replace(pos, **pos_kw)
        neg_eff = replace(neg, diffusion_coefficient=neg.diffusion_coefficient * factors.eta_Dn)
        return pos_eff, neg_eff

    def tasks(self, factors: ScalingFactors) -> tuple[ElectrodeTask, ElectrodeTask]:
        pos, neg = self.apply_scaling(factors)
        task_p = ElectrodeTask.for_electrode(ElectrodeKind.POSITIVE, pos, self.constants)
        task_n = ElectrodeTask.for_electrode(ElectrodeKind.NEGATIVE, neg, self.constants)
        if self.constants.current > 0 and not (task_p.beta > 0 > task_n.beta):
            raise ParameterError("flux sign convention violated")
        return task_p, task_n

    def snapshot(self) -> dict:
        """Plain-dict view, stable enough for manifests and sidecars."""
        def electrode(p):
            return {f.name: getattr(p, f.name) for f in fields(p)}
        return {
            "positive": electrode(self.positive),
            "negative": electrode(self.negative),
            "constants": {f.name: getattr(self.constants, f.name) for f in fields(self.constants)},
            "scale_geometric_directly": self.scale_geometric_directly,
        }
