"""First-order power-stage model and a type-2 voltage-loop compensator.

The plant is a single pole from the output capacitor and the load resistance;
the compensator is an integrator with an optional zero and pole. Phases are
summed per factor, so they are never wrapped.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

DEFAULT_F_MIN = 1.0
DEFAULT_F_MAX = 10e3


class StabilityError(ValueError):
    pass


class NoCrossoverError(StabilityError):
    pass


@dataclass(frozen=True)
class PlantModel:
    dc_gain: float
    pole_hz: float

    def __post_init__(self) -> None:
        if not self.pole_hz > 0:
            raise StabilityError("pole_hz must be positive")
        if not self.dc_gain > 0:
            raise StabilityError("dc_gain must be positive")

    def response(self, f: float) -> complex:
        return self.dc_gain / complex(1.0, f / self.pole_hz)

    def phase_deg(self, f: float) -> float:
        return -math.degrees(math.atan(f / self.pole_hz))


@dataclass(frozen=True)
class CompensatorModel:
    integrator_gain: float
    zero_hz: float = 0.0  # 0 = absent
    pole_hz: float = 0.0  # 0 = absent

    def __post_init__(self) -> None:
        for name in ("integrator_gain", "zero_hz", "pole_hz"):
            if getattr(self, name) < 0:
                raise StabilityError(f"{name} must be non-negative")

    def response(self, f: float) -> complex:
        s = 2j * math.pi * f
        h = self.integrator_gain / s
        if self.zero_hz > 0:
            h *= complex(1.0, f / self.zero_hz)
        if self.pole_hz > 0:
            h /= complex(1.0, f / self.pole_hz)
        return h

    def phase_deg(self, f: float) -> float:
        ph = -90.0
        if self.zero_hz > 0:
            ph += math.degrees(math.atan(f / self.zero_hz))
        if self.pole_hz > 0:
            ph -= math.degrees(math.atan(f / self.pole_hz))
        return ph


@dataclass(frozen=True)
class StabilityResult:
    crossover_hz: float
    phase_margin_deg: float
    gain_margin_db: float | None
    stable: bool
    multiple_crossovers: bool = False

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def plant_from_operating_point(c_out: float, v_out: float, i_load: float,
                               modulator_gain: float = 1.0) -> PlantModel:
    """Output-capacitor/load pole at the operating point.

    ``modulator_gain`` is the small-signal output current per unit of control
    signal, so the DC control-to-output gain is ``modulator_gain * R_load``.
    """
    if not i_load > 0:
        raise StabilityError("zero load: the output pole is undefined")
    if not c_out > 0 or not v_out > 0:
        raise StabilityError("c_out and v_out must be positive")
    r_load = v_out / i_load
    return PlantModel(dc_gain=modulator_gain * r_load,
                      pole_hz=1.0 / (2.0 * math.pi * r_load * c_out))


def loop_gain_at(plant: PlantModel, comp: CompensatorModel, f: float) -> complex:
    if not f > 0:
        raise StabilityError("frequency must be positive")
    return plant.response(f) * comp.response(f)


def loop_phase_deg(plant: PlantModel, comp: CompensatorModel, f: float) -> float:
    """Unwrapped loop phase."""
    return plant.phase_deg(f) + comp.phase_deg(f)


def integrator_gain_for_crossover(plant: PlantModel, f_c: float, zero_hz: float = 0.0,
                                  pole_hz: float = 0.0) -> float:
    unit = CompensatorModel(1.0, zero_hz, pole_hz)
    return 1.0 / abs(loop_gain_at(plant, unit, f_c))


def _bisect_log(func, lo: float, hi: float, rel_tol: float = 1e-12) -> float:
    """Root of ``func`` in [lo, hi] with func(lo) > 0 > func(hi)."""
    a, b = math.log(lo), math.log(hi)
    while b - a > rel_tol:
        m = 0.5 * (a + b)
        if func(math.exp(m)) > 0:
            a = m
        else:
            b = m
    return math.exp(0.5 * (a + b))


def phase_margin(plant: PlantModel, comp: CompensatorModel, f_min: float = DEFAULT_F_MIN,
                 f_max: float = DEFAULT_F_MAX, n_scan: int = 400) -> StabilityResult:
    if not 0 < f_min < f_max:
        raise StabilityError("need 0 < f_min < f_max")

    def log_mag(f: float) -> float:
        return math.log(abs(loop_gain_at(plant, comp, f)))

    if not (log_mag(f_min) > 0 > log_mag(f_max)):
        raise NoCrossoverError(f"no crossover in range {f_min:g}-{f_max:g} Hz")

    grid = np.geomspace(f_min, f_max, n_scan)
    mags = np.array([log_mag(f) for f in grid])
    crossings = int(np.count_nonzero(np.diff(np.sign(mags)) != 0))
    multiple = crossings > 1 or bool(np.any(np.diff(mags) > 0))
    # bracket the first crossing found on the grid
    k = int(np.argmax(mags <= 0))
    f_c = _bisect_log(log_mag, float(grid[k - 1]), float(grid[k]))
    pm = 180.0 + loop_phase_deg(plant, comp, f_c)

    gm = None
    ph = np.array([loop_phase_deg(plant, comp, f) for f in grid]) + 180.0
    idx = np.nonzero(np.diff(np.sign(ph)) != 0)[0]
    if idx.size:
        j = int(idx[0])
        f_180 = _bisect_log(lambda f: loop_phase_deg(plant, comp, f) + 180.0,
                            float(grid[j]), float(grid[j + 1]))
        gm = -20.0 * math.log10(abs(loop_gain_at(plant, comp, f_180)))
    return StabilityResult(crossover_hz=f_c, phase_margin_deg=pm, gain_margin_db=gm,
                           stable=pm > 0 and not multiple, multiple_crossovers=multiple)


def bode(plant: PlantModel, comp: CompensatorModel, f_min: float = DEFAULT_F_MIN,
         f_max: float = DEFAULT_F_MAX, n: int = 200) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(f_hz, gain_db, phase_deg) on a log grid."""
    f = np.geomspace(f_min, f_max, n)
    gain = np.array([20.0 * math.log10(abs(loop_gain_at(plant, comp, x))) for x in f])
    phase = np.array([loop_phase_deg(plant, comp, x) for x in f])
    return f, gain, phase
