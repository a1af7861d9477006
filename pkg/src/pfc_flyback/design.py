"""Closed-form sizing of a single-stage CrCM PFC flyback.

Covers the transformer (magnetizing inductance, turns ratios), the output
capacitor, the peak primary current and the RCD leakage clamp. Every function
takes SI units and returns SI units.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Mapping

SQRT2 = math.sqrt(2.0)


class DesignError(ValueError):
    """Raised when an input makes a sizing equation meaningless.

    ``equation`` names the calculation that failed so callers composing
    several steps can report where the chain broke.
    """

    def __init__(self, message: str, equation: str = "", field: str = ""):
        super().__init__(message)
        self.equation = equation
        self.field = field


@dataclass(frozen=True)
class DesignSpec:
    vac_min: float
    vac_max: float
    v_out: float
    i_out: float
    f_line_min: float
    f_sw_min: float
    d_max: float
    eta_target: float = 0.88
    v_f_diode: float = 0.7
    v_ripple: float = 2.0
    v_aux_max: float = 19.88
    # None -> twice the reflected voltage / 10 % of the clamp voltage
    v_clamp: float | None = None
    delta_v_clamp: float | None = None

    def validate(self) -> None:
        if not 0 < self.vac_min <= self.vac_max:
            raise DesignError("need 0 < vac_min <= vac_max", field="vac_min")
        if not 0 < self.d_max < 1:
            raise DesignError("d_max must lie strictly between 0 and 1", field="d_max")
        if not 0 < self.eta_target <= 1:
            raise DesignError("eta_target must lie in (0, 1]", field="eta_target")
        for name in ("v_out", "i_out", "f_line_min", "f_sw_min", "v_ripple"):
            if not getattr(self, name) > 0:
                raise DesignError(f"{name} must be positive", field=name)
        if self.v_f_diode < 0:
            raise DesignError("v_f_diode must be non-negative", field="v_f_diode")
        if self.v_clamp is not None and self.v_clamp <= 0:
            raise DesignError("v_clamp must be positive", field="v_clamp")
        if self.delta_v_clamp is not None and self.delta_v_clamp <= 0:
            raise DesignError("delta_v_clamp must be positive", field="delta_v_clamp")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DesignSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise DesignError(f"unknown field {unknown[0]!r}", field=unknown[0])
        for f in dataclasses.fields(cls):
            if f.default is dataclasses.MISSING and f.name not in data:
                raise DesignError(f"missing required field {f.name!r}", field=f.name)
        values = {}
        for key, value in data.items():
            if value is not None and not isinstance(value, (int, float)):
                raise DesignError(f"field {key!r} must be a number", field=key)
            values[key] = None if value is None else float(value)
        spec = cls(**values)
        spec.validate()
        return spec


@dataclass(frozen=True)
class DesignOutput:
    l_primary: float
    n_sp: float
    n_ap: float
    n_as: float
    c_out: float
    r_snubber: float
    c_snubber: float
    i_peak_primary: float
    p_in_max: float

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DesignOutput":
        return cls(**{f.name: float(data[f.name]) for f in dataclasses.fields(cls)})


@dataclass(frozen=True)
class ReferenceDesign:
    """Component values of the built 100 W board."""

    vac_min: float = 85.0
    vac_max: float = 264.0
    v_out: float = 24.0
    i_out: float = 4.2
    f_line: float = 60.0
    f_sw_min: float = 70e3
    l_primary: float = 160e-6
    l_leakage: float = 3.75e-6
    n_primary: int = 40
    n_secondary: int = 6
    n_aux: int = 5
    n_secondary_2: int = 3  # listed on the board, no role in the power path
    d_max: float = 0.5
    v_ripple: float = 2.0
    i_peak: float = 4.54
    c_out: float = 1410e-6
    r_snubber: float = 75e3
    c_snubber: float = 2.2e-9
    r_dson_primary: float = 0.36  # IPD80R360P7S
    r_dson_secondary: float = 7.3e-3  # IPB073N15N5

    @property
    def n_sp(self) -> float:
        return self.n_secondary / self.n_primary

    @property
    def n_ap(self) -> float:
        return self.n_aux / self.n_primary

    @property
    def n_as(self) -> float:
        return self.n_aux / self.n_secondary

    @property
    def v_reflected(self) -> float:
        return self.v_out / self.n_sp

    def design_spec(self, **overrides: float) -> DesignSpec:
        values: dict[str, Any] = dict(
            vac_min=self.vac_min,
            vac_max=self.vac_max,
            v_out=self.v_out,
            i_out=self.i_out,
            f_line_min=self.f_line,
            f_sw_min=self.f_sw_min,
            d_max=self.d_max,
            v_ripple=self.v_ripple,
        )
        values.update(overrides)
        return DesignSpec(**values)


REFERENCE = ReferenceDesign()


def _positive(equation: str, **values: float) -> None:
    for name, value in values.items():
        if not value > 0 or not math.isfinite(value):
            raise DesignError(f"{name} must be positive and finite, got {value!r}",
                              equation=equation, field=name)


def primary_inductance(spec: DesignSpec, p_out_max: float) -> float:
    """Magnetizing inductance that keeps the switching frequency above
    ``spec.f_sw_min`` at low line and full power."""
    _positive("primary_inductance", p_out_max=p_out_max, f_sw_min=spec.f_sw_min)
    return (spec.vac_min ** 2 * spec.eta_target * spec.d_max ** 2
            / (SQRT2 * p_out_max * spec.f_sw_min))


def _duty_factor(equation: str, d_max: float) -> float:
    if not 0 < d_max < 1:
        raise DesignError(f"d_max must lie strictly between 0 and 1, got {d_max!r}",
                          equation=equation, field="d_max")
    return (1.0 - d_max) / d_max


def turns_ratio_secondary(spec: DesignSpec) -> float:
    """Ns/Np from volt-second balance at low-line peak and maximum duty."""
    k = _duty_factor("turns_ratio_secondary", spec.d_max)
    _positive("turns_ratio_secondary", vac_min=spec.vac_min)
    return (spec.v_out + spec.v_f_diode) / (SQRT2 * spec.vac_min) * k


def turns_ratio_aux_primary(spec: DesignSpec) -> float:
    k = _duty_factor("turns_ratio_aux_primary", spec.d_max)
    _positive("turns_ratio_aux_primary", vac_min=spec.vac_min)
    return (spec.v_aux_max + spec.v_f_diode) / (SQRT2 * spec.vac_min) * k


def turns_ratio_aux_secondary(spec: DesignSpec) -> float:
    denom = spec.v_out + spec.v_f_diode
    if denom == 0:
        raise DesignError("v_out + v_f_diode is zero", equation="turns_ratio_aux_secondary",
                          field="v_out")
    return (spec.v_aux_max + spec.v_f_diode) / denom


def output_capacitance(spec: DesignSpec) -> float:
    """Bulk output capacitance for the allowed low-frequency ripple.

    Uses the minimum line frequency as given, which sizes for peak-peak
    ripple of a unity-PF input.
    """
    _positive("output_capacitance", f_line_min=spec.f_line_min, v_ripple=spec.v_ripple)
    return spec.i_out / (2 * math.pi * spec.f_line_min * spec.v_ripple)


def peak_primary_current(spec: DesignSpec, p_out_max: float, l_primary: float) -> float:
    """Peak primary current from the CrCM energy balance at ``f_sw_min``."""
    _positive("peak_primary_current", p_out_max=p_out_max, l_primary=l_primary,
              eta_target=spec.eta_target, f_sw_min=spec.f_sw_min)
    p_in = p_out_max / spec.eta_target
    return math.sqrt(2.0 * p_in / (l_primary * spec.f_sw_min))


def default_clamp(v_reflected: float) -> tuple[float, float]:
    """Clamp voltage and allowed clamp ripple when the DesignSpec leaves them open."""
    v_clamp = 2.0 * v_reflected
    return v_clamp, 0.1 * v_clamp


def _clamp_voltage(spec: DesignSpec, v_reflected: float) -> float:
    return spec.v_clamp if spec.v_clamp is not None else default_clamp(v_reflected)[0]


def snubber_resistor(spec: DesignSpec, l_leak: float, i_peak: float,
                     v_reflected: float, f_sw: float) -> float:
    """RCD clamp resistor dissipating the captured leakage energy at the
    clamp voltage.

    ``v_reflected`` is the output voltage seen from the primary. The clamp
    voltage comes from ``spec.v_clamp`` (default twice ``v_reflected``).
    """
    _positive("snubber_resistor", l_leak=l_leak, i_peak=i_peak, f_sw=f_sw)
    v_sn = _clamp_voltage(spec, v_reflected)
    if v_sn <= v_reflected:
        raise DesignError(
            f"clamp below reflected voltage ({v_sn:g} V <= {v_reflected:g} V)",
            equation="snubber_resistor", field="v_clamp")
    e_leak = 0.5 * l_leak * i_peak ** 2
    return v_sn ** 2 / (e_leak * (v_sn / (v_sn - v_reflected)) * f_sw)


def snubber_capacitor(spec: DesignSpec, r_snubber: float, f_sw: float,
                      v_reflected: float | None = None) -> float:
    """Clamp capacitor holding the clamp ripple to ``delta_v_clamp``."""
    _positive("snubber_capacitor", r_snubber=r_snubber, f_sw=f_sw)
    if spec.v_clamp is not None:
        v_sn = spec.v_clamp
        dv = spec.delta_v_clamp if spec.delta_v_clamp is not None else 0.1 * v_sn
    else:
        if v_reflected is None:
            raise DesignError("v_clamp unset and no reflected voltage to derive it",
                              equation="snubber_capacitor", field="v_clamp")
        v_sn, dv_default = default_clamp(v_reflected)
        dv = spec.delta_v_clamp if spec.delta_v_clamp is not None else dv_default
    _positive("snubber_capacitor", delta_v_clamp=dv)
    return v_sn / (dv * r_snubber * f_sw)


def full_design(spec: DesignSpec, p_out_max: float,
                l_leak: float = REFERENCE.l_leakage) -> DesignOutput:
    """Run every sizing step in dependency order.

    The reflected voltage used for the clamp is ``v_out / n_sp`` with the
    turns ratio this design produces, and the clamp is sized at
    ``f_sw_min``.
    """
    spec.validate()
    l_primary = primary_inductance(spec, p_out_max)
    n_sp = turns_ratio_secondary(spec)
    n_ap = turns_ratio_aux_primary(spec)
    n_as = turns_ratio_aux_secondary(spec)
    c_out = output_capacitance(spec)
    i_peak = peak_primary_current(spec, p_out_max, l_primary)
    v_reflected = spec.v_out / n_sp
    r_sn = snubber_resistor(spec, l_leak, i_peak, v_reflected, spec.f_sw_min)
    c_sn = snubber_capacitor(spec, r_sn, spec.f_sw_min, v_reflected)
    return DesignOutput(
        l_primary=l_primary,
        n_sp=n_sp,
        n_ap=n_ap,
        n_as=n_as,
        c_out=c_out,
        r_snubber=r_sn,
        c_snubber=c_sn,
        i_peak_primary=i_peak,
        p_in_max=p_out_max / spec.eta_target,
    )
