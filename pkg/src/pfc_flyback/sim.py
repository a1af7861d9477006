"""Cycle-by-cycle simulator for the constant-ON-time CrCM PFC flyback.

Each switching cycle is solved in closed form (linear current segments), so
there is no integration step size and the energy bookkeeping of every cycle
is exact: ``e_in == e_out + losses.total``.

Per-cycle sequence::

    ON      t_on      primary current ramps from 0 to i_pk = v_in*t_on/Lp
    OFF     t_off     magnetizing current resets through the secondary;
                      the first t_lk seconds commutate the leakage
                      inductance into the RCD clamp
    RING    t_qr      half-period valley delay and/or frequency-clamp wait

The bridge, an optional film capacitor on the rectified bus, the RCD clamp
capacitor, the output capacitor and the integrating voltage loop evolve
once per switching cycle.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .design import REFERENCE

SR_TURN_ON_THRESHOLD = -0.23  # V
SR_TURN_OFF_WINDOW = (-8e-3, -4e-3)  # V
SR_MIN_GATE_ON = 500e-9  # s

# Reset voltage floor while the output is still precharging from zero.
_V_RESET_FLOOR = 0.05


class QrDelayMode(str, enum.Enum):
    NONE = "none"
    HALF_RING = "half_ring"


class SyncRectPhase(str, enum.Enum):
    OFF = "off"
    BODY_DIODE = "body_diode"
    GATE_ON = "gate_on"


@dataclass(frozen=True)
class CircuitParams:
    l_primary: float
    l_leakage: float
    n_sp: float
    c_out: float
    c_out_esr: float
    c_oss: float
    r_dson_primary: float
    r_dson_secondary: float
    v_f_body: float
    v_f_bridge: float
    r_snubber: float
    c_snubber: float
    v_line_rms: float
    f_line: float
    # film capacitance on the rectified bus (after the bridge)
    c_in: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.l_leakage < self.l_primary:
            raise ValueError("need 0 <= l_leakage < l_primary")
        if not self.n_sp > 0:
            raise ValueError("n_sp must be positive")
        if not self.c_out > 0:
            raise ValueError("c_out must be positive")
        if not self.f_line > 0:
            raise ValueError("f_line must be positive")
        for name in ("c_out_esr", "c_oss", "r_dson_primary", "r_dson_secondary",
                     "v_f_body", "v_f_bridge", "c_in", "v_line_rms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.l_leakage > 0 and not (self.r_snubber > 0 and self.c_snubber > 0):
            raise ValueError("a leakage inductance needs a clamp (r_snubber, c_snubber > 0)")

    @property
    def l_magnetizing(self) -> float:
        return self.l_primary - self.l_leakage

    @property
    def v_line_peak(self) -> float:
        return math.sqrt(2.0) * self.v_line_rms

    def replace(self, **changes: Any) -> "CircuitParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CircuitParams":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class ControlParams:
    t_on_min: float = 0.1e-6
    t_on_max: float = 15e-6
    f_sw_max: float = 200e3
    loop_bandwidth: float = 10.0
    v_ref: float = 24.0
    soft_start_time: float = 20e-3
    qr_delay_mode: QrDelayMode = QrDelayMode.HALF_RING
    # integrator gain (1/s per V of error, scaled to seconds of ON time);
    # None -> derived from loop_bandwidth at the operating point
    ki: float | None = None
    burst: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.t_on_min < self.t_on_max:
            raise ValueError("need 0 <= t_on_min < t_on_max")
        if not self.f_sw_max > 0 or not self.loop_bandwidth > 0 or not self.v_ref > 0:
            raise ValueError("f_sw_max, loop_bandwidth and v_ref must be positive")
        if self.soft_start_time < 0:
            raise ValueError("soft_start_time must be non-negative")
        object.__setattr__(self, "qr_delay_mode", QrDelayMode(self.qr_delay_mode))

    def replace(self, **changes: Any) -> "ControlParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["qr_delay_mode"] = self.qr_delay_mode.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ControlParams":
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key == "qr_delay_mode":
                kwargs[key] = QrDelayMode(value)
            elif key == "burst":
                kwargs[key] = bool(value)
            elif key == "ki":
                kwargs[key] = None if value is None else float(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class SyncRectState:
    phase: SyncRectPhase = SyncRectPhase.OFF
    v_ds: float = 0.0
    # cleared at gate turn-off, set again once the drain goes positive
    armed: bool = True


@dataclass(frozen=True, slots=True)
class ConverterState:
    line_phase: float
    v_out: float
    t_on: float
    integrator: float
    v_clamp: float
    sync_rect: SyncRectState
    sim_time: float
    v_bus: float


@dataclass(frozen=True, slots=True)
class LossBreakdown:
    conduction_primary: float = 0.0
    conduction_secondary_channel: float = 0.0
    conduction_secondary_body_diode: float = 0.0
    switching_coss: float = 0.0
    snubber: float = 0.0
    bridge: float = 0.0
    total: float = 0.0

    @classmethod
    def from_parts(cls, **parts: float) -> "LossBreakdown":
        total = math.fsum(parts.values())
        return cls(total=total, **parts)

    def components(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d.pop("total")
        return d


@dataclass(frozen=True, slots=True)
class CycleRecord:
    t_start: float
    v_in_inst: float
    t_on: float
    t_off: float
    t_qr: float
    period: float
    i_pk_primary: float
    i_pk_secondary: float
    e_in: float
    e_out: float
    losses: LossBreakdown
    # leakage commutation time and synchronous-gate interval, measured from
    # the primary turn-off instant; gate interval is empty when never enabled
    t_commutation: float = 0.0
    t_gate_on: float = 0.0
    t_gate_off: float = 0.0
    q_out: float = 0.0
    i_line_avg: float = 0.0  # signed, bridge AC side
    v_line_avg: float = 0.0  # signed
    line_phase: float = 0.0  # at cycle start


@dataclass(frozen=True)
class CycleGeometry:
    """Current shape of one cycle, enough to evaluate every loss."""

    v_in: float
    i_pk: float
    t_on: float
    t_off: float
    t_commutation: float
    gate_on: bool
    t_gate_off: float
    v_reflected: float
    v_clamp: float
    v_ds_turn_on: float


# --------------------------------------------------------------------------
# sync rectifier

def sync_rect_transition(sr: SyncRectState, v_ds: float) -> SyncRectState:
    """Advance the drain-sensing synchronous-rectifier controller.

    ``v_ds`` is the sensed drain-source voltage of the secondary switch. The
    gate is only ever enabled out of body-diode conduction, so it cannot
    turn on while the primary conducts (the drain is then positive).
    """
    phase = sr.phase
    armed = sr.armed or v_ds > 0.0
    if phase is SyncRectPhase.OFF:
        if armed and v_ds < SR_TURN_ON_THRESHOLD:
            phase = SyncRectPhase.BODY_DIODE
    elif phase is SyncRectPhase.BODY_DIODE:
        if v_ds < SR_TURN_ON_THRESHOLD:
            phase = SyncRectPhase.GATE_ON
        elif v_ds >= 0.0:
            phase = SyncRectPhase.OFF
    elif phase is SyncRectPhase.GATE_ON:
        lo, hi = SR_TURN_OFF_WINDOW
        if v_ds >= lo:
            # window reached (or overshot on a coarse sample): release gate
            phase = SyncRectPhase.OFF
            armed = v_ds > 0.0
    return SyncRectState(phase=phase, v_ds=v_ds, armed=armed)


# --------------------------------------------------------------------------
# secondary current shape
#
# i_s rises from 0 to i_1 over the commutation interval [0, t_lk], then falls
# linearly to zero at t_off.

def _secondary_knee(g: CycleGeometry, n_sp: float) -> float:
    if g.i_pk == 0.0 or g.t_off == 0.0 or g.t_commutation >= g.t_off:
        return 0.0
    return g.i_pk * (1.0 - g.t_commutation / g.t_off) / n_sp


def secondary_charge(g: CycleGeometry, n_sp: float) -> float:
    return 0.5 * g.t_off * _secondary_knee(g, n_sp)


def _secondary_losses(g: CycleGeometry, circuit: CircuitParams) -> tuple[float, float]:
    """(channel, body-diode) energy; the gate may only conduct inside the
    falling segment."""
    i_1 = _secondary_knee(g, circuit.n_sp)
    if i_1 == 0.0:
        return 0.0, 0.0
    t_lk, t_off = g.t_commutation, g.t_off
    fall = t_off - t_lk
    t_g1 = g.t_gate_off if g.gate_on else t_lk
    rest = t_off - t_g1  # body-diode tail after the gate releases
    i_g1 = i_1 * rest / fall
    channel = circuit.r_dson_secondary * i_1 ** 2 * (fall ** 3 - rest ** 3) / (3.0 * fall ** 2)
    body = circuit.v_f_body * 0.5 * (i_1 * t_lk + i_g1 * rest)
    return channel, body


def cycle_losses(g: CycleGeometry, circuit: CircuitParams,
                 q_bridge: float | None = None) -> LossBreakdown:
    """Per-cycle losses from the current geometry.

    The primary switch and the Coss discharge are supplied by the input on
    top of the stored magnetizing energy, so the bridge carries that charge
    as well. ``q_bridge`` overrides the bridge charge when a bus capacitor
    decouples it from the converter draw.
    """
    cond_p = circuit.r_dson_primary * g.i_pk ** 2 * g.t_on / 3.0
    coss = 0.5 * circuit.c_oss * g.v_ds_turn_on ** 2 if g.i_pk > 0.0 else 0.0
    channel, body = _secondary_losses(g, circuit)
    if g.i_pk > 0.0 and circuit.l_leakage > 0.0:
        snubber = (0.5 * circuit.l_leakage * g.i_pk ** 2
                   + g.v_reflected * 0.5 * g.i_pk * g.t_commutation)
    else:
        snubber = 0.0
    if q_bridge is None:
        q_bridge = input_charge(g, cond_p + coss)
    return LossBreakdown.from_parts(
        conduction_primary=cond_p,
        conduction_secondary_channel=channel,
        conduction_secondary_body_diode=body,
        switching_coss=coss,
        snubber=snubber,
        bridge=2.0 * circuit.v_f_bridge * q_bridge,
    )


def input_charge(g: CycleGeometry, extra_energy: float) -> float:
    if g.i_pk == 0.0 or g.v_in == 0.0:
        return 0.0
    return 0.5 * g.i_pk * g.t_on + extra_energy / g.v_in


def solve_clamp_voltage(circuit: CircuitParams, i_pk: float, f_sw: float,
                        v_reflected: float) -> float:
    """Steady-state RCD clamp voltage where the resistor burns exactly the
    energy captured from the leakage inductance each cycle."""
    p_leak = 0.5 * circuit.l_leakage * i_pk ** 2 * f_sw
    disc = v_reflected ** 2 + 4.0 * circuit.r_snubber * p_leak
    if disc < 0 or circuit.r_snubber < 0:
        raise ValueError("no physical clamp for these parameters")
    return 0.5 * (v_reflected + math.sqrt(disc))


# --------------------------------------------------------------------------
# one cycle

def reference_voltage(control: ControlParams, sim_time: float) -> float:
    if control.soft_start_time <= 0:
        return control.v_ref
    return control.v_ref * min(1.0, sim_time / control.soft_start_time)


def _ring_delay(circuit: CircuitParams, control: ControlParams) -> float:
    if control.qr_delay_mode is QrDelayMode.HALF_RING:
        return math.pi * math.sqrt(circuit.l_primary * circuit.c_oss)
    return 0.0


def _rectified(circuit: CircuitParams, phase: float) -> float:
    return max(abs(circuit.v_line_peak * math.sin(phase)) - 2.0 * circuit.v_f_bridge, 0.0)


def _geometry(circuit: CircuitParams, control: ControlParams, v_in: float,
              t_on: float, v_out: float, v_clamp: float, gate_on: bool) -> CycleGeometry:
    """Solve the OFF interval so the reset voltage includes the conduction
    drops that the resulting current shape produces."""
    i_pk = v_in * t_on / circuit.l_primary
    if i_pk == 0.0:
        return CycleGeometry(v_in, 0.0, t_on, 0.0, 0.0, False, 0.0, 0.0, v_clamp, 0.0)
    n = circuit.n_sp
    k_reset = i_pk * circuit.l_magnetizing * n  # volt-seconds on the secondary
    qr = control.qr_delay_mode is QrDelayMode.HALF_RING

    def shape(v_s: float) -> CycleGeometry:
        t_off = k_reset / v_s
        v_r = v_s / n
        if circuit.l_leakage == 0.0:
            t_lk = 0.0
        elif v_clamp > v_r:
            t_lk = min(circuit.l_leakage * i_pk / (v_clamp - v_r), t_off)
        else:
            t_lk = t_off  # clamp still charging: it takes the whole transfer
        t_goff = t_off
        if gate_on and circuit.r_dson_secondary > 0.0:
            i_th = -SR_TURN_OFF_WINDOW[0] / circuit.r_dson_secondary
            t_goff = t_off * (1.0 - n * i_th / i_pk)
        t_goff = min(max(t_goff, t_lk + SR_MIN_GATE_ON), t_off)
        v_ds_on = max(v_in - v_r, 0.0) if qr else v_in
        return CycleGeometry(v_in, i_pk, t_on, t_off, t_lk, gate_on and t_lk < t_off,
                             t_goff, v_r, v_clamp, v_ds_on)

    def residual(v_s: float) -> float:
        g = shape(v_s)
        q_s = secondary_charge(g, n)
        drop = 0.0
        if q_s > 0.0:
            channel, body = _secondary_losses(g, circuit)
            drop = (channel + body) / q_s
        return max(v_out + drop, _V_RESET_FLOOR) - v_s

    # secant iteration, falling back to plain substitution when it stalls
    v0 = max(v_out, _V_RESET_FLOOR)
    r0 = residual(v0)
    v1 = v0 + r0
    for _ in range(60):
        r1 = residual(v1)
        if r1 == 0.0 or abs(r1) <= 1e-14 * v1:
            break
        v2 = v1 - r1 * (v1 - v0) / (r1 - r0) if r1 != r0 else v1 + r1
        if not v2 > 0.0:
            v2 = v1 + r1
        v0, r0, v1 = v1, r1, v2
    return shape(v1)


def advance_cycle(state: ConverterState, circuit: CircuitParams, control: ControlParams,
                  i_load: float) -> tuple[ConverterState, CycleRecord]:
    """Run one switching cycle starting at ``state``.

    The commanded ON time is ``state.t_on``; with burst enabled the pulse is
    skipped while the ON time sits on its floor and the output is above the
    reference.
    """
    v_line_pk = circuit.v_line_peak
    w_line = 2.0 * math.pi * circuit.f_line
    phi0 = state.line_phase
    v_rect0 = _rectified(circuit, phi0)
    v_in = max(state.v_bus, v_rect0) if circuit.c_in > 0.0 else v_rect0
    t_min = 1.0 / control.f_sw_max

    skip = (control.burst and state.t_on <= control.t_on_min * (1.0 + 1e-12)
            and state.v_out > reference_voltage(control, state.sim_time))
    t_on = 0.0 if skip else state.t_on

    # primary ON: the SR drain sits positive, which re-arms its controller
    sr_on = sync_rect_transition(state.sync_rect, state.v_out + v_in * circuit.n_sp)
    # primary OFF: body diode picks up the current, then the gate follows
    sr_bd = sync_rect_transition(sr_on, -circuit.v_f_body)
    sr_gate = sync_rect_transition(sr_bd, -circuit.v_f_body)
    gate = sr_gate.phase is SyncRectPhase.GATE_ON
    g = _geometry(circuit, control, v_in, t_on, state.v_out, state.v_clamp, gate)

    if g.i_pk > 0.0 and g.t_commutation < g.t_off:
        sr = sr_gate
        if g.gate_on:
            i_s_off = max(g.i_pk * (1.0 - g.t_gate_off / g.t_off) / circuit.n_sp, 0.0)
            sr = sync_rect_transition(sr, -i_s_off * circuit.r_dson_secondary)
        # tail through the body diode, then the drain rings back up
        sr = sync_rect_transition(sr, -circuit.v_f_body)
        sr = SyncRectState(SyncRectPhase.OFF, 0.0, sr.armed)
    else:
        sr = sr_on

    t_ring = _ring_delay(circuit, control) if g.i_pk > 0.0 else 0.0
    active = t_on + g.t_off
    t_qr = max(t_ring, t_min - active)
    period = active + t_qr

    q_s = secondary_charge(g, circuit.n_sp)
    q_conv = input_charge(g, circuit.r_dson_primary * g.i_pk ** 2 * g.t_on / 3.0
                          + (0.5 * circuit.c_oss * g.v_ds_turn_on ** 2 if g.i_pk > 0.0 else 0.0))

    # line and rectified bus at the end of the cycle
    phi1 = phi0 + w_line * period
    if circuit.c_in > 0.0:
        v_rect1 = _rectified(circuit, phi1)
        v_drained = v_in - q_conv / circuit.c_in
        if v_rect1 >= v_drained:
            v_bus1 = v_rect1
            q_bridge = q_conv + circuit.c_in * (v_rect1 - v_in)
        else:
            v_bus1 = max(v_drained, 0.0)
            q_bridge = 0.0
    else:
        v_bus1 = 0.0
        q_bridge = q_conv
    losses = cycle_losses(g, circuit, q_bridge)
    # converter draw plus bridge dissipation; bus-capacitor storage is separate
    e_in = g.v_in * q_conv + losses.bridge
    e_out = e_in - losses.total
    v_line_avg = v_line_pk * (math.cos(phi0) - math.cos(phi1)) / (phi1 - phi0)
    sign = 1.0 if math.sin(0.5 * (phi0 + phi1)) >= 0.0 else -1.0

    # clamp capacitor: captured energy in, exponential decay through R
    if circuit.l_leakage > 0.0:
        decay = math.exp(-2.0 * period / (circuit.r_snubber * circuit.c_snubber))
        v_clamp = math.sqrt(state.v_clamp ** 2 * decay + 2.0 * losses.snubber / circuit.c_snubber)
    else:
        v_clamp = state.v_clamp

    v_out = max(state.v_out + (q_s - i_load * period) / circuit.c_out, 0.0)

    record = CycleRecord(
        t_start=state.sim_time,
        v_in_inst=g.v_in,
        t_on=t_on,
        t_off=g.t_off,
        t_qr=t_qr,
        period=period,
        i_pk_primary=g.i_pk,
        i_pk_secondary=(g.i_pk * (1.0 - g.t_commutation / g.t_off) / circuit.n_sp
                        if g.t_off > 0.0 else 0.0),
        e_in=e_in,
        e_out=e_out,
        losses=losses,
        t_commutation=g.t_commutation,
        t_gate_on=g.t_commutation if g.gate_on else 0.0,
        t_gate_off=g.t_gate_off if g.gate_on else 0.0,
        q_out=q_s,
        i_line_avg=sign * q_bridge / period,
        v_line_avg=v_line_avg,
        line_phase=phi0,
    )
    new_state = ConverterState(
        line_phase=phi1,
        v_out=v_out,
        t_on=state.t_on,
        integrator=state.integrator,
        v_clamp=v_clamp,
        sync_rect=sr,
        sim_time=state.sim_time + period,
        v_bus=v_bus1,
    )
    return new_state, record


def controller_update(state: ConverterState, control: ControlParams,
                      dt: float) -> tuple[float, float]:
    """Integrate the output error over ``dt``; returns (t_on, integrator).

    The integrator is held inside the range that maps onto
    [t_on_min, t_on_max] so it cannot wind up during soft start.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if control.ki is None or not control.ki > 0:
        raise ValueError("control.ki must be resolved before running the loop")
    err = reference_voltage(control, state.sim_time) - state.v_out
    lo = control.t_on_min / control.ki
    hi = control.t_on_max / control.ki
    integrator = min(max(state.integrator + err * dt, lo), hi)
    return control.ki * integrator, integrator


# --------------------------------------------------------------------------
# full runs

def crcm_input_power_per_ton(circuit: CircuitParams, v_out: float, n_grid: int = 512) -> float:
    """Average input power per second of ON time for ideal CrCM at constant
    t_on (no ring delay, no frequency clamp)."""
    v_r = v_out / circuit.n_sp
    a = circuit.l_magnetizing / (circuit.l_primary * v_r)
    theta = (np.arange(n_grid) + 0.5) * math.pi / n_grid
    v = np.maximum(circuit.v_line_peak * np.sin(theta) - 2 * circuit.v_f_bridge, 0.0)
    return float(np.mean(v * v / (1.0 + a * v))) / (2.0 * circuit.l_primary)


def estimate_t_on(circuit: CircuitParams, control: ControlParams, i_load: float,
                  eta_guess: float = 0.9) -> float:
    p_in = control.v_ref * i_load / eta_guess
    k = crcm_input_power_per_ton(circuit, control.v_ref)
    if k <= 0:
        return control.t_on_min
    return min(max(p_in / k, control.t_on_min), control.t_on_max)


def resolve_control(control: ControlParams, circuit: CircuitParams, i_load: float) -> ControlParams:
    """Fill in the integrator gain for a crossover at ``loop_bandwidth``.

    Around the operating point ``dPin/dt_on = Pin/t_on`` and the output is a
    single pole, so below that pole the loop is a pure integrator with
    crossover ``ki * v_ref / t_on``.
    """
    if control.ki is not None:
        return control
    t_on = max(estimate_t_on(circuit, control, i_load), control.t_on_min, 1e-9)
    ki = 2.0 * math.pi * control.loop_bandwidth * t_on / control.v_ref
    return control.replace(ki=ki)


@dataclass
class SimTrace:
    """Cycles kept after settling plus per-cycle sample arrays.

    Samples are switching-cycle averages held over each cycle, so the
    arrays describe a zero-order-hold waveform starting at ``t`` and ending
    at ``t + period``.
    """

    cycles: list[CycleRecord]
    t_window: tuple[float, float]
    f_line: float
    v_line_rms: float
    i_load: float
    settled: bool
    v_out: np.ndarray  # terminal voltage at each cycle start
    t: np.ndarray = field(init=False, repr=False)
    period: np.ndarray = field(init=False, repr=False)
    i_line: np.ndarray = field(init=False, repr=False)
    v_line: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.t = np.array([c.t_start for c in self.cycles])
        self.period = np.array([c.period for c in self.cycles])
        self.i_line = np.array([c.i_line_avg for c in self.cycles])
        self.v_line = np.array([c.v_line_avg for c in self.cycles])

    @property
    def t_end(self) -> np.ndarray:
        return self.t + self.period

    @property
    def f_sw(self) -> np.ndarray:
        return 1.0 / self.period

    @property
    def i_in_rect(self) -> np.ndarray:
        return np.abs(self.i_line)

    @property
    def v_in_rect(self) -> np.ndarray:
        """Rectified line voltage at each cycle start."""
        w = 2.0 * math.pi * self.f_line
        return np.abs(math.sqrt(2.0) * self.v_line_rms * np.sin(w * self.t))

    def i_in_samples(self):
        from .analysis import WaveformSeries
        return WaveformSeries.hold(self.t, self.i_line, self.f_line, t_end=float(self.t_end[-1]))

    def v_out_samples(self):
        from .analysis import WaveformSeries
        return WaveformSeries.hold(self.t, self.v_out, self.f_line, t_end=float(self.t_end[-1]))

    def write_waveform_csv(self, path: str | Path) -> None:
        rows = zip(self.t, self.v_in_rect, self.i_in_rect, self.v_out, self.f_sw)
        _write_csv(path, ["time_s", "v_in_rect_V", "i_in_avg_A", "v_out_V", "f_sw_Hz"], rows)

    def write_cycle_csv(self, path: str | Path) -> None:
        loss_names = [f.name for f in dataclasses.fields(LossBreakdown)]
        header = ["t_start_s", "t_on_s", "t_off_s", "i_pk_A"] + [f"{n}_J" for n in loss_names]
        rows = ([c.t_start, c.t_on, c.t_off, c.i_pk_primary]
                + [getattr(c.losses, n) for n in loss_names] for c in self.cycles)
        _write_csv(path, header, rows)


def _write_csv(path: str | Path, header: list[str], rows: Iterable) -> None:
    from ._io import atomic_writer
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def initial_state(circuit: CircuitParams, control: ControlParams,
                  v_out: float = 0.0, t_on: float | None = None) -> ConverterState:
    ki = control.ki if control.ki else 1.0
    t_on = control.t_on_min if t_on is None else min(max(t_on, control.t_on_min), control.t_on_max)
    return ConverterState(
        line_phase=0.0,
        v_out=v_out,
        t_on=t_on,
        integrator=t_on / ki,
        v_clamp=0.0,
        sync_rect=SyncRectState(),
        sim_time=0.0,
        v_bus=_rectified(circuit, 0.0),
    )


def run_simulation(circuit: CircuitParams, control: ControlParams, i_load: float,
                   n_line_cycles: int = 2, settle_cycles: int = 30,
                   closed_loop: bool = True, v_out_initial: float = 0.0,
                   t_on_initial: float | None = None) -> SimTrace:
    """Simulate from soft-start conditions and keep the last
    ``n_line_cycles`` line periods after discarding ``settle_cycles``.

    With ``closed_loop=False`` the ON time stays at ``t_on_initial`` and the
    soft start is irrelevant (open-loop envelope studies).
    """
    if n_line_cycles < 1 or settle_cycles < 0:
        raise ValueError("need n_line_cycles >= 1 and settle_cycles >= 0")
    if i_load < 0:
        raise ValueError("i_load must be non-negative")
    control = resolve_control(control, circuit, i_load)
    state = initial_state(circuit, control, v_out_initial, t_on_initial)
    t_line = 1.0 / circuit.f_line
    t_keep = settle_cycles * t_line
    t_stop = (settle_cycles + n_line_cycles) * t_line
    esr = circuit.c_out_esr

    kept: list[CycleRecord] = []
    v_term: list[float] = []
    # mean output per line cycle for the settle test
    acc = [0.0, 0.0]
    line_means: list[float] = []
    next_boundary = t_line
    while state.sim_time < t_stop:
        new_state, rec = advance_cycle(state, circuit, control, i_load)
        v_sense = state.v_out + esr * (rec.q_out / rec.period - i_load)
        if rec.t_start + rec.period > t_keep:
            kept.append(rec)
            v_term.append(v_sense)
        acc[0] += state.v_out * rec.period
        acc[1] += rec.period
        if new_state.sim_time >= next_boundary:
            line_means.append(acc[0] / acc[1])
            acc = [0.0, 0.0]
            next_boundary += t_line
        if closed_loop:
            t_on, integ = controller_update(new_state, control, rec.period)
            new_state = dataclasses.replace(new_state, t_on=t_on, integrator=integ)
        state = new_state

    settled = False
    if len(line_means) >= 2 and line_means[-2] > 0:
        settled = abs(line_means[-1] - line_means[-2]) < 1e-3 * abs(line_means[-2])
    return SimTrace(cycles=kept, t_window=(t_keep, t_stop), f_line=circuit.f_line,
                    v_line_rms=circuit.v_line_rms, i_load=i_load, settled=settled,
                    v_out=np.array(v_term))


def reference_circuit(v_line_rms: float = 120.0, f_line: float = REFERENCE.f_line,
                      **overrides: float) -> CircuitParams:
    """Simulator parameters for the 100 W reference board."""
    values: dict[str, float] = dict(
        l_primary=REFERENCE.l_primary,
        l_leakage=REFERENCE.l_leakage,
        n_sp=REFERENCE.n_sp,
        c_out=REFERENCE.c_out,
        c_out_esr=0.0,
        c_oss=100e-12,
        r_dson_primary=REFERENCE.r_dson_primary,
        r_dson_secondary=REFERENCE.r_dson_secondary,
        v_f_body=0.7,
        v_f_bridge=0.7,
        r_snubber=REFERENCE.r_snubber,
        c_snubber=REFERENCE.c_snubber,
        v_line_rms=v_line_rms,
        f_line=f_line,
        c_in=1.0e-6,
    )
    values.update(overrides)
    return CircuitParams(**values)


def ideal_circuit(v_line_rms: float = 120.0, **overrides: float) -> CircuitParams:
    """Reference magnetics with every parasitic and drop removed."""
    values: dict[str, float] = dict(
        l_leakage=0.0, c_out_esr=0.0, c_oss=0.0, r_dson_primary=0.0,
        r_dson_secondary=0.0, v_f_body=0.0, v_f_bridge=0.0, c_in=0.0,
    )
    values.update(overrides)
    return reference_circuit(v_line_rms, **values)
