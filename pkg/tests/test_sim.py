import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfc_flyback import sim
from pfc_flyback.design import DesignSpec, snubber_resistor
from pfc_flyback.sim import (
    SR_MIN_GATE_ON,
    ControlParams,
    ConverterState,
    CycleGeometry,
    QrDelayMode,
    SyncRectPhase,
    SyncRectState,
    advance_cycle,
    controller_update,
    cycle_losses,
    ideal_circuit,
    reference_circuit,
    run_simulation,
    solve_clamp_voltage,
    sync_rect_transition,
)

from conftest import reference_run

NO_QR = ControlParams(qr_delay_mode=QrDelayMode.NONE, f_sw_max=10e6, burst=False, ki=1e-6)


def state_at(circuit, v_in, t_on, v_out=24.0, v_clamp=320.0, sim_time=1.0):
    phase = math.asin(min((v_in + 2 * circuit.v_f_bridge) / circuit.v_line_peak, 1.0))
    return ConverterState(line_phase=phase, v_out=v_out, t_on=t_on, integrator=0.0,
                          v_clamp=v_clamp, sync_rect=SyncRectState(), sim_time=sim_time,
                          v_bus=0.0)


# --------------------------------------------------------------------------
# single cycle

def test_peak_current_example():
    c = ideal_circuit(120)
    _, rec = advance_cycle(state_at(c, 120.0, 3e-6), c, NO_QR, 4.2)
    assert rec.v_in_inst == pytest.approx(120.0, rel=1e-12)
    assert rec.i_pk_primary == pytest.approx(2.25, rel=1e-12)


def test_zero_crossing_cycle_is_degenerate():
    c = reference_circuit(120, c_in=0.0)
    ctl = ControlParams()
    st0 = dataclasses.replace(state_at(c, 0.0, 3e-6), line_phase=0.0)
    _, rec = advance_cycle(st0, c, ctl, 4.2)
    assert rec.i_pk_primary == 0.0 and rec.t_off == 0.0
    assert rec.e_in == 0.0 and rec.losses.total == 0.0
    assert rec.period == pytest.approx(1.0 / ctl.f_sw_max)


def test_period_is_sum_of_intervals():
    c = reference_circuit(230)
    st0 = state_at(c, 250.0, 2e-6)
    _, rec = advance_cycle(st0, c, ControlParams(), 4.2)
    assert rec.period == rec.t_on + rec.t_off + rec.t_qr
    assert rec.t_qr >= math.pi * math.sqrt(c.l_primary * c.c_oss) * (1 - 1e-12)


def test_volt_second_balance_ideal_random_cycles():
    rng = np.random.default_rng(7)
    c = ideal_circuit(230)
    for _ in range(1000):
        v_in = rng.uniform(1.0, 320.0)
        t_on = rng.uniform(0.2e-6, 12e-6)
        v_out = rng.uniform(5.0, 30.0)
        _, rec = advance_cycle(state_at(c, v_in, t_on, v_out), c, NO_QR, 2.0)
        v_reflected = v_out / c.n_sp
        lhs, rhs = rec.v_in_inst * rec.t_on, v_reflected * rec.t_off
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_flux_balance_with_conduction_drops():
    # the reset voltage includes exactly the average secondary drop
    rng = np.random.default_rng(11)
    c = reference_circuit(230, c_in=0.0)
    for _ in range(300):
        v_in = rng.uniform(20.0, 320.0)
        t_on = rng.uniform(0.5e-6, 10e-6)
        v_out = rng.uniform(18.0, 30.0)
        st0 = state_at(c, v_in, t_on, v_out, v_clamp=2 * v_out / c.n_sp + 50)
        _, rec = advance_cycle(st0, c, NO_QR, 2.0)
        sec = rec.losses.conduction_secondary_channel + rec.losses.conduction_secondary_body_diode
        v_s = v_out + sec / rec.q_out
        flux_on = rec.v_in_inst * rec.t_on * c.l_magnetizing / c.l_primary
        assert flux_on == pytest.approx(v_s / c.n_sp * rec.t_off, rel=1e-12)
        # what leaves the secondary is exactly v_out times the delivered charge
        assert rec.e_out == pytest.approx(v_out * rec.q_out, rel=1e-10)


def test_duty_decreases_with_input_voltage():
    c = ideal_circuit(230)
    ctl = NO_QR
    duties = []
    for v_in in np.linspace(10, 320, 40):
        _, rec = advance_cycle(state_at(c, float(v_in), 3e-6), c, ctl, 2.0)
        duties.append(rec.t_on / rec.period)
    assert np.all(np.diff(duties) < 0)


def test_all_parasitics_zero_means_no_loss():
    c = ideal_circuit(120)
    for v_in in (5.0, 80.0, 160.0):
        _, rec = advance_cycle(state_at(c, v_in, 4e-6), c, ControlParams(), 4.2)
        assert rec.losses.total == 0.0
        assert rec.e_in == rec.e_out


def test_snubber_energy_example():
    c = reference_circuit(120, r_dson_secondary=0.0, v_f_body=0.0, c_in=0.0)
    i_pk, l_lk = 4.54, 3.75e-6
    t_lk = l_lk * i_pk / (320 - 160)
    g = CycleGeometry(v_in=100, i_pk=i_pk, t_on=i_pk * c.l_primary / 100, t_off=1e-5,
                      t_commutation=t_lk, gate_on=False, t_gate_off=1e-5, v_reflected=160,
                      v_clamp=320, v_ds_turn_on=0.0)
    e = cycle_losses(g, c).snubber
    assert e == pytest.approx(0.5 * l_lk * i_pk ** 2 * 320 / (320 - 160), rel=1e-12)
    assert e == pytest.approx(77.3e-6, rel=1e-3)


def test_loss_total_is_sum():
    trace, _ = reference_run(230.0, 4.2)
    for rec in trace.cycles[::50]:
        parts = rec.losses.components()
        assert rec.losses.total == pytest.approx(math.fsum(parts.values()), rel=1e-12, abs=0)


# --------------------------------------------------------------------------
# clamp

def test_clamp_round_trip_through_snubber_resistor():
    rng = np.random.default_rng(3)
    for _ in range(200):
        l_lk = rng.uniform(0.5e-6, 10e-6)
        r = rng.uniform(5e3, 200e3)
        i_pk = rng.uniform(0.5, 6.0)
        f = rng.uniform(40e3, 250e3)
        v_r = rng.uniform(50, 250)
        c = reference_circuit(120, l_leakage=l_lk, r_snubber=r)
        v_sn = solve_clamp_voltage(c, i_pk, f, v_r)
        assert v_sn > v_r
        spec = DesignSpec(85, 264, 24, 4.2, 60, 70e3, 0.5, v_clamp=v_sn)
        assert snubber_resistor(spec, l_lk, i_pk, v_r, f) == pytest.approx(r, rel=1e-9)


def test_clamp_limits():
    c = reference_circuit(120)
    assert solve_clamp_voltage(c.replace(l_leakage=0.0), 4.0, 1e5, 160.0) == 160.0
    vs = [solve_clamp_voltage(c.replace(r_snubber=r), 4.0, 1e5, 160.0) for r in (1e4, 1e6, 1e8)]
    assert vs[0] < vs[1] < vs[2] and vs[2] > 1e4


def test_simulated_clamp_power_balance():
    trace, _ = reference_run(230.0, 4.2)
    c = reference_circuit(230.0)
    v_r = 24.0 / c.n_sp
    active = [r for r in trace.cycles if r.i_pk_primary > 0]
    assert all(r.t_commutation < r.t_off for r in active)
    # the commutation time of each cycle implies its clamp voltage
    v_sn = np.array([v_r + c.l_leakage * r.i_pk_primary / r.t_commutation for r in active])
    assert np.all(v_sn > v_r)
    t_total = math.fsum(r.period for r in trace.cycles)
    captured = math.fsum(r.losses.snubber for r in trace.cycles) / t_total
    dissipated = math.fsum(v * v * r.period for v, r in zip(v_sn, active)) / (c.r_snubber * t_total)
    assert dissipated == pytest.approx(captured, rel=0.05)


# --------------------------------------------------------------------------
# synchronous rectifier

def test_sync_rect_directed_thresholds():
    off, bd, on = SyncRectPhase.OFF, SyncRectPhase.BODY_DIODE, SyncRectPhase.GATE_ON
    assert sync_rect_transition(SyncRectState(bd), -0.5).phase is on
    assert sync_rect_transition(SyncRectState(bd), -0.231).phase is on
    assert sync_rect_transition(SyncRectState(bd), -0.229).phase is bd
    assert sync_rect_transition(SyncRectState(on), -6e-3).phase is off
    assert sync_rect_transition(SyncRectState(on), -8e-3).phase is off
    assert sync_rect_transition(SyncRectState(on), -4e-3).phase is off
    assert sync_rect_transition(SyncRectState(on), -8.1e-3).phase is on
    assert sync_rect_transition(SyncRectState(on), -0.1).phase is on
    assert sync_rect_transition(SyncRectState(off), -0.1).phase is off
    assert sync_rect_transition(SyncRectState(off), -0.7).phase is bd
    assert sync_rect_transition(SyncRectState(off), 30.0).phase is off


def test_sync_rect_rearms_only_after_positive_drain():
    sr = sync_rect_transition(SyncRectState(SyncRectPhase.GATE_ON), -5e-3)
    assert sr.phase is SyncRectPhase.OFF and not sr.armed
    # current still trickling through the body diode: no re-trigger
    assert sync_rect_transition(sr, -0.7).phase is SyncRectPhase.OFF
    sr = sync_rect_transition(sr, 50.0)
    assert sr.armed
    assert sync_rect_transition(sr, -0.7).phase is SyncRectPhase.BODY_DIODE


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-2.0, 100.0), min_size=1, max_size=40))
def test_gate_on_only_reached_from_body_diode(seq):
    sr = SyncRectState()
    for v in seq:
        nxt = sync_rect_transition(sr, v)
        if nxt.phase is SyncRectPhase.GATE_ON and sr.phase is not SyncRectPhase.GATE_ON:
            assert sr.phase is SyncRectPhase.BODY_DIODE
        if v > 0:
            assert nxt.phase is not SyncRectPhase.GATE_ON
        sr = nxt


def test_gate_released_at_turn_off_threshold():
    c = reference_circuit(230, c_in=0.0)
    _, rec = advance_cycle(state_at(c, 300.0, 4e-6), c, ControlParams(), 4.2)
    assert rec.t_gate_off > rec.t_gate_on >= rec.t_commutation
    i_s = rec.i_pk_primary * (1 - rec.t_gate_off / rec.t_off) / c.n_sp
    assert i_s * c.r_dson_secondary == pytest.approx(8e-3, rel=1e-9)


def test_minimum_gate_on_time():
    c = reference_circuit(230, c_in=0.0)
    # short pulse: the 8 mV point arrives before 500 ns, the gate is held anyway
    _, rec = advance_cycle(state_at(c, 300.0, 0.3e-6), c, ControlParams(), 0.5)
    i_s_release = rec.i_pk_primary * (1 - rec.t_gate_off / rec.t_off) / c.n_sp
    assert rec.t_gate_off < rec.t_off
    assert rec.t_gate_off - rec.t_gate_on == pytest.approx(SR_MIN_GATE_ON, rel=1e-9)
    assert i_s_release * c.r_dson_secondary < 8e-3


def test_body_diode_below_turn_on_threshold_never_gates():
    c = reference_circuit(230, v_f_body=0.2)
    trace = run_simulation(c, ControlParams(), 2.0, n_line_cycles=1, settle_cycles=2)
    assert all(rec.t_gate_off == 0.0 for rec in trace.cycles)
    assert all(rec.losses.conduction_secondary_channel == 0.0 for rec in trace.cycles)


def test_no_cross_conduction_over_a_run():
    c = reference_circuit(120)
    ctl = sim.resolve_control(ControlParams(), c, 4.2)
    state = sim.initial_state(c, ctl)
    gated = 0
    while state.sim_time < 4 / c.f_line:
        # at every primary turn-on the synchronous gate is released
        assert state.sync_rect.phase is not SyncRectPhase.GATE_ON
        state, rec = advance_cycle(state, c, ctl, 4.2)
        if rec.t_gate_off > 0:
            gated += 1
            assert 0.0 <= rec.t_commutation <= rec.t_gate_on
            assert rec.t_gate_off <= rec.t_off
            assert rec.t_on + rec.t_gate_off <= rec.period
        t_on, integ = controller_update(state, ctl, rec.period)
        state = dataclasses.replace(state, t_on=t_on, integrator=integ)
    assert gated > 1000


# --------------------------------------------------------------------------
# controller

def test_controller_zero_error_keeps_t_on():
    ctl = ControlParams(ki=1e-6, soft_start_time=0.0)
    s = state_at(ideal_circuit(), 100.0, 3e-6)
    s = dataclasses.replace(s, integrator=3.0, v_out=ctl.v_ref)
    t_on, integ = controller_update(s, ctl, 1e-5)
    assert t_on == pytest.approx(3e-6, rel=1e-15) and integ == 3.0


def test_controller_overvoltage_reduces_t_on_to_clamp():
    ctl = ControlParams(ki=1e-6, soft_start_time=0.0)
    s = dataclasses.replace(state_at(ideal_circuit(), 100.0, 3e-6), integrator=3.0, v_out=30.0)
    seen = []
    for _ in range(200):
        t_on, integ = controller_update(s, ctl, 1e-2)
        seen.append(t_on)
        s = dataclasses.replace(s, t_on=t_on, integrator=integ)
    assert all(b <= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(ctl.t_on_min)


def test_controller_rejects_bad_dt():
    with pytest.raises(ValueError):
        controller_update(state_at(ideal_circuit(), 1.0, 1e-6), ControlParams(ki=1e-6), 0.0)


def test_soft_start_ramp():
    ctl = ControlParams(soft_start_time=0.02)
    assert sim.reference_voltage(ctl, 0.0) == 0.0
    assert sim.reference_voltage(ctl, 0.01) == pytest.approx(12.0)
    assert sim.reference_voltage(ctl, 1.0) == 24.0


# --------------------------------------------------------------------------
# full runs

def test_open_loop_envelope_tracks_sine():
    c = ideal_circuit(120)
    trace = run_simulation(c, ControlParams(), 4.2, n_line_cycles=1, settle_cycles=0,
                           closed_loop=False, v_out_initial=24.0, t_on_initial=4e-6)
    k = np.array([rec.i_pk_primary / abs(math.sin(rec.line_phase)) for rec in trace.cycles
                  if rec.i_pk_primary > 0])
    assert k.size > 1000
    assert np.max(np.abs(k / k[0] - 1)) < 1e-12


def test_trace_structure_and_steady_state():
    trace, m = reference_run(120.0, 4.2)
    assert trace.settled
    assert np.all(np.diff(trace.t) > 0)
    t0, t1 = trace.t_window
    assert (t1 - t0) * trace.f_line == pytest.approx(2.0)
    assert trace.t[0] <= t0 < trace.t_end[0] and trace.t_end[-1] >= t1
    assert m.v_out_mean == pytest.approx(24.0, rel=2e-3)
    for rec in trace.cycles:
        assert rec.period == rec.t_on + rec.t_off + rec.t_qr


def test_t_on_nearly_constant_over_half_cycle():
    trace, _ = reference_run(120.0, 4.2)
    half = 0.5 / trace.f_line
    t_on = np.array([r.t_on for r in trace.cycles])
    idx = np.floor(trace.t / half)
    for k in np.unique(idx)[1:-1]:
        seg = t_on[idx == k]
        seg = seg[seg > 0]
        assert (seg.max() - seg.min()) / seg.mean() < 0.05


def test_determinism():
    c = reference_circuit(230)
    a = run_simulation(c, ControlParams(), 2.0, n_line_cycles=1, settle_cycles=1)
    b = run_simulation(c, ControlParams(), 2.0, n_line_cycles=1, settle_cycles=1)
    assert a.cycles == b.cycles
    assert np.array_equal(a.v_out, b.v_out)


def test_no_load_precharged_rides_minimum_on_time():
    c = ideal_circuit(120)
    trace = run_simulation(c, ControlParams(), 0.0, n_line_cycles=2, settle_cycles=3,
                           v_out_initial=24.0)
    assert trace.settled
    assert np.all(np.abs(trace.v_out - 24.0) < 0.05 * 24.0)
    assert all(r.t_on == 0.0 for r in trace.cycles)  # every pulse skipped


def test_csv_exports(tmp_path):
    trace = run_simulation(reference_circuit(230), ControlParams(), 2.0,
                           n_line_cycles=1, settle_cycles=0)
    trace.write_waveform_csv(tmp_path / "w.csv")
    trace.write_cycle_csv(tmp_path / "c.csv")
    with open(tmp_path / "w.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time_s", "v_in_rect_V", "i_in_avg_A", "v_out_V", "f_sw_Hz"]
    assert len(rows) == len(trace.cycles) + 1
    with open(tmp_path / "c.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:4] == ["t_start_s", "t_on_s", "t_off_s", "i_pk_A"]
    assert "snubber_J" in header and header[-1] == "total_J"


def test_parameter_validation():
    with pytest.raises(ValueError):
        reference_circuit(120, l_leakage=200e-6)
    with pytest.raises(ValueError):
        ControlParams(t_on_min=2e-6, t_on_max=1e-6)
    with pytest.raises(ValueError):
        run_simulation(reference_circuit(120), ControlParams(), -1.0)
    c = reference_circuit(120)
    assert sim.CircuitParams.from_dict(c.to_dict()) == c
    ctl = ControlParams()
    assert ControlParams.from_dict(ctl.to_dict()) == ctl
