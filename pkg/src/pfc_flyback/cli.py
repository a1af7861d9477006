"""Command-line front end: ``pfc-flyback {design,simulate,sweep,iec-check,stability}``.

Exit codes: 0 success/pass, 1 domain failure (non-compliance, no settle, no
crossover, failed sweep point), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import analysis, design, sim, smallsignal
from ._io import atomic_writer, write_json, write_text

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    design: dict[str, Any] | None = None
    p_out_max: float | None = None
    circuit: dict[str, Any] = field(default_factory=dict)
    control: dict[str, Any] = field(default_factory=dict)
    simulation: dict[str, Any] = field(default_factory=dict)
    sweep: list[tuple[float, float]] = field(default_factory=list)
    stability: dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path(".")
    formats: frozenset[str] = frozenset({"csv", "json"})

    def design_spec(self) -> design.DesignSpec:
        if self.design is None:
            raise ConfigError("config has no 'design' section")
        try:
            return design.DesignSpec.from_dict(self.design)
        except design.DesignError as exc:
            raise ConfigError(f"design.{exc.field}: {exc}") from exc

    def circuit_params(self, v_line_rms: float) -> sim.CircuitParams:
        overrides = dict(self.circuit)
        f_line = overrides.pop("f_line", design.REFERENCE.f_line)
        overrides.pop("v_line_rms", None)
        known = {f.name for f in sim.CircuitParams.__dataclass_fields__.values()}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"circuit.{key}: unknown field")
            _number(f"circuit.{key}", value)
        try:
            return sim.reference_circuit(v_line_rms, float(f_line), **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"circuit: {exc}") from exc

    def control_params(self) -> sim.ControlParams:
        known = set(sim.ControlParams.__dataclass_fields__)
        for key in self.control:
            if key not in known:
                raise ConfigError(f"control.{key}: unknown field")
        try:
            return sim.ControlParams.from_dict(self.control)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"control: {exc}") from exc

    def sim_options(self) -> dict[str, int]:
        opts = {"n_line_cycles": 2, "settle_cycles": 30}
        for key, value in self.simulation.items():
            if key not in opts:
                raise ConfigError(f"simulation.{key}: unknown field")
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"simulation.{key}: must be a non-negative integer")
            opts[key] = value
        if opts["n_line_cycles"] < 2:
            raise ConfigError("simulation.n_line_cycles: metrics need at least 2 line cycles")
        return opts


def _number(name: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{name}: must be a finite number")
    return float(value)


_TOP_KEYS = {"design", "p_out_max", "circuit", "control", "simulation", "sweep", "stability"}


def load_config(path: str | Path | None, output_dir: str | Path, fmt: str) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level field")
    for key in ("circuit", "control", "simulation", "stability"):
        if not isinstance(data.get(key, {}), dict):
            raise ConfigError(f"{key}: must be an object")
    if "design" in data and not isinstance(data["design"], dict):
        raise ConfigError("design: must be an object")

    sweep = []
    for k, point in enumerate(data.get("sweep", [])):
        if isinstance(point, dict):
            v, i = point.get("v_line_rms"), point.get("i_load")
        elif isinstance(point, (list, tuple)) and len(point) == 2:
            v, i = point
        else:
            raise ConfigError(f"sweep[{k}]: expected {{v_line_rms, i_load}} or [v, i]")
        sweep.append((_number(f"sweep[{k}].v_line_rms", v), _number(f"sweep[{k}].i_load", i)))

    p_out_max = data.get("p_out_max")
    formats = {"csv": {"csv"}, "json": {"json"}, "both": {"csv", "json"}}[fmt]
    out = Path(output_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} is not a directory")
    return RunConfig(
        design=data.get("design"),
        p_out_max=None if p_out_max is None else _number("p_out_max", p_out_max),
        circuit=data.get("circuit", {}),
        control=data.get("control", {}),
        simulation=data.get("simulation", {}),
        sweep=sweep,
        stability=data.get("stability", {}),
        output_dir=out,
        formats=frozenset(formats),
    )


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if x is None else x for x in row])


def _fmt(x: Any) -> Any:
    return repr(float(x)) if isinstance(x, float) else x


# --------------------------------------------------------------------------
# design

def design_table(spec: design.DesignSpec, out: design.DesignOutput) -> str:
    rows = [
        ("Input voltage range", f"{spec.vac_min:g}-{spec.vac_max:g} Vac"),
        ("Output", f"{spec.v_out:g} V / {spec.i_out:g} A"),
        ("Minimum switching frequency", f"{spec.f_sw_min / 1e3:g} kHz"),
        ("Maximum duty", f"{spec.d_max:g}"),
        ("Primary inductance", f"{out.l_primary * 1e6:.2f} uH"),
        ("Turns ratio Ns/Np", f"{out.n_sp:.4f}"),
        ("Turns ratio Naux/Np", f"{out.n_ap:.4f}"),
        ("Turns ratio Naux/Ns", f"{out.n_as:.4f}"),
        ("Output capacitance", f"{out.c_out * 1e6:.1f} uF"),
        ("Peak primary current", f"{out.i_peak_primary:.3f} A"),
        ("Snubber resistor", f"{out.r_snubber / 1e3:.2f} kOhm"),
        ("Snubber capacitor", f"{out.c_snubber * 1e9:.3f} nF"),
        ("Maximum input power", f"{out.p_in_max:.2f} W"),
    ]
    width = max(len(r[0]) for r in rows)
    return "".join(f"{name:<{width}}  {value}\n" for name, value in rows)


def cmd_design(cfg: RunConfig) -> int:
    spec = cfg.design_spec()
    p_out = cfg.p_out_max if cfg.p_out_max is not None else spec.v_out * spec.i_out
    try:
        out = design.full_design(spec, p_out)
    except design.DesignError as exc:
        raise ConfigError(f"design.{exc.field or exc.equation}: {exc}") from exc
    table = design_table(spec, out)
    sys.stdout.write(table)
    if "json" in cfg.formats:
        write_json(cfg.output_dir / "design.json", {"inputs": spec.to_dict(), "p_out_max": p_out,
                                                    "outputs": out.to_dict()})
    if "csv" in cfg.formats:
        _write_rows(cfg.output_dir / "design.csv", ["quantity", "value"],
                    ([k, _fmt(v)] for k, v in out.to_dict().items()))
    write_text(cfg.output_dir / "design.txt", table)
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate / sweep

def simulate_point(cfg: RunConfig, v_line: float, i_load: float):
    circuit = cfg.circuit_params(v_line)
    control = cfg.control_params()
    trace = sim.run_simulation(circuit, control, i_load, **cfg.sim_options())
    return trace, analysis.aggregate_metrics(trace, v_line, i_load)


def cmd_simulate(cfg: RunConfig, v_line: float, i_load: float) -> int:
    if not v_line > 0 or i_load < 0:
        raise ConfigError("need --v-line > 0 and --i-load >= 0")
    trace, metrics = simulate_point(cfg, v_line, i_load)
    if "csv" in cfg.formats:
        trace.write_waveform_csv(cfg.output_dir / "waveform.csv")
        trace.write_cycle_csv(cfg.output_dir / "cycles.csv")
    write_json(cfg.output_dir / "metrics.json", metrics.to_dict())
    sys.stdout.write(_metrics_line(metrics))
    if not trace.settled:
        print("did not settle", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _metrics_line(m: analysis.LineMetrics) -> str:
    pf = "n/a" if m.pf is None else f"{m.pf:.4f}"
    thd = "n/a" if m.i_thd is None else f"{100 * m.i_thd:.2f} %"
    return (f"P_in {m.p_in:.2f} W  V_out {m.v_out_mean:.3f} V  P_out {m.p_out:.2f} W  "
            f"PF {pf}  iTHD {thd}  eff {100 * m.efficiency:.2f} %\n")


def _sweep_worker(args: tuple[RunConfig, float, float]) -> dict[str, Any]:
    cfg, v_line, i_load = args
    try:
        _, m = simulate_point(cfg, v_line, i_load)
        return {"metrics": m.to_dict(), "row": m.sweep_row(), "settled": m.settled, "error": ""}
    except Exception as exc:  # recorded per point, the sweep continues
        return {"metrics": None, "row": [None] * 7, "settled": False,
                "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(cfg: RunConfig, jobs: int) -> int:
    if not cfg.sweep:
        raise ConfigError("sweep: list is empty")
    cfg.control_params()
    cfg.sim_options()
    tasks = [(cfg, v, i) for v, i in cfg.sweep]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, tasks))
    else:
        results = [_sweep_worker(t) for t in tasks]

    header = analysis.SWEEP_COLUMNS + ["v_line_V", "settled", "error"]
    rows = [[_fmt(x) if x is not None else None for x in r["row"]]
            + [_fmt(v), str(r["settled"]).lower(), r["error"]]
            for r, (v, _) in zip(results, cfg.sweep)]
    if "csv" in cfg.formats:
        _write_rows(cfg.output_dir / "sweep.csv", header, rows)
    if "json" in cfg.formats:
        write_json(cfg.output_dir / "sweep.json", [
            {"v_line_rms": v, "i_load": i, "metrics": r["metrics"], "error": r["error"] or None}
            for r, (v, i) in zip(results, cfg.sweep)])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + [
        ["" if x is None else x for x in row] for row in rows])
    sys.stdout.write(buf.getvalue())
    return EXIT_FAIL if any(r["error"] for r in results) else EXIT_OK


# --------------------------------------------------------------------------
# iec-check

def cmd_iec_check(cfg: RunConfig, waveform: str | None, p_in: float | None,
                  f_line: float, v_line: float, i_load: float) -> int:
    if waveform is not None:
        if p_in is None:
            raise ConfigError("--p-in is required with --waveform")
        try:
            w = analysis.trim_to_periods(analysis.read_waveform_csv(waveform, f_line))
            spectrum = analysis.fourier_harmonics(w, analysis.IEC_H_MAX)
        except analysis.AnalysisError as exc:
            raise ConfigError(f"waveform: {exc}") from exc
    else:
        trace, metrics = simulate_point(cfg, v_line, i_load)
        spectrum = analysis.line_spectrum(trace)
        if p_in is None:
            p_in = metrics.p_in
    if not p_in > 0:
        raise ConfigError("p_in must be positive")
    report = analysis.iec_check(spectrum, p_in)
    table = report.format_table()
    sys.stdout.write(table)
    if "json" in cfg.formats:
        write_json(cfg.output_dir / "iec_report.json", report.to_dict())
    write_text(cfg.output_dir / "iec_report.txt", table)
    return EXIT_OK if report.overall_pass else EXIT_FAIL


# --------------------------------------------------------------------------
# stability

_STABILITY_KEYS = {"c_out", "v_out", "i_load", "modulator_gain", "integrator_gain",
                   "crossover_hz", "zero_hz", "pole_hz", "f_min", "f_max", "n_points"}


def stability_models(cfg: RunConfig) -> tuple[smallsignal.PlantModel, smallsignal.CompensatorModel,
                                               float, float, int]:
    st = cfg.stability
    unknown = sorted(set(st) - _STABILITY_KEYS)
    if unknown:
        raise ConfigError(f"stability.{unknown[0]}: unknown field")
    num = {k: _number(f"stability.{k}", v) for k, v in st.items()}
    if "integrator_gain" in num and "crossover_hz" in num:
        raise ConfigError("stability: give integrator_gain or crossover_hz, not both")
    try:
        plant = smallsignal.plant_from_operating_point(
            num.get("c_out", design.REFERENCE.c_out), num.get("v_out", design.REFERENCE.v_out),
            num.get("i_load", design.REFERENCE.i_out), num.get("modulator_gain", 1.0))
        zero, pole = num.get("zero_hz", 0.0), num.get("pole_hz", 0.0)
        if "integrator_gain" in num:
            ki = num["integrator_gain"]
        else:
            ki = smallsignal.integrator_gain_for_crossover(plant, num.get("crossover_hz", 10.0),
                                                           zero, pole)
        comp = smallsignal.CompensatorModel(ki, zero, pole)
    except smallsignal.StabilityError as exc:
        raise ConfigError(f"stability: {exc}") from exc
    f_min = num.get("f_min", smallsignal.DEFAULT_F_MIN)
    f_max = num.get("f_max", smallsignal.DEFAULT_F_MAX)
    n = int(num.get("n_points", 200))
    if not 0 < f_min < f_max or n < 2:
        raise ConfigError("stability: need 0 < f_min < f_max and n_points >= 2")
    return plant, comp, f_min, f_max, n


def cmd_stability(cfg: RunConfig) -> int:
    plant, comp, f_min, f_max, n = stability_models(cfg)
    if "csv" in cfg.formats:
        f, gain, phase = smallsignal.bode(plant, comp, f_min, f_max, n)
        _write_rows(cfg.output_dir / "bode.csv", ["f_hz", "gain_db", "phase_deg"],
                    ([_fmt(a), _fmt(b), _fmt(c)] for a, b, c in zip(f, gain, phase)))
    try:
        result = smallsignal.phase_margin(plant, comp, f_min, f_max)
    except smallsignal.NoCrossoverError as exc:
        print(f"no crossover: {exc}", file=sys.stderr)
        return EXIT_FAIL
    payload = {"plant": {"dc_gain": plant.dc_gain, "pole_hz": plant.pole_hz},
               "compensator": {"integrator_gain": comp.integrator_gain,
                               "zero_hz": comp.zero_hz, "pole_hz": comp.pole_hz},
               **result.to_dict()}
    if "json" in cfg.formats:
        write_json(cfg.output_dir / "stability.json", payload)
    print(f"crossover {result.crossover_hz:.4f} Hz  phase margin {result.phase_margin_deg:.2f} deg"
          + ("" if result.stable else "  (unstable)"))
    return EXIT_OK if result.stable else EXIT_FAIL


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="parallel sweep workers")
    common.add_argument("--format", choices=["csv", "json", "both"], default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="pfc-flyback", parents=[common],
                                     description="CrCM PFC flyback design and simulation tools")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("design", parents=[common], help="size the power stage")
    p = sub.add_parser("simulate", parents=[common], help="simulate one operating point")
    p.add_argument("--v-line", type=float, default=120.0)
    p.add_argument("--i-load", type=float, default=design.REFERENCE.i_out)
    sub.add_parser("sweep", parents=[common], help="simulate every point of config.sweep")
    p = sub.add_parser("iec-check", parents=[common], help="Class D harmonic check")
    p.add_argument("--waveform", help="CSV with columns time_s,value (line current)")
    p.add_argument("--p-in", type=float, help="input power in W (defaults to simulated)")
    p.add_argument("--f-line", type=float, default=design.REFERENCE.f_line)
    p.add_argument("--v-line", type=float, default=120.0)
    p.add_argument("--i-load", type=float, default=design.REFERENCE.i_out)
    sub.add_parser("stability", parents=[common], help="loop gain and phase margin")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = getattr(args, "config", None)
    out = getattr(args, "out", ".")
    jobs = getattr(args, "jobs", 1)
    fmt = getattr(args, "format", "both")
    try:
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(config, out, fmt)
        if args.command == "design":
            return cmd_design(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.v_line, args.i_load)
        if args.command == "sweep":
            return cmd_sweep(cfg, jobs)
        if args.command == "iec-check":
            return cmd_iec_check(cfg, args.waveform, args.p_in, args.f_line, args.v_line, args.i_load)
        return cmd_stability(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
