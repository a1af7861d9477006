"""Harmonics, power factor, THD and IEC 61000-3-2 Class D checks.

Two sample conventions are supported by :class:`WaveformSeries`:

* ``uniform``: point samples at a fixed interval (scope captures, synthetic
  test signals). Projections are rectangle-rule sums, exact for
  band-limited signals.
* hold: each value is held until the next timestamp (the simulator's
  per-switching-cycle averages). Projections integrate the staircase
  exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

IEC_H_MAX = 39
# Class D relative limits, mA per watt of input power
CLASS_D_MA_PER_W = {3: 3.4, 5: 1.9, 7: 1.0, 9: 0.5, 11: 0.35}
CLASS_D_POWER_RANGE = (75.0, 600.0)

SWEEP_COLUMNS = ["p_in_W", "v_out_V", "i_out_A", "p_out_W", "pf", "i_thd_pct", "eff_pct"]


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class WaveformSeries:
    t: np.ndarray
    values: np.ndarray
    f_fundamental: float
    uniform: bool = True
    t_end: float | None = None

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise AnalysisError("t and values must be 1-D arrays of equal length")
        if t.size < 2:
            raise AnalysisError("insufficient samples")
        if np.any(np.diff(t) <= 0):
            raise AnalysisError("timestamps must be strictly increasing")
        if not self.f_fundamental > 0:
            raise AnalysisError("f_fundamental must be positive")
        t_end = self.t_end
        if t_end is None:
            if not self.uniform:
                raise AnalysisError("held samples need an explicit t_end")
            t_end = float(t[-1] + (t[-1] - t[0]) / (t.size - 1))
        elif t_end <= t[-1]:
            raise AnalysisError("t_end must follow the last sample")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t_end", float(t_end))

    @classmethod
    def sampled(cls, t, values, f_fundamental: float) -> "WaveformSeries":
        return cls(t, values, f_fundamental, uniform=True)

    @classmethod
    def hold(cls, t, values, f_fundamental: float, t_end: float) -> "WaveformSeries":
        return cls(t, values, f_fundamental, uniform=False, t_end=t_end)

    @property
    def span(self) -> float:
        return self.t_end - float(self.t[0])

    @property
    def n_periods(self) -> float:
        return self.span * self.f_fundamental

    def weights(self) -> np.ndarray:
        if self.uniform:
            return np.full(self.t.size, self.span / self.t.size)
        return np.diff(np.append(self.t, self.t_end))

    def window(self, t0: float, t1: float) -> "WaveformSeries":
        """Restrict to [t0, t1). Held samples are clipped at both edges."""
        if self.uniform:
            keep = (self.t >= t0 - 1e-12 * abs(t0)) & (self.t < t1)
            t, v = self.t[keep], self.values[keep]
            return WaveformSeries(t, v, self.f_fundamental, uniform=True)
        ends = np.append(self.t[1:], self.t_end)
        keep = (ends > t0) & (self.t < t1)
        t = np.maximum(self.t[keep], t0)
        return WaveformSeries(t, self.values[keep], self.f_fundamental,
                              uniform=False, t_end=min(t1, self.t_end))

    def mean(self) -> float:
        w = self.weights()
        return float(np.dot(w, self.values) / w.sum())

    def rms(self) -> float:
        w = self.weights()
        return float(math.sqrt(np.dot(w, self.values ** 2) / w.sum()))


@dataclass(frozen=True)
class HarmonicSpectrum:
    f_fundamental: float
    rms_by_harmonic: np.ndarray  # index 0 is h = 1
    dc: float

    @property
    def h_max(self) -> int:
        return int(self.rms_by_harmonic.size)

    def rms(self, h: int) -> float:
        if not 1 <= h <= self.h_max:
            raise IndexError(f"harmonic {h} outside 1..{self.h_max}")
        return float(self.rms_by_harmonic[h - 1])

    def to_dict(self) -> dict[str, Any]:
        return {
            "f_fundamental": self.f_fundamental,
            "dc": self.dc,
            "rms_by_harmonic": [float(x) for x in self.rms_by_harmonic],
        }


def _integer_periods(w: WaveformSeries) -> int:
    m = round(w.n_periods)
    if m < 1 or abs(w.n_periods - m) > 1e-6:
        raise AnalysisError(f"window not integer periods ({w.n_periods:.6f} periods)")
    return m


def fourier_harmonics(w: WaveformSeries, h_max: int = IEC_H_MAX) -> HarmonicSpectrum:
    """RMS of harmonics 1..h_max by projection onto sin/cos over the window."""
    if h_max < 1:
        raise AnalysisError("h_max must be at least 1")
    m = _integer_periods(w)
    if w.t.size / m < 2 * h_max + 1:
        raise AnalysisError(
            f"insufficient samples: {w.t.size / m:.1f} per period, need {2 * h_max + 1}")
    omega = 2.0 * math.pi * w.f_fundamental
    h = np.arange(1, h_max + 1)[:, None]
    t0 = float(w.t[0])
    if w.uniform:
        x = w.values
        ph = h * omega * (w.t - t0)[None, :]
        a = 2.0 * (np.cos(ph) @ x) / x.size
        b = 2.0 * (np.sin(ph) @ x) / x.size
        dc = float(np.mean(x))
    else:
        ta = w.t - t0
        tb = np.append(w.t[1:], w.t_end) - t0
        half = 0.5 * h * omega * (tb - ta)[None, :]
        mid = 0.5 * h * omega * (ta + tb)[None, :]
        # sin(b) - sin(a) and cos(a) - cos(b) without cancellation
        s = 2.0 * np.sin(half) / (h * omega)
        a = 2.0 * ((np.cos(mid) * s) @ w.values) / w.span
        b = 2.0 * ((np.sin(mid) * s) @ w.values) / w.span
        dc = w.mean()
    rms = np.hypot(a, b) / math.sqrt(2.0)
    return HarmonicSpectrum(w.f_fundamental, rms, dc)


def power_factor(v: WaveformSeries, i: WaveformSeries) -> tuple[float, float, float]:
    """Return (pf, p, s) over the common window."""
    if v.uniform != i.uniform or v.t.shape != i.t.shape or not np.allclose(v.t, i.t, rtol=0, atol=0):
        raise AnalysisError("voltage and current must share timestamps")
    _integer_periods(i)
    w = i.weights()
    total = w.sum()
    p = float(np.dot(w, v.values * i.values) / total)
    v_rms = math.sqrt(float(np.dot(w, v.values ** 2)) / total)
    i_rms = math.sqrt(float(np.dot(w, i.values ** 2)) / total)
    if v_rms == 0.0 or i_rms == 0.0:
        raise AnalysisError("zero RMS voltage or current")
    s = v_rms * i_rms
    return p / s, p, s


def thd(spec: HarmonicSpectrum) -> float:
    fund = spec.rms_by_harmonic[0]
    if not fund > 0:
        raise AnalysisError("zero fundamental")
    return float(math.sqrt(float(np.sum(spec.rms_by_harmonic[1:] ** 2))) / fund)


def class_d_ma_per_w(h: int) -> float:
    if h in CLASS_D_MA_PER_W:
        return CLASS_D_MA_PER_W[h]
    return 3.85 / h


def iec_class_d_limits(p_in: float) -> list[tuple[int, float]]:
    """Odd-harmonic Class D limits in amperes RMS for input power ``p_in``."""
    if not p_in > 0:
        raise AnalysisError("p_in must be positive")
    return [(h, class_d_ma_per_w(h) * p_in / 1000.0) for h in range(3, IEC_H_MAX + 1, 2)]


@dataclass(frozen=True)
class IecRow:
    h: int
    limit_mA_per_W: float
    limit_A: float
    measured_A: float
    passed: bool

    @property
    def margin(self) -> float:
        return self.limit_A - self.measured_A


@dataclass(frozen=True)
class IecReport:
    p_in: float
    rows: tuple[IecRow, ...]
    overall_pass: bool
    # True when p_in is outside the range the Class D limits apply to
    advisory: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_in": self.p_in,
            "overall_pass": self.overall_pass,
            "advisory": self.advisory,
            "rows": [
                {"h": r.h, "limit_mA_per_W": r.limit_mA_per_W, "limit_A": r.limit_A,
                 "measured_A": r.measured_A, "pass": r.passed}
                for r in self.rows
            ],
        }

    def format_table(self) -> str:
        lines = [
            f"IEC 61000-3-2 Class D  P_in = {self.p_in:.2f} W"
            + ("  (outside 75-600 W, advisory)" if self.advisory else ""),
            f"{'h':>3} {'limit mA/W':>11} {'limit mA':>10} {'measured mA':>12} {'% of limit':>11}  result",
        ]
        for r in self.rows:
            pct = 100.0 * r.measured_A / r.limit_A
            lines.append(f"{r.h:>3} {r.limit_mA_per_W:>11.4f} {1e3 * r.limit_A:>10.2f} "
                         f"{1e3 * r.measured_A:>12.2f} {pct:>11.1f}  {'pass' if r.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.overall_pass else 'FAIL'}")
        return "\n".join(lines) + "\n"


def iec_check(spec: HarmonicSpectrum, p_in: float) -> IecReport:
    if spec.h_max < IEC_H_MAX:
        raise AnalysisError(f"spectrum must extend to h = {IEC_H_MAX}")
    rows = []
    for h, limit in iec_class_d_limits(p_in):
        measured = spec.rms(h)
        rows.append(IecRow(h, class_d_ma_per_w(h), limit, measured, measured <= limit))
    lo, hi = CLASS_D_POWER_RANGE
    return IecReport(p_in=p_in, rows=tuple(rows), overall_pass=all(r.passed for r in rows),
                     advisory=not lo <= p_in <= hi)


@dataclass(frozen=True)
class LineMetrics:
    p_in: float
    s_in: float
    pf: float | None
    i_thd: float | None
    p_out: float
    efficiency: float
    v_ripple_pp: float
    f_sw_min: float
    f_sw_max: float
    v_out_mean: float
    v_line_rms: float = 0.0
    i_load: float = 0.0
    settled: bool = True
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["warnings"] = list(self.warnings)
        return d

    def sweep_row(self) -> list[float | None]:
        """Row in the column order of ``SWEEP_COLUMNS`` (THD and efficiency in %)."""
        return [
            self.p_in, self.v_out_mean, self.i_load, self.p_out, self.pf,
            None if self.i_thd is None else 100.0 * self.i_thd,
            100.0 * self.efficiency,
        ]


def aggregate_metrics(trace, v_line_rms: float | None = None,
                      i_load: float | None = None) -> LineMetrics:
    """Table-style metrics over the kept window of a simulation trace.

    The line current is the bridge current with the line-voltage sign
    restored, so PF and THD refer to the AC side.
    """
    v_line_rms = trace.v_line_rms if v_line_rms is None else v_line_rms
    i_load = trace.i_load if i_load is None else i_load
    t0, t1 = trace.t_window
    f = trace.f_line
    if (t1 - t0) * f < 2.0 - 1e-9:
        raise AnalysisError("trace must span at least two line cycles")
    t_end = float(trace.t_end[-1])
    i_w = WaveformSeries.hold(trace.t, trace.i_line, f, t_end).window(t0, t1)
    v_w = WaveformSeries.hold(trace.t, trace.v_line, f, t_end).window(t0, t1)
    vo_w = WaveformSeries.hold(trace.t, trace.v_out, f, t_end).window(t0, t1)

    warnings: list[str] = []
    if not trace.settled:
        warnings.append("output did not settle")
    try:
        pf, p_in, s_in = power_factor(v_w, i_w)
        i_thd: float | None = thd(fourier_harmonics(i_w, IEC_H_MAX))
    except AnalysisError as exc:
        warnings.append(f"input current unusable for PF/THD: {exc}")
        pf, i_thd = None, None
        p_in = float(np.dot(v_w.weights(), v_w.values * i_w.values) / v_w.weights().sum())
        s_in = v_w.rms() * i_w.rms()

    v_out_mean = vo_w.mean()
    p_out = i_load * v_out_mean
    efficiency = p_out / p_in if p_in > 0 else 0.0
    in_window = (trace.t + trace.period > t0) & (trace.t < t1)
    periods = trace.period[in_window]
    return LineMetrics(
        p_in=p_in,
        s_in=s_in,
        pf=pf,
        i_thd=i_thd,
        p_out=p_out,
        efficiency=efficiency,
        v_ripple_pp=float(vo_w.values.max() - vo_w.values.min()),
        f_sw_min=float(1.0 / periods.max()),
        f_sw_max=float(1.0 / periods.min()),
        v_out_mean=v_out_mean,
        v_line_rms=v_line_rms,
        i_load=i_load,
        settled=trace.settled,
        warnings=tuple(warnings),
    )


def line_spectrum(trace, h_max: int = IEC_H_MAX) -> HarmonicSpectrum:
    t0, t1 = trace.t_window
    w = WaveformSeries.hold(trace.t, trace.i_line, trace.f_line,
                            float(trace.t_end[-1])).window(t0, t1)
    return fourier_harmonics(w, h_max)


def read_waveform_csv(path: str | Path, f_fundamental: float) -> WaveformSeries:
    """Load a two-column ``time_s,value`` CSV.

    Evenly spaced timestamps are treated as point samples, anything else
    as held samples.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [c.strip() for c in header[:2]] != ["time_s", "value"]:
                raise AnalysisError("expected header 'time_s,value'")
            rows = [r for r in reader if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise AnalysisError(f"cannot read {path}: {exc}") from exc
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows])
    except (ValueError, IndexError) as exc:
        raise AnalysisError(f"malformed row in {path}: {exc}") from exc
    if data.shape[0] < 2:
        raise AnalysisError("insufficient samples")
    t, v = data[:, 0], data[:, 1]
    dt = np.diff(t)
    if np.all(dt > 0) and np.ptp(dt) <= 1e-6 * np.mean(dt):
        return WaveformSeries.sampled(t, v, f_fundamental)
    return WaveformSeries.hold(t, v, f_fundamental, t_end=float(t[-1] + dt[-1]))


def trim_to_periods(w: WaveformSeries) -> WaveformSeries:
    """Drop trailing data so the window holds a whole number of periods."""
    m = math.floor(w.n_periods + 1e-9)
    if m < 1:
        raise AnalysisError("window shorter than one fundamental period")
    t0 = float(w.t[0])
    t1 = t0 + m / w.f_fundamental
    if w.uniform:
        dt = w.span / w.t.size
        n = round((t1 - t0) / dt)
        if abs(n * dt - (t1 - t0)) > 1e-6 / w.f_fundamental:
            raise AnalysisError("sample rate is not an integer multiple of the fundamental")
        return WaveformSeries.sampled(w.t[:n], w.values[:n], w.f_fundamental)
    return w.window(t0, t1)


def harmonics_table(spec: HarmonicSpectrum, limits: Sequence[tuple[int, float]] | None = None) -> str:
    lines = [f"{'h':>3} {'rms':>12}"]
    for h in range(1, spec.h_max + 1):
        lines.append(f"{h:>3} {spec.rms(h):>12.6g}")
    return "\n".join(lines) + "\n"
