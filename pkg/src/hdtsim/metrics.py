"""Post-processing of recorded runs into scalar service metrics and reports.

Closed-loop quantities carry a step-rate ripple (the shunt current loop runs
close to the sampling limit) and a fundamental-frequency ripple, so the
scenario criteria work on trailing one-cycle means of the records.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CYCLE = 0.02


class MetricsError(ValueError):
    pass


# ------------------------------------------------------------------- scalars

def power_factor(P: float, Q: float) -> float | None:
    """Signed PF ``P / |S|``; ``None`` when both powers are zero."""
    s = math.hypot(P, Q)
    if s == 0.0:
        return None
    return P / s


def power_factor_series(P, Q) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    s = np.hypot(P, Q)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0.0, P / np.where(s > 0.0, s, 1.0), np.nan)


def settling_time(t, values, ref: float, band_frac: float, from_t: float = 0.0) -> float | None:
    """Earliest ``t' >= from_t`` after which every sample stays inside the band.

    The band is ``|value - ref| <= band_frac * |ref|``; ``None`` if the last
    sample is outside it.
    """
    if not band_frac > 0.0:
        raise MetricsError("band_frac must be positive")
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size == 0:
        raise MetricsError("series is empty")
    mask = t >= from_t
    if not mask.any():
        return None
    tt, vv = t[mask], v[mask]
    inside = np.abs(vv - ref) <= band_frac * abs(ref)
    if not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    if outside.size == 0:
        return float(from_t)
    return float(tt[outside[-1] + 1])


@dataclass
class RmsResult:
    values: np.ndarray
    short: bool = False  # window longer than the available data


def per_phase_rms(t, x, window: float = CYCLE) -> RmsResult:
    """Per-phase RMS over the trailing ``window`` seconds of an (n, 3) series.

    Samples are treated as uniformly spaced; the window covers the last
    ``round(window / spacing)`` samples.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float).reshape(len(t), -1)
    if len(t) == 0:
        raise MetricsError("series is empty")
    if len(t) == 1:
        return RmsResult(np.sqrt(np.mean(x ** 2, axis=0)), short=True)
    spacing = (t[-1] - t[0]) / (len(t) - 1)
    n = max(1, int(round(window / spacing)))
    short = n > len(t)
    tail = x[-n:]
    return RmsResult(np.sqrt(np.mean(tail ** 2, axis=0)), short=short)


def imbalance_index(rms) -> float:
    """Largest relative deviation of a phase RMS from the mean of the three."""
    r = np.asarray(rms, dtype=float)
    mean = float(np.mean(r))
    if not mean > 0.0:
        raise MetricsError("imbalance index needs a positive mean RMS")
    return float(np.max(np.abs(r - mean)) / mean)


def trailing_mean(x, n: int) -> np.ndarray:
    """Mean over the last ``n`` samples at every index (NaN during warm-up)."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if n < 1 or len(x) < n:
        return out
    c = np.cumsum(np.insert(x, 0, 0.0, axis=0), axis=0)
    out[n - 1:] = (c[n:] - c[:-n]) / n
    return out


def samples_per_cycle(result) -> int:
    spec = result.spec
    return max(1, int(round(1.0 / (spec.droop.f0 * spec.dt * spec.record_decimation))))


def grid_powers(result) -> tuple[np.ndarray, np.ndarray]:
    """Grid-interface P and Q from the recorded load voltage and grid current."""
    vd, vq = result["v_d"], result["v_q"]
    idd, iq = result["ibeta_d"], result["ibeta_q"]
    return 1.5 * (vd * idd + vq * iq), 1.5 * (vq * idd - vd * iq)


def cycle_power_factor(result) -> np.ndarray:
    """|PF| from one-cycle means of grid P and Q."""
    n = samples_per_cycle(result)
    P, Q = grid_powers(result)
    return np.abs(power_factor_series(trailing_mean(P, n), trailing_mean(Q, n)))


# -------------------------------------------------------------------- report

@dataclass
class ReportEntry:
    name: str
    measured: float | None
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    entries: list = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return bool(self.entries) and all(e.passed for e in self.entries)

    def add(self, name, measured, threshold, *, upper=True, detail=""):
        """Record ``measured <= threshold`` (or ``>=`` when ``upper`` is false)."""
        if measured is None or (isinstance(measured, float) and math.isnan(measured)):
            self.entries.append(ReportEntry(name, None, threshold, False, detail or "not evaluable"))
            return
        measured = float(measured)
        ok = measured <= threshold if upper else measured >= threshold
        self.entries.append(ReportEntry(name, measured, threshold, bool(ok), detail))

    def to_dict(self) -> dict:
        return {"name": self.name, "entries": [asdict(e) for e in self.entries],
                "overall": self.overall}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc) -> "ScenarioReport":
        rep = cls(doc["name"], [ReportEntry(**e) for e in doc["entries"]])
        if rep.overall != doc["overall"]:
            raise MetricsError("report overall flag disagrees with its entries")
        return rep

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "PASS" if e.passed else "FAIL"
            val = "n/a" if e.measured is None else f"{e.measured:.6g}"
            out.append(f"[{status}] {self.name}/{e.name}: measured={val} threshold={e.threshold:.6g}"
                       + (f" ({e.detail})" if e.detail else ""))
        return out


def _window(t, lo, hi=math.inf):
    return (t >= lo - 1e-12) & (t <= hi + 1e-12)


def _max_or_none(x):
    x = x[np.isfinite(x)]
    return float(np.max(x)) if x.size else None


def _min_or_none(x):
    x = x[np.isfinite(x)]
    return float(np.min(x)) if x.size else None


def _at(t, x, when):
    i = int(np.searchsorted(t, when - 1e-12))
    if i >= len(t):
        return None
    return float(x[i])


def voltage_regulation_report(result, rep: ScenarioReport, settle_limit=0.015, band=0.01):
    spec = result.spec
    t = result["t"]
    v0 = spec.droop.v0
    steps = [ev for ev in spec.events if ev.kind == "scale_vin"]
    if not steps:
        raise MetricsError("voltage_regulation needs a scale_vin event")
    t_step = steps[0].time
    n = samples_per_cycle(result)
    vd_mean = trailing_mean(result["v_d"], n)
    i_pre = int(np.searchsorted(t, t_step - 1e-12)) - 1
    pre_err = abs(vd_mean[i_pre] - v0) / v0 if i_pre >= n - 1 else None
    rep.add("pre_step_vd_error", pre_err, band, detail="one-cycle mean of v_d before the step")
    ts = settling_time(t, result["v_d"], v0, band, from_t=t_step)
    rep.add("vd_settling_time", None if ts is None else ts - t_step, settle_limit,
            detail=f"step x{steps[0].factor:g} at t={t_step:g} s, 1% band")


def pf_report(result, rep: ScenarioReport, t_act, *, window=0.02, pf_min=0.99, before=(0.94, 0.97)):
    t = result["t"]
    pf = cycle_power_factor(result)
    i_pre = int(np.searchsorted(t, t_act - 1e-12)) - 1
    pf_pre = float(pf[i_pre]) if i_pre >= 0 and np.isfinite(pf[i_pre]) else None
    if before is not None:
        rep.add("pf_before_min", pf_pre, before[0], upper=False, detail="cycle-mean |PF| before activation")
        rep.add("pf_before_max", pf_pre, before[1], detail="cycle-mean |PF| before activation")
    rep.add("pf_after_min", _min_or_none(pf[_window(t, t_act + window)]), pf_min, upper=False,
            detail=f"min cycle-mean |PF| from {window:g} s after activation to the end")


def balancing_report(result, rep: ScenarioReport, t_act, *, ratio=0.05, imbalance=0.05, vdc_band=0.06):
    spec = result.spec
    t = result["t"]
    n = samples_per_cycle(result)
    ibd = trailing_mean(result["ibeta_d"], n)
    ibq = trailing_mean(result["ibeta_q"], n)
    ib0 = trailing_mean(result["ibeta_0"], n)
    if len(t) < n or not ibd[-1] > 0.0:
        rep.add("ibeta_q_ratio", None, ratio)
        rep.add("ibeta_0_ratio", None, ratio)
    else:
        rep.add("ibeta_q_ratio", abs(ibq[-1]) / ibd[-1], ratio, detail="final cycle |i_bq|/i_bd")
        rep.add("ibeta_0_ratio", abs(ib0[-1]) / ibd[-1], ratio, detail="final cycle |i_b0|/i_bd")
    grid = -spec.plant.beta * result.abc("i1")
    rms = per_phase_rms(t, grid, CYCLE)
    rep.add("grid_current_imbalance", imbalance_index(rms.values), imbalance,
            detail="final-cycle per-phase RMS of the grid current")
    vdc = trailing_mean(result["v_dc"], n)
    dev = np.abs(vdc - spec.refs.vC_star) / spec.refs.vC_star
    rep.add("vdc_deviation", _max_or_none(dev[_window(t, t_act)]), vdc_band,
            detail="max cycle-mean |vC - vC*|/vC* after activation")


def frequency_report(result, rep: ScenarioReport, *, t_from=1.0, tol=0.02, f_check=49.9):
    from .control import droop_power_ref

    spec = result.spec
    t = result["t"]
    n = samples_per_cycle(result)
    P = trailing_mean(result["p"], n)
    Ps = trailing_mean(result["p_star"], n)
    err = np.abs(P - Ps) / spec.droop.P0
    rep.add("p_tracking_error", _max_or_none(err[_window(t, t_from)]), tol,
            detail=f"max cycle-mean |P - P*|/P0 over t >= {t_from:g} s")
    if f_check is None:
        return
    expected = 26939.5
    ps = droop_power_ref(f_check, spec.droop)
    rep.add("droop_at_49_9", abs(ps - expected) / expected, 1e-12, detail=f"P*({f_check}) = {ps:.6f} W")
    f = result["f"]
    hits = np.flatnonzero(np.abs(f - f_check) <= 1e-3)
    if hits.size == 0:
        rep.add("p_at_49_9", None, tol, detail="profile never reaches 49.9 Hz")
        return
    i = hits[len(hits) // 2]
    meas = P[i]
    rep.add("p_at_49_9", abs(meas - ps) / ps if np.isfinite(meas) else None, tol,
            detail=f"cycle-mean P at t={t[i]:.4g} s")


def _activation(spec, name):
    at = getattr(spec.flags, name)
    for ev in spec.events:
        if ev.kind == "enable_service" and ev.service == name:
            at = ev.time if at is None else min(at, ev.time)
    if at is None:
        raise MetricsError(f"{name} is never enabled in this scenario")
    return at


REPORTED = ("voltage_regulation", "pf_correction", "phase_balancing", "frequency_regulation",
            "simultaneous")


def scenario_report(result, criteria: str | None = None) -> ScenarioReport:
    """Evaluate a registered criterion set against ``result``.

    The set defaults to ``spec.criteria``, then ``spec.name``. An aborted run
    yields a single not-evaluable ``completed`` entry.
    """
    spec = result.spec
    name = criteria or spec.criteria or spec.name
    if name not in REPORTED:
        raise MetricsError(f"no criteria registered for scenario {name!r}")
    rep = ScenarioReport(spec.name)
    if result.diverged or len(result) == 0 or len(result) < spec.nrecords:
        detail = "run aborted" if result.diverged else "records truncated"
        rep.entries.append(ReportEntry("completed", None, 1.0, False, detail))
        return rep
    if name == "voltage_regulation":
        voltage_regulation_report(result, rep)
    elif name == "pf_correction":
        pf_report(result, rep, _activation(spec, "pf_correction"))
    elif name == "phase_balancing":
        balancing_report(result, rep, _activation(spec, "phase_balancing"))
    elif name == "frequency_regulation":
        frequency_report(result, rep)
    else:
        t_pf = _activation(spec, "pf_correction")
        t_pb = _activation(spec, "phase_balancing")
        pf_report(result, rep, t_pf, pf_min=0.98, before=None)
        balancing_report(result, rep, t_pb, imbalance=0.08)
        frequency_report(result, rep, tol=0.03, f_check=None)
    return rep
