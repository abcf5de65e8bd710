"""Fixed-step closed-loop simulation with scripted events.

Two interchangeable backends execute the same step sequence: a compiled
kernel (``hdtsim._ckernel``) and the pure-Python loop below built from the
``plant`` and ``control`` functions. :func:`run` picks one via
:mod:`hdtsim._backend`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend
from .control import (
    SERVICES,
    ControllerState,
    DroopParams,
    DutyLimiters,
    Gains,
    Measurements,
    References,
    ServiceFlags,
    controller_step,
    step_index,
)
from .phasemath import TWO_PI, window_capacity, wrap_angle
from .plant import (
    DEFAULT_I_PK,
    DEFAULT_VIN_PK,
    ExogenousInputs,
    DutyPair,
    PlantParams,
    PlantState,
    SimulationDiverged,
    default_params,
    derivative,
    derive_composites,
    grid_current,
    load_current,
    load_voltage,
    source_waveforms,
)

F_MIN, F_MAX = 45.0, 55.0

COLUMNS = (
    "t",
    "vin_a", "vin_b", "vin_c",
    "i1_a", "i1_b", "i1_c",
    "i2_a", "i2_b", "i2_c",
    "i3_a", "i3_b", "i3_c",
    "v_a", "v_b", "v_c",
    "v_d", "v_q", "v_0",
    "ibeta_d", "ibeta_q", "ibeta_0",
    "v_dc",
    "d1_a", "d1_b", "d1_c",
    "d2_a", "d2_b", "d2_c",
    "p", "q", "pf", "f", "p_star", "v_star",
)
COL = {name: i for i, name in enumerate(COLUMNS)}
N_COLUMNS = len(COLUMNS)

STATUS_OK = 0
STATUS_DIVERGED = 1


class ScenarioError(ValueError):
    pass


# --------------------------------------------------------- frequency profiles

@dataclass(frozen=True)
class FrequencyProfile:
    """Piecewise-linear frequency trajectory, clamped beyond its end points.

    ``kind`` is ``"constant"``, ``"ramp"`` or ``"sampled"``; every kind is
    stored as breakpoints ``(times, freqs)``.
    """

    kind: str
    times: tuple
    freqs: tuple
    source: str | None = None

    @classmethod
    def constant(cls, f: float) -> "FrequencyProfile":
        return cls("constant", (0.0,), (float(f),)).validated()

    @classmethod
    def ramp(cls, f_start, f_end, t_start, t_end) -> "FrequencyProfile":
        if not t_end > t_start:
            raise ScenarioError("ramp requires t_end > t_start")
        return cls("ramp", (float(t_start), float(t_end)), (float(f_start), float(f_end))).validated()

    @classmethod
    def sampled(cls, times, freqs, source=None) -> "FrequencyProfile":
        return cls("sampled", tuple(float(t) for t in times), tuple(float(f) for f in freqs),
                   source).validated()

    def validated(self) -> "FrequencyProfile":
        if len(self.times) == 0:
            raise ScenarioError("frequency profile is empty")
        if len(self.times) != len(self.freqs):
            raise ScenarioError("frequency profile times and values differ in length")
        for f in self.freqs:
            if not (math.isfinite(f) and F_MIN <= f <= F_MAX):
                raise ScenarioError(f"frequency {f} outside [{F_MIN}, {F_MAX}] Hz")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise ScenarioError("frequency profile times must be strictly increasing")
        return self

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.times, dtype=float), np.array(self.freqs, dtype=float)


def profile_eval(p: FrequencyProfile, t: float) -> float:
    """Frequency in Hz at time ``t`` (linear interpolation, end-clamped)."""
    times, freqs = p.times, p.freqs
    if not times:
        raise ScenarioError("frequency profile is empty")
    if t <= times[0]:
        return freqs[0]
    n = len(times)
    if t >= times[n - 1]:
        return freqs[n - 1]
    i = 0
    while times[i + 1] < t:
        i += 1
    return freqs[i] + (freqs[i + 1] - freqs[i]) * (t - times[i]) / (times[i + 1] - times[i])


def load_frequency_csv(path) -> FrequencyProfile:
    """Read a two-column ``t,f`` CSV (header optional)."""
    import csv

    times, freqs = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ScenarioError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                t, f = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not times:
                    continue
                raise ScenarioError(f"{path}:{lineno}: non-numeric value") from None
            times.append(t)
            freqs.append(f)
    return FrequencyProfile.sampled(times, freqs, source=str(path))


# -------------------------------------------------------------------- events

EVENT_KINDS = ("scale_vin", "set_load_matrices", "enable_service")


@dataclass(frozen=True, eq=False)
class Event:
    time: float
    kind: str
    factor: float | None = None
    R: np.ndarray | None = None
    L: np.ndarray | None = None
    service: str | None = None

    @classmethod
    def scale_vin(cls, time, factor):
        if not (math.isfinite(factor) and factor > 0.0):
            raise ScenarioError(f"scale_vin factor must be positive, got {factor}")
        return cls(float(time), "scale_vin", factor=float(factor))

    @classmethod
    def set_load_matrices(cls, time, R, L):
        return cls(float(time), "set_load_matrices",
                   R=np.array(R, dtype=float), L=np.array(L, dtype=float))

    @classmethod
    def enable_service(cls, time, service):
        if service not in SERVICES:
            raise ScenarioError(f"unknown service {service!r}")
        return cls(float(time), "enable_service", service=service)


@dataclass
class EventState:
    """Mutable-by-replacement view of everything events can change."""

    vin_scale: float
    plant: PlantParams
    flags: ServiceFlags
    applied: int = 0


def apply_events(es: EventState, events, k: int, dt: float) -> EventState:
    """Apply every not-yet-applied event whose step index is ``<= k``.

    ``events`` must be sorted by time; ``es.applied`` counts consumed events,
    so calling again at the same or a later step never re-applies one.
    """
    i = es.applied
    while i < len(events) and step_index(events[i].time, dt) <= k:
        ev = events[i]
        if ev.kind == "scale_vin":
            es = replace(es, vin_scale=es.vin_scale * ev.factor)
        elif ev.kind == "set_load_matrices":
            es = replace(es, plant=es.plant.with_load(ev.R, ev.L))
        elif ev.kind == "enable_service":
            es = replace(es, flags=es.flags.enable(ev.service, ev.time))
        else:
            raise ScenarioError(f"unknown event kind {ev.kind!r}")
        i += 1
    return replace(es, applied=i)


# ------------------------------------------------------------------ scenario

@dataclass(eq=False)
class ScenarioSpec:
    name: str = "custom"
    duration: float = 0.2
    dt: float = 2e-5
    integrator: str = "euler"
    record_decimation: int = 5
    initial_state: PlantState = field(default_factory=lambda: PlantState(vC=1900.0))
    plant: PlantParams = field(default_factory=default_params)
    Vin_pk: float = DEFAULT_VIN_PK
    I_pk: float = DEFAULT_I_PK
    gains: Gains = field(default_factory=Gains)
    limiters: DutyLimiters = field(default_factory=DutyLimiters)
    refs: References = field(default_factory=References)
    droop: DroopParams = field(default_factory=DroopParams)
    flags: ServiceFlags = field(default_factory=ServiceFlags)
    freq_profile: FrequencyProfile = field(default_factory=lambda: FrequencyProfile.constant(50.0))
    events: tuple = ()
    criteria: str | None = None  # acceptance set used by metrics.scenario_report

    @property
    def nsteps(self) -> int:
        return int(math.ceil(self.duration / self.dt - 1e-9))

    @property
    def nrecords(self) -> int:
        return (self.nsteps - 1) // self.record_decimation + 1

    def validate(self) -> "ScenarioSpec":
        if not (math.isfinite(self.duration) and self.duration > 0.0):
            raise ScenarioError("duration must be positive")
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ScenarioError("dt must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise ScenarioError(f"integrator must be 'euler' or 'rk4', got {self.integrator!r}")
        if int(self.record_decimation) != self.record_decimation or self.record_decimation < 1:
            raise ScenarioError("record_decimation must be an integer >= 1")
        if not self.initial_state.is_finite():
            raise ScenarioError("initial state must be finite")
        if not self.plant.derived:
            self.plant = derive_composites(self.plant)
        self.droop.validate()
        self.limiters.validate()
        times = [ev.time for ev in self.events]
        if times != sorted(times):
            raise ScenarioError("events must be sorted by time")
        for ev in self.events:
            if not 0.0 <= ev.time <= self.duration:
                raise ScenarioError(f"event time {ev.time} outside [0, duration]")
        for name in SERVICES:
            at = getattr(self.flags, name)
            if at is not None and not 0.0 <= at <= self.duration:
                raise ScenarioError(f"{name} activation time {at} outside [0, duration]")
        self.freq_profile.validated()
        return self


@dataclass
class SimResult:
    """Recorded samples (one row per decimated step) plus run status."""

    spec: ScenarioSpec
    data: np.ndarray
    status: int = STATUS_OK
    fail_step: int = -1
    backend: str = ""

    @property
    def diverged(self) -> bool:
        return self.status != STATUS_OK

    @property
    def fail_time(self) -> float | None:
        return None if self.fail_step < 0 else self.fail_step * self.spec.dt

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[:, COL[name]]

    def abc(self, prefix: str) -> np.ndarray:
        return self.data[:, [COL[f"{prefix}_a"], COL[f"{prefix}_b"], COL[f"{prefix}_c"]]]

    def dq0(self, prefix: str) -> np.ndarray:
        return self.data[:, [COL[f"{prefix}_d"], COL[f"{prefix}_q"], COL[f"{prefix}_0"]]]

    @property
    def records(self) -> list["SampleRecord"]:
        return [SampleRecord.from_row(row) for row in self.data]


@dataclass
class SampleRecord:
    t: float
    Vin_abc: np.ndarray
    I1_abc: np.ndarray
    I2_abc: np.ndarray
    I3_abc: np.ndarray
    V_abc: np.ndarray
    V_dq0: np.ndarray
    I_beta_dq0: np.ndarray
    vC: float
    D1_abc: np.ndarray
    D2_abc: np.ndarray
    P: float
    Q: float
    PF: float
    f: float
    P_star: float
    v_star: float

    @classmethod
    def from_row(cls, row) -> "SampleRecord":
        r = np.asarray(row, dtype=float)
        return cls(float(r[0]), r[1:4], r[4:7], r[7:10], r[10:13], r[13:16], r[16:19],
                   r[19:22], float(r[22]), r[23:26], r[26:29], float(r[29]), float(r[30]),
                   float(r[31]), float(r[32]), float(r[33]), float(r[34]))

    def to_row(self) -> np.ndarray:
        return np.concatenate([[self.t], self.Vin_abc, self.I1_abc, self.I2_abc, self.I3_abc,
                               self.V_abc, self.V_dq0, self.I_beta_dq0, [self.vC], self.D1_abc,
                               self.D2_abc, [self.P, self.Q, self.PF, self.f, self.P_star,
                                             self.v_star]])


def signed_power_factor(P: float, Q: float) -> float:
    s = math.hypot(P, Q)
    return P / s if s > 0.0 else math.nan


# ---------------------------------------------------------- python reference

def _guard(x: np.ndarray, limit: float) -> bool:
    return bool(np.all(np.isfinite(x))) and abs(x[9]) <= limit


def _rk4(s: PlantState, d: DutyPair, p: PlantParams, theta, f, dt, Vin_pk, I_pk) -> PlantState:
    def rhs(x, th):
        Vin, Il = source_waveforms(th, Vin_pk, I_pk)
        return derivative(PlantState.from_vector(x), ExogenousInputs(Vin, Il, f), d, p).to_vector()

    x = s.to_vector()
    w = TWO_PI * f
    k1 = rhs(x, theta)
    k2 = rhs(x + 0.5 * dt * k1, theta + 0.5 * dt * w)
    k3 = rhs(x + 0.5 * dt * k2, theta + 0.5 * dt * w)
    k4 = rhs(x + dt * k3, theta + dt * w)
    return PlantState.from_vector(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def run_python(spec: ScenarioSpec) -> SimResult:
    """Reference step loop composed from the plant and control modules."""
    spec.validate()
    dt = spec.dt
    nsteps = spec.nsteps
    dec = spec.record_decimation
    data = np.zeros((spec.nrecords, N_COLUMNS))
    limit = 2.0 * spec.refs.vC_star
    s = PlantState.from_vector(spec.initial_state.to_vector())
    es = EventState(vin_scale=1.0, plant=spec.plant, flags=spec.flags)
    cs = ControllerState.initial(spec.gains, window_capacity(spec.droop.f0, dt), spec.limiters)
    theta = 0.0
    r = 0
    for k in range(nsteps):
        t = k * dt
        es = apply_events(es, spec.events, k, dt)
        p = es.plant
        f = profile_eval(spec.freq_profile, t)
        Vin, Il = source_waveforms(theta, spec.Vin_pk * es.vin_scale, spec.I_pk)
        u = ExogenousInputs(Vin, Il, f)
        m = Measurements(theta=theta, f=f, V=load_voltage(s, u, p), I_beta=grid_current(s, p),
                         I_load=load_current(s, u, p), I2=s.I2, I3=s.I3, vC=s.vC)
        active = es.flags.active_at_step(k, dt)
        cs, D1, D2, tel = controller_step(m, active, spec.refs, spec.gains, spec.droop, cs, dt)
        d = DutyPair(D1, D2)
        if k % dec == 0:
            data[r] = SampleRecord(
                t, Vin, s.I1, s.I2, s.I3, m.V, tel.V_dq0, tel.I_beta_dq0, s.vC, D1, D2,
                tel.P, tel.Q, signed_power_factor(tel.P_grid, tel.Q), f, tel.P_star, tel.v_star,
            ).to_row()
            r += 1
        if spec.integrator == "euler":
            ds = derivative(s, u, d, p)
            s = PlantState.from_vector(s.to_vector() + dt * ds.to_vector())
        else:
            s = _rk4(s, d, p, theta, f, dt, spec.Vin_pk * es.vin_scale, spec.I_pk)
        if not _guard(s.to_vector(), limit):
            return SimResult(spec, data[:r], STATUS_DIVERGED, k, "python")
        theta = wrap_angle(theta + TWO_PI * f * dt)
    return SimResult(spec, data[:r], STATUS_OK, -1, "python")


# ------------------------------------------------------------ kernel packing

def pack_plant(p: PlantParams) -> np.ndarray:
    """Flat vector ``[Lbar1, Rbar1, R2, L2, C, alpha, beta, R(9), Linv(9)]``."""
    return np.concatenate([[p.Lbar1, p.Rbar1, p.R2, p.L2, p.C, p.alpha, p.beta],
                           np.ravel(p.R_load), np.ravel(p.L_load_inv)])


def pack_spec(spec: ScenarioSpec) -> dict:
    """Lower a validated spec to the flat arrays consumed by the kernel.

    ``enable_service`` events fold into the activation steps; load-matrix
    events carry their own inverse inductance.
    """
    spec.validate()
    dt = spec.dt
    g = spec.gains
    flags = spec.flags
    ev_steps, ev_kinds, ev_data = [], [], []
    for ev in spec.events:
        if ev.kind == "enable_service":
            flags = flags.enable(ev.service, ev.time)
            continue
        row = np.zeros(18)
        if ev.kind == "scale_vin":
            row[0] = ev.factor
            kind = 0
        else:
            p = spec.plant.with_load(ev.R, ev.L)
            row[:9] = np.ravel(p.R_load)
            row[9:] = np.ravel(p.L_load_inv)
            kind = 1
        ev_steps.append(step_index(ev.time, dt))
        ev_kinds.append(kind)
        ev_data.append(row)
    big = np.iinfo(np.int64).max
    act = np.array([big if getattr(flags, n) is None else step_index(getattr(flags, n), dt)
                    for n in SERVICES], dtype=np.int64)
    tp, fp = spec.freq_profile.as_arrays()
    return dict(
        plant=pack_plant(spec.plant),
        gains=np.array([g.kp1, g.ki1, g.kp2, g.ki2, g.kp3, g.ki3, g.kp4, g.ki4,
                        g.kp5, g.ki5, g.kp6, g.ki6, g.gamma]),
        refs=np.array([spec.refs.vC_star, spec.refs.i2q_star, spec.refs.i20_star,
                       spec.refs.Qbar_star, spec.refs.v_star]),
        droop=np.array([spec.droop.f0, spec.droop.df_max, spec.droop.P0, spec.droop.Pmin,
                        spec.droop.Pmax, spec.droop.v0]),
        sources=np.array([spec.Vin_pk, spec.I_pk]),
        activation=act,
        ev_steps=np.array(ev_steps, dtype=np.int64),
        ev_kinds=np.array(ev_kinds, dtype=np.int64),
        ev_data=np.array(ev_data, dtype=float).reshape(len(ev_data), 18),
        tp=tp,
        fp=fp,
        x0=spec.initial_state.to_vector(),
        dt=float(dt),
        nsteps=int(spec.nsteps),
        decimation=int(spec.record_decimation),
        rk4=1 if spec.integrator == "rk4" else 0,
        window=int(window_capacity(spec.droop.f0, dt)),
        sat1=spec.limiters.codes()[0],
        sat2=spec.limiters.codes()[1],
    )


def run_compiled(spec: ScenarioSpec) -> SimResult:
    kernel = _backend.compiled_kernel()
    if kernel is None:
        raise RuntimeError("compiled kernel is not available")
    packed = pack_spec(spec)
    out = np.zeros((spec.nrecords, N_COLUMNS))
    n, status, fail_step = kernel.run_kernel(out=out, **packed)
    return SimResult(spec, out[:n], int(status), int(fail_step), "compiled")


def run(spec: ScenarioSpec, backend: str | None = None) -> SimResult:
    """Simulate ``spec`` on the selected backend.

    Raises :class:`SimulationDiverged` (carrying the partial result) when
    the divergence guard trips.
    """
    name = _backend.resolve(backend)
    result = run_compiled(spec) if name == "compiled" else run_python(spec)
    if result.diverged:
        exc = SimulationDiverged(
            f"simulation diverged at step {result.fail_step} (t={result.fail_time:.6g} s)",
            step=result.fail_step, time=result.fail_time)
        exc.result = result
        raise exc
    return result
