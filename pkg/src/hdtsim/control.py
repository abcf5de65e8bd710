"""Cascaded PI control: duty-cycle inner loops and the service outer loops.

Each step function takes the previous controller state and returns a new
one together with its output (the rolling window is updated in place). Error sign conventions
follow the control laws exactly (VSC1 and balancing use measured minus
reference, the others reference minus measured).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .phasemath import RollingWindow, inv_park, park, rolling_rms

SERVICES = ("voltage_regulation", "pf_correction", "frequency_regulation", "phase_balancing")


class ControlError(ValueError):
    pass


def step_index(time: float, dt: float) -> int:
    """First step whose time ``k*dt`` reaches ``time`` (1e-9 step slack)."""
    return max(0, math.ceil(time / dt - 1e-9))


# ---------------------------------------------------------------- parameters

@dataclass
class Gains:
    kp1: float = 0.0
    ki1: float = 1633.0
    kp2: float = 10.0
    ki2: float = 8.0
    kp3: float = 0.14
    ki3: float = 0.01
    kp4: float = 0.001
    ki4: float = 0.005
    kp5: float = 0.01
    ki5: float = 20.0
    kp6: float = 50.0
    ki6: float = 1.0
    gamma: float = 10.0


@dataclass
class References:
    v_star: float = 380.0
    vC_star: float = 2000.0
    i2q_star: float = 0.0
    i20_star: float = 0.0
    Qbar_star: float = 0.0


@dataclass
class DroopParams:
    f0: float = 50.0
    df_max: float = 0.2
    P0: float = 29160.0
    Pmin: float = 24719.0
    Pmax: float = 34458.6
    v0: float = 380.0

    def validate(self) -> None:
        if not (self.Pmin < self.P0 < self.Pmax):
            raise ControlError("droop requires Pmin < P0 < Pmax")
        if not self.df_max > 0.0:
            raise ControlError("droop requires df_max > 0")


@dataclass
class ServiceFlags:
    """Activation time per service in seconds; ``None`` keeps it disabled."""

    voltage_regulation: float | None = 0.0
    pf_correction: float | None = None
    frequency_regulation: float | None = None
    phase_balancing: float | None = None

    def active(self, name: str, t: float) -> bool:
        at = getattr(self, name)
        return at is not None and t >= at

    def active_at_step(self, k: int, dt: float) -> frozenset:
        """Services active at step ``k`` (activation snapped to the step grid)."""
        return frozenset(
            name for name in SERVICES
            if getattr(self, name) is not None and k >= step_index(getattr(self, name), dt)
        )

    def enable(self, name: str, t: float) -> "ServiceFlags":
        if name not in SERVICES:
            raise ControlError(f"unknown service {name!r}")
        current = getattr(self, name)
        if current is not None and current <= t:
            return self
        return replace(self, **{name: t})


# ------------------------------------------------------------------ PI block

@dataclass
class PiState:
    kp: float
    ki: float
    integral: float = 0.0
    out_limits: tuple[float, float] | None = None
    saturated: int = 0  # limit held by the last output: -1 low, +1 high, 0 none


def pi_step(st: PiState, error: float, dt: float) -> tuple[PiState, float]:
    """One PI update, ``kp*e + ki*(integral + e*dt)``.

    With ``out_limits`` the output is clamped and the integral is frozen
    while the error pushes further into the active limit (the one held by
    the previous output, or the one just hit when the output was free).
    """
    if not dt > 0.0:
        raise ControlError(f"dt must be positive, got {dt}")
    if not math.isfinite(error):
        raise ControlError(f"non-finite PI error {error!r}")
    candidate = st.integral + error * dt
    raw = st.kp * error + st.ki * candidate
    if st.out_limits is None:
        return replace(st, integral=candidate), raw
    lo, hi = st.out_limits
    if raw > hi:
        out, now = hi, 1
    elif raw < lo:
        out, now = lo, -1
    else:
        out, now = raw, 0
    active = st.saturated if st.saturated != 0 else now
    if now == 0 or error * active < 0.0:
        return replace(st, integral=candidate, saturated=now), out
    return replace(st, saturated=now), out


SATURATION_SCHEMES = ("abc", "dq", "vector")  # index order matches the kernel enum


@dataclass
class DutyLimiters:
    """Duty saturation scheme per converter.

    ``abc`` clamps each phase and freezes the integrators while the summed
    per-phase excess would grow. ``dq`` limits each dq0 axis to [-1, 1] with
    per-axis conditional integration. ``vector`` rescales the abc command by
    its largest magnitude, preserving direction, and freezes the integrators
    while that magnitude would grow.
    """

    vsc1: str = "dq"
    vsc2: str = "vector"

    def validate(self) -> None:
        for name in ("vsc1", "vsc2"):
            if getattr(self, name) not in SATURATION_SCHEMES:
                raise ControlError(f"{name} limiter must be one of {SATURATION_SCHEMES}")

    def codes(self) -> tuple[int, int]:
        return SATURATION_SCHEMES.index(self.vsc1), SATURATION_SCHEMES.index(self.vsc2)


@dataclass
class DqPiState:
    """Three per-axis PI integrators sharing one gain pair."""

    kp: float
    ki: float
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    limiter: str = "abc"


def clamp_unit(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, -1.0), 1.0)


def _excess(x: np.ndarray) -> float:
    return float(np.sum(np.maximum(np.abs(x) - 1.0, 0.0)))


def _absmax(x: np.ndarray) -> float:
    return float(max(abs(x[0]), abs(x[1]), abs(x[2])))


def duty_pi_step(theta: float, st: DqPiState, error_dq0: np.ndarray, dt: float) -> tuple[DqPiState, np.ndarray]:
    """PI in dq0 mapped to an abc duty in [-1, 1] using ``st.limiter``."""
    e = np.asarray(error_dq0, dtype=float)
    if not np.all(np.isfinite(e)):
        raise ControlError(f"non-finite duty-loop error {e!r}")
    candidate = st.integral + e * dt
    u = st.kp * e + st.ki * candidate
    if st.limiter == "dq":
        keep = (np.abs(u) <= 1.0) | (u * e < 0.0)
        st = replace(st, integral=np.where(keep, candidate, st.integral))
        return st, clamp_unit(inv_park(theta, clamp_unit(u)))
    abc_new = inv_park(theta, u)
    abc_old = inv_park(theta, st.kp * e + st.ki * st.integral)
    if st.limiter == "vector":
        m_new = _absmax(abc_new)
        if m_new <= 1.0:
            return replace(st, integral=candidate), clamp_unit(abc_new)
        m_old = _absmax(abc_old)
        if m_old <= 1.0 or m_new <= m_old:
            st = replace(st, integral=candidate)
        return st, clamp_unit(abc_new / m_new)
    if st.limiter != "abc":
        raise ControlError(f"unknown duty limiter {st.limiter!r}")
    ex_old = _excess(abc_old)
    if ex_old == 0.0 or _excess(abc_new) <= ex_old:
        st = replace(st, integral=candidate)
    return st, clamp_unit(abc_new)


# ---------------------------------------------------------------- inner loops

def vsc1_duty(theta, V_abc, v_star, st: DqPiState, dt):
    """Series converter duty tracking the load-voltage reference ``[v*, 0, 0]``."""
    err = park(theta, V_abc) - np.array([v_star, 0.0, 0.0])
    return duty_pi_step(theta, st, err, dt)


def vsc2_duty(theta, I2_abc, I2_ref_dq0, st: DqPiState, dt):
    """Shunt converter duty tracking the dq0 current reference."""
    err = np.asarray(I2_ref_dq0, dtype=float) - park(theta, I2_abc)
    return duty_pi_step(theta, st, err, dt)


# ---------------------------------------------------------------- outer loops

def dc_link_ref(vC, vC_star, st: PiState, dt):
    return pi_step(st, vC - vC_star, dt)


def active_reactive_power(v_dq0, i_dq0) -> tuple[float, float]:
    """Instantaneous three-phase P and Q from peak-scaled dq quantities.

    Inductive (lagging) current gives positive Q.
    """
    vd, vq = float(v_dq0[0]), float(v_dq0[1])
    id_, iq = float(i_dq0[0]), float(i_dq0[1])
    return 1.5 * (vd * id_ + vq * iq), 1.5 * (vq * id_ - vd * iq)


def pf_correction_ref(i3q, Qbar, st: PiState, dt, Qbar_star=0.0):
    """Feedforward of the inductor q-current plus PI on the grid reactive power."""
    st, fb = pi_step(st, Qbar_star - Qbar, dt)
    return st, i3q + fb


def droop_power_ref(f: float, dp: DroopParams) -> float:
    """Piecewise-linear droop from frequency deviation to active power setpoint."""
    df = f - dp.f0
    if df >= 0.0:
        kf = (dp.Pmax - dp.P0) / dp.df_max
    else:
        kf = (dp.P0 - dp.Pmin) / dp.df_max
    return min(max(dp.P0 + kf * df, dp.Pmin), dp.Pmax)


def freq_voltage_ref(P_star, P, dp: DroopParams, st: PiState, dt):
    st, out = pi_step(st, P_star - P, dt)
    return st, dp.v0 + out


def balancing_ref(theta, I_beta, win: RollingWindow, i2d_star_dc, gamma, st: DqPiState, dt):
    """Shunt current reference that drives the grid current to a balanced set.

    The d-axis target is the one-cycle rolling RMS of the measured d-current.
    """
    i_beta_dq0 = park(theta, I_beta)
    win, i_beta_d_star = rolling_rms(win, i_beta_dq0[0])
    err = i_beta_dq0 - np.array([i_beta_d_star, 0.0, 0.0])
    integral = st.integral + err * dt
    ref = st.kp * err + st.ki * integral
    ref[0] += gamma * i2d_star_dc
    return replace(st, integral=integral), win, ref


# --------------------------------------------------------------- orchestrator

@dataclass
class Measurements:
    theta: float
    f: float
    V: np.ndarray        # load terminal voltage
    I_beta: np.ndarray   # grid-side secondary current
    I_load: np.ndarray   # total current into the load
    I2: np.ndarray
    I3: np.ndarray
    vC: float


@dataclass
class ControllerState:
    pi1: DqPiState
    pi2: DqPiState
    pi3: PiState
    pi4: PiState
    pi5: PiState
    pi6: DqPiState
    window: RollingWindow

    @classmethod
    def initial(cls, gains: Gains, window_capacity: int,
                limiters: DutyLimiters | None = None) -> "ControllerState":
        lim = limiters or DutyLimiters()
        return cls(
            pi1=DqPiState(gains.kp1, gains.ki1, limiter=lim.vsc1),
            pi2=DqPiState(gains.kp2, gains.ki2, limiter=lim.vsc2),
            pi3=PiState(gains.kp3, gains.ki3),
            pi4=PiState(gains.kp4, gains.ki4),
            pi5=PiState(gains.kp5, gains.ki5),
            pi6=DqPiState(gains.kp6, gains.ki6),
            window=RollingWindow(window_capacity),
        )


@dataclass
class Telemetry:
    """Per-step quantities exposed for recording."""

    V_dq0: np.ndarray
    I_beta_dq0: np.ndarray
    P: float
    Q: float
    P_grid: float
    P_star: float
    v_star: float
    I2_ref_dq0: np.ndarray


def controller_step(m: Measurements, active, refs: References, gains: Gains,
                    droop: DroopParams, cs: ControllerState, dt: float):
    """Run all outer loops then both duty loops for one sample.

    ``active`` is the set of service names enabled at this step.
    Returns ``(new_state, D1, D2, telemetry)``.
    """
    theta = m.theta
    V_dq0 = park(theta, m.V)
    Ib_dq0 = park(theta, m.I_beta)
    P_load, _ = active_reactive_power(V_dq0, park(theta, m.I_load))
    P_grid, Qbar = active_reactive_power(V_dq0, Ib_dq0)

    P_star = droop_power_ref(m.f, droop)
    pi5 = cs.pi5
    if "frequency_regulation" in active:
        pi5, v_star = freq_voltage_ref(P_star, P_load, droop, pi5, dt)
    else:
        v_star = refs.v_star

    pi3, i2d_star = dc_link_ref(m.vC, refs.vC_star, cs.pi3, dt)

    pi4 = cs.pi4
    if "pf_correction" in active:
        i3q = park(theta, m.I3)[1]
        pi4, i2q_star = pf_correction_ref(i3q, Qbar, pi4, dt, refs.Qbar_star)
    else:
        i2q_star = refs.i2q_star

    # the window tracks i_beta_d at every step so it is full on activation
    pi6 = cs.pi6
    window = cs.window
    if "phase_balancing" in active:
        pi6, window, I2_ref = balancing_ref(theta, m.I_beta, window, i2d_star, gains.gamma, pi6, dt)
    else:
        window, _ = rolling_rms(window, Ib_dq0[0])
        I2_ref = np.array([i2d_star, i2q_star, refs.i20_star])

    pi1 = cs.pi1
    if "voltage_regulation" in active:
        pi1, D1 = vsc1_duty(theta, m.V, v_star, pi1, dt)
    else:
        D1 = np.zeros(3)
    pi2, D2 = vsc2_duty(theta, m.I2, I2_ref, cs.pi2, dt)

    new_state = ControllerState(pi1=pi1, pi2=pi2, pi3=pi3, pi4=pi4, pi5=pi5, pi6=pi6, window=window)
    telem = Telemetry(V_dq0=V_dq0, I_beta_dq0=Ib_dq0, P=P_load, Q=Qbar, P_grid=P_grid,
                      P_star=P_star, v_star=v_star, I2_ref_dq0=I2_ref)
    return new_state, D1, D2, telem
