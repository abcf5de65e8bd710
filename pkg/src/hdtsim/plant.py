"""Averaged circuit model of the series-shunt hybrid distribution transformer.

State: ``I1`` (VSC1 branch current), ``I2`` (VSC2 branch current), ``I3``
(load inductor current), each a three-phase vector in A, and the DC-link
voltage ``vC`` in V. The load is a parallel RL impedance (3x3 matrices) in
parallel with a balanced constant current source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .phasemath import positive_sequence

# Table of default circuit constants (SI units).
DEFAULT_L1 = 0.0063
DEFAULT_L2 = 0.2
DEFAULT_LP = 0.795
DEFAULT_LS = 2e-4
DEFAULT_R1 = 0.033
DEFAULT_R2 = 0.01
DEFAULT_RP = 50.0
DEFAULT_RS = 0.01
DEFAULT_C = 0.0018
DEFAULT_R_LOAD = 10.0
DEFAULT_L_LOAD = 8.3e-2
DEFAULT_ALPHA = 1.0 / 66.0
DEFAULT_BETA = 18.0
DEFAULT_VIN_PK = 25000.0
DEFAULT_I_PK = 13.15

UNBALANCED_L_LOAD = np.array([
    [8.3e-2, 1.6e-4, 2.5e-4],
    [1.6e-4, 8.3e-2, 8.3e-5],
    [2.5e-4, 8.3e-5, 8.3e-2],
])
UNBALANCED_R_LOAD = np.array([
    [10.0, 0.1, 0.2],
    [0.1, 10.0, 0.15],
    [0.2, 0.15, 5.0],
])


class PlantParameterError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    """Raised when the integrated state leaves the admissible region."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass(eq=False)
class PlantParams:
    L1: float = DEFAULT_L1
    L2: float = DEFAULT_L2
    Lp: float = DEFAULT_LP
    Ls: float = DEFAULT_LS
    R1: float = DEFAULT_R1
    R2: float = DEFAULT_R2
    Rp: float = DEFAULT_RP
    Rs: float = DEFAULT_RS
    C: float = DEFAULT_C
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    R_load: np.ndarray = field(default_factory=lambda: DEFAULT_R_LOAD * np.eye(3))
    L_load: np.ndarray = field(default_factory=lambda: DEFAULT_L_LOAD * np.eye(3))
    # composites, filled by derive_composites
    Lbar1: float | None = None
    Rbar1: float | None = None
    Rbar2: np.ndarray | None = None
    L_load_inv: np.ndarray | None = None

    @property
    def derived(self) -> bool:
        return self.Lbar1 is not None

    def with_load(self, R_load, L_load) -> "PlantParams":
        return derive_composites(replace(
            self, R_load=np.array(R_load, dtype=float), L_load=np.array(L_load, dtype=float),
            Lbar1=None, Rbar1=None, Rbar2=None, L_load_inv=None,
        ))


def check_load_matrices(R_load, L_load) -> None:
    """Validate load matrices; raises PlantParameterError on violation."""
    R = np.asarray(R_load, dtype=float)
    L = np.asarray(L_load, dtype=float)
    if R.shape != (3, 3) or L.shape != (3, 3):
        raise PlantParameterError("load matrices must be 3x3")
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(L))):
        raise PlantParameterError("load matrices must be finite")
    if not np.allclose(R, R.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(R).max())):
        raise PlantParameterError("R_load must be symmetric")
    if np.any(np.diag(R) <= 0.0):
        raise PlantParameterError("R_load must have a positive diagonal")
    if not np.allclose(L, L.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(L).max())):
        raise PlantParameterError("L_load must be symmetric")
    if np.linalg.eigvalsh(0.5 * (L + L.T)).min() <= 0.0:
        raise PlantParameterError("L_load must be positive definite")


def derive_composites(raw: PlantParams) -> PlantParams:
    """Return a copy of ``raw`` with the lumped series constants filled in.

    ``Lbar1 = L1 + beta^2 (Ls + alpha^2 Lp)``,
    ``Rbar1 = R1 + beta^2 (Rs + alpha^2 Rp)``, ``Rbar2 = R2 I + R_load``.
    """
    for name in ("L1", "L2", "Lp", "Ls", "C"):
        value = getattr(raw, name)
        if not (math.isfinite(value) and value > 0.0):
            raise PlantParameterError(f"{name} must be positive, got {value}")
    for name in ("R1", "R2", "Rp", "Rs", "alpha", "beta"):
        value = getattr(raw, name)
        if not (math.isfinite(value) and value >= 0.0):
            raise PlantParameterError(f"{name} must be non-negative, got {value}")
    check_load_matrices(raw.R_load, raw.L_load)
    R_load = np.array(raw.R_load, dtype=float)
    L_load = np.array(raw.L_load, dtype=float)
    try:
        L_inv = np.linalg.inv(L_load)
    except np.linalg.LinAlgError as exc:
        raise PlantParameterError("L_load is singular") from exc
    beta2 = raw.beta ** 2
    alpha2 = raw.alpha ** 2
    Lbar1 = raw.L1 + beta2 * (raw.Ls + alpha2 * raw.Lp)
    Rbar1 = raw.R1 + beta2 * (raw.Rs + alpha2 * raw.Rp)
    Rbar2 = raw.R2 * np.eye(3) + R_load
    if np.linalg.cond(Rbar2) > 1e12:
        raise PlantParameterError("R2*I + R_load is singular")
    return replace(raw, R_load=R_load, L_load=L_load, Lbar1=Lbar1, Rbar1=Rbar1,
                   Rbar2=Rbar2, L_load_inv=L_inv)


def default_params() -> PlantParams:
    return derive_composites(PlantParams())


@dataclass(eq=False)
class PlantState:
    I1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    I2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    I3: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vC: float = 0.0

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.I1, self.I2, self.I3, [self.vC]])

    @classmethod
    def from_vector(cls, x) -> "PlantState":
        x = np.asarray(x, dtype=float)
        return cls(I1=x[0:3].copy(), I2=x[3:6].copy(), I3=x[6:9].copy(), vC=float(x[9]))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


@dataclass(eq=False)
class ExogenousInputs:
    Vin: np.ndarray
    Iload: np.ndarray
    f: float = 50.0


@dataclass(eq=False)
class DutyPair:
    D1: np.ndarray
    D2: np.ndarray

    @classmethod
    def zero(cls) -> "DutyPair":
        return cls(np.zeros(3), np.zeros(3))


def load_resistor_current(s: PlantState, u: ExogenousInputs, p: PlantParams) -> np.ndarray:
    """Current through the load resistance, ``-beta I1 + I2 - I3 - Iload``."""
    return -p.beta * s.I1 + s.I2 - s.I3 - u.Iload


def load_voltage(s: PlantState, u: ExogenousInputs, p: PlantParams) -> np.ndarray:
    """Voltage at the load terminals, ``R_load (-beta I1 + I2 - I3 - Iload)``."""
    return p.R_load @ load_resistor_current(s, u, p)


def grid_current(s: PlantState, p: PlantParams) -> np.ndarray:
    """Current injected by the secondary of the grid-side transformer."""
    return -p.beta * s.I1


def load_current(s: PlantState, u: ExogenousInputs, p: PlantParams) -> np.ndarray:
    """Total current drawn by the load (resistor + inductor + source)."""
    return load_resistor_current(s, u, p) + s.I3 + u.Iload


def derivative(s: PlantState, u: ExogenousInputs, d: DutyPair, p: PlantParams) -> PlantState:
    """Time derivative of the averaged plant state."""
    if not p.derived:
        raise PlantParameterError("plant composites not derived; call derive_composites first")
    beta = p.beta
    R = p.R_load
    V = load_voltage(s, u, p)
    dI1 = (-p.Rbar1 * s.I1 + beta * V - p.alpha * beta * u.Vin + d.D1 * s.vC) / p.Lbar1
    # beta*V expands to -beta^2 R I1 + beta R I2 - beta R I3 - beta R Iload
    dI2 = (beta * (R @ s.I1) - p.Rbar2 @ s.I2 + R @ s.I3 + R @ u.Iload + d.D2 * s.vC) / p.L2
    dI3 = p.L_load_inv @ V
    dvC = (-float(d.D1 @ s.I1) - float(d.D2 @ s.I2)) / p.C
    return PlantState(I1=dI1, I2=dI2, I3=dI3, vC=dvC)


def source_waveforms(theta: float, Vin_pk: float, I_pk: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid voltage and load current source, both d-axis aligned."""
    template = positive_sequence(theta)
    return Vin_pk * template, I_pk * template


def stored_energy(s: PlantState, p: PlantParams) -> float:
    return 0.5 * (p.Lbar1 * float(s.I1 @ s.I1) + p.L2 * float(s.I2 @ s.I2)
                  + float(s.I3 @ p.L_load @ s.I3) + p.C * s.vC ** 2)


def power_balance(s: PlantState, u: ExogenousInputs, p: PlantParams) -> float:
    """Right-hand side of the energy identity (W).

    Grid-side source work minus load-source work minus ohmic losses; equals
    the time derivative of :func:`stored_energy` for symmetric load matrices.
    """
    I_R = load_resistor_current(s, u, p)
    V = p.R_load @ I_R
    return (-p.alpha * p.beta * float(u.Vin @ s.I1) - float(V @ u.Iload)
            - p.Rbar1 * float(s.I1 @ s.I1) - p.R2 * float(s.I2 @ s.I2) - float(I_R @ V))


@dataclass
class PassiveSolution:
    """Complex phasors of the passive (zero-duty) sinusoidal steady state.

    Waveforms follow ``x(t) = Im(X exp(j theta))``.
    """

    omega: float
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    V: np.ndarray

    def at(self, theta: float) -> dict:
        rot = np.exp(1j * theta)
        return {name: np.imag(getattr(self, name) * rot) for name in ("I1", "I2", "I3", "V")}


def passive_steady_state(p: PlantParams, omega: float, Vin_pk: float, I_pk: float) -> PassiveSolution:
    """Solve the zero-duty branch equations as a linear complex phasor system."""
    if not p.derived:
        p = derive_composites(p)
    a = np.exp(-2j * math.pi / 3.0)
    seq = np.array([1.0, a, a * a])
    Vin = Vin_pk * seq
    Iload = I_pk * seq
    R = p.R_load
    beta = p.beta
    eye = np.eye(3)
    jw = 1j * omega
    M = np.zeros((9, 9), dtype=complex)
    rhs = np.zeros(9, dtype=complex)
    # row block 1: (jw Lbar1 + Rbar1 + beta^2 R) I1 - beta R I2 + beta R I3 = -beta R Iload - alpha beta Vin
    M[0:3, 0:3] = jw * p.Lbar1 * eye + p.Rbar1 * eye + beta ** 2 * R
    M[0:3, 3:6] = -beta * R
    M[0:3, 6:9] = beta * R
    rhs[0:3] = -beta * R @ Iload - p.alpha * beta * Vin
    # row block 2: -beta R I1 + (jw L2 + Rbar2) I2 - R I3 = R Iload
    M[3:6, 0:3] = -beta * R
    M[3:6, 3:6] = jw * p.L2 * eye + p.Rbar2
    M[3:6, 6:9] = -R
    rhs[3:6] = R @ Iload
    # row block 3: beta R I1 - R I2 + (jw L + R) I3 = -R Iload
    M[6:9, 0:3] = beta * R
    M[6:9, 3:6] = -R
    M[6:9, 6:9] = jw * p.L_load + R
    rhs[6:9] = -R @ Iload
    if np.linalg.cond(M) > 1e14:
        raise PlantParameterError("passive phasor system is singular")
    x = np.linalg.solve(M, rhs)
    I1, I2, I3 = x[0:3], x[3:6], x[6:9]
    V = R @ (-beta * I1 + I2 - I3 - Iload)
    return PassiveSolution(omega=omega, I1=I1, I2=I2, I3=I3, V=V)
