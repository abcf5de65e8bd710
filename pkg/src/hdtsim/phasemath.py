"""Reference-frame transforms, phase accumulation and windowed statistics.

The dq0 transform used throughout is the amplitude-invariant (2/3-scaled)
sine-based Park matrix::

    T(theta) = 2/3 * [[sin t, sin(t - 2pi/3), sin(t + 2pi/3)],
                      [cos t, cos(t - 2pi/3), cos(t + 2pi/3)],
                      [1/2,   1/2,            1/2           ]]

so that a balanced positive-sequence set ``A * sin(theta_k)`` maps to
``[A, 0, 0]``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
PHASE_SHIFT = TWO_PI / 3.0


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod can return exactly 2*pi after the negative correction
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


@dataclass
class PhaseAccumulator:
    """Grid angle integrated from a (possibly time-varying) frequency."""

    theta: float = 0.0
    last_f: float = 50.0


def phase_advance(acc: PhaseAccumulator, f: float, dt: float) -> PhaseAccumulator:
    """Advance the grid angle by ``2*pi*f*dt`` and wrap it."""
    if not (math.isfinite(f) and math.isfinite(dt)):
        raise ValueError(f"non-finite phase advance input f={f!r}, dt={dt!r}")
    if f <= 0.0 or dt <= 0.0:
        raise ValueError(f"phase advance requires f > 0 and dt > 0, got f={f}, dt={dt}")
    return PhaseAccumulator(theta=wrap_angle(acc.theta + TWO_PI * f * dt), last_f=f)


def park_matrix(theta: float) -> np.ndarray:
    angles = np.array([theta, theta - PHASE_SHIFT, theta + PHASE_SHIFT])
    return (2.0 / 3.0) * np.vstack([np.sin(angles), np.cos(angles), np.full(3, 0.5)])


def inv_park_matrix(theta: float) -> np.ndarray:
    angles = np.array([theta, theta - PHASE_SHIFT, theta + PHASE_SHIFT])
    return np.column_stack([np.sin(angles), np.cos(angles), np.ones(3)])


def park(theta: float, x_abc) -> np.ndarray:
    """abc -> dq0 with the amplitude-invariant sine-based transform."""
    x = np.asarray(x_abc, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {x.shape}")
    s0, s1, s2 = math.sin(theta), math.sin(theta - PHASE_SHIFT), math.sin(theta + PHASE_SHIFT)
    c0, c1, c2 = math.cos(theta), math.cos(theta - PHASE_SHIFT), math.cos(theta + PHASE_SHIFT)
    return np.array([
        (2.0 / 3.0) * (s0 * x[0] + s1 * x[1] + s2 * x[2]),
        (2.0 / 3.0) * (c0 * x[0] + c1 * x[1] + c2 * x[2]),
        (x[0] + x[1] + x[2]) / 3.0,
    ])


def inv_park(theta: float, x_dq0) -> np.ndarray:
    """dq0 -> abc, closed-form inverse of :func:`park`."""
    d, q, z = (float(v) for v in x_dq0)
    return np.array([
        math.sin(theta) * d + math.cos(theta) * q + z,
        math.sin(theta - PHASE_SHIFT) * d + math.cos(theta - PHASE_SHIFT) * q + z,
        math.sin(theta + PHASE_SHIFT) * d + math.cos(theta + PHASE_SHIFT) * q + z,
    ])


def positive_sequence(theta: float, amplitude: float = 1.0) -> np.ndarray:
    """Balanced set ``amplitude * [sin t, sin(t - 2pi/3), sin(t + 2pi/3)]``."""
    return amplitude * np.array([
        math.sin(theta), math.sin(theta - PHASE_SHIFT), math.sin(theta + PHASE_SHIFT)
    ])


def window_capacity(f0: float, dt: float) -> int:
    """Samples in one fundamental cycle at the nominal frequency."""
    return max(1, int(round(1.0 / (f0 * dt))))


@dataclass
class RollingWindow:
    """Bounded FIFO of scalar samples with a running sum of squares.

    The running sum is rebuilt from the stored samples every ``capacity``
    pushes so accumulated rounding never drifts.
    """

    capacity: int
    samples: deque = field(default_factory=deque)
    sum_sq: float = 0.0
    _since_rebuild: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("window capacity must be at least 1")

    def push(self, value: float) -> None:
        if len(self.samples) == self.capacity:
            old = self.samples.popleft()
            self.sum_sq -= old * old
        self.samples.append(value)
        self.sum_sq += value * value
        self._since_rebuild += 1
        if self._since_rebuild >= self.capacity:
            total = 0.0
            for v in self.samples:
                total += v * v
            self.sum_sq = total
            self._since_rebuild = 0

    def rms(self) -> float:
        if not self.samples:
            return 0.0
        return math.sqrt(max(self.sum_sq, 0.0) / len(self.samples))

    def __len__(self) -> int:
        return len(self.samples)


def rolling_rms(win: RollingWindow, sample: float) -> tuple[RollingWindow, float]:
    """Push ``sample`` and return the RMS over the stored samples.

    During warm-up the mean is taken over the samples available so far.
    The window is updated in place and returned for convenience.
    """
    if not math.isfinite(sample):
        raise ValueError(f"non-finite rolling-RMS sample {sample!r}")
    win.push(float(sample))
    return win, win.rms()
