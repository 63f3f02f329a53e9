"""Outer-loop kinematic tracking law with disturbance rejection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .arm_dynamics import JointState, NominalModel, _vec3
from .faults import InvalidModel, InvalidParameter


@dataclass(frozen=True)
class TrackingGains:
    """Diagonal PD gains of the position law; defaults give a double pole at 10 rad/s."""

    kp: tuple = (100.0, 100.0, 100.0)
    kd: tuple = (20.0, 20.0, 20.0)

    def __post_init__(self):
        object.__setattr__(self, "kp", _vec3(self.kp, "kp"))
        object.__setattr__(self, "kd", _vec3(self.kd, "kd"))
        if min(self.kp) <= 0 or min(self.kd) <= 0:
            raise InvalidParameter("tracking gains must be positive")

    @classmethod
    def from_bandwidth(cls, omega_c: float) -> "TrackingGains":
        return cls((omega_c ** 2,) * 3, (2.0 * omega_c,) * 3)


class ProfileKind(str, enum.Enum):
    SIM = "sim_profile"
    HW = "hw_profile"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ReferenceProfile:
    """Per-joint ``q*_i(t) = amplitude_i sin(frequency_i t) + offset_i``."""

    kind: ProfileKind = ProfileKind.SIM
    amplitude: tuple = (0.5, 0.25, 0.25)
    frequency: tuple = (1.0, 2.0, 2.0)
    offset: tuple = (0.0, 0.5, math.pi / 2)

    def __post_init__(self):
        kind = ProfileKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ProfileKind.SIM:
            a, w, c = (0.5, 0.25, 0.25), (1.0, 2.0, 2.0), (0.0, 0.5, math.pi / 2)
        elif kind is ProfileKind.HW:
            a, w, c = (0.5, 0.25, 0.25), (1.0, 2.0, 2.0), (0.0, 0.534, math.pi / 2)
        else:
            a, w, c = self.amplitude, self.frequency, self.offset
        object.__setattr__(self, "amplitude", _vec3(a, "amplitude"))
        object.__setattr__(self, "frequency", _vec3(w, "frequency"))
        object.__setattr__(self, "offset", _vec3(c, "offset"))

    @classmethod
    def sim(cls) -> "ReferenceProfile":
        return cls(ProfileKind.SIM)

    @classmethod
    def hw(cls) -> "ReferenceProfile":
        return cls(ProfileKind.HW)


def reference_at(profile: ReferenceProfile, t: float):
    """Reference position, velocity and acceleration at time ``t``."""
    if t < 0:
        raise InvalidParameter("reference time must be non-negative")
    a = np.array(profile.amplitude)
    w = np.array(profile.frequency)
    s, c = np.sin(w * t), np.cos(w * t)
    return a * s + np.array(profile.offset), a * w * c, -a * w * w * s


def position_control_u0(ref, meas: JointState, gains: TrackingGains) -> np.ndarray:
    """``u0 = qdd* + kp (q* - q) + kd (dq* - dq)``."""
    q_ref, dq_ref, ddq_ref = ref
    return (np.asarray(ddq_ref) + np.array(gains.kp) * (np.asarray(q_ref) - meas.q)
            + np.array(gains.kd) * (np.asarray(dq_ref) - meas.dq))


def nominal_inversion(u0, nominal: NominalModel, dq) -> np.ndarray:
    """``dq_d0 = kd_bar^-1 (m_bar u0 + c_bar dq + g_bar)``."""
    kd = nominal.kd_bar
    if np.any(np.abs(kd) < 1e-12):
        raise InvalidModel("kd_bar is singular")
    return (nominal.m_bar @ np.asarray(u0, dtype=float)
            + nominal.c_bar @ np.asarray(dq, dtype=float) + nominal.g_bar) / kd


def disturbance_rejection(qd0_dot, f_hat, nominal: NominalModel) -> np.ndarray:
    """``dq_d = dq_d0 - kd_bar^-1 m_bar f_hat``."""
    return np.asarray(qd0_dot, dtype=float) - nominal.gain_inv @ np.asarray(f_hat, dtype=float)


class CommandIntegrator:
    """Trapezoidal integration of the velocity command into a position command."""

    def __init__(self, q0, dt: float):
        self.q_d = np.array(q0, dtype=float)
        self.dt = dt
        self._last = None

    def preview(self, dq_d) -> np.ndarray:
        """Position command that :meth:`push` would produce, without committing."""
        if self._last is None:
            return self.q_d.copy()
        return self.q_d + 0.5 * self.dt * (self._last + np.asarray(dq_d, dtype=float))

    @property
    def slope(self) -> float:
        """``d preview / d dq_d`` (the preview is affine in the command)."""
        return 0.0 if self._last is None else 0.5 * self.dt

    def push(self, dq_d) -> np.ndarray:
        self.q_d = self.preview(dq_d)
        self._last = np.array(dq_d, dtype=float)
        return self.q_d.copy()
