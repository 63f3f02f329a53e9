"""Closed-architecture ground truth: firmware inner loop + rigid-body arm.

User code talks to :class:`ClosedArchitectureArm` through :class:`RobotInterface`
only (``measure()`` and ``command(q_d, dq_d)``). The inner-loop gains, the
``Psi`` variant and the plant parameters stay private to the arm object. The
simulation harness additionally uses :meth:`ClosedArchitectureArm.probe` to log
ground truth; controllers must not.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np
from numba import njit

from . import arm_dynamics as ad
from .arm_dynamics import ArmParams, JointState, NominalModel
from .faults import InvalidParameter, SingularMassMatrix

_COND_LIMIT = 1e12


class PsiVariant(str, enum.Enum):
    PD_ONLY = "pd_only"
    PD_PLUS_INTEGRAL = "pd_plus_integral"
    PD_PLUS_GRAVITY_COMP = "pd_plus_gravity_comp"


_PSI_CODE = {PsiVariant.PD_ONLY: 0, PsiVariant.PD_PLUS_INTEGRAL: 1,
             PsiVariant.PD_PLUS_GRAVITY_COMP: 2}


@dataclass(frozen=True)
class InnerLoopConfig:
    """Firmware controller ``-Kp (q - q_d) - Kd (dq - dq_d) + extras``.

    With ``voltage_mode`` the output is a voltage and the arm applies
    ``tau = B v``. The gravity-compensation variant uses the arm's own
    parameters without payload (what the vendor would have flashed).
    ``integral_limit`` clamps each entry of the integral accumulator.
    """

    kp: tuple = (1.0, 1.0, 1.0)
    kd: tuple = (1.0, 1.0, 1.0)
    psi_variant: PsiVariant = PsiVariant.PD_ONLY
    integral_gain: tuple = (0.0, 0.0, 0.0)
    voltage_mode: bool = False
    integral_limit: float = 10.0

    def __post_init__(self):
        for name in ("kp", "kd", "integral_gain"):
            object.__setattr__(self, name, ad._vec3(getattr(self, name), name))
        object.__setattr__(self, "psi_variant", PsiVariant(self.psi_variant))
        if min(self.kd) <= 0:
            raise InvalidParameter("inner-loop kd must be strictly positive")
        if min(self.kp) < 0 or min(self.integral_gain) < 0:
            raise InvalidParameter("inner-loop kp and integral gain must be non-negative")
        if self.integral_limit < 0:
            raise InvalidParameter("integral_limit must be non-negative")


@dataclass(frozen=True)
class DisturbanceProfile:
    """External disturbances acting on the true arm.

    ``wrench`` is a task-space force/moment pair ``[fx, fy, fz, mx, my, mz]``
    applied at the wrist centre while ``wrench_window[0] <= t < wrench_window[1]``.
    Only the force part is mapped (through the position Jacobian); moments must
    be zero. ``joint_offset`` is added to the inner-loop output (volts in
    voltage mode, N m otherwise) inside ``joint_offset_window``.
    ``payload_mass`` (kg), when set, replaces the arm's payload.
    """

    joint_offset: tuple = (0.0, 0.0, 0.0)
    joint_offset_window: tuple = (0.0, math.inf)
    wrench: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    wrench_window: tuple = (0.0, math.inf)
    payload_mass: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "joint_offset", ad._vec3(self.joint_offset, "joint_offset"))
        w = tuple(float(v) for v in np.asarray(self.wrench, dtype=float).reshape(-1))
        if len(w) == 3:
            w = w + (0.0, 0.0, 0.0)
        if len(w) != 6:
            raise InvalidParameter("wrench must have 3 or 6 entries")
        if any(w[3:]):
            raise InvalidParameter("wrench moments are not supported (position Jacobian only)")
        object.__setattr__(self, "wrench", w)
        for name in ("joint_offset_window", "wrench_window"):
            win = tuple(float(v) for v in getattr(self, name))
            if len(win) != 2 or win[1] < win[0]:
                raise InvalidParameter(f"{name} must be (t_on, t_off) with t_off >= t_on")
            object.__setattr__(self, name, win)
        if self.payload_mass is not None and self.payload_mass < 0:
            raise InvalidParameter("payload_mass must be non-negative")

    def joint_offset_at(self, t: float) -> np.ndarray:
        on, off = self.joint_offset_window
        return np.array(self.joint_offset) if on <= t < off else np.zeros(3)

    def wrench_at(self, t: float) -> np.ndarray:
        on, off = self.wrench_window
        return np.array(self.wrench) if on <= t < off else np.zeros(6)

    def true_params(self, params: ArmParams) -> ArmParams:
        if self.payload_mass is None:
            return params
        return replace(params, payload_mass=self.payload_mass)


# --------------------------------------------------------------------------
# compiled right-hand side
# --------------------------------------------------------------------------

@njit(cache=True)
def _solve_spd3(M, b):
    # Cholesky; returns (x, ok)
    L = np.zeros((3, 3))
    tr = M[0, 0] + M[1, 1] + M[2, 2]
    ok = True
    for i in range(3):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-12 * tr:
                    ok = False
                    s = 1e-12 * tr
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty(3)
    for i in range(3):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(3)
    for i in range(2, -1, -1):
        s = y[i]
        for k in range(i + 1, 3):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x, ok


@njit(cache=True)
def _inner(p, fw, kp, kd, ki, variant, voltage, q, dq, qd, dqd, integ):
    out = np.empty(3)
    for i in range(3):
        out[i] = -kp[i] * (q[i] - qd[i]) - kd[i] * (dq[i] - dqd[i])
    if variant == 1:
        for i in range(3):
            out[i] -= ki[i] * integ[i]
    elif variant == 2:
        g = ad._gravity(fw, q)
        for i in range(3):
            out[i] += g[i] / p[21 + i] if voltage else g[i]
    return out


@njit(cache=True)
def _accel(p, act, voltage, ext_tau, q, dq):
    tau = np.empty(3)
    for i in range(3):
        tau[i] = p[21 + i] * act[i] if voltage else act[i]
    C = ad._coriolis(p, q, dq)
    G = ad._gravity(p, q)
    F = ad._friction(p, dq)
    rhs = tau + ext_tau - C @ dq - G - F
    M = ad._mass(p, q)
    return _solve_spd3(M, rhs)


@njit(cache=True)
def _ext_torque(p, q, frc, frc_on, frc_off, t):
    if frc_on <= t < frc_off:
        return ad._jac(p, q).T @ frc
    return np.zeros(3)


@njit(cache=True)
def _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
         frc, frc_on, frc_off, x, qd, dqd, t):
    q = x[0:3]
    dq = x[3:6]
    integ = x[6:9]
    act = _inner(p, fw, kp, kd, ki, variant, voltage, q, dq, qd, dqd, integ)
    if off_on <= t < off_off:
        act = act + off
    ext = _ext_torque(p, q, frc, frc_on, frc_off, t)
    qdd, ok = _accel(p, act, voltage, ext, q, dq)
    dx = np.empty(9)
    dx[0:3] = dq
    dx[3:6] = qdd
    dx[6:9] = q - qd
    return dx, ok


@njit(cache=True)
def _rk4_steps(p, fw, kp, kd, ki, variant, voltage, ilim, off, off_on, off_off,
               frc, frc_on, frc_off, x, qd, dqd, t0, dt, n):
    x = x.copy()
    ok_all = True
    for k in range(n):
        t = t0 + k * dt
        k1, ok1 = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                       frc, frc_on, frc_off, x, qd, dqd, t)
        k2, ok2 = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                       frc, frc_on, frc_off, x + 0.5 * dt * k1, qd, dqd, t + 0.5 * dt)
        k3, ok3 = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                       frc, frc_on, frc_off, x + 0.5 * dt * k2, qd, dqd, t + 0.5 * dt)
        k4, ok4 = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                       frc, frc_on, frc_off, x + dt * k3, qd, dqd, t + dt)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for i in range(6, 9):
            if x[i] > ilim:
                x[i] = ilim
            elif x[i] < -ilim:
                x[i] = -ilim
        ok_all = ok_all and ok1 and ok2 and ok3 and ok4
    return x, ok_all


@njit(cache=True)
def _affine_accel(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                  frc, frc_on, frc_off, x, qd0, slope, t):
    # acceleration for velocity command u with q_d = qd0 + slope * u: A u + c
    zero = np.zeros(3)
    dx, ok = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                  frc, frc_on, frc_off, x, qd0, zero, t)
    c = dx[3:6].copy()
    A = np.empty((3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        dxi, oki = _rhs(p, fw, kp, kd, ki, variant, voltage, off, off_on, off_off,
                        frc, frc_on, frc_off, x, qd0 + slope * e, e, t)
        ok = ok and oki
        for j in range(3):
            A[j, i] = dxi[3 + j] - c[j]
    return A, c, ok


# --------------------------------------------------------------------------
# pure operations
# --------------------------------------------------------------------------

def _firmware_params(params: ArmParams) -> ArmParams:
    return replace(params, payload_mass=0.0) if params.payload_mass else params


def inner_loop_output(cfg: InnerLoopConfig, meas: JointState, cmd_q_d, cmd_dq_d,
                      integ, params: ArmParams) -> np.ndarray:
    """Torque (or voltage in voltage mode) produced by the firmware loop."""
    return _inner(params.vector, _firmware_params(params).vector,
                  np.array(cfg.kp), np.array(cfg.kd), np.array(cfg.integral_gain),
                  _PSI_CODE[cfg.psi_variant], cfg.voltage_mode,
                  meas.q, meas.dq, ad._q(cmd_q_d), ad._q(cmd_dq_d), ad._q(integ))


def external_torque(params: ArmParams, q, dist: DisturbanceProfile, t: float) -> np.ndarray:
    """``J^T F_ext`` for the force part of the wrench."""
    return ad.jacobian(params, q).T @ dist.wrench_at(t)[:3]


def plant_accel(params: ArmParams, state: JointState, actuator, dist: DisturbanceProfile,
                t: float, voltage_mode: bool = False) -> np.ndarray:
    """Joint acceleration of the true arm under the given actuator output.

    In voltage mode ``actuator`` is a voltage and the applied torque is
    ``B (v + joint_offset)``; otherwise ``actuator + joint_offset`` is torque.
    """
    M = ad.mass_matrix(params, state.q)
    if np.linalg.cond(M) > _COND_LIMIT:
        raise SingularMassMatrix(f"mass matrix condition number exceeds {_COND_LIMIT:g}")
    act = ad._q(actuator) + dist.joint_offset_at(t)
    tau = np.array(params.torque_map_B) * act if voltage_mode else act
    rhs = (tau + external_torque(params, state.q, dist, t)
           - ad.coriolis_matrix(params, state.q, state.dq) @ state.dq
           - ad.gravity_vector(params, state.q)
           - ad.friction_torque(params, state.dq))
    return np.linalg.solve(M, rhs)


def ground_truth_f(nominal: NominalModel, state: JointState, cmd_dq_d, accel) -> np.ndarray:
    """Total disturbance as the residual of the nominal model.

    ``f = qdd - m_bar^-1 (-c_bar dq - g_bar) - m_bar^-1 kd_bar dq_d``.
    """
    return ad._q(accel) - nominal.drift(state.dq) - nominal.gain @ ad._q(cmd_dq_d)


def discrepancy_f(params: ArmParams, cfg: InnerLoopConfig, nominal: NominalModel,
                  state: JointState, cmd_q_d, cmd_dq_d, integ, dist: DisturbanceProfile,
                  t: float, accel) -> np.ndarray:
    """Total disturbance assembled from the parametric discrepancies.

    Uses ``dKd = Kd Kd_bar^-1``, ``dM = dKd M_bar - M``, ``dC = dKd C_bar - C``,
    ``dG = dKd G_bar - G`` and
    ``f = (dKd M_bar)^-1 (dM qdd + dC dq + dG - F_r + Psi + tau_ext - Kd dq)``
    where ``Psi`` is everything the firmware adds beyond ``-Kd (dq - dq_d)``.
    Agrees with :func:`ground_truth_f` whenever ``accel`` is the true
    acceleration.
    """
    q, dq = state.q, state.dq
    B = np.array(params.torque_map_B) if cfg.voltage_mode else np.ones(3)
    kd = B * np.array(cfg.kd)
    act = inner_loop_output(cfg, state, cmd_q_d, cmd_dq_d, integ, params)
    psi = B * act + kd * (dq - ad._q(cmd_dq_d))
    tau_ext = B * dist.joint_offset_at(t) + external_torque(params, q, dist, t)
    dkd = np.diag(kd / nominal.kd_bar)
    dM = dkd @ nominal.m_bar - ad.mass_matrix(params, q)
    dC = dkd @ nominal.c_bar - ad.coriolis_matrix(params, q, dq)
    dG = dkd @ nominal.g_bar - ad.gravity_vector(params, q)
    rhs = (dM @ ad._q(accel) + dC @ dq + dG - ad.friction_torque(params, dq)
           + psi + tau_ext - kd * dq)
    return np.linalg.solve(dkd @ nominal.m_bar, rhs)


def mechanical_energy(params: ArmParams, state: JointState) -> float:
    return ad.kinetic_energy(params, state.q, state.dq) + ad.potential_energy(params, state.q)


# --------------------------------------------------------------------------
# closed-architecture robot
# --------------------------------------------------------------------------

class RobotInterface(Protocol):
    """Everything an outer-loop controller is allowed to touch."""

    def measure(self) -> JointState: ...

    def command(self, q_d, dq_d) -> None: ...


@dataclass
class _Probe:
    """Simulation-only view of the ground truth (for logging and oracles)."""

    _arm: "ClosedArchitectureArm"

    @property
    def params(self) -> ArmParams:
        return self._arm._params

    def accel_for(self, q_d, dq_d) -> np.ndarray:
        """True joint acceleration right now if ``(q_d, dq_d)`` were commanded."""
        a = self._arm
        dx, ok = _rhs(*a._kernel_args(), a._x, ad._q(q_d), ad._q(dq_d), a.t)
        if not ok:
            raise SingularMassMatrix("mass matrix is numerically singular")
        return dx[3:6]

    def affine_response(self, q_d0, slope: float):
        """``(A, c)`` with true ``qdd = A u + c`` when ``(q_d0 + slope u, u)`` is commanded."""
        a = self._arm
        A, c, ok = _affine_accel(*a._kernel_args(), a._x, ad._q(q_d0), float(slope), a.t)
        if not ok:
            raise SingularMassMatrix("mass matrix is numerically singular")
        return A, c

    def integral_state(self) -> np.ndarray:
        return self._arm._x[6:9].copy()


@dataclass
class ClosedArchitectureArm:
    """True arm behind a firmware inner loop, integrated with fixed-step RK4.

    Commands are held constant between calls to :meth:`command`.
    """

    _params: ArmParams
    _inner: InnerLoopConfig
    _dist: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    q0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dq0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    physics_dt: float = 1e-4

    def __post_init__(self):
        if self.physics_dt <= 0:
            raise InvalidParameter("physics_dt must be positive")
        self._params = self._dist.true_params(self._params)
        self._x = np.zeros(9)
        self._x[0:3] = ad._q(self.q0)
        self._x[3:6] = ad._q(self.dq0)
        self._qd = self._x[0:3].copy()
        self._dqd = np.zeros(3)
        self.t = 0.0
        self._steps = 0
        cfg, d = self._inner, self._dist
        self._args = (
            self._params.vector, _firmware_params(self._params).vector,
            np.array(cfg.kp), np.array(cfg.kd), np.array(cfg.integral_gain),
            _PSI_CODE[cfg.psi_variant], cfg.voltage_mode,
            np.array(d.joint_offset), d.joint_offset_window[0], d.joint_offset_window[1],
            np.array(d.wrench[:3]), d.wrench_window[0], d.wrench_window[1],
        )

    def _kernel_args(self):
        return self._args

    def measure(self) -> JointState:
        return JointState(self._x[0:3].copy(), self._x[3:6].copy())

    def command(self, q_d, dq_d) -> None:
        self._qd = ad._q(q_d).copy()
        self._dqd = ad._q(dq_d).copy()

    def advance(self, n_steps: int) -> None:
        p, fw, kp, kd, ki, var, volt, off, o_on, o_off, frc, f_on, f_off = self._args
        x, ok = _rk4_steps(p, fw, kp, kd, ki, var, volt, self._inner.integral_limit,
                           off, o_on, o_off, frc, f_on, f_off,
                           self._x, self._qd, self._dqd, self.t, self.physics_dt, n_steps)
        if not ok:
            raise SingularMassMatrix(f"mass matrix numerically singular near t={self.t:.4f}")
        self._x = x
        self._steps += n_steps
        self.t = self._steps * self.physics_dt

    def probe(self) -> _Probe:
        return _Probe(self)
