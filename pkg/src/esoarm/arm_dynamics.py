"""Kinematics and Lagrangian dynamics of a 3-DOF waist-shoulder-elbow arm.

Conventions
-----------
The task frame has ``z`` pointing up; gravity acts along ``-z`` with magnitude
``gravity_accel``. Joint 1 (waist) rotates about ``z``. Joints 2 and 3 rotate
about a common horizontal axis normal to the arm plane:

* ``q2`` is the elevation of the upper arm above the horizontal,
* ``q3`` is the elbow angle; positive ``q3`` folds the forearm downward, so the
  forearm elevation is ``q2 - q3``.

The wrist centre sits at::

    r = l2 cos(q2) + l3 cos(q2 - q3)
    zeta(q) = [r cos(q1), r sin(q1), l1 + l2 sin(q2) + l3 sin(q2 - q3)]

so the zero configuration is the arm fully stretched along ``+x`` at height
``l1`` (a singular pose: the elbow is straight).

Links 2 and 3 are modelled as slender rods: ``link_inertias[i]`` is the moment
of inertia about any axis through the COM perpendicular to the rod, and zero
about the rod axis. Link 1 only spins about ``z`` with inertia
``link_inertias[0]``. The payload is a point mass at the wrist centre.

The heavy lifting happens in numba-compiled kernels operating on a flat
parameter vector (``ArmParams.vector``); the public functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from .faults import InvalidParameter

# Flat parameter vector layout used by the compiled kernels.
_L = 0  # link lengths l1, l2, l3
_C = 3  # COM offsets c1, c2, c3
_M = 6  # masses
_I = 9  # link inertias
_G = 12  # gravity
_FV = 13  # viscous friction
_FC = 16  # coulomb friction
_EPS = 19  # coulomb smoothing
_MP = 20  # payload
_B = 21  # torque map diagonal
_NPARAM = 24


def _vec3(x, name):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise InvalidParameter(f"{name} must have 3 entries, got {a.shape}")
    return tuple(float(v) for v in a)


@dataclass(frozen=True)
class ArmParams:
    """Ground-truth parameters of the articulated arm.

    The defaults are PUMA-scale values chosen for plausibility; they are not
    the parameters of any particular physical robot.
    """

    link_lengths: tuple = (0.2, 0.432, 0.432)
    com_offsets: tuple = (0.1, 0.2, 0.15)
    masses: tuple = (10.0, 17.4, 4.8)
    link_inertias: tuple = (0.35, 0.13, 0.066)
    gravity_accel: float = 9.81
    viscous_friction: tuple = (0.6, 0.8, 0.4)
    coulomb_friction: tuple = (0.3, 0.4, 0.2)
    coulomb_smoothing: float = 0.05
    payload_mass: float = 0.0
    torque_map_B: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("link_lengths", "com_offsets", "masses", "link_inertias",
                     "viscous_friction", "coulomb_friction", "torque_map_B"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        if min(self.masses) <= 0 or min(self.link_lengths) <= 0:
            raise InvalidParameter("masses and link lengths must be positive")
        if min(self.link_inertias) < 0:
            raise InvalidParameter("link inertias must be non-negative")
        if self.coulomb_smoothing <= 0:
            raise InvalidParameter("coulomb_smoothing must be positive")
        if self.payload_mass < 0:
            raise InvalidParameter("payload_mass must be non-negative")
        if min(self.viscous_friction) < 0 or min(self.coulomb_friction) < 0:
            raise InvalidParameter("friction coefficients must be non-negative")

    @cached_property
    def vector(self) -> np.ndarray:
        p = np.empty(_NPARAM)
        p[_L:_L + 3] = self.link_lengths
        p[_C:_C + 3] = self.com_offsets
        p[_M:_M + 3] = self.masses
        p[_I:_I + 3] = self.link_inertias
        p[_G] = self.gravity_accel
        p[_FV:_FV + 3] = self.viscous_friction
        p[_FC:_FC + 3] = self.coulomb_friction
        p[_EPS] = self.coulomb_smoothing
        p[_MP] = self.payload_mass
        p[_B:_B + 3] = self.torque_map_B
        p.setflags(write=False)
        return p


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(3)
        dq = np.asarray(self.dq, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(dq))):
            raise InvalidParameter("joint state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "dq", dq)


@dataclass(frozen=True)
class NominalModel:
    """Reduced model ``qdd = m_bar^-1 (-c_bar dq - g_bar + kd_bar dq_d)``.

    ``kd_bar`` is the diagonal of the nominal inner-loop derivative gain in
    torque units per rad/s. For a voltage-driven inner loop pass the product
    of the nominal voltage gain and the nominal voltage-to-torque map.
    """

    m_bar: np.ndarray
    kd_bar: np.ndarray
    c_bar: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    g_bar: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        m = np.asarray(self.m_bar, dtype=float).reshape(3, 3)
        kd = np.asarray(self.kd_bar, dtype=float).reshape(-1)
        if kd.shape == (9,):
            kd = np.diag(kd.reshape(3, 3)).copy()
        kd = kd.reshape(3)
        if not np.allclose(m, m.T, atol=1e-12) or np.linalg.eigvalsh(m).min() <= 0:
            raise InvalidParameter("m_bar must be symmetric positive definite")
        if np.any(kd <= 0):
            raise InvalidParameter("kd_bar entries must be positive")
        object.__setattr__(self, "m_bar", m)
        object.__setattr__(self, "kd_bar", kd)
        object.__setattr__(self, "c_bar", np.asarray(self.c_bar, dtype=float).reshape(3, 3))
        object.__setattr__(self, "g_bar", np.asarray(self.g_bar, dtype=float).reshape(3))

    @cached_property
    def gain(self) -> np.ndarray:
        """Input gain ``b0 = m_bar^-1 kd_bar`` of the reduced model."""
        return np.linalg.solve(self.m_bar, np.diag(self.kd_bar))

    @cached_property
    def m_inv(self) -> np.ndarray:
        return np.linalg.inv(self.m_bar)

    @cached_property
    def gain_inv(self) -> np.ndarray:
        """``kd_bar^-1 m_bar``, the inverse of ``gain``."""
        return self.m_bar / self.kd_bar[:, None]

    def drift(self, dq) -> np.ndarray:
        """Nominal drift ``F = m_bar^-1 (-c_bar dq - g_bar)``."""
        return self.m_inv @ (-self.c_bar @ dq - self.g_bar)


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _fk(p, q):
    l1, l2, l3 = p[0], p[1], p[2]
    a3 = q[1] - q[2]
    r = l2 * np.cos(q[1]) + l3 * np.cos(a3)
    out = np.empty(3)
    out[0] = r * np.cos(q[0])
    out[1] = r * np.sin(q[0])
    out[2] = l1 + l2 * np.sin(q[1]) + l3 * np.sin(a3)
    return out


@njit(cache=True)
def _jac(p, q):
    l2, l3 = p[1], p[2]
    c1, s1 = np.cos(q[0]), np.sin(q[0])
    a3 = q[1] - q[2]
    ca2, sa2, ca3, sa3 = np.cos(q[1]), np.sin(q[1]), np.cos(a3), np.sin(a3)
    r = l2 * ca2 + l3 * ca3
    r2 = -l2 * sa2 - l3 * sa3
    r3 = l3 * sa3
    J = np.empty((3, 3))
    J[0, 0] = -r * s1
    J[0, 1] = c1 * r2
    J[0, 2] = c1 * r3
    J[1, 0] = r * c1
    J[1, 1] = s1 * r2
    J[1, 2] = s1 * r3
    J[2, 0] = 0.0
    J[2, 1] = r
    J[2, 2] = -l3 * ca3
    return J


@njit(cache=True)
def _jac_rate(p, q, dq):
    l2, l3 = p[1], p[2]
    c1, s1 = np.cos(q[0]), np.sin(q[0])
    a3 = q[1] - q[2]
    ca2, sa2, ca3, sa3 = np.cos(q[1]), np.sin(q[1]), np.cos(a3), np.sin(a3)
    da2 = dq[1]
    da3 = dq[1] - dq[2]
    r = l2 * ca2 + l3 * ca3
    r2 = -l2 * sa2 - l3 * sa3
    r3 = l3 * sa3
    dr = r2 * dq[1] + r3 * dq[2]
    dr2 = -l2 * ca2 * da2 - l3 * ca3 * da3
    dr3 = l3 * ca3 * da3
    w = dq[0]
    Jd = np.empty((3, 3))
    Jd[0, 0] = -dr * s1 - r * c1 * w
    Jd[0, 1] = -s1 * w * r2 + c1 * dr2
    Jd[0, 2] = -s1 * w * r3 + c1 * dr3
    Jd[1, 0] = dr * c1 - r * s1 * w
    Jd[1, 1] = c1 * w * r2 + s1 * dr2
    Jd[1, 2] = c1 * w * r3 + s1 * dr3
    Jd[2, 0] = 0.0
    Jd[2, 1] = dr
    Jd[2, 2] = l3 * sa3 * da3
    return Jd


@njit(cache=True)
def _mass(p, q):
    l2, l3 = p[1], p[2]
    c2, c3 = p[4], p[5]
    m2, m3 = p[7], p[8]
    I1, I2, I3 = p[9], p[10], p[11]
    mp = p[20]
    a3 = q[1] - q[2]
    ca2, ca3 = np.cos(q[1]), np.cos(a3)
    rho2 = c2 * ca2
    rho3 = l2 * ca2 + c3 * ca3
    rhop = l2 * ca2 + l3 * ca3
    M = np.zeros((3, 3))
    M[0, 0] = (I1 + I2 * ca2 * ca2 + I3 * ca3 * ca3
               + m2 * rho2 * rho2 + m3 * rho3 * rho3 + mp * rhop * rhop)
    d11 = I2 + m2 * c2 * c2 + (m3 + mp) * l2 * l2
    d22 = I3 + m3 * c3 * c3 + mp * l3 * l3
    d12 = l2 * (m3 * c3 + mp * l3) * np.cos(q[2])
    M[1, 1] = d11 + 2.0 * d12 + d22
    M[1, 2] = -d12 - d22
    M[2, 1] = M[1, 2]
    M[2, 2] = d22
    return M


@njit(cache=True)
def _dmass(p, q):
    """dM[k] = dM/dq_k."""
    l2, l3 = p[1], p[2]
    c2, c3 = p[4], p[5]
    m2, m3 = p[7], p[8]
    I2, I3 = p[10], p[11]
    mp = p[20]
    a3 = q[1] - q[2]
    ca2, sa2, ca3, sa3 = np.cos(q[1]), np.sin(q[1]), np.cos(a3), np.sin(a3)
    rho2 = c2 * ca2
    rho3 = l2 * ca2 + c3 * ca3
    rhop = l2 * ca2 + l3 * ca3
    d_a2 = -2.0 * sa2 * (I2 * ca2 + m2 * rho2 * c2 + m3 * rho3 * l2 + mp * rhop * l2)
    d_a3 = -2.0 * sa3 * (I3 * ca3 + m3 * rho3 * c3 + mp * rhop * l3)
    kk = l2 * (m3 * c3 + mp * l3) * np.sin(q[2])
    dM = np.zeros((3, 3, 3))
    dM[1, 0, 0] = d_a2 + d_a3
    dM[2, 0, 0] = -d_a3
    dM[2, 1, 1] = -2.0 * kk
    dM[2, 1, 2] = kk
    dM[2, 2, 1] = kk
    return dM


@njit(cache=True)
def _coriolis(p, q, dq):
    dM = _dmass(p, q)
    C = np.zeros((3, 3))
    for k in range(3):
        for j in range(3):
            s = 0.0
            for i in range(3):
                s += 0.5 * (dM[i, k, j] + dM[j, k, i] - dM[k, i, j]) * dq[i]
            C[k, j] = s
    return C


@njit(cache=True)
def _gravity(p, q):
    l2, l3 = p[1], p[2]
    c2, c3 = p[4], p[5]
    m2, m3 = p[7], p[8]
    g, mp = p[12], p[20]
    ga2 = g * np.cos(q[1]) * (m2 * c2 + (m3 + mp) * l2)
    ga3 = g * np.cos(q[1] - q[2]) * (m3 * c3 + mp * l3)
    out = np.empty(3)
    out[0] = 0.0
    out[1] = ga2 + ga3
    out[2] = -ga3
    return out


@njit(cache=True)
def _friction(p, dq):
    out = np.empty(3)
    eps = p[19]
    for i in range(3):
        out[i] = p[13 + i] * dq[i] + p[16 + i] * np.tanh(dq[i] / eps)
    return out


# --------------------------------------------------------------------------
# public surface
# --------------------------------------------------------------------------

def _q(q):
    return np.ascontiguousarray(q, dtype=float).reshape(3)


def mass_matrix(params: ArmParams, q) -> np.ndarray:
    """Symmetric positive-definite joint-space inertia matrix (payload included)."""
    return _mass(params.vector, _q(q))


def mass_matrix_derivatives(params: ArmParams, q) -> np.ndarray:
    """Stack ``D`` with ``D[k] = dM/dq_k``."""
    return _dmass(params.vector, _q(q))


def coriolis_matrix(params: ArmParams, q, dq) -> np.ndarray:
    """Christoffel-symbol Coriolis matrix, so ``dM/dt - 2C`` is skew-symmetric."""
    return _coriolis(params.vector, _q(q), _q(dq))


def gravity_vector(params: ArmParams, q) -> np.ndarray:
    return _gravity(params.vector, _q(q))


def potential_energy(params: ArmParams, q) -> float:
    """Gravitational potential energy relative to the task-frame origin."""
    l1, l2, l3 = params.link_lengths
    c1, c2, c3 = params.com_offsets
    m1, m2, m3 = params.masses
    q = _q(q)
    a3 = q[1] - q[2]
    z2 = l1 + c2 * np.sin(q[1])
    z3 = l1 + l2 * np.sin(q[1]) + c3 * np.sin(a3)
    zp = l1 + l2 * np.sin(q[1]) + l3 * np.sin(a3)
    return params.gravity_accel * (m1 * c1 + m2 * z2 + m3 * z3 + params.payload_mass * zp)


def friction_torque(params: ArmParams, dq) -> np.ndarray:
    """Viscous plus tanh-smoothed Coulomb friction; opposes motion per joint."""
    return _friction(params.vector, _q(dq))


def forward_kinematics(params: ArmParams, q) -> np.ndarray:
    """Wrist-centre position in the task frame."""
    return _fk(params.vector, _q(q))


def jacobian(params: ArmParams, q) -> np.ndarray:
    return _jac(params.vector, _q(q))


def jacobian_rate(params: ArmParams, q, dq) -> np.ndarray:
    """Time derivative of the Jacobian along the motion ``dq``."""
    return _jac_rate(params.vector, _q(q), _q(dq))


def jacobian_row_rate(params: ArmParams, q, dq, axis: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise InvalidParameter(f"axis must be 0, 1 or 2, got {axis!r}")
    return jacobian_rate(params, q, dq)[axis]


def kinetic_energy(params: ArmParams, q, dq) -> float:
    dq = _q(dq)
    return 0.5 * float(dq @ mass_matrix(params, q) @ dq)
