"""Higher-order robust CBF safety filter for Cartesian halfspace walls.

The barrier is ``h = s (zeta_axis(q) - y0)`` with ``s = +1`` to keep the
wrist centre above the wall and ``s = -1`` to keep it below. It has relative
degree two with respect to the velocity command, so the chain
``h2 = hdd + k1 hd + k0 h`` with ``(s + gamma)^2`` coefficients is enforced as
a single linear constraint ``a_row . u >= b_rhs`` on the command.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import arm_dynamics as ad
from .arm_dynamics import ArmParams, JointState, NominalModel
from .faults import DegenerateConstraint, InfeasibleQP, InvalidParameter, StepSizeFault

DEGENERATE_TOL = 1e-12
_FEAS_TOL = 1e-12

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


class WallDirection(str, enum.Enum):
    KEEP_ABOVE = "keep_above"
    KEEP_BELOW = "keep_below"


@dataclass(frozen=True)
class SafetySpec:
    """Halfspace wall on one Cartesian axis of the wrist centre.

    ``gamma_bound`` holds the per-joint estimation-error bound used when
    ``use_error_bound`` is set. ``u_box`` optionally bounds the command as
    ``(lower[3], upper[3])``.
    """

    axis: int = 1
    offset_y0: float = -0.1
    direction: WallDirection = WallDirection.KEEP_ABOVE
    gamma: float = 10.0
    use_f_hat: bool = True
    use_error_bound: bool = True
    gamma_bound: tuple = (0.0, 0.0, 0.0)
    u_box: tuple | None = None

    def __post_init__(self):
        if self.axis not in _AXES:
            raise InvalidParameter(f"axis must be x, y, z or 0..2, got {self.axis!r}")
        object.__setattr__(self, "axis", _AXES[self.axis])
        object.__setattr__(self, "direction", WallDirection(self.direction))
        object.__setattr__(self, "gamma_bound", ad._vec3(self.gamma_bound, "gamma_bound"))
        if not self.gamma > 0:
            raise InvalidParameter("gamma must be positive")
        if self.use_error_bound and not self.use_f_hat:
            raise InvalidParameter("use_error_bound requires use_f_hat")
        if min(self.gamma_bound) < 0:
            raise InvalidParameter("gamma_bound must be non-negative")
        if self.u_box is not None:
            lo, hi = (np.asarray(v, dtype=float).reshape(3) for v in self.u_box)
            if np.any(lo > hi):
                raise InvalidParameter("u_box lower bound exceeds upper bound")
            object.__setattr__(self, "u_box", (tuple(lo), tuple(hi)))
        object.__setattr__(self, "_chain", chain_coeffs([self.gamma, self.gamma]))

    @property
    def sign(self) -> float:
        return 1.0 if self.direction is WallDirection.KEEP_ABOVE else -1.0

    @property
    def chain(self) -> "HocbfChain":
        return self._chain


@dataclass(frozen=True)
class HocbfChain:
    """``k_coeffs[j]`` multiplies ``h^(j)``; ascending order ``[k0, ..., k_{r-1}]``."""

    relative_degree: int
    k_coeffs: tuple


def chain_coeffs(gammas) -> HocbfChain:
    """Coefficients of ``prod_j (s + gamma_j)`` without the leading 1."""
    g = [float(v) for v in np.atleast_1d(gammas)]
    if not g or any(not v > 0 for v in g):
        raise InvalidParameter("all chain gammas must be positive")
    poly = np.array([1.0])
    for v in g:
        poly = np.convolve(poly, [1.0, v])
    # poly is descending: [1, k_{r-1}, ..., k0]
    return HocbfChain(len(g), tuple(float(c) for c in poly[1:][::-1]))


@dataclass(frozen=True)
class SafetyQp:
    """``min |u - u_nominal|^2  s.t.  a_row . u >= b_rhs`` (and optional box)."""

    u_nominal: np.ndarray
    a_row: np.ndarray
    b_rhs: float
    u_box: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "u_nominal", np.asarray(self.u_nominal, dtype=float).reshape(3))
        object.__setattr__(self, "a_row", np.asarray(self.a_row, dtype=float).reshape(3))
        object.__setattr__(self, "b_rhs", float(self.b_rhs))
        if not (np.all(np.isfinite(self.u_nominal)) and np.all(np.isfinite(self.a_row))
                and np.isfinite(self.b_rhs)):
            raise InvalidParameter("QP coefficients must be finite")


@dataclass(frozen=True)
class CbfConstraint:
    a_row: np.ndarray
    b_rhs: float
    h: float
    h_dot: float
    degenerate: bool = False

    def qp(self, u_nominal, u_box=None) -> SafetyQp:
        return SafetyQp(u_nominal, self.a_row, self.b_rhs, u_box)

    def slack(self, u) -> float:
        return float(self.a_row @ np.asarray(u, dtype=float) - self.b_rhs)


@dataclass(frozen=True)
class HChannel:
    """Terms of ``hdd = drift + a_row . u + s J f`` under the reduced model."""

    h: float
    h_dot: float
    a_row: np.ndarray
    drift: float
    j_row: np.ndarray  # s * J_axis


def barrier_value(spec: SafetySpec, params: ArmParams, q) -> float:
    return spec.sign * (float(ad.forward_kinematics(params, q)[spec.axis]) - spec.offset_y0)


def h_channel(spec: SafetySpec, params: ArmParams, nominal: NominalModel,
              meas: JointState) -> HChannel:
    s = spec.sign
    p = params.vector
    J = ad._jac(p, meas.q)
    jrow = s * J[spec.axis]
    jdot = s * ad._jac_rate(p, meas.q, meas.dq)[spec.axis]
    h = s * (ad._fk(p, meas.q)[spec.axis] - spec.offset_y0)
    h_dot = float(jrow @ meas.dq)
    drift = float(jdot @ meas.dq + jrow @ nominal.drift(meas.dq))
    return HChannel(float(h), h_dot, jrow @ nominal.gain, drift, jrow)


def _assemble(spec: SafetySpec, ch: HChannel, a_row, disturbance_term: float) -> CbfConstraint:
    k0, k1 = spec.chain.k_coeffs
    b = -(ch.drift + disturbance_term + k1 * ch.h_dot + k0 * ch.h)
    a_row = np.asarray(a_row, dtype=float)
    return CbfConstraint(a_row, float(b), ch.h, ch.h_dot,
                         bool(np.linalg.norm(a_row) < DEGENERATE_TOL))


def cbf_constraint(spec: SafetySpec, params: ArmParams, nominal: NominalModel,
                   meas: JointState, f_hat, channel: HChannel | None = None) -> CbfConstraint:
    """Robust second-order constraint ``a_row . u >= b_rhs``.

    ``b_rhs = -[s (Jdot dq + J F + J f_hat) - |s J| Gamma + k1 hd + k0 h]``
    with ``f_hat`` dropped unless ``use_f_hat`` and ``Gamma`` dropped unless
    ``use_error_bound``. A precomputed ``channel`` for the same state may be
    passed to skip the kinematics.
    """
    ch = channel if channel is not None else h_channel(spec, params, nominal, meas)
    dist = 0.0
    if spec.use_f_hat:
        dist += float(ch.j_row @ np.asarray(f_hat, dtype=float))
    if spec.use_error_bound:
        dist -= float(np.abs(ch.j_row) @ np.array(spec.gamma_bound))
    return _assemble(spec, ch, ch.a_row, dist)


def exact_constraint(spec: SafetySpec, params: ArmParams, meas: JointState,
                     accel_gain, accel_offset) -> CbfConstraint:
    """Constraint built from the true affine response ``qdd = A u + c``."""
    s = spec.sign
    p = params.vector
    jrow = s * ad._jac(p, meas.q)[spec.axis]
    jdot = s * ad._jac_rate(p, meas.q, meas.dq)[spec.axis]
    h = s * (ad._fk(p, meas.q)[spec.axis] - spec.offset_y0)
    ch = HChannel(float(h), float(jrow @ meas.dq), jrow @ np.asarray(accel_gain),
                  float(jdot @ meas.dq + jrow @ np.asarray(accel_offset)), jrow)
    return _assemble(spec, ch, ch.a_row, 0.0)


def solve_safety_qp(qp: SafetyQp) -> np.ndarray:
    """Minimal-intervention projection of ``u_nominal`` onto the safe set.

    Without a box the solution is the closed-form halfspace projection. With a
    box every active-set combination (each coordinate free / at lower / at
    upper, halfspace active or not) is enumerated and the best feasible
    candidate returned.
    """
    a, b, un = qp.a_row, qp.b_rhs, qp.u_nominal
    if qp.u_box is None:
        gap = b - float(a @ un)
        if gap <= 0.0:
            return un.copy()
        nrm2 = float(a @ a)
        if nrm2 < DEGENERATE_TOL ** 2:
            raise DegenerateConstraint(f"zero constraint normal with violation {gap:.3e}")
        return un + a * (gap / nrm2)
    lo, hi = (np.asarray(v, dtype=float) for v in qp.u_box)
    best_reach = float(np.sum(np.where(a > 0, a * hi, a * lo)))
    if best_reach < b - _FEAS_TOL * max(1.0, abs(b)):
        raise InfeasibleQP(b - best_reach)
    clipped = np.clip(un, lo, hi)
    if float(a @ clipped) >= b:
        return clipped
    if float(a @ a) < DEGENERATE_TOL ** 2:
        raise DegenerateConstraint("zero constraint normal with violated constraint")
    tol = _FEAS_TOL * max(1.0, abs(b), float(np.max(np.abs(np.concatenate([lo, hi])[np.isfinite(np.concatenate([lo, hi]))]), initial=0.0)))
    best, best_cost = None, np.inf
    for pattern in itertools.product((0, -1, 1), repeat=3):
        u = un.copy()
        fixed = np.array(pattern) != 0
        skip = False
        for i, s in enumerate(pattern):
            if s == -1:
                if not np.isfinite(lo[i]):
                    skip = True
                u[i] = lo[i]
            elif s == 1:
                if not np.isfinite(hi[i]):
                    skip = True
                u[i] = hi[i]
        if skip:
            continue
        free = ~fixed
        af = a[free]
        nrm2 = float(af @ af)
        if nrm2 < DEGENERATE_TOL ** 2:
            continue
        u[free] = un[free] + af * ((b - float(a[fixed] @ u[fixed]) - float(af @ un[free])) / nrm2)
        if np.any(u < lo - tol) or np.any(u > hi + tol) or float(a @ u) < b - tol:
            continue
        cost = float(np.sum((u - un) ** 2))
        if cost < best_cost:
            best, best_cost = np.clip(u, lo, hi), cost
    if best is None:
        raise InfeasibleQP(b - best_reach)
    return best


class ControlBound(NamedTuple):
    """Bound on one command coordinate; ``value is None`` marks it undefined."""

    value: float | None
    is_lower: bool | None

    @property
    def defined(self) -> bool:
        return self.value is not None


UNDEFINED = ControlBound(None, None)


def control_bounds(a_row, b_rhs: float, u_nominal) -> tuple:
    """Project the constraint onto each coordinate, others held at ``u_nominal``.

    ``u_i >= bound`` when ``a_i > 0`` and ``u_i <= bound`` when ``a_i < 0``.
    """
    a = np.asarray(a_row, dtype=float)
    un = np.asarray(u_nominal, dtype=float)
    out = []
    for i in range(3):
        if abs(a[i]) < DEGENERATE_TOL:
            out.append(UNDEFINED)
            continue
        rest = float(a @ un - a[i] * un[i])
        out.append(ControlBound((b_rhs - rest) / a[i], bool(a[i] > 0)))
    return tuple(out)


@dataclass(frozen=True)
class DobState:
    """Observer for ``b_e`` in ``hdd = a_e + b_e``; ``b_h`` bounds ``|d b_e / dt|``."""

    k_b: float
    chi: float = 0.0
    b_hat_e: float = 0.0
    b_h: float = 0.0

    def __post_init__(self):
        if not self.k_b > 0:
            raise InvalidParameter("k_b must be positive")

    @classmethod
    def start(cls, k_b: float, h_dot: float, b_h: float = 0.0) -> "DobState":
        """Initialise with ``b_hat_e = 0`` consistent with the measured ``hd``."""
        return cls(k_b, k_b * h_dot, 0.0, b_h)

    @property
    def error_bound(self) -> float:
        return self.b_h / self.k_b


def dob_step(dob: DobState, a_e: float, h_dot: float, dt: float) -> DobState:
    """``chi += dt k_b (a_e + b_hat_e)``, then ``b_hat_e = k_b hd - chi``.

    ``a_e`` is the known part of ``hdd`` over the step; ``h_dot`` is the new
    measurement at the end of the step.
    """
    if dt <= 0:
        raise InvalidParameter("dt must be positive")
    if dob.k_b * dt >= 0.5:
        raise StepSizeFault(f"k_b*dt = {dob.k_b * dt:.3f} >= 0.5")
    chi = dob.chi + dt * dob.k_b * (a_e + dob.b_hat_e)
    return DobState(dob.k_b, chi, dob.k_b * h_dot - chi, dob.b_h)


def dob_cbf_constraint(spec: SafetySpec, dob: DobState, ch: HChannel) -> CbfConstraint:
    """Same chain with ``s J f_hat - |s J| Gamma`` replaced by ``b_hat_e - b_h / k_b``."""
    dist = 0.0
    if spec.use_f_hat:
        dist += dob.b_hat_e
    if spec.use_error_bound:
        dist -= dob.error_bound
    return _assemble(spec, ch, ch.a_row, dist)
