"""Scenario definition, co-simulation loop, metrics and built-in experiments.

The plant is integrated with RK4 at ``physics_dt``; the outer loop runs every
``control_dt`` and its command is held (zero-order hold) in between. One
control tick performs, in order: observer update, reference evaluation,
position law, nominal inversion, disturbance rejection, safety filter,
trapezoidal position-command update, command.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import arm_dynamics as ad
from . import robust_cbf as rc
from .arm_dynamics import ArmParams, JointState, NominalModel
from .eso import EsoState, error_bound, eso_step, gains_from_bandwidth, rate_bound_from_trace
from .faults import ConfigError, InfeasibleQP, InitialSetViolation, InvalidParameter
from .plant import ClosedArchitectureArm, DisturbanceProfile, InnerLoopConfig, PsiVariant
from .robust_cbf import SafetySpec, WallDirection
from .tracking import (CommandIntegrator, ProfileKind, ReferenceProfile, TrackingGains,
                       disturbance_rejection, nominal_inversion, position_control_u0,
                       reference_at)

TRACE_COLUMNS = (
    "t", "q1", "q2", "q3", "dq1", "dq2", "dq3", "qs1", "qs2", "qs3", "qd1", "qd2", "qd3",
    "us1", "us2", "us3", "f1", "f2", "f3", "fh1", "fh2", "fh3", "h", "hdot", "slack",
    "lb1", "lb2", "lb3",
)
METRIC_KEYS = ("joint_rmse", "cartesian_rmse", "min_h", "transient_time",
               "intervention_fraction")


class FilterVariant(str, enum.Enum):
    NONE = "none"
    CBF_NOMINAL = "cbf_nominal"
    RCBF_ESO = "rcbf_eso"
    RCBF_ESO_BOUND = "rcbf_eso_bound"
    DOB_CBF = "dob_cbf"
    DOB_CBF_BOUND = "dob_cbf_bound"
    CBF_TRUE_F = "cbf_true_f"


class DisturbanceSource(str, enum.Enum):
    """What the tracking law subtracts: the observer estimate, the true ``f``, or nothing."""

    ESO = "eso"
    ORACLE = "oracle"
    NONE = "none"


# flags (use_f_hat, use_error_bound) for the observer-based constraints
_CBF_FLAGS = {
    FilterVariant.CBF_NOMINAL: (False, False),
    FilterVariant.RCBF_ESO: (True, False),
    FilterVariant.RCBF_ESO_BOUND: (True, True),
    FilterVariant.DOB_CBF: (True, False),
    FilterVariant.DOB_CBF_BOUND: (True, True),
}


@dataclass(frozen=True)
class NominalConfig:
    """How the outer loop's reduced model is built.

    ``m_bar`` is ``inertia_scale`` times the payload-free inertia matrix at
    ``reference_q`` (the reference's initial configuration when ``None``).
    ``kd_bar`` is in torque per rad/s; for a voltage inner loop it is the
    nominal voltage gain times the nominal voltage-to-torque map.
    """

    kd_bar: tuple = (1.0, 1.0, 1.0)
    kd_scale: float = 1.0
    inertia_scale: float = 1.0
    reference_q: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kd_bar", ad._vec3(self.kd_bar, "kd_bar"))
        if self.reference_q is not None:
            object.__setattr__(self, "reference_q", ad._vec3(self.reference_q, "reference_q"))
        if not self.kd_scale > 0 or not self.inertia_scale > 0:
            raise InvalidParameter("kd_scale and inertia_scale must be positive")

    def build(self, arm: ArmParams, q_ref) -> NominalModel:
        q = q_ref if self.reference_q is None else self.reference_q
        m = ad.mass_matrix(replace(arm, payload_mass=0.0), q) * self.inertia_scale
        return NominalModel(m, np.array(self.kd_bar) * self.kd_scale)


@dataclass(frozen=True)
class SweepSpec:
    """A one-parameter sweep; ``reported_only`` values run but are not judged."""

    parameter: str
    values: tuple
    reported_only: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "reported_only", tuple(self.reported_only))


@dataclass(frozen=True)
class Scenario:
    """Fully deterministic experiment description.

    ``rate_bound`` (``l_f`` per joint) and ``dob_rate_bound`` (``b_h``) feed
    the error bounds of the ``*_bound`` filters; when left ``None`` they are
    measured from the true-model run of the same scenario (see
    :func:`calibrate`).
    """

    name: str = "custom"
    description: str = ""
    arm: ArmParams = field(default_factory=ArmParams)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    nominal: NominalConfig = field(default_factory=NominalConfig)
    tracking: TrackingGains = field(default_factory=TrackingGains)
    reference: ReferenceProfile = field(default_factory=ReferenceProfile)
    eso_bandwidths: tuple = (80.0, 80.0, 80.0)
    safety: SafetySpec | None = None
    disturbances: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    duration: float = 10.0
    physics_dt: float = 1e-4
    control_dt: float = 1e-3
    filter_variant: FilterVariant = FilterVariant.NONE
    disturbance_source: DisturbanceSource = DisturbanceSource.ESO
    initial_error: tuple = (0.0, 0.0, 0.0)
    dob_gain: float = 80.0
    bound_ts: float = 1e-4
    rate_bound: tuple | None = None
    dob_rate_bound: float | None = None
    steady_start: float = 5.0
    transient_threshold: float = 0.05
    rmse_threshold: float | None = None
    sweep: SweepSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "filter_variant", FilterVariant(self.filter_variant))
        object.__setattr__(self, "disturbance_source",
                           DisturbanceSource(self.disturbance_source))
        w = np.broadcast_to(np.asarray(self.eso_bandwidths, dtype=float), (3,))
        object.__setattr__(self, "eso_bandwidths", tuple(float(v) for v in w))
        object.__setattr__(self, "initial_error", ad._vec3(self.initial_error, "initial_error"))
        if self.rate_bound is not None:
            lf = np.broadcast_to(np.asarray(self.rate_bound, dtype=float), (3,))
            if np.any(lf < 0):
                raise ConfigError("rate_bound must be non-negative")
            object.__setattr__(self, "rate_bound", tuple(float(v) for v in lf))
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not 0 < self.physics_dt <= self.control_dt:
            raise ConfigError("need 0 < physics_dt <= control_dt")
        ratio = self.control_dt / self.physics_dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError("control_dt must be an integer multiple of physics_dt")
        if min(self.eso_bandwidths) <= 0:
            raise ConfigError("observer bandwidths must be positive")
        if self.control_dt * max(self.eso_bandwidths) >= 0.5:
            raise ConfigError("control_dt * max(eso_bandwidths) must stay below 0.5")
        if self.dob_gain * self.control_dt >= 0.5 or self.dob_gain <= 0:
            raise ConfigError("dob_gain must be positive with dob_gain * control_dt < 0.5")
        if self.filter_variant is not FilterVariant.NONE and self.safety is None:
            raise ConfigError(f"filter {self.filter_variant.value} needs a safety spec")
        if self.steady_start < 0:
            raise ConfigError("steady_start must be non-negative")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.control_dt))

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.physics_dt))

    def initial_state(self) -> JointState:
        q, dq, _ = reference_at(self.reference, 0.0)
        return JointState(q + np.array(self.initial_error), dq)

    def nominal_model(self) -> NominalModel:
        return self.nominal.build(self.arm, reference_at(self.reference, 0.0)[0])


# --------------------------------------------------------------------------
# dotted-key overrides
# --------------------------------------------------------------------------

_OPTIONAL_NESTED = {"safety": SafetySpec, "sweep": SweepSpec}


def _coerce(current, value, key: str):
    try:
        if isinstance(current, enum.Enum):
            return type(current)(value)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError("expected a boolean")
            return value
        if isinstance(current, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError("expected a number")
            return type(current)(value)
        if isinstance(current, tuple):
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return (float(value),) * len(current) if current else (float(value),)
            if isinstance(value, (list, tuple)):
                return tuple(tuple(v) if isinstance(v, list) else v for v in value)
            raise TypeError("expected a list")
        if isinstance(current, str):
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
        if current is None:
            return tuple(value) if isinstance(value, list) else value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
    raise ConfigError(f"{key!r} cannot be overridden with {value!r}")


def _set_path(obj, parts, value, full_key):
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown configuration key {full_key!r}")
    current = getattr(obj, name)
    if len(parts) == 1:
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            new = current
            for k, v in value.items():
                new = _set_path(new, [k], v, f"{full_key}.{k}")
        elif name in _OPTIONAL_NESTED and isinstance(value, dict):
            new = _build_nested(_OPTIONAL_NESTED[name], value, full_key)
        elif value is None and (name in _OPTIONAL_NESTED or current is None
                                or name in ("rate_bound", "dob_rate_bound", "rmse_threshold",
                                            "reference_q", "payload_mass", "u_box")):
            new = None
        else:
            new = _coerce(current, value, full_key)
    else:
        if current is None and name in _OPTIONAL_NESTED:
            current = _OPTIONAL_NESTED[name]() if name == "safety" else None
            if current is None:
                raise ConfigError(f"set {name!r} as a whole before overriding {full_key!r}")
        new = _set_path(current, parts[1:], value, full_key)
    try:
        return replace(obj, **{name: new})
    except (InvalidParameter, ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {full_key!r}: {exc}") from None


def _build_nested(cls, doc: dict, key: str):
    try:
        base = cls() if cls is SafetySpec else cls(doc.get("parameter", ""), doc.get("values", ()))
    except (InvalidParameter, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {key!r}: {exc}") from None
    for k, v in doc.items():
        base = _set_path(base, [k], v, f"{key}.{k}")
    return base


def with_overrides(scn: Scenario, overrides: dict) -> Scenario:
    """Apply ``{"nominal.kd_scale": 2.0, ...}``; values type-check against the schema."""
    for key, value in overrides.items():
        if not key:
            raise ConfigError("empty configuration key")
        scn = _set_path(scn, key.split("."), value, key)
    return scn


def resolve_key(scn: Scenario, key: str):
    """Current value at a dotted key, or :class:`ConfigError` if it does not exist."""
    obj = scn
    for part in key.split("."):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown configuration key {key!r}")
        obj = getattr(obj, part)
    return obj


def scenario_to_dict(scn: Scenario) -> dict:
    def conv(v):
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v

    def walk(obj):
        return {f.name: (walk(getattr(obj, f.name)) if dataclasses.is_dataclass(getattr(obj, f.name))
                         else conv(getattr(obj, f.name)))
                for f in dataclasses.fields(obj)}

    return walk(scn)


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k not in _OPTIONAL_NESTED:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _decode_inf(v):
    if isinstance(v, str) and v in ("inf", "-inf"):
        return float(v)
    if isinstance(v, list):
        return [_decode_inf(x) for x in v]
    if isinstance(v, dict):
        return {k: _decode_inf(x) for k, x in v.items()}
    return v


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a scenario from a nested document.

    ``base`` names a built-in scenario to start from (default: an empty
    torque-mode scenario); every other key overrides a field.
    """
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a mapping")
    doc = _decode_inf(dict(doc))
    base_name = doc.pop("base", None)
    if base_name is None:
        base = Scenario()
    else:
        scenarios = builtin_scenarios()
        if base_name not in scenarios:
            raise ConfigError(f"unknown scenario {base_name!r}")
        base = scenarios[base_name]
    return with_overrides(base, _flatten(doc))


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

@dataclass
class Trace:
    """Control-rate samples of one run.

    ``dq_cmd`` is the velocity command before the safety filter and ``u_safe``
    the one sent. ``bound_value``/``bound_kind`` hold the per-joint control
    bound (kind ``+1`` lower, ``-1`` upper, ``0`` undefined with value 0).
    Safety columns are ``None`` when the run has no safety spec (``slack`` and
    the bounds also when no filter is active).
    """

    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    q_ref: np.ndarray
    dq_cmd: np.ndarray
    u_safe: np.ndarray
    f_true: np.ndarray
    f_hat: np.ndarray
    h: np.ndarray | None
    h_dot: np.ndarray | None
    slack: np.ndarray | None
    bound_value: np.ndarray | None
    bound_kind: np.ndarray | None
    arm: ArmParams
    name: str = ""
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def table(self) -> list:
        """Rows in :data:`TRACE_COLUMNS` order; ``None`` marks an empty cell."""
        n = len(self.t)
        none = [None] * n
        h = self.h.tolist() if self.h is not None else none
        hd = self.h_dot.tolist() if self.h_dot is not None else none
        sl = self.slack.tolist() if self.slack is not None else none
        if self.bound_value is not None:
            lb = [[v if k != 0 else None for v, k in zip(vals, kinds)]
                  for vals, kinds in zip(self.bound_value.tolist(), self.bound_kind.tolist())]
        else:
            lb = [[None] * 3] * n
        rows = []
        cols = (self.q, self.dq, self.q_ref, self.dq_cmd, self.u_safe, self.f_true, self.f_hat)
        lists = [c.tolist() for c in cols]
        for i in range(n):
            row = [float(self.t[i])]
            for c in lists:
                row.extend(c[i])
            row.extend((h[i], hd[i], sl[i]))
            row.extend(lb[i])
            rows.append(row)
        return rows


def write_trace_csv(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace.table():
            w.writerow(["" if v is None else repr(float(v)) for v in row])


def read_trace_csv(path, arm: ArmParams) -> Trace:
    """Inverse of :func:`write_trace_csv`; bound kinds are not stored and come back as ``None``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != TRACE_COLUMNS:
            raise ConfigError("unexpected trace header")
        raw = [row for row in r]
    n = len(raw)
    data = np.full((n, len(TRACE_COLUMNS)), np.nan)
    present = np.zeros((n, len(TRACE_COLUMNS)), dtype=bool)
    for i, row in enumerate(raw):
        for j, cell in enumerate(row):
            if cell != "":
                data[i, j] = float(cell)
                present[i, j] = True

    def col(j):
        return data[:, j].copy() if present[:, j].all() else None

    lb_present = present[:, 25:28]
    return Trace(
        t=data[:, 0].copy(), q=data[:, 1:4].copy(), dq=data[:, 4:7].copy(),
        q_ref=data[:, 7:10].copy(), dq_cmd=data[:, 10:13].copy(), u_safe=data[:, 13:16].copy(),
        f_true=data[:, 16:19].copy(), f_hat=data[:, 19:22].copy(),
        h=col(22), h_dot=col(23), slack=col(24),
        bound_value=np.where(lb_present, data[:, 25:28], 0.0) if lb_present.any() else None,
        bound_kind=None, arm=arm,
    )


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------

def _affine_response(probe, integ: CommandIntegrator):
    """True ``qdd = A u + c`` for the velocity command ``u`` sent this tick."""
    return probe.affine_response(integ.preview(np.zeros(3)), integ.slope)


def _bounds_of(con: rc.CbfConstraint, u_nom):
    out = rc.control_bounds(con.a_row, con.b_rhs, u_nom)
    vals = np.array([b.value if b.defined else 0.0 for b in out])
    kinds = np.array([0 if not b.defined else (1 if b.is_lower else -1) for b in out])
    return vals, kinds


def _initial_set_check(spec: SafetySpec, h: float, h_dot: float) -> None:
    k0, k1 = spec.chain.k_coeffs
    h1 = h_dot + math.sqrt(k0) * h  # first link of the (s + gamma)^2 chain
    if not h > 0 or not h1 > 0:
        raise InitialSetViolation(f"initial state outside the safe set (h={h:.4g}, h1={h1:.4g})")


def _simulate(scn: Scenario, collect_bounds: bool = False):
    arm_params = scn.arm
    nominal = scn.nominal_model()
    x0 = scn.initial_state()
    arm = ClosedArchitectureArm(arm_params, scn.inner, scn.disturbances, x0.q, x0.dq,
                                scn.physics_dt)
    probe = arm.probe()
    dt = scn.control_dt
    gains = gains_from_bandwidth(np.array(scn.eso_bandwidths))
    integ = CommandIntegrator(x0.q, dt)
    variant = scn.filter_variant
    spec = scn.safety
    n = scn.n_ticks + 1

    if spec is not None and variant in _CBF_FLAGS:
        use_f, use_b = _CBF_FLAGS[variant]
        gamma_bound = (0.0, 0.0, 0.0)
        if use_b and variant is FilterVariant.RCBF_ESO_BOUND:
            if scn.rate_bound is None:
                raise ConfigError("rate_bound must be set (or calibrated) for rcbf_eso_bound")
            gamma_bound = tuple(error_bound(np.array(scn.eso_bandwidths),
                                            np.array(scn.rate_bound), scn.bound_ts))
        spec = replace(spec, use_f_hat=use_f, use_error_bound=use_b, gamma_bound=gamma_bound)
    if variant is FilterVariant.DOB_CBF_BOUND and scn.dob_rate_bound is None:
        raise ConfigError("dob_rate_bound must be set (or calibrated) for dob_cbf_bound")

    t_arr = np.arange(n) * dt
    Q, DQ, QR, UC, US, FT, FH = (np.zeros((n, 3)) for _ in range(7))
    H = HD = SL = BV = BK = None
    if spec is not None:
        H, HD = np.zeros(n), np.zeros(n)
        if variant is not FilterVariant.NONE:
            SL, BV, BK = np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3), dtype=int)
    cmp_bounds = ({k: (np.zeros((n, 3)), np.zeros((n, 3), dtype=int))
                   for k in ("true", "nominal", "eso", "exact")} if collect_bounds else None)
    degenerate = 0

    obs = EsoState.from_measurement(x0.dq)
    dob = None
    prev = None  # (dq, drift, gain @ u, a_e)
    for k in range(n):
        t = float(t_arr[k])
        meas = arm.measure()
        if prev is not None:
            obs = eso_step(obs, gains, prev[1], prev[2], prev[0], dt)
        f_hat_eso = obs.xhat3
        ref = reference_at(scn.reference, t)
        u0 = position_control_u0(ref, meas, scn.tracking)
        A, c = _affine_response(probe, integ)
        drift = nominal.drift(meas.dq)
        qd0 = nominal_inversion(u0, nominal, meas.dq)
        if scn.disturbance_source is DisturbanceSource.ORACLE:
            u_nom = np.linalg.solve(A, u0 - c)
        elif scn.disturbance_source is DisturbanceSource.ESO:
            u_nom = disturbance_rejection(qd0, f_hat_eso, nominal)
        else:
            u_nom = qd0

        def f_of(u):
            return A @ u + c - drift - nominal.gain @ u

        f_hat_cbf = (f_of(u_nom) if scn.disturbance_source is DisturbanceSource.ORACLE
                     else f_hat_eso)
        u_safe = u_nom
        if spec is not None:
            ch = rc.h_channel(spec, arm_params, nominal, meas)
            H[k], HD[k] = ch.h, ch.h_dot
            if k == 0:
                _initial_set_check(spec, ch.h, ch.h_dot)
                dob = rc.DobState.start(scn.dob_gain, ch.h_dot, scn.dob_rate_bound or 0.0)
            elif prev is not None:
                dob = rc.dob_step(dob, prev[3], ch.h_dot, dt)
            con = None
            if variant is FilterVariant.CBF_TRUE_F:
                con = rc.exact_constraint(spec, arm_params, meas, A, c)
            elif variant in (FilterVariant.DOB_CBF, FilterVariant.DOB_CBF_BOUND):
                con = rc.dob_cbf_constraint(spec, dob, ch)
            elif variant is not FilterVariant.NONE:
                con = rc.cbf_constraint(spec, arm_params, nominal, meas, f_hat_cbf, ch)
            if con is not None:
                if con.degenerate:
                    degenerate += 1
                else:
                    try:
                        u_safe = rc.solve_safety_qp(con.qp(u_nom, spec.u_box))
                    except InfeasibleQP as exc:
                        raise InfeasibleQP(exc.violation, t) from None
                SL[k] = con.slack(u_safe)
                BV[k], BK[k] = _bounds_of(con, u_nom)
            if collect_bounds:
                reduced = replace(spec, use_f_hat=True, use_error_bound=False)
                for key, con_k in (
                        ("true", rc.cbf_constraint(reduced, arm_params, nominal, meas,
                                                   f_of(u_safe), ch)),
                        ("nominal", rc.cbf_constraint(replace(reduced, use_f_hat=False),
                                                      arm_params, nominal, meas, f_hat_cbf, ch)),
                        ("eso", rc.cbf_constraint(reduced, arm_params, nominal, meas,
                                                  f_hat_cbf, ch)),
                        ("exact", rc.exact_constraint(spec, arm_params, meas, A, c))):
                    cmp_bounds[key][0][k], cmp_bounds[key][1][k] = _bounds_of(con_k, u_nom)
            a_e = ch.drift + float(ch.a_row @ u_safe)
        else:
            a_e = 0.0

        q_d = integ.push(u_safe)
        Q[k], DQ[k], QR[k] = meas.q, meas.dq, ref[0]
        UC[k], US[k] = u_nom, u_safe
        FT[k] = f_of(u_safe)
        FH[k] = f_of(u_safe) if scn.disturbance_source is DisturbanceSource.ORACLE else f_hat_eso
        prev = (meas.dq, drift, nominal.gain @ u_safe, a_e)
        if k < n - 1:
            arm.command(q_d, u_safe)
            arm.advance(scn.substeps)

    info = {"degenerate_steps": degenerate}
    if spec is not None and variant is FilterVariant.RCBF_ESO_BOUND:
        info["gamma_bound"] = list(spec.gamma_bound)
        info["rate_bound"] = list(scn.rate_bound)
    if variant is FilterVariant.DOB_CBF_BOUND:
        info["dob_rate_bound"] = scn.dob_rate_bound
        info["dob_error_bound"] = scn.dob_rate_bound / scn.dob_gain
    trace = Trace(t_arr, Q, DQ, QR, UC, US, FT, FH, H, HD, SL, BV, BK, arm_params, scn.name, info)
    return trace, cmp_bounds


def barrier_disturbance(trace: Trace, spec: SafetySpec) -> np.ndarray:
    """True ``b_e = s J_axis(q) f`` along a trace (what the DOB estimates)."""
    p = trace.arm.vector
    return np.array([spec.sign * ad._jac(p, np.ascontiguousarray(q))[spec.axis] @ f
                     for q, f in zip(trace.q, trace.f_true)])


def _oracle_reference(scn: Scenario) -> Scenario:
    return replace(scn, filter_variant=FilterVariant.CBF_TRUE_F, rate_bound=None,
                   dob_rate_bound=None, sweep=None, name=scn.name, description="")


@functools.lru_cache(maxsize=16)
def _oracle_rates(ref: Scenario):
    trace, _ = _simulate(ref)
    lf = rate_bound_from_trace(trace.f_true, ref.control_dt)
    bh = float(rate_bound_from_trace(barrier_disturbance(trace, ref.safety)[:, None],
                                     ref.control_dt)[0])
    return tuple(float(v) for v in lf), bh, float(np.min(trace.h))


def calibrate(scn: Scenario) -> Scenario:
    """Fill in missing ``l_f`` / ``b_h`` measured from the true-model run.

    The same scenario is simulated once with the exact-plant constraint and
    ``max |delta f| / control_dt`` (per joint) and ``max |delta b_e| /
    control_dt`` are taken from that trace. Explicitly configured bounds are
    left untouched.
    """
    v = scn.filter_variant
    need_lf = v is FilterVariant.RCBF_ESO_BOUND and scn.rate_bound is None
    need_bh = v is FilterVariant.DOB_CBF_BOUND and scn.dob_rate_bound is None
    if not (need_lf or need_bh):
        return scn
    lf, bh, _ = _oracle_rates(_oracle_reference(scn))
    if need_lf:
        scn = replace(scn, rate_bound=lf)
    if need_bh:
        scn = replace(scn, dob_rate_bound=bh)
    return scn


def run(scn: Scenario) -> Trace:
    """Simulate a scenario (calibrating missing error-bound inputs first)."""
    trace, _ = _simulate(calibrate(scn))
    return trace


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Summary of a trace; ``min_h`` is ``None`` without a barrier and
    ``transient_time`` is ``None`` if the errors never all drop below the
    threshold."""

    joint_rmse: tuple
    cartesian_rmse: tuple
    min_h: float | None
    transient_time: float | None
    intervention_fraction: float

    def to_dict(self) -> dict:
        return {"joint_rmse": list(self.joint_rmse), "cartesian_rmse": list(self.cartesian_rmse),
                "min_h": self.min_h, "transient_time": self.transient_time,
                "intervention_fraction": self.intervention_fraction}


def metrics(trace: Trace, steady_start: float = 5.0, threshold: float = 0.05) -> Metrics:
    mask = trace.t >= steady_start - 1e-9
    if steady_start < 0 or not mask.any() or steady_start > trace.t[-1]:
        raise InvalidParameter(f"empty steady-state window starting at {steady_start}")
    err = trace.q - trace.q_ref
    joint = np.sqrt(np.mean(err[mask] ** 2, axis=0))
    p = trace.arm.vector
    zeta = np.array([ad._fk(p, np.ascontiguousarray(q)) for q in trace.q[mask]])
    zeta_ref = np.array([ad._fk(p, np.ascontiguousarray(q)) for q in trace.q_ref[mask]])
    cart = np.sqrt(np.mean((zeta - zeta_ref) ** 2, axis=0))
    min_h = float(np.min(trace.h)) if trace.h is not None else None
    inside = np.all(np.abs(err) < threshold, axis=1)
    transient = float(trace.t[np.argmax(inside)]) if inside.any() else None
    intervened = np.any(trace.u_safe != trace.dq_cmd, axis=1)
    return Metrics(tuple(float(v) for v in joint), tuple(float(v) for v in cart), min_h,
                   transient, float(np.mean(intervened)))


def scenario_metrics(scn: Scenario, trace: Trace) -> Metrics:
    return metrics(trace, scn.steady_start, scn.transient_threshold)


# --------------------------------------------------------------------------
# control-bound comparison
# --------------------------------------------------------------------------

@dataclass
class BoundComparison:
    """Per-sample control bounds of several constraints on the same trajectory.

    ``true`` uses the ground-truth residual ``f`` in place of ``f_hat``,
    ``eso`` the observer estimate, ``nominal`` no disturbance term; all three
    share the reduced model's constraint normal. ``exact`` is the constraint
    of the exact plant response (the ``cbf_true_f`` filter), for reference.
    """

    t: np.ndarray
    values: dict
    kinds: dict
    trace: Trace

    def gaps(self, variant: str, reference: str = "true"):
        """``|bound_variant - bound_reference|`` and the mask where both are defined."""
        ok = (self.kinds[variant] != 0) & (self.kinds[reference] != 0)
        gap = np.where(ok, np.abs(self.values[variant] - self.values[reference]), 0.0)
        return gap, ok

    def summary(self) -> dict:
        g_eso, ok = self.gaps("eso")
        g_nom, _ = self.gaps("nominal")
        n_ok = np.maximum(ok.sum(axis=0), 1)
        return {
            "sup_gap_eso": np.max(g_eso, axis=0).tolist(),
            "sup_gap_nominal": np.max(g_nom, axis=0).tolist(),
            "eso_closer_fraction": (np.sum((g_eso < g_nom) & ok, axis=0) / n_ok).tolist(),
            "defined_samples": ok.sum(axis=0).tolist(),
        }


def bound_comparison(scn: Scenario) -> BoundComparison:
    """Run ``scn`` once and evaluate every constraint's bounds at each sample.

    All constraints use the same state and the same pre-filter command.
    """
    if scn.safety is None:
        raise ConfigError("bound comparison needs a safety spec")
    trace, cmp = _simulate(calibrate(scn), collect_bounds=True)
    return BoundComparison(trace.t, {k: v[0] for k, v in cmp.items()},
                           {k: v[1] for k, v in cmp.items()}, trace)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepResult:
    parameter: str
    value: Any
    reported_only: bool
    metrics: Metrics
    trace: Trace


def run_sweep(scn: Scenario, parameter: str | None = None, values=None,
              reported_only=()) -> list:
    """Run one scenario per value of ``parameter`` in the given order."""
    if parameter is None:
        if scn.sweep is None:
            raise ConfigError(f"scenario {scn.name!r} has no sweep")
        parameter, values, reported_only = (scn.sweep.parameter, scn.sweep.values,
                                             scn.sweep.reported_only)
    values = list(values) if values is not None else []
    if not values:
        raise ConfigError("sweep needs at least one value")
    resolve_key(scn, parameter)
    out = []
    for v in list(values) + [r for r in reported_only if r not in values]:
        cur = with_overrides(replace(scn, sweep=None), {parameter: v})
        tr = run(cur)
        out.append(SweepResult(parameter, v, v in reported_only and v not in values,
                               scenario_metrics(cur, tr), tr))
    return out


# --------------------------------------------------------------------------
# built-in experiments
# --------------------------------------------------------------------------

def _sim_arm() -> ArmParams:
    # the simulation study leaves friction out
    return ArmParams(viscous_friction=(0.0, 0.0, 0.0), coulomb_friction=(0.0, 0.0, 0.0))


_HW_B = (24.0, 36.0, 11.0)
_HW_B_BAR = (20.0, 40.0, 10.0)


def _hw_arm(payload: float = 0.0) -> ArmParams:
    return ArmParams(torque_map_B=_HW_B, payload_mass=payload)


def _hw_inner(**kw) -> InnerLoopConfig:
    return InnerLoopConfig(kp=(1.0, 12.0, 1.0), kd=(1.0, 1.0, 1.0), voltage_mode=True, **kw)


def _sim_base(name: str, description: str, **kw) -> Scenario:
    base = dict(arm=_sim_arm(), inner=InnerLoopConfig(), nominal=NominalConfig((1.0, 1.0, 1.0)),
                reference=ReferenceProfile(ProfileKind.SIM))
    base.update(kw)
    return Scenario(name=name, description=description, **base)


def _hw_base(name: str, description: str, **kw) -> Scenario:
    base = dict(arm=_hw_arm(), inner=_hw_inner(), nominal=NominalConfig(_HW_B_BAR),
                reference=ReferenceProfile(ProfileKind.HW))
    base.update(kw)
    return Scenario(name=name, description=description, **base)


_Y_WALL = SafetySpec(axis=1, offset_y0=-0.1, direction=WallDirection.KEEP_ABOVE, gamma=10.0)
_Z_WALL = SafetySpec(axis=2, offset_y0=-0.01, direction=WallDirection.KEEP_ABOVE, gamma=10.0)


def builtin_scenarios() -> dict:
    """Named experiments, in a fixed order."""
    s = [
        _sim_base("sim_tracking",
                  "Torque-mode simulation, unit inner-loop gains, frictionless; observer-based "
                  "tracking of the sinusoidal joint reference without a wall."),
        _sim_base("sim_wall_y",
                  "Simulation with a wall keeping the wrist at y >= -0.1 m; robust CBF with "
                  "observer compensation and error bound (gamma 10, bandwidth 80).",
                  safety=_Y_WALL, filter_variant=FilterVariant.RCBF_ESO_BOUND),
        _sim_base("sim_wall_y_true_model",
                  "Same wall with the exact plant response in the constraint (true-model CBF).",
                  safety=_Y_WALL, filter_variant=FilterVariant.CBF_TRUE_F),
        _sim_base("sim_bound_compare",
                  "Control bounds of true-model, nominal and observer-compensated constraints "
                  "along the filtered wall trajectory.",
                  safety=_Y_WALL, filter_variant=FilterVariant.RCBF_ESO),
        _sim_base("sim_oracle",
                  "Exact disturbance cancellation (f_hat := f) with zero initial error; tracking "
                  "error is limited only by the zero-order hold.",
                  disturbance_source=DisturbanceSource.ORACLE, control_dt=1e-4),
        _sim_base("sim_bandwidth_sweep",
                  "Observer bandwidth sweep 20/40/80 rad/s on the tracking scenario.",
                  sweep=SweepSpec("eso_bandwidths", (20.0, 40.0, 80.0))),
        _hw_base("hw_tracking",
                 "Voltage-driven inner loop (Kp diag(1,12,1), Kd I) with friction and mismatched "
                 "voltage-to-torque map; tracking from a displaced start, no payload.",
                 initial_error=(0.0, 0.2, 0.0)),
        _hw_base("payload_sweep",
                 "Hardware-like tracking with wrist payloads of 0, 1, 1.5 and 2 kg.",
                 initial_error=(0.0, 0.2, 0.0),
                 sweep=SweepSpec("disturbances.payload_mass", (0.0, 1.0, 1.5, 2.0))),
        _hw_base("hw_gain_sweep",
                 "Nominal Kd scaling sweep 0.6x..10x (0.5x reported only); steady-state joint "
                 "RMSE must stay below 0.2 rad.",
                 initial_error=(0.0, 0.2, 0.0), rmse_threshold=0.2,
                 sweep=SweepSpec("nominal.kd_scale", (0.6, 1.0, 2.0, 5.0, 10.0), (0.5,))),
        _hw_base("hw_payload_wall_y",
                 "Wall at y >= -0.1 m with 1, 1.5 and 2 kg payloads; robust CBF with bound.",
                 safety=_Y_WALL, filter_variant=FilterVariant.RCBF_ESO_BOUND,
                 disturbances=DisturbanceProfile(payload_mass=1.0),
                 sweep=SweepSpec("disturbances.payload_mass", (1.0, 1.5, 2.0))),
        _hw_base("hw_push_q1",
                 "Constant 6 V offset on the waist pushing the wrist toward the y >= -0.1 m "
                 "wall (negative waist direction in this frame).",
                 safety=_Y_WALL, filter_variant=FilterVariant.RCBF_ESO_BOUND,
                 disturbances=DisturbanceProfile(joint_offset=(-6.0, 0.0, 0.0))),
        _hw_base("hw_gravity_z",
                 "Wall at z >= -0.01 m; uncompensated gravity pushes the wrist toward it.",
                 safety=_Z_WALL, filter_variant=FilterVariant.RCBF_ESO_BOUND),
        _hw_base("hw_integral_inner",
                 "Inner loop with an integral term (unknown to the outer loop); tracking only.",
                 inner=_hw_inner(psi_variant=PsiVariant.PD_PLUS_INTEGRAL,
                                 integral_gain=(0.5, 2.0, 0.5)),
                 initial_error=(0.0, 0.2, 0.0)),
    ]
    return {scn.name: scn for scn in s}
