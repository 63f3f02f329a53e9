import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from esoarm.arm_dynamics import ArmParams, JointState, NominalModel
from esoarm.faults import InvalidModel, InvalidParameter
from esoarm.plant import DisturbanceProfile, InnerLoopConfig, ground_truth_f, inner_loop_output, plant_accel
from esoarm.tracking import (
    CommandIntegrator, ProfileKind, ReferenceProfile, TrackingGains, disturbance_rejection,
    nominal_inversion, position_control_u0, reference_at,
)

from conftest import random_dq, random_q


def _random_nominal(rng):
    A = rng.normal(size=(3, 3))
    return NominalModel(A @ A.T + 0.5 * np.eye(3), rng.uniform(0.5, 30, 3),
                        c_bar=rng.normal(size=(3, 3)), g_bar=rng.normal(size=3))


# -- reference -------------------------------------------------------------

def test_sim_profile_at_zero():
    q, _, _ = reference_at(ReferenceProfile.sim(), 0.0)
    assert np.allclose(q, [0.0, 0.5, math.pi / 2])


def test_hw_profile_at_zero():
    q, _, _ = reference_at(ReferenceProfile.hw(), 0.0)
    assert np.allclose(q, [0.0, 0.534, math.pi / 2])


def test_sim_profile_formula():
    t = 1.3
    q, _, _ = reference_at(ReferenceProfile.sim(), t)
    assert np.allclose(q, [0.5 * math.sin(t), 0.25 * math.sin(2 * t) + 0.5,
                           0.25 * math.sin(2 * t) + math.pi / 2])


@given(st.floats(1e-4, 20.0), st.sampled_from(list(ProfileKind)))
def test_reference_derivatives_consistent(t, kind):
    prof = ReferenceProfile(kind, amplitude=(0.3, 0.2, 0.1), frequency=(1.5, 0.5, 3.0),
                            offset=(0.1, 0.2, 0.3))
    h = 1e-5
    qp, dqp, _ = reference_at(prof, t + h)
    qm, dqm, _ = reference_at(prof, t - h if t > h else t)
    lo = t - h if t > h else t
    _, dq, ddq = reference_at(prof, t)
    assert np.allclose((qp - qm) / (t + h - lo), dq, atol=1e-6)
    assert np.allclose((dqp - dqm) / (t + h - lo), ddq, atol=1e-5)


def test_reference_rejects_negative_time():
    with pytest.raises(InvalidParameter):
        reference_at(ReferenceProfile.sim(), -1.0)


# -- position law ----------------------------------------------------------

def test_u0_is_feedforward_at_zero_error(rng):
    ref = reference_at(ReferenceProfile.sim(), 0.7)
    u0 = position_control_u0(ref, JointState(ref[0], ref[1]), TrackingGains())
    assert np.array_equal(u0, ref[2])


def test_u0_arithmetic():
    ref = (np.array([0.01, 0.0, 0.0]), np.zeros(3), np.zeros(3))
    u0 = position_control_u0(ref, JointState(np.zeros(3), np.zeros(3)), TrackingGains())
    assert np.allclose(u0, [1.0, 0.0, 0.0])


@given(st.floats(1e-3, 1e4), st.floats(1e-3, 1e3))
def test_closed_loop_poles_stable(kp, kd):
    g = TrackingGains((kp,) * 3, (kd,) * 3)
    roots = np.roots([1.0, g.kd[0], g.kp[0]])
    assert np.all(roots.real < 0)


def test_tracking_gains_validation():
    with pytest.raises(InvalidParameter):
        TrackingGains((100, 0, 100), (20, 20, 20))
    g = TrackingGains.from_bandwidth(10.0)
    assert g.kp == (100.0,) * 3 and g.kd == (20.0,) * 3


# -- nominal inversion and rejection ---------------------------------------

def test_inversion_zero():
    nm = NominalModel(np.eye(3) * 2, [3, 4, 5])
    assert np.all(nominal_inversion(np.zeros(3), nm, np.array([1.0, 2, 3])) == 0)


def test_inversion_identity():
    nm = NominalModel(np.eye(3), [1, 1, 1])
    assert np.allclose(nominal_inversion([1, 2, 3], nm, np.zeros(3)), [1, 2, 3])


def test_inversion_residual(rng):
    for _ in range(200):
        nm = _random_nominal(rng)
        u0, dq = rng.normal(size=3), rng.normal(size=3)
        r = nominal_inversion(u0, nm, dq)
        assert np.allclose(nm.kd_bar * r - nm.c_bar @ dq - nm.g_bar, nm.m_bar @ u0, atol=1e-10)


def test_inversion_singular_kd_rejected():
    nm = NominalModel(np.eye(3), [1, 1, 1])
    object.__setattr__(nm, "kd_bar", np.array([1.0, 0.0, 1.0]))
    with pytest.raises(InvalidModel):
        nominal_inversion(np.ones(3), nm, np.zeros(3))


def test_rejection_passthrough(rng):
    nm = _random_nominal(rng)
    q0 = rng.normal(size=3)
    assert np.array_equal(disturbance_rejection(q0, np.zeros(3), nm), q0)


def test_rejection_arithmetic():
    nm = NominalModel(np.eye(3), [1, 1, 1])
    assert np.allclose(disturbance_rejection([1, 1, 1], [1, 0, -1], nm), [0, 1, 2])


def test_closed_loop_algebra_on_true_plant(rng):
    # with the rejected command the true acceleration is u0 + (f - f_hat)
    p = ArmParams(payload_mass=1.0, torque_map_B=(24, 36, 11))
    cfg = InnerLoopConfig(kp=(1, 12, 1), voltage_mode=True)
    for _ in range(200):
        nm = _random_nominal(rng)
        s = JointState(random_q(rng), random_dq(rng))
        u0, f_hat, qd = rng.normal(size=3), rng.normal(size=3), random_q(rng)
        dqd = disturbance_rejection(nominal_inversion(u0, nm, s.dq), f_hat, nm)
        v = inner_loop_output(cfg, s, qd, dqd, np.zeros(3), p)
        acc = plant_accel(p, s, v, DisturbanceProfile(), 0.0, voltage_mode=True)
        f = ground_truth_f(nm, s, dqd, acc)
        assert np.allclose(acc, u0 + (f - f_hat), atol=1e-9)


# -- command integrator ----------------------------------------------------

def test_integrator_trapezoid():
    it = CommandIntegrator([0.0, 1.0, 2.0], 0.1)
    assert it.slope == 0.0
    assert np.allclose(it.push([1.0, 0.0, -1.0]), [0.0, 1.0, 2.0])
    assert it.slope == pytest.approx(0.05)
    prev = it.preview([3.0, 0.0, 1.0])
    assert np.allclose(prev, [0.2, 1.0, 2.0])
    assert np.allclose(it.q_d, [0.0, 1.0, 2.0])
    assert np.allclose(it.push([3.0, 0.0, 1.0]), prev)


def test_integrator_preview_is_affine(rng):
    it = CommandIntegrator(rng.normal(size=3), 1e-3)
    it.push(rng.normal(size=3))
    base = it.preview(np.zeros(3))
    u = rng.normal(size=3)
    assert np.allclose(it.preview(u), base + it.slope * u, atol=1e-15)
