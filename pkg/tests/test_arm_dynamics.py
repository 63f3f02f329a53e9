import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esoarm.arm_dynamics import (
    ArmParams, JointState, NominalModel, coriolis_matrix, forward_kinematics,
    friction_torque, gravity_vector, jacobian, jacobian_row_rate, kinetic_energy,
    mass_matrix, potential_energy,
)
from esoarm.faults import InvalidParameter
from esoarm.plant import DisturbanceProfile, plant_accel

from conftest import random_dq, random_q

angles = st.floats(-np.pi, np.pi, allow_nan=False)
rates = st.floats(-3.0, 3.0, allow_nan=False)
q_st = st.tuples(angles, angles, angles).map(np.array)
dq_st = st.tuples(rates, rates, rates).map(np.array)


# -- independent oracles ---------------------------------------------------

def _points(p, q):
    """Link COM positions, payload position and link axis directions (complex-safe)."""
    l1, l2, l3 = p.link_lengths
    _, c2, c3 = p.com_offsets
    q1, q2, q3 = q[0], q[1], q[2]
    a3 = q2 - q3
    horiz = np.array([np.cos(q1), np.sin(q1), 0.0 * q1])
    up = np.array([0.0 * q1, 0.0 * q1, 1.0 + 0.0 * q1])
    e2 = np.cos(q2) * horiz + np.sin(q2) * up
    e3 = np.cos(a3) * horiz + np.sin(a3) * up
    base = l1 * up
    p2 = base + c2 * e2
    elbow = base + l2 * e2
    p3 = elbow + c3 * e3
    wrist = elbow + l3 * e3
    return p2, p3, wrist, e2, e3


def _kinetic_oracle(p, q, dq):
    """Sum of translational and rotational link energies from link velocities.

    Velocities come from complex-step differentiation of the link positions,
    angular velocities from the joint axes; nothing is shared with the model.
    """
    h = 1e-30
    pts = _points(p, q + 1j * h * dq)
    v2, v3, vw = (np.imag(x) / h for x in pts[:3])
    _, _, _, e2, e3 = (np.real(x) for x in pts)
    m1, m2, m3 = p.masses
    I1, I2, I3 = p.link_inertias
    q1 = q[0]
    side = np.array([-np.sin(q1), np.cos(q1), 0.0])  # elbow/shoulder axis
    w1 = np.array([0.0, 0.0, dq[0]])
    w2 = w1 + dq[1] * (-side)
    w3 = w1 + (dq[1] - dq[2]) * (-side)

    def rod(I, w, e):
        perp = w - (w @ e) * e
        return 0.5 * I * (perp @ perp)

    return (0.5 * I1 * dq[0] ** 2
            + 0.5 * m2 * v2 @ v2 + rod(I2, w2, e2)
            + 0.5 * m3 * v3 @ v3 + rod(I3, w3, e3)
            + 0.5 * p.payload_mass * vw @ vw)


def _fd(fun, x, step=1e-6):
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        cols.append((fun(x + e) - fun(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


# -- mass matrix -----------------------------------------------------------

def test_mass_matrix_symmetric_and_positive_definite(arm, loaded_arm, rng):
    for p in (arm, loaded_arm):
        for q in random_q(rng, 100):
            M = mass_matrix(p, q)
            assert np.array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() > 0


def test_mass_matrix_matches_link_energy_oracle(arm, loaded_arm, rng):
    for p in (arm, loaded_arm):
        for q, dq in zip(random_q(rng, 200), random_dq(rng, 200)):
            assert 0.5 * dq @ mass_matrix(p, q) @ dq == pytest.approx(
                _kinetic_oracle(p, q, dq), rel=1e-8, abs=1e-12)


def test_payload_increases_inertia(arm, rng):
    heavy = ArmParams(payload_mass=2.0)
    for q in random_q(rng, 20):
        diff = mass_matrix(heavy, q) - mass_matrix(arm, q)
        assert np.linalg.eigvalsh(diff).min() >= -1e-12


# -- Coriolis --------------------------------------------------------------

def test_coriolis_vanishes_at_rest(arm, rng):
    q = random_q(rng)
    assert np.all(coriolis_matrix(arm, q, np.zeros(3)) @ np.zeros(3) == 0)


def test_skew_symmetry_by_finite_differences(loaded_arm, rng):
    d = 1e-6
    for q, dq, v in zip(random_q(rng, 200), random_dq(rng, 200), random_dq(rng, 200)):
        mdot = (mass_matrix(loaded_arm, q + d * dq) - mass_matrix(loaded_arm, q - d * dq)) / (2 * d)
        assert abs(v @ (mdot - 2 * coriolis_matrix(loaded_arm, q, dq)) @ v) < 1e-6


def test_coriolis_lagrangian_identity(loaded_arm, rng):
    # C dq = (dM/dt) dq - grad_q(1/2 dq^T M dq)
    p = loaded_arm
    d = 1e-6
    for q, dq in zip(random_q(rng, 100), random_dq(rng, 100)):
        mdot = (mass_matrix(p, q + d * dq) - mass_matrix(p, q - d * dq)) / (2 * d)
        grad = _fd(lambda x: np.array(0.5 * dq @ mass_matrix(p, x) @ dq), q)
        expect = mdot @ dq - grad
        assert np.allclose(coriolis_matrix(p, q, dq) @ dq, expect, atol=1e-5)


# -- gravity ---------------------------------------------------------------

def test_gravity_zero_when_gravity_off(rng):
    p = ArmParams(gravity_accel=0.0)
    for q in random_q(rng, 10):
        assert np.all(gravity_vector(p, q) == 0)


def test_gravity_waist_component_is_zero(loaded_arm, rng):
    for q in random_q(rng, 50):
        assert gravity_vector(loaded_arm, q)[0] == 0.0


def test_gravity_is_potential_gradient(loaded_arm, rng):
    for q in random_q(rng, 100):
        grad = _fd(lambda x: np.array(potential_energy(loaded_arm, x)), q)
        assert np.allclose(gravity_vector(loaded_arm, q), grad, atol=1e-6)


def test_potential_energy_from_independent_geometry(loaded_arm, rng):
    p = loaded_arm
    for q in random_q(rng, 20):
        p2, p3, wrist, _, _ = _points(p, q)
        m1, m2, m3 = p.masses
        expect = p.gravity_accel * (m1 * p.com_offsets[0] + m2 * p2[2] + m3 * p3[2]
                                    + p.payload_mass * wrist[2])
        assert potential_energy(p, q) == pytest.approx(expect, rel=1e-12)


# -- friction --------------------------------------------------------------

def test_friction_zero_at_rest(arm):
    assert np.all(friction_torque(arm, np.zeros(3)) == 0)


def test_friction_linear_case():
    p = ArmParams(viscous_friction=(1, 1, 1), coulomb_friction=(0, 0, 0))
    assert np.allclose(friction_torque(p, [2.0, -1.0, 0.0]), [2.0, -1.0, 0.0])


@given(dq_st)
def test_friction_opposes_motion(dq):
    f = friction_torque(ArmParams(), dq)
    nz = dq != 0
    assert np.all(np.sign(f[nz]) == np.sign(dq[nz]))


# -- kinematics ------------------------------------------------------------

def test_zero_configuration_closed_form(arm):
    l1, l2, l3 = arm.link_lengths
    assert np.allclose(forward_kinematics(arm, np.zeros(3)), [l2 + l3, 0.0, l1])


@given(q_st)
def test_waist_half_turn_negates_xy(q):
    p = ArmParams()
    a = forward_kinematics(p, q)
    b = forward_kinematics(p, q + np.array([np.pi, 0.0, 0.0]))
    assert np.allclose(b, [-a[0], -a[1], a[2]], atol=1e-12)


def test_fk_first_order(arm, rng):
    for q in random_q(rng, 50):
        dqs = rng.normal(size=3)
        for eps in (1e-3, 1e-4):
            lin = forward_kinematics(arm, q) + jacobian(arm, q) @ (eps * dqs)
            err = np.linalg.norm(forward_kinematics(arm, q + eps * dqs) - lin)
            assert err < 5.0 * eps ** 2 * (dqs @ dqs)


def test_jacobian_finite_differences(arm, rng):
    for q in random_q(rng, 200):
        fd = _fd(lambda x: forward_kinematics(arm, x), q)
        assert np.allclose(jacobian(arm, q), fd, atol=1e-6)


def test_jacobian_rank_deficient_when_stretched(arm):
    for q1 in (0.0, 0.7, -2.0):
        for q2 in (0.0, 0.4):
            s = np.linalg.svd(jacobian(arm, [q1, q2, 0.0]), compute_uv=False)
            assert s[-1] < 1e-12 * s[0]


@given(q_st)
def test_waist_column_has_no_vertical_component(q):
    assert jacobian(ArmParams(), q)[2, 0] == 0.0


def test_jacobian_row_rate_zero_at_rest(arm, rng):
    q = random_q(rng)
    for axis in range(3):
        assert np.all(jacobian_row_rate(arm, q, np.zeros(3), axis) == 0)


def test_jacobian_row_rate_directional_fd(arm, rng):
    d = 1e-6
    for q, dq in zip(random_q(rng, 200), random_dq(rng, 200)):
        fd = (jacobian(arm, q + d * dq) - jacobian(arm, q - d * dq)) / (2 * d)
        for axis in range(3):
            assert np.allclose(jacobian_row_rate(arm, q, dq, axis), fd[axis], atol=1e-5)


@given(q_st, dq_st)
def test_row_rate_of_structural_zero_is_zero(q, dq):
    assert jacobian_row_rate(ArmParams(), q, dq, 2)[0] == 0.0


def test_row_rate_rejects_bad_axis(arm):
    with pytest.raises(InvalidParameter):
        jacobian_row_rate(arm, np.zeros(3), np.zeros(3), 3)


# -- invariants over many states ---------------------------------------------

def test_thousand_state_invariants(loaded_arm, rng):
    p = loaded_arm
    d = 1e-6
    for q, dq, v in zip(random_q(rng, 1000), random_dq(rng, 1000), random_dq(rng, 1000)):
        M = mass_matrix(p, q)
        assert np.max(np.abs(M - M.T)) == 0
        assert np.linalg.eigvalsh(M).min() > 0
        mdot = (mass_matrix(p, q + d * dq) - mass_matrix(p, q - d * dq)) / (2 * d)
        assert abs(v @ (mdot - 2 * coriolis_matrix(p, q, dq)) @ v) < 1e-6
        fd = (jacobian(p, q + d * dq) - jacobian(p, q - d * dq)) / (2 * d)
        assert np.allclose(jacobian_row_rate(p, q, dq, 1), fd[1], atol=1e-5)


def test_free_motion_conserves_kinetic_energy():
    # zero torque, friction and gravity: RK4 at the harness step
    p = ArmParams(gravity_accel=0.0, viscous_friction=(0, 0, 0), coulomb_friction=(0, 0, 0))
    dist = DisturbanceProfile()
    q, dq = np.array([0.3, 0.5, 1.2]), np.array([0.8, -0.6, 0.9])
    h = 1e-4

    def f(x):
        a = plant_accel(p, JointState(x[:3], x[3:]), np.zeros(3), dist, 0.0)
        return np.concatenate([x[3:], a])

    x = np.concatenate([q, dq])
    e0 = kinetic_energy(p, q, dq)
    for _ in range(10_000):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert abs(kinetic_energy(p, x[:3], x[3:]) - e0) < 1e-6 * e0


# -- value types -----------------------------------------------------------

def test_joint_state_rejects_non_finite():
    with pytest.raises(InvalidParameter):
        JointState([0, np.nan, 0], [0, 0, 0])


@pytest.mark.parametrize("kw", [
    dict(masses=(1, 0, 1)), dict(link_lengths=(0.1, -0.1, 0.1)),
    dict(link_inertias=(-1, 0, 0)), dict(coulomb_smoothing=0.0), dict(payload_mass=-1.0),
])
def test_arm_params_invariants(kw):
    with pytest.raises(InvalidParameter):
        ArmParams(**kw)


def test_nominal_model_validation():
    with pytest.raises(InvalidParameter):
        NominalModel(np.diag([1.0, -1.0, 1.0]), [1, 1, 1])
    with pytest.raises(InvalidParameter):
        NominalModel(np.eye(3), [1, 0, 1])
    nm = NominalModel(np.diag([2.0, 4.0, 8.0]), [1.0, 2.0, 4.0])
    assert np.allclose(nm.gain @ nm.gain_inv, np.eye(3))
