import numpy as np
import pytest

from elastic_biped.kinematics import PlanarTree
from elastic_biped.model import load_shipped


@pytest.fixture(scope="module")
def biped():
    return PlanarTree(load_shipped())


@pytest.fixture(scope="module")
def pendulum():
    return PlanarTree(load_shipped("pendulum_testbed"))


def random_state(tree, rng):
    q = rng.uniform(-0.6, 0.6, tree.ndof)
    v = rng.normal(size=tree.ndof)
    return q, v


def test_dimensions(biped):
    assert biped.ndof == 9
    assert biped.joint_names == ["l_hip_pitch", "l_knee", "l_ankle_pitch", "r_hip_pitch", "r_knee", "r_ankle_pitch"]
    assert biped.total_mass == pytest.approx(23.27)
    assert len(biped.contact_point_names) == 4


def test_point_jacobian_and_bias_match_differences(biped):
    rng = np.random.default_rng(1)
    pts = (biped.contact_pt_link, biped.contact_pt_off)
    for _ in range(20):
        q, v = random_state(biped, rng)
        st = biped.evaluate(q, v, pts)
        h = 1e-6
        for j in range(biped.ndof):
            e = np.zeros(biped.ndof)
            e[j] = h
            fd = (biped.evaluate(q + e, None, pts).p - biped.evaluate(q - e, None, pts).p) / (2 * h)
            assert np.allclose(st.pJ[:, :, j], fd, atol=1e-8)
        assert np.allclose(st.pv, st.pJ @ v, atol=1e-12)
        # bias = Jdot v, from differentiating J along the motion
        dt = 1e-6
        Jp = biped.evaluate(q + dt * v, None, pts).pJ
        Jm = biped.evaluate(q - dt * v, None, pts).pJ
        assert np.allclose(st.pbias, ((Jp - Jm) / (2 * dt)) @ v, atol=1e-6)


def test_mass_matrix_symmetric_positive(biped):
    rng = np.random.default_rng(2)
    for _ in range(20):
        q, _ = random_state(biped, rng)
        M = biped.mass_matrix(q)
        assert np.allclose(M, M.T, atol=1e-14)
        assert np.linalg.eigvalsh(M).min() > 0


def test_bias_forces_match_lagrangian(biped):
    # h = Mdot v - dT/dq + dV/dq, all by central differences of T and V
    rng = np.random.default_rng(3)
    for _ in range(10):
        q, v = random_state(biped, rng)
        eps = 1e-6
        Mdot = (biped.mass_matrix(q + eps * v) - biped.mass_matrix(q - eps * v)) / (2 * eps)
        dT = np.zeros(biped.ndof)
        dV = np.zeros(biped.ndof)
        for j in range(biped.ndof):
            e = np.zeros(biped.ndof)
            e[j] = eps
            dT[j] = (biped.kinetic_energy(q + e, v) - biped.kinetic_energy(q - e, v)) / (2 * eps)
            dV[j] = (biped.potential_energy(q + e) - biped.potential_energy(q - e)) / (2 * eps)
        expected = Mdot @ v - dT + dV
        assert np.allclose(biped.bias_forces(q, v), expected, atol=1e-5)


def test_single_link_closed_form(pendulum):
    m, lc, inertia, g = 5.0, 0.5, 0.05, 9.81
    for q in (-0.7, 0.0, 0.3, 1.2):
        assert pendulum.mass_matrix([q])[0, 0] == pytest.approx(inertia + m * lc**2, rel=1e-12)
        assert pendulum.gravity_forces([q])[0] == pytest.approx(m * g * lc * np.sin(q), rel=1e-12, abs=1e-12)


def test_com_and_symmetry(biped):
    q = np.zeros(9)
    q[1] = 0.9
    p, _, J, _ = biped.com(q)
    assert p[0] == pytest.approx((11.27 * 0 + 2 * 0.8 * 0.03) / 23.27, abs=1e-12)
    # floating base: CoM moves one-for-one with the base translation
    assert np.allclose(J[:, :2], np.eye(2))


def test_angle_jacobian(biped):
    row = biped.angle_jacobian("l_foot")
    assert row[2] == 1.0 and row[3] == 1.0 and row[4] == -1.0 and row[5] == 1.0
    assert row[6:].sum() == 0.0
