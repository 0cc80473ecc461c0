import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_biped.closed_loop import COLUMNS, ClosedLoop, LoopConfig
from elastic_biped.dynamics import DisturbanceProfile, NoiseConfig, Plant, Push
from elastic_biped.estimation import (
    FEET,
    SOLE_CENTER,
    KfNoise,
    KinematicErrorMetric,
    NoContactError,
    estimate_com,
    kf_init,
    kf_update,
    kinematic_error,
    stiffness_heuristic,
)
from elastic_biped.model import load_shipped

K = 800.0
DT = 0.002


def test_zero_noise_converges():
    q, delta = 0.2, 0.01
    kf = kf_init(0.0, K)
    for _ in range(100):
        kf_update(kf, q + delta, q + delta, K * delta, DT)
    assert abs(kf.q - q) < 1e-6 and abs(kf.delta - delta) < 1e-6


def test_force_gain_vanishes_for_huge_force_noise():
    kf = kf_init(0.0, K, KfNoise(sigma_force=1e12))
    for _ in range(10):
        kf_update(kf, 0.01, 0.01, 5.0, DT)
    assert np.max(np.abs(kf.last_gain[:, 2])) < 1e-9


def _deflection_variance(use_force, seed=0):
    rng = np.random.default_rng(seed)
    kf = kf_init(0.0, K)
    n = kf.noise
    for _ in range(400):
        d = 0.005
        kf_update(kf, 0.1 + d + rng.normal(0, n.sigma_joint), 0.1 + d + rng.normal(0, n.sigma_motor),
                  K * d + rng.normal(0, n.sigma_force), DT, use_force=use_force)
    return kf.P[2, 2]


def test_force_channel_never_adds_variance():
    assert _deflection_variance(True) <= _deflection_variance(False)


@given(st.integers(0, 2**31), st.floats(0.0, 0.3), st.floats(-0.02, 0.02))
@settings(max_examples=50, deadline=None)
def test_covariance_stays_spd(seed, q, d):
    rng = np.random.default_rng(seed)
    kf = kf_init(0.0, K)
    for _ in range(200):
        kf_update(kf, q + d + rng.normal(0, 1e-4), q + d + rng.normal(0, 3e-3),
                  K * d + rng.normal(0, 0.3), DT)
        assert np.allclose(kf.P, kf.P.T)
        assert np.linalg.eigvalsh(kf.P).min() > 0
    assert kf.resets == 0


def test_unbiased_innovations_at_equilibrium():
    rng = np.random.default_rng(3)
    kf = kf_init(0.1, K, delta0=0.004)
    n = kf.noise
    inn = []
    for i in range(3000):
        kf_update(kf, 0.104 + rng.normal(0, n.sigma_joint), 0.104 + rng.normal(0, n.sigma_motor),
                  K * 0.004 + rng.normal(0, n.sigma_force), DT)
        if i >= 500:
            inn.append(kf.innovation.copy())
    inn = np.array(inn)
    for col in range(3):
        x = inn[:, col]
        assert abs(x.mean()) < 3 * x.std() / np.sqrt(len(x))


def test_kf_rejects_bad_inputs():
    with pytest.raises(ValueError):
        kf_init(0.0, 0.0)
    with pytest.raises(ValueError):
        kf_update(kf_init(0.0, K), 0.0, 0.0, 0.0, 0.0)


def test_stiffness_heuristic_examples():
    assert stiffness_heuristic(0.3, 0.0, 800.0) == 0.3
    assert stiffness_heuristic(0.0, 8.0, 800.0) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ValueError):
        stiffness_heuristic(0.0, 1.0, 0.0)


def test_kinematic_error_metric():
    m = KinematicErrorMetric(np.array([0.1, 0.0]))
    assert m.add(0.0, (0.0, 0.0), (0.1, 0.0)) < 1e-15
    assert m.add(0.1, (0.0, 0.0), (0.12, 0.0)) == pytest.approx(0.02)
    assert m.peak == pytest.approx(0.02)
    assert kinematic_error((0, 0), (0.1, 0.03), (0.1, 0.0)) >= 0


@pytest.fixture(scope="module")
def biped():
    plant = Plant(load_shipped())
    return plant.tree, plant.standing_pose(knee=0.3, stagger=0.1)


def test_com_independent_of_anchor_choice(biped):
    tree, q = biped
    feet = {f: tree.point(q, FEET[f], SOLE_CENTER)[0] for f in FEET}
    both = {"L": True, "R": True}
    a = estimate_com(tree, q[3:], q[2], feet["L"], "L", both)
    b = estimate_com(tree, q[3:], q[2], feet["R"], "R", both)
    assert np.allclose(a.com, b.com, atol=1e-12)
    assert np.allclose(a.com, tree.com(q)[0], atol=1e-12)


@given(st.floats(-1, 1), st.floats(-0.05, 0.05))
@settings(max_examples=30, deadline=None)
def test_com_follows_anchor_translation(biped, dx, dz):
    tree, q = biped
    foot = tree.point(q, FEET["L"], SOLE_CENTER)[0]
    a = estimate_com(tree, q[3:], q[2], foot, "L").com
    b = estimate_com(tree, q[3:], q[2], foot + (dx, dz), "L").com
    assert np.allclose(b - a, (dx, dz), atol=1e-12)


def test_no_contact_raises(biped):
    tree, q = biped
    with pytest.raises(NoContactError):
        estimate_com(tree, q[3:], 0.0, (0.0, 0.0), "L", {"L": False, "R": False})


def _frame(rows):
    R = np.array([[np.nan if isinstance(x, str) else x for x in r] for r in rows], float)
    return {c: R[:, i] for i, c in enumerate(COLUMNS)}


def test_rigid_kinematics_com_exact(biped):
    # exact joints, pitch and anchor: estimate_com reproduces the true CoM
    tree, q = biped
    foot = tree.point(q, FEET["R"], SOLE_CENTER)[0]
    c = estimate_com(tree, q[3:], q[2], foot, "R").com
    assert np.linalg.norm(c - tree.com(q)[0]) < 1e-6


@pytest.mark.slow
def test_rigid_limit_closed_loop_com():
    # closed loop, rigid links, zero noise: what remains is the penalty-contact sink of the
    # anchor foot and one bus cycle of measurement latency
    loop = ClosedLoop(load_shipped(), LoopConfig(rigid_links=True, noise=NoiseConfig.zero()), seed=0)
    tree = loop.tree
    errs = []
    orig = loop.estimator.update

    def update(m, dt):
        est = orig(m, dt)
        s = loop.state
        a = est.com.anchor
        sink = tree.point(s.q, FEET[a], SOLE_CENTER)[0] - loop.estimator.foot_world[a]
        errs.append((s.time, np.linalg.norm(est.com.com - tree.com(s.q)[0] + sink)))
        return est

    loop.estimator.update = update
    loop.run(0.6)
    late = [e for t, e in errs if t >= 0.4]
    assert max(late) < 1e-4


@pytest.mark.slow
def test_static_load_corrections_reduce_fk_error():
    loop = ClosedLoop(load_shipped(), LoopConfig(stagger=0.1), seed=0)
    d = _frame(loop.run(1.2))
    w = d["t"] >= 0.5
    raw, heur, kf = (np.mean(d[f"fk_err_{m}"][w]) for m in ("raw", "heur", "kf"))
    assert heur < raw
    assert kf <= 0.5 * raw
    assert np.all(d["kf_min_eig"][~np.isnan(d["kf_min_eig"])] > 0)


@pytest.mark.slow
def test_push_raw_com_drifts_kf_does_not():
    push = DisturbanceProfile((Push(0.6, 0.1, (50.0, 0.0), "pelvis", (0.0, 0.0)),))
    loop = ClosedLoop(load_shipped(), LoopConfig(oracle_state=True, pushes=push), seed=0)
    tree = loop.tree
    errs = {"raw": [], "kf": []}
    orig = loop.estimator.update

    def update(m, dt):
        est = orig(m, dt)
        s = loop.state
        anchor = tree.point(s.q, FEET["L"], SOLE_CENTER)[0]
        truth = tree.com(s.q)[0]
        for key, qj in (("raw", est.joint_raw), ("kf", est.q[3:])):
            c = estimate_com(tree, qj, s.q[2], anchor, "L").com
            errs[key].append(np.linalg.norm(c - truth))
        return est

    loop.estimator.update = update
    loop.run(1.0)
    raw, kf = np.array(errs["raw"]), np.array(errs["kf"])
    assert raw.max() - raw[:50].min() >= 5e-3
    assert kf.max() < raw.max()
