import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_biped.dynamics import Plant
from elastic_biped.kinematics import PlanarTree
from elastic_biped.model import load_shipped
from elastic_biped.qp import QpProblem, solve_qp
from elastic_biped.wbc import (
    ContactSet,
    TaskKind,
    WbcGoal,
    WbcProblem,
    WbcTask,
    WbcWeights,
    assemble_tasks,
    build_problem,
    check_kkt,
    contact_set,
    dynamics_residual,
    inverse_dynamics,
    joint_torque_limits,
    solve_wbc,
)


@pytest.fixture(scope="module")
def biped():
    model = load_shipped()
    plant = Plant(model)
    q0 = plant.standing_pose(knee=0.3)
    return model, plant.tree, q0


def _problem(biped, goal=WbcGoal(), weights=WbcWeights(), v=None):
    model, tree, q0 = biped
    v = np.zeros(tree.ndof) if v is None else v
    tasks = assemble_tasks(tree, q0, v, goal, weights)
    cs = contact_set(tree, goal.stance)
    return build_problem(tree, q0, v, tasks, cs, joint_torque_limits(model, q0[tree.nb:]), weights)


def test_double_support_emits_seven_tasks(biped):
    _, tree, q0 = biped
    tasks = assemble_tasks(tree, q0, np.zeros(tree.ndof), WbcGoal())
    kinds = [t.kind for t in tasks]
    assert len(tasks) == 7
    assert kinds.count(TaskKind.FootPosition) == 2 and kinds.count(TaskKind.FootOrientation) == 2
    assert {TaskKind.PelvisOrientation, TaskKind.LinearMomentumRate, TaskKind.PrivilegedPosture} <= set(kinds)


def test_privileged_weight_ordering():
    w = WbcWeights()
    assert w.privileged <= 0.01 * w.momentum


def test_swing_task_passes_spline_acceleration(biped):
    _, tree, q0 = biped
    p = tree.point(q0, "l_foot", (0.04, -0.08))[0]
    acc = np.array([0.3, -1.2])
    goal = WbcGoal(stance=("R",), swing_foot="L", swing_ref=(p, np.zeros(2), acc))
    tasks = assemble_tasks(tree, q0, np.zeros(tree.ndof), goal)
    t = next(t for t in tasks if t.kind is TaskKind.FootPosition and t.foot == "L")
    assert np.allclose(t.desired, acc, atol=1e-12)


def test_static_standing_balances_gravity(biped):
    prob = _problem(biped)
    sol = solve_wbc(prob)
    assert dynamics_residual(prob, sol) < 1e-8
    assert sol.kkt.max() < 1e-6
    _, tree, q0 = biped
    _, _, Jc, cbias = tree.com(q0, np.zeros(tree.ndof))
    assert np.linalg.norm(Jc @ sol.qdd + cbias) < 1e-3
    assert np.all(sol.forces[:, 1] >= -1e-9)
    assert sol.forces[:, 1].sum() == pytest.approx(tree.total_mass * 9.81, rel=1e-3)


def test_task_residual_validation():
    with pytest.raises(ValueError):
        WbcTask(TaskKind.PelvisOrientation, np.zeros((1, 3)), [0.0, 1.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        WbcTask(TaskKind.PelvisOrientation, np.zeros((1, 3)), [0.0], [0.0], 0.0)
    with pytest.raises(ValueError):
        ContactSet([0], ["x"], mu=0.0)


def _grid_min(H, g, a, b):
    """Brute-force minimum of 0.5 x'Hx + g'x subject to a'x >= b: a grid over the plane plus a
    1e-4 sampling of the constraint line, refined around the best point."""
    perp = np.array([-a[1], a[0]])

    def best(c, half, step):
        xs = np.arange(-half, half + step / 2, step)
        X, Y = np.meshgrid(c[0] + xs, c[1] + xs)
        P = np.stack([X.ravel(), Y.ravel()], 1)
        s0 = (c - b * a) @ perp
        P = np.vstack([P, b * a + np.outer(s0 + xs, perp)])
        f = 0.5 * np.einsum("ni,ij,nj->n", P, H, P) + P @ g
        f[P @ a < b - 1e-12] = np.inf
        return P[np.argmin(f)]
    x = best(np.zeros(2), 2.0, 1e-2)
    return best(x, 0.02, 1e-4)


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_tiny_qp_matches_grid(seed):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(2, 2))
    H = R @ R.T + 0.5 * np.eye(2)
    g = rng.uniform(-1, 1, 2)
    a = rng.normal(size=2)
    a /= np.linalg.norm(a)
    b = float(rng.uniform(-0.5, 0.5))
    r = solve_qp(QpProblem(H, g, np.zeros((0, 2)), np.zeros(0), a[None, :], np.array([b])))
    xg = _grid_min(H, g, a, b)
    assert np.max(np.abs(r.x - xg)) < 1e-3


def test_floating_block_newton():
    model = load_shipped("floating_block")
    tree = PlanarTree(model)
    q = np.zeros(tree.ndof)
    v = np.zeros(tree.ndof)
    c, _, Jcom, cbias = tree.com(q, v)
    a_des = np.array([0.4, 0.5])
    task = WbcTask(TaskKind.LinearMomentumRate, Jcom, a_des, cbias, 10.0)
    Jr = np.zeros((1, tree.ndof))
    Jr[0, 2] = 1.0
    spin = WbcTask(TaskKind.PelvisOrientation, Jr, [0.0], [0.0], 1.0)
    cs = ContactSet(list(range(len(tree.contact_point_names))), list(tree.contact_point_names))
    prob = build_problem(tree, q, v, [task, spin], cs, np.zeros(0))
    sol = solve_wbc(prob)
    m = tree.total_mass
    a_com = Jcom @ sol.qdd + cbias
    g = np.array([0.0, -model.gravity])
    assert np.allclose(sol.forces.sum(0) + m * g, m * a_com, atol=1e-8)
    assert np.allclose(a_com, a_des, atol=1e-4)


def test_kkt_report_and_perturbation(biped):
    prob = _problem(biped, WbcGoal(momentum_rate_x=15.0))
    sol = solve_wbc(prob)
    rep = check_kkt(sol, prob)
    assert rep.max() < 1e-6
    bumped = dataclasses.replace(sol, qdd=sol.qdd + np.eye(len(sol.qdd))[4] * 1e-3)
    assert check_kkt(bumped, prob).stationarity > rep.stationarity


def test_feedback_of_accelerations_reproduces_torques(biped):
    prob = _problem(biped, WbcGoal(momentum_rate_x=-10.0))
    sol = solve_wbc(prob)
    tau = inverse_dynamics(prob.M, prob.h, sol.qdd, prob.Jc, sol.forces, prob.nb)
    assert np.allclose(tau, sol.tau, atol=1e-9)


def test_gravity_torque_of_horizontal_arm():
    model = load_shipped("pendulum_testbed")
    tree = PlanarTree(model)
    q = np.array([np.pi / 2])
    M, h = tree.mass_matrix(q), tree.bias_forces(q, np.zeros(1))
    tau = inverse_dynamics(M, h, np.zeros(1), np.zeros((0, 1)), np.zeros(0), nb=0)
    arm = model.links[1]
    assert abs(tau[0]) == pytest.approx(arm.mass * model.gravity * abs(arm.com_offset[1]), rel=1e-9)


def test_doubling_masses_doubles_gravity_torques(biped):
    model, tree, q0 = biped
    heavy = dataclasses.replace(model, links=tuple(
        dataclasses.replace(l, mass=2 * l.mass, inertia=2 * l.inertia) for l in model.links))
    g1 = tree.gravity_forces(q0)
    g2 = PlanarTree(heavy).gravity_forces(q0)
    assert np.allclose(g2, 2 * g1, atol=1e-9)


@given(st.integers(0, 6), st.floats(-30, 30), st.floats(-0.1, 0.1))
@settings(max_examples=25, deadline=None)
def test_weight_monotonicity(biped, k, mom, pitch):
    goal = WbcGoal(momentum_rate_x=mom, pelvis_pitch=pitch)
    base = _problem(biped, goal)
    sol = solve_wbc(base)
    before = np.linalg.norm(base.tasks[k].residual(sol.qdd))
    tasks = [dataclasses.replace(t) for t in base.tasks]
    tasks[k].weight *= 10.0
    heavier = dataclasses.replace(base, tasks=tasks)
    after = np.linalg.norm(tasks[k].residual(solve_wbc(heavier).qdd))
    assert after <= before + 1e-9


@given(st.floats(-40, 40), st.floats(-0.1, 0.1))
@settings(max_examples=25, deadline=None)
def test_contact_invariants(biped, mom, pitch):
    sol = solve_wbc(_problem(biped, WbcGoal(momentum_rate_x=mom, pelvis_pitch=pitch)))
    fx, fz = sol.forces[:, 0], sol.forces[:, 1]
    assert np.all(fz >= -1e-9)
    assert np.all(np.abs(fx) <= 0.8 * fz + 1e-9)


def test_solver_determinism(biped):
    a = solve_wbc(_problem(biped, WbcGoal(momentum_rate_x=12.0)))
    b = solve_wbc(_problem(biped, WbcGoal(momentum_rate_x=12.0)))
    assert a.qdd.tobytes() == b.qdd.tobytes() and a.tau.tobytes() == b.tau.tobytes()


def test_problem_dimension_checks(biped):
    prob = _problem(biped)
    with pytest.raises(ValueError):
        WbcProblem(prob.M, prob.h[:-1], prob.Jc, prob.contacts, prob.tasks, prob.tau_max)
    with pytest.raises(ValueError):
        WbcProblem(prob.M, prob.h, prob.Jc, prob.contacts, prob.tasks, prob.tau_max[:-1])
