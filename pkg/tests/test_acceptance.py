"""Acceptance criteria 1-9. Each test records one pass/fail line, printed at the end of the run."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from elastic_biped.dynamics import Plant
from elastic_biped.harness import get_scenario, list_scenarios, run_scenario
from elastic_biped.linkage import force_to_torque, mechanism_jacobian, torque_to_force
from elastic_biped.model import load_shipped
from elastic_biped.qp import QpProblem, solve_qp
from elastic_biped.wbc import (
    WbcGoal,
    assemble_tasks,
    build_problem,
    contact_set,
    dynamics_residual,
    joint_torque_limits,
    solve_wbc,
)

from conftest import ACCEPTANCE_LINES
from test_linkage import _fd_jacobian, random_pose, shipped_geometries
from test_wbc import _grid_min

pytestmark = pytest.mark.slow

LIMITS = {1: 5.0, 2: 30.0, 3: 60.0, 4: 120.0, 5: 180.0, 6: 60.0, 7: 60.0, 8: 30.0}


def record(crit, passed, detail):
    ACCEPTANCE_LINES.append(f"criterion {crit}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Every shipped scenario run once with default flags, plus a second run for determinism."""
    roots = [tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")]
    return roots, {}


def report(runs, name, which=0):
    roots, cache = runs
    key = (name, which)
    if key not in cache:
        cache[key] = run_scenario(replace(get_scenario(name), out=str(roots[which])))
    return cache[key]


def _verdict(r, crit):
    v = [x for x in r.verdicts if x.criterion == crit]
    assert len(v) == 1, f"criterion {crit} bound {len(v)} times in {r.scenario}"
    return v[0]


# --- 1 -------------------------------------------------------------------------------------

def test_criterion_1_linkage():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_fd = worst_rt = worst_vw = 0.0
    for geom in shipped_geometries():
        for _ in range(100):
            q = random_pose(geom, rng)
            jac = mechanism_jacobian(geom, q)
            worst_fd = max(worst_fd, np.max(np.abs(_fd_jacobian(geom, q) - jac.J)) / np.max(np.abs(jac.J)))
            tau = rng.normal(0, 50, geom.n_joints)
            f = torque_to_force(jac, tau)
            worst_rt = max(worst_rt, np.max(np.abs(force_to_torque(jac, f) - tau)) / max(1.0, np.max(np.abs(tau))))
            # virtual work: tau . qd == f . (J qd)
            qd = rng.normal(0, 5, geom.n_joints)
            scale = max(1.0, np.abs(tau).sum() * np.abs(qd).sum())
            worst_vw = max(worst_vw, abs(tau @ qd - f @ (jac.J @ qd)) / scale)
    dt = time.perf_counter() - t0
    ok = worst_fd < 1e-6 and worst_rt < 1e-9 and worst_vw < 1e-9 and dt < LIMITS[1]
    record(1, ok, f"fd {worst_fd:.1e} (<1e-6), round trip {worst_rt:.1e} (<1e-9), "
                  f"virtual work {worst_vw:.1e} (<1e-9), {dt:.2f} s (<5 s)")
    assert ok


# --- 2-5, 8: scenario verdicts --------------------------------------------------------------

def _scenario_criterion(runs, name, crit):
    r = report(runs, name)
    v = _verdict(r, crit)
    ok = v.passed and r.error is None and r.runtime < LIMITS[crit]
    note = " [oracle state]" if r.flags["oracle_state"] else ""
    record(crit, ok, f"{name}{note}: {_fmt(v.measured)}, {r.runtime:.1f} s (<{LIMITS[crit]:g} s)")
    assert r.error is None, r.error
    assert v.passed, v.measured
    assert r.runtime < LIMITS[crit]


def _fmt(d):
    parts = []
    for k, x in d.items():
        if isinstance(x, float):
            parts.append(f"{k}={x:.3g}")
        elif isinstance(x, list):
            parts.append(f"{k}=" + ";".join(_fmt(i) for i in x))
        else:
            parts.append(f"{k}={x}")
    return " ".join(parts)


def test_criterion_2_dob(runs):
    _scenario_criterion(runs, "pendulum_dob", 2)


def test_criterion_3_structural_elasticity(runs):
    _scenario_criterion(runs, "kinematic_deflection", 3)


def test_criterion_4_balance(runs):
    _scenario_criterion(runs, "balance_pushes", 4)


def test_criterion_5_stepping(runs):
    _scenario_criterion(runs, "step_in_place", 5)


def test_criterion_8_fieldbus(runs):
    _scenario_criterion(runs, "bus_faults", 8)


@pytest.mark.xfail(strict=True, reason="stepping on estimated state halts during the first swing")
def test_criterion_5_estimated_state(tmp_path):
    sc = replace(get_scenario("step_in_place"), oracle_state=False, duration=3.0, out=str(tmp_path))
    r = run_scenario(sc)
    v = _verdict(r, 5)
    ACCEPTANCE_LINES.append(f"criterion 5 (estimated state, informational): {'PASS' if v.passed else 'FAIL'}  "
                            f"{_fmt(v.measured)} halts={len(r.halts)}")
    assert v.passed


# --- 6: estimation across scenarios ---------------------------------------------------------

def test_criterion_6_estimation(runs):
    parts, ok = [], True
    runtime = 0.0
    for name in ("kinematic_deflection", "balance_pushes"):
        r = report(runs, name)
        v = _verdict(r, 6)
        ok &= v.passed
        runtime = max(runtime, r.runtime if name == "kinematic_deflection" else 0.0)
        m = v.measured
        parts.append(f"{name}: min eig {m['min_cov_eig']:.2e}, static FK raw {m['fk_err_raw'] * 1e3:.3f} mm, "
                     f"heur {m['fk_err_heur'] * 1e3:.3f} mm, kf {m['fk_err_kf'] * 1e3:.3f} mm")
    ok &= runtime < LIMITS[6]
    record(6, ok, "; ".join(parts) + f"; {runtime:.1f} s (<60 s)")
    assert ok


# --- 7: WBC --------------------------------------------------------------------------------

def test_criterion_7_wbc(runs):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_grid = 0.0
    for _ in range(10):
        R = rng.normal(size=(2, 2))
        H = R @ R.T + 0.5 * np.eye(2)
        g = rng.uniform(-1, 1, 2)
        a = rng.normal(size=2)
        a /= np.linalg.norm(a)
        b = float(rng.uniform(-0.5, 0.5))
        x = solve_qp(QpProblem(H, g, np.zeros((0, 2)), np.zeros(0), a[None, :], np.array([b]))).x
        worst_grid = max(worst_grid, float(np.max(np.abs(x - _grid_min(H, g, a, b)))))

    model = load_shipped()
    plant = Plant(model)
    tree = plant.tree
    q0 = plant.standing_pose(knee=0.3)
    v0 = np.zeros(tree.ndof)
    tasks = assemble_tasks(tree, q0, v0, WbcGoal())
    prob = build_problem(tree, q0, v0, tasks, contact_set(tree, ("L", "R")), joint_torque_limits(model, q0[3:]))
    static = dynamics_residual(prob, solve_wbc(prob))
    unit_time = time.perf_counter() - t0

    parts = [f"grid {worst_grid:.1e} (<1e-3)", f"static residual {static:.1e} (<1e-8)"]
    ok = worst_grid < 1e-3 and static < 1e-8 and unit_time < LIMITS[7]
    for name in ("balance_pushes", "step_in_place"):
        v = _verdict(report(runs, name), 7)
        ok &= v.passed
        m = v.measured
        parts.append(f"{name}: {m['solved_ticks']} ticks, KKT {m['max_kkt']:.1e}, "
                     f"min f_n {m['min_normal_force']:.1e}, cone excess {m['max_friction_excess']:.1e}")
    record(7, ok, "; ".join(parts) + f"; {unit_time:.1f} s (<60 s)")
    assert ok


# --- 9: determinism ------------------------------------------------------------------------

def test_criterion_9_determinism(runs):
    roots, _ = runs
    diffs, files = [], 0
    for name in list_scenarios():
        report(runs, name, 0)
        report(runs, name, 1)
        a, b = Path(roots[0]) / name, Path(roots[1]) / name
        for f in sorted(a.glob("*.csv")):
            files += 1
            if f.read_bytes() != (b / f.name).read_bytes():
                diffs.append(f"{name}/{f.name}")
    ok = not diffs and files > 0
    record(9, ok, f"{files} CSV files compared across two runs, {len(diffs)} differ {diffs}")
    assert ok
