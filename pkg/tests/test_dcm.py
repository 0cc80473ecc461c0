import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from elastic_biped.dcm import (
    DcmState,
    Footstep,
    FootstepPlan,
    GaitPhase,
    GaitTiming,
    IllegalEvent,
    Phase,
    PlannerError,
    SwingTrajectory,
    compute_dcm,
    dcm_lqr_gain,
    natural_frequency,
    plan_reference,
    step_in_place_plan,
    step_state_machine,
    swing_eval,
    vrp_command,
)

from oracles import LipModel, lip_closed_form


def test_compute_dcm_examples():
    assert compute_dcm(0.2, 0.0, 3.0) == 0.2
    assert compute_dcm(0.0, 0.3, 3.0) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(PlannerError):
        compute_dcm(0.0, 0.0, 0.0)
    assert DcmState(0.1, 0.3, 3.0).xi == pytest.approx(0.2)


@given(st.floats(-0.2, 0.2), st.floats(-0.5, 0.5), st.floats(-0.1, 0.1), st.floats(0.3, 1.2))
@settings(max_examples=100, deadline=None)
def test_lip_closed_form_dcm_is_exponential(x0, xd0, vrp, z0):
    lip = LipModel(30.0, z0)
    w = lip.omega
    t = np.linspace(0.0, 0.8, 9)
    x, xd = lip_closed_form(lip, x0, xd0, vrp, t)
    xi = compute_dcm(x, xd, w)
    expect = vrp + (compute_dcm(x0, xd0, w) - vrp) * np.exp(w * t)
    assert np.allclose(xi, expect, atol=1e-9 * max(1.0, np.max(np.abs(expect))))


def test_dcm_rate_on_integrated_lip():
    # LIP integrated numerically, DCM rate from finite differences of the samples
    lip = LipModel(30.0, 0.8)
    w, vrp = lip.omega, 0.03
    sol = solve_ivp(lambda t, y: [y[1], w**2 * (y[0] - vrp)], (0, 0.5), [0.0, 0.1],
                    t_eval=np.linspace(0, 0.5, 501), rtol=1e-11, atol=1e-12)
    xi = compute_dcm(sol.y[0], sol.y[1], w)
    dxi = np.gradient(xi, sol.t)
    assert np.max(np.abs(dxi - w * (xi - vrp))[5:-5]) < 1e-3


def _riccati_iterative(a, b, q, r, dt=1e-4, steps=400_000):
    P = 0.0
    for _ in range(steps):
        P += dt * (2 * a * P - P * P * b * b / r + q)
        if abs(2 * a * P - P * P * b * b / r + q) < 1e-13:
            break
    return P


@pytest.mark.parametrize("w,q,r", [(3.0, 10.0, 1.0), (3.5, 1.0, 1.0), (2.0, 0.1, 2.0)])
def test_lqr_gain_matches_iterated_riccati(w, q, r):
    P = _riccati_iterative(w, -w, q, r)
    assert dcm_lqr_gain(w, q, r) == pytest.approx(w * P / r, abs=1e-9)
    assert dcm_lqr_gain(w, q, r) == pytest.approx(1 + math.sqrt(1 + q / r), abs=1e-12)


def test_lqr_gain_limit_is_marginal():
    # q/r -> 0: gain -> 2, closed-loop pole w (1 - k) -> -w
    k = dcm_lqr_gain(3.0, 1e-12, 1.0)
    assert k == pytest.approx(2.0, abs=1e-9)
    assert 3.0 * (1 - k) == pytest.approx(-3.0, abs=1e-8)


@given(st.floats(0.5, 10.0), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_lqr_closed_loop_stable(w, q, r):
    k = dcm_lqr_gain(w, q, r)
    assert w * (1 - k) < 0


def test_lqr_gain_rejects_bad_weights():
    with pytest.raises(PlannerError):
        dcm_lqr_gain(3.0, 0.0, 1.0)


@given(st.floats(-0.1, 0.1), st.floats(0.5, 1.2))
@settings(max_examples=50, deadline=None)
def test_lqr_error_decays_on_lip(e0, z0):
    # DCM error under the LQR VRP is exponentially stable with rate w (k - 1)
    w = natural_frequency(z0)
    k = dcm_lqr_gain(w)
    lam = w * (k - 1)
    dt, xi = 1e-4, e0
    for n in range(1, 3001):
        vrp = vrp_command(xi, 0.0, 0.0, k)
        xi += dt * w * (xi - vrp)
        if n % 500 == 0:
            assert abs(xi) <= abs(e0) * math.exp(-0.99 * lam * n * dt) + 1e-15


def test_single_stationary_plan_is_constant():
    plan = FootstepPlan({"L": 0.0, "R": 0.1})
    for t in (0.0, 0.4, 1.0):
        xi, vrp = plan_reference(plan, t, 3.5)
        assert xi == pytest.approx(0.05, abs=1e-15) and vrp == pytest.approx(0.05, abs=1e-15)


def test_reference_continuous_at_boundaries():
    plan = FootstepPlan({"L": 0.0, "R": 0.1}, (Footstep("L", 0.05, 1.4), Footstep("R", 0.15, 2.8)))
    w = 3.5
    for t0, t1, _ in plan.segments()[:-1]:
        a = plan_reference(plan, t1 - 1e-13, w)[0]
        b = plan_reference(plan, t1 + 1e-13, w)[0]
        assert abs(a - b) < 1e-12


def test_backward_recursion_matches_forward_integration():
    # the DCM diverges forward in time, so keep the horizon short enough for the integrator
    plan = step_in_place_plan(0.0, 0.1, 1)
    w = 3.5
    xi = plan_reference(plan, 0.0, w)[0]
    for a, b, r in plan.segments():
        sol = solve_ivp(lambda tt, y: [w * (y[0] - r)], (a, b), [xi], rtol=1e-12, atol=1e-14)
        xi = sol.y[0, -1]
    assert xi == pytest.approx(plan_reference(plan, plan.horizon, w)[0], abs=1e-6)


def test_horizon_exceeded():
    plan = step_in_place_plan(0.0, 0.1, 1)
    with pytest.raises(PlannerError):
        plan_reference(plan, plan.horizon + 0.1, 3.5)


def test_plan_validation():
    with pytest.raises(PlannerError):
        FootstepPlan({"L": 0, "R": 0}, (Footstep("L", 0, 1.4), Footstep("L", 0, 2.8)))
    with pytest.raises(PlannerError):
        FootstepPlan({"L": 0, "R": 0}, ds_duration=0.0)


def test_swing_boundaries_and_apex():
    traj = SwingTrajectory((0.1, 0.0), (0.2, 0.01), 0.6, apex=0.05)
    p, v, _ = swing_eval(traj, 0.0)
    assert np.allclose(p, (0.1, 0.0), atol=1e-15) and np.allclose(v, 0.0, atol=1e-15)
    p, v, _ = swing_eval(traj, 1.0)
    assert np.allclose(p, (0.2, 0.01), atol=1e-15) and np.allclose(v, 0.0, atol=1e-15)
    traj = SwingTrajectory((0.1, 0.0), (0.1, 0.0), 0.6)
    p, v, _ = swing_eval(traj, 0.5)
    assert abs(p[1] - 0.05) < 1e-12 and abs(v[1]) < 1e-12
    with pytest.raises(PlannerError):
        swing_eval(traj, 1.2)


@given(st.floats(0.01, 0.99))
@settings(max_examples=100, deadline=None)
def test_swing_derivatives_consistent(s):
    traj = SwingTrajectory((0.0, 0.0), (0.1, 0.02), 0.6)
    h = 1e-6
    p0, v0, a0 = swing_eval(traj, s)
    p1, v1, _ = swing_eval(traj, s + h)
    pm, vm, _ = swing_eval(traj, s - h)
    assert np.allclose((p1 - pm) / (2 * h * traj.duration), v0, atol=1e-5)
    if abs(s - 0.5) > 2 * h:
        assert np.allclose((v1 - vm) / (2 * h * traj.duration), a0, atol=1e-3)


def _run(events, steps, dt=0.002, timing=GaitTiming()):
    ph = GaitPhase()
    log = []
    for k in range(steps):
        ph, d = step_state_machine(ph, dt, timing, events.get(k))
        log.append((ph.state, d))
    return ph, log


def test_timed_sequence():
    ph, log = _run({}, 500)
    states = [s for s, _ in log]
    assert states[0] is Phase.DoubleSupport
    first_transfer = states.index(Phase.TransferToL)
    first_swing = states.index(Phase.SwingL)
    assert (first_transfer + 1) * 0.002 == pytest.approx(0.4, abs=1e-9)
    assert (first_swing + 1) * 0.002 == pytest.approx(0.8, abs=1e-9)
    assert log[first_swing][1].remove_contact == "L" and log[first_swing][1].swing_started
    assert log[first_swing][1].stance == ("R",)


def test_early_touchdown_overrides_timer():
    timing = GaitTiming()
    ph = GaitPhase(Phase.SwingL, 0.8 * timing.ss - 0.002)
    ph, d = step_state_machine(ph, 0.002, timing, {"L": True})
    assert ph.state is Phase.DoubleSupport and d.add_contact == "L" and ph.steps == 1
    assert ph.next_swing == "R"


def test_touchdown_in_double_support_is_illegal():
    with pytest.raises(IllegalEvent):
        step_state_machine(GaitPhase(), 0.002, touchdown={"L": True})


def test_late_touchdown_raises_fall_flag():
    ph = GaitPhase(Phase.SwingR, 0.0)
    for _ in range(500):
        ph, _ = step_state_machine(ph, 0.002)
    assert ph.state is Phase.SwingR and ph.fall_risk


@given(st.lists(st.tuples(st.integers(0, 2000), st.sampled_from("LR")), max_size=10), st.integers(0, 3))
@settings(max_examples=100, deadline=None)
def test_never_removes_the_only_stance(events, _):
    ph = GaitPhase()
    ev = {k: {f: True} for k, f in events}
    stance = {"L", "R"}
    for k in range(2000):
        try:
            ph, d = step_state_machine(ph, 0.002, touchdown=ev.get(k))
        except IllegalEvent:
            continue
        if d.remove_contact is not None:
            assert stance == {"L", "R"}
            stance.discard(d.remove_contact)
        if d.add_contact is not None:
            stance.add(d.add_contact)
        assert stance and set(d.stance) == stance


def test_phase_log_deterministic():
    ev = {600: {"L": True}, 1100: {"R": True}}
    a = _run(ev, 1500)[1]
    b = _run(ev, 1500)[1]
    assert a == b


def test_halt_is_absorbing():
    ph, _ = step_state_machine(GaitPhase(), 0.002, halt=True)
    ph, d = step_state_machine(ph, 0.002)
    assert ph.state is Phase.Halted and d.stance == ("L", "R")
