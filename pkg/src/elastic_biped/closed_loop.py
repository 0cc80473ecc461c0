"""Closed-loop wiring: plant, sensors, LLCs, bus, estimator, planner and WBC.

Rates: the plant integrates at 10 kHz, every LLC runs at 1 kHz, the master
(estimator, planner, WBC) at 500 Hz. Setpoints the master computes from the
feedback returned in cycle ``k`` travel in frame ``k + 1``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .dcm import (
    GaitPhase,
    GaitTiming,
    Phase,
    SwingTrajectory,
    compute_dcm,
    dcm_lqr_gain,
    momentum_rate,
    natural_frequency,
    plan_reference,
    step_in_place_plan,
    step_state_machine,
    swing_eval,
    vrp_command,
)
from .dynamics import DisturbanceProfile, NoiseConfig, Plant, Sensors
from .estimation import (
    EstimatorConfig,
    Measurements,
    NoContactError,
    StateEstimator,
    kinematic_error,
    stiffness_heuristic,
)
from .fieldbus import MASTER_PERIOD, BusConfig, BusTopology, Fieldbus
from .joint_control import ImpedanceSetpoint, Llc, llc_tick
from .model import RobotModel
from .qp import QpError
from .wbc import (
    FEET,
    SOLE_CENTER,
    WbcGains,
    WbcGoal,
    WbcWeights,
    assemble_tasks,
    build_problem,
    contact_set,
    dynamics_residual,
    joint_torque_limits,
    solve_wbc,
)

SUBSTEPS = 10          # plant steps per LLC tick
SIM_DT = 1e-4


@dataclass
class LoopConfig:
    gait: str = "balance"                 # "balance" or "step_in_place"
    n_steps: int = 5
    settle: float = 1.0                   # s of balancing before the first step
    oracle_state: bool = False
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pushes: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    wiggle: tuple | None = None           # (amplitude N, frequency Hz, start s, end s) horizontal pelvis force
    stagger: float = 0.0                  # m, left foot ahead of the right one
    knee: float = 0.3
    joint_kp: float = 0.0                 # low-gain joint impedance around the WBC posture
    joint_kd: float = 0.0
    lqr_q: float = 10.0
    lqr_r: float = 1.0
    timing: GaitTiming = field(default_factory=GaitTiming)
    apex: float = 0.05
    weights: WbcWeights = field(default_factory=WbcWeights)
    gains: WbcGains = field(default_factory=WbcGains)
    topology: BusTopology = field(default_factory=BusTopology)
    bus: BusConfig = field(default_factory=BusConfig)
    faults: tuple = ()
    k_dob: object = None                  # None: per-class assignment
    rigid_links: bool = False             # zero backlash, link-side joint encoders, no deflection correction
    assist_damping: float = 0.0           # N s/m, scripted horizontal pelvis damping (operator stand-in), off by default


COLUMNS = (
    ["t", "phase", "steps", "fall", "halt",
     "com_x", "com_z", "com_x_est", "com_z_est", "xi", "xi_true", "xi_ref", "vrp_ref", "vrp_cmd", "pitch", "pitch_est",
     "foot_l_x", "foot_l_z", "foot_r_x", "foot_r_z", "foot_l_x_est", "foot_l_z_est", "foot_r_x_est", "foot_r_z_est",
     "swing_ref_x", "swing_ref_z",
     "contact_l", "contact_r", "kin_err_raw", "kin_err_heur", "kin_err_kf",
     "fk_err_raw", "fk_err_heur", "fk_err_kf", "qerr_raw", "qerr_heur", "qerr_kf", "kf_min_eig"]
    + [f"tau_ref_{j}" for j in ("lh", "lk", "la", "rh", "rk", "ra")]
    + [f"tau_act_{j}" for j in ("lh", "lk", "la", "rh", "rk", "ra")]
    + ["kkt", "fn_min", "friction_excess", "dyn_residual", "qp_iter"]
)


class ClosedLoop:
    def __init__(self, model: RobotModel, cfg: LoopConfig, seed: int = 0):
        if cfg.rigid_links:
            model = model.with_elasticity(backlash=0.0)
            cfg = dataclasses.replace(cfg, estimator=dataclasses.replace(cfg.estimator, mode="raw"))
        self.model = model
        self.cfg = cfg
        self.plant = Plant(model)
        tree = self.tree = self.plant.tree
        q0 = self.plant.standing_pose(knee=cfg.knee, stagger=cfg.stagger)
        self.state = self.plant.initial_state(q=q0)
        self.contact = self.plant.contact_state(self.state)
        rng = np.random.default_rng(seed)
        # independent streams for sensing and the bus keep runs reproducible component by component
        s_sense, s_bus = (int(x) for x in rng.integers(0, 2**31, 2))
        self.sensors = Sensors(self.plant, cfg.noise, seed=s_sense, link_side_encoder=cfg.rigid_links)
        self.llcs = {l.name: Llc(model, l.name, k_dob=cfg.k_dob) for l in model.llcs}
        self.bus = Fieldbus(cfg.topology, cfg.bus, seed=s_bus, faults=cfg.faults)
        for name, llc in self.llcs.items():
            self.bus.attach(name, llc)
        self.estimator = StateEstimator(model, tree, q0, cfg.estimator)
        self.act_index = {a: i for i, a in enumerate(self.plant.actuator_names)}
        self.cmd = np.zeros(self.plant.n_act)

        com0 = tree.com(q0)[0]
        self.z_com = float(com0[1])
        self.omega = natural_frequency(self.z_com, model.gravity)
        self.k_lqr = dcm_lqr_gain(self.omega, cfg.lqr_q, cfg.lqr_r)
        feet = {f: tree.point(q0, FEET[f], SOLE_CENTER)[0] for f in "LR"}
        self.known_inter_foot = feet["R"] - feet["L"]
        self.phase = GaitPhase()
        self.stepping = cfg.gait == "step_in_place"
        n_plan = cfg.n_steps if self.stepping else 0
        self.plan = step_in_place_plan(feet["L"][0], feet["R"][0], n_plan, t0=cfg.settle,
                                       ds=cfg.timing.ds, ss=cfg.timing.ss)
        self.plan_offset = 0.0
        self.swing: SwingTrajectory | None = None
        self.setpoints: dict = {}
        self.rows: list = []
        self._frames_t = None
        self._frames = None
        self.halts: list = []
        self.tau_ref = np.zeros(tree.nj)
        self.tau_limits = joint_torque_limits(model, q0[tree.nb:])
        self.last_solution = None
        self.solver_failures = 0

    # --- LLC side ------------------------------------------------------------------------

    def _frames_at(self, t):
        if self._frames_t != t:
            self._frames = self.sensors.measure(self.state, self.contact)
            self._frames_t = t
        return self._frames

    def _on_tick(self, node, t):
        llc = self.llcs[node.name]
        frame = self._frames_at(t)[node.name]
        sp = {j: s for j, s in zip(llc.joints, node.setpoints)}
        cmds, fb = llc_tick(llc, frame, sp)
        node.feedback = fb
        if fb.halt is not None and node.halt is None:
            self.bus.raise_halt(node.name, fb.halt, t)
        for a, u in zip(llc.actuators, cmds):
            i = self.act_index.get(a)
            if i is not None:
                self.cmd[i] = u

    def _after_tick(self, t):
        dist = [(p.link, p.offset, p.force) for p in self.cfg.pushes.active(self.state.time)]
        w = self.cfg.wiggle
        if w is not None and w[2] <= self.state.time < w[3]:
            f = w[0] * math.sin(2 * math.pi * w[1] * (self.state.time - w[2]))
            dist.append(("pelvis", (0.0, 0.12), (f, 0.0)))
        if self.cfg.assist_damping > 0.0:
            dist.append(("pelvis", (0.0, 0.0), (-self.cfg.assist_damping * self.state.v[0], 0.0)))
        self.state, self.contact = self.plant.advance(self.state, self.cmd, dist, SIM_DT, SUBSTEPS)

    # --- master side ---------------------------------------------------------------------

    def _measurements(self, imu) -> Measurements | None:
        fb = self.bus.feedback
        if len(fb) < len(self.llcs):
            return None
        jp, jv, af, mc, ff = {}, {}, {}, {}, {}
        for name, llc in self.llcs.items():
            seg = fb[name]
            vals = seg.feedback
            for k, j in enumerate(llc.joints):
                jp[j], jv[j] = vals[k], vals[2 + k]
            for k, a in enumerate(llc.actuators):
                af[a], mc[a] = vals[4 + k], seg.motor[k]
            if name.endswith("ankle"):
                ff["L" if name.startswith("l_") else "R"] = vals[6:8]
        return Measurements(jp, jv, af, mc, ff, imu)

    def _oracle(self):
        s, tree = self.state, self.tree
        com, vcom, _, _ = tree.com(s.q, s.v)
        contacts = {f: bool(self.contact.feet[FEET[f]].grf[1] > self.cfg.estimator.contact_threshold)
                    for f in "LR"}
        return s.q.copy(), s.v.copy(), com, vcom, contacts

    def _sole(self, q, f):
        return self.tree.point(q, FEET[f], SOLE_CENTER)[0]

    def master_step(self, k: int):
        t = k * MASTER_PERIOD
        tree = self.tree
        imu = self.sensors.imu(self.state, MASTER_PERIOD)
        meas = self._measurements(imu)
        est = None
        if meas is not None:
            try:
                est = self.estimator.update(meas, MASTER_PERIOD)
            except NoContactError:
                est = None
        if self.cfg.oracle_state or est is None:
            # oracle mode, or the sensors see no contact (flight): use ground truth for this tick
            q, v, com, vcom, contacts = self._oracle()
        else:
            q, v = est.q, est.v
            com, vcom = est.com.com, est.com.com_vel
            contacts = est.contacts
        # gait phase
        td = {}
        if self.phase.state in (Phase.SwingL, Phase.SwingR):
            foot = "L" if self.phase.state is Phase.SwingL else "R"
            prev = getattr(self, "_prev_contact", {"L": True, "R": True})
            td = {foot: bool(contacts[foot] and not prev[foot])}
        self._prev_contact = dict(contacts)
        halt = self.bus.halted()
        more = self.stepping and self.phase.steps < self.cfg.n_steps
        if self.stepping and t < self.cfg.settle:
            # hold the gait clock so the first lift lines up with the plan
            self.phase = dataclasses.replace(self.phase, clock=0.0)
        self.phase, d = step_state_machine(self.phase, MASTER_PERIOD, self.cfg.timing, td, halt, more)
        if d.swing_started:
            start = self._sole(q, d.swing)
            # in-place stepping: the target is wherever the foot is when it lifts
            self.swing = SwingTrajectory(tuple(start), tuple(start), self.cfg.timing.ss, self.cfg.apex)
        if d.touchdown and self.stepping:
            # re-anchor the plan to the actual touchdown time
            self.plan_offset = t - self.plan.steps[self.phase.steps - 1].touchdown

        xi = compute_dcm(com[0], vcom[0], self.omega)
        tr = min(max(t - self.plan_offset, 0.0), self.plan.horizon)
        xi_ref, vrp_ref = plan_reference(self.plan, tr, self.omega)
        vrp = vrp_command(xi, xi_ref, vrp_ref, self.k_lqr)
        sref = None
        if d.swing and self.swing is not None:
            sref = swing_eval(self.swing, min(self.phase.clock / self.cfg.timing.ss, 1.0))
        goal = WbcGoal(stance=d.stance, momentum_rate_x=momentum_rate(tree.total_mass, self.omega, com[0], vrp),
                       com_height=self.z_com, swing_foot=d.swing, swing_ref=sref)

        kkt = fn_min = fr_ex = dyn = np.nan
        iters = 0
        if not halt:
            tasks = assemble_tasks(tree, q, v, goal, self.cfg.weights, self.cfg.gains)
            prob = build_problem(tree, q, v, tasks, contact_set(tree, d.stance), self.tau_limits, self.cfg.weights)
            try:
                sol = solve_wbc(prob)
                self.tau_ref = sol.tau
                self.last_solution = sol
                kkt = sol.kkt.max()
                fn = sol.forces[:, 1]
                fn_min = float(fn.min()) if fn.size else 0.0
                fr_ex = float(np.max(np.abs(sol.forces[:, 0]) - prob.contacts.mu * fn)) if fn.size else 0.0
                dyn = dynamics_residual(prob, sol)
                iters = sol.iterations
            except QpError:
                self.solver_failures += 1
        nb = tree.nb
        qdd = self.last_solution.qdd if self.last_solution is not None else np.zeros(tree.ndof)
        setpoints = {}
        for name, llc in self.llcs.items():
            pair = []
            for j in llc.joints:
                if j in tree.joint_names:
                    i = tree.joint_names.index(j)
                    pair.append(ImpedanceSetpoint(
                        tau_ff=float(self.tau_ref[i]), q_des=float(q[nb + i] + v[nb + i] * MASTER_PERIOD),
                        qd_des=float(v[nb + i] + qdd[nb + i] * MASTER_PERIOD),
                        k_p=self.cfg.joint_kp, k_d=self.cfg.joint_kd))
                else:
                    pair.append(ImpedanceSetpoint())
            setpoints[name] = tuple(pair)

        self._record(t, q, com, xi, xi_ref, vrp_ref, vrp, est, sref, contacts, kkt, fn_min, fr_ex, dyn, iters)
        return setpoints

    def _record(self, t, q, com, xi, xi_ref, vrp_ref, vrp, est, sref, contacts, kkt, fn_min, fr_ex, dyn, iters):
        s, tree = self.state, self.tree
        com_true, vcom_true, _, _ = tree.com(s.q, s.v)
        xi_true = compute_dcm(com_true[0], vcom_true[0], self.omega)
        feet_true = {f: self._sole(s.q, f) for f in "LR"}
        feet_est = est.feet if est is not None else {f: self._sole(q, f) for f in "LR"}
        nb = tree.nb
        truth_inter = feet_true["R"] - feet_true["L"]
        errs = [np.nan] * 3
        fk = [np.nan] * 3
        qerrs = [np.nan] * 3
        if est is not None:
            e = self.estimator
            qb = s.q.copy()
            for i, qj in enumerate((est.joint_raw,
                                    stiffness_heuristic(est.joint_raw, -e.last_tau, e.k_heur),
                                    est.q[nb:])):
                # true base pose, estimated joints: isolates the joint-space error
                qb[nb:] = qj
                fl, fr = self._sole(qb, "L"), self._sole(qb, "R")
                errs[i] = kinematic_error(fl, fr, truth_inter)
                fk[i] = 0.5 * (np.linalg.norm(fl - feet_true["L"]) + np.linalg.norm(fr - feet_true["R"]))
                qerrs[i] = float(np.max(np.abs(qj - s.q[nb:])))
        tau_act = self.plant.spring_torque(s)
        row = [t, self.phase.state.value, self.phase.steps, int(self.phase.fall_risk), int(self.bus.halted()),
               com_true[0], com_true[1], com[0], com[1], xi, xi_true, xi_ref, vrp_ref, vrp, s.q[2], q[2],
               *feet_true["L"], *feet_true["R"], *feet_est["L"], *feet_est["R"],
               *(sref[0] if sref is not None else (np.nan, np.nan)),
               int(contacts["L"]), int(contacts["R"]), *errs, *fk, *qerrs,
               self.estimator.kf_min_eig if self.estimator.kfs is not None else np.nan,
               *self.tau_ref, *tau_act, kkt, fn_min, fr_ex, dyn, iters]
        self.rows.append(row)

    def run(self, duration: float):
        n = int(round(duration / MASTER_PERIOD))
        for k in range(n):
            setpoints = self.master_step(k)
            self.bus.run_cycle(k, setpoints, self._on_tick, self._after_tick)
        return self.rows
