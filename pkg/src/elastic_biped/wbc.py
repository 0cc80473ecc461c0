"""Whole-body controller: a task-space QP over accelerations and contact forces.

Decision vector ``x = [qdd (ndof), f (2 per stance contact point)]``. The
floating-base rows of the equations of motion are hard equalities; contact
forces are unilateral and inside a two-edge friction pyramid; actuated
torques, recovered by inverse dynamics, respect per-joint limits. Task
residuals ``J qdd + Jdot v - a_des`` are weighted in the cost.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kinematics import PlanarTree
from .linkage import mechanism_jacobian
from .model import RobotModel
from .qp import KktReport, QpProblem, kkt_residuals, solve_qp

FEET = {"L": "l_foot", "R": "r_foot"}
SOLE_CENTER = (0.04, -0.08)


class TaskKind(enum.Enum):
    FootPosition = "FootPosition"
    FootOrientation = "FootOrientation"
    PelvisOrientation = "PelvisOrientation"
    LinearMomentumRate = "LinearMomentumRate"
    PrivilegedPosture = "PrivilegedPosture"


@dataclass
class WbcTask:
    kind: TaskKind
    J: np.ndarray           # (rows, ndof)
    desired: np.ndarray     # desired task acceleration
    bias: np.ndarray        # Jdot v
    weight: float
    foot: str | None = None

    def __post_init__(self):
        self.J = np.atleast_2d(self.J)
        self.desired = np.atleast_1d(np.asarray(self.desired, float))
        self.bias = np.atleast_1d(np.asarray(self.bias, float))
        if self.weight <= 0:
            raise ValueError("task weight must be > 0")
        if not (self.J.shape[0] == len(self.desired) == len(self.bias)):
            raise ValueError(f"{self.kind.value}: Jacobian rows do not match the desired vector")

    def residual(self, qdd) -> np.ndarray:
        return self.J @ qdd + self.bias - self.desired


@dataclass(frozen=True)
class WbcWeights:
    momentum: float = 10.0
    foot_position: float = 5.0
    foot_orientation: float = 5.0
    pelvis: float = 1.0
    privileged: float = 0.05
    regularization: float = 1e-6


@dataclass(frozen=True)
class WbcGains:
    com_height_kp: float = 100.0
    com_height_kd: float = 20.0
    pelvis_kp: float = 100.0
    pelvis_kd: float = 20.0
    swing_kp: float = 400.0
    swing_kd: float = 40.0
    posture_kp: float = 50.0
    posture_kd: float = 10.0
    knee_target: float = 0.3


@dataclass
class WbcGoal:
    """What the planner wants this tick."""

    stance: tuple = ("L", "R")
    momentum_rate_x: float = 0.0        # desired horizontal linear-momentum rate, N
    com_height: float | None = None     # None: hold the current height
    pelvis_pitch: float = 0.0
    swing_foot: str | None = None
    swing_ref: tuple | None = None      # (pos, vel, acc) of the sole center


@dataclass
class ContactSet:
    points: list            # contact point indices into the tree's contact list
    names: list
    mu: float = 0.8

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("friction coefficient must be > 0")


@dataclass
class WbcProblem:
    M: np.ndarray
    h: np.ndarray
    Jc: np.ndarray          # (2 * n_points, ndof), rows (x, z) per point
    contacts: ContactSet
    tasks: list
    tau_max: np.ndarray     # per actuated joint
    nb: int = 3
    weights: WbcWeights = field(default_factory=WbcWeights)

    def __post_init__(self):
        n = self.M.shape[0]
        if self.M.shape != (n, n) or self.h.shape != (n,) or self.Jc.shape[1] != n:
            raise ValueError("inconsistent WBC problem dimensions")
        if len(self.tau_max) != n - self.nb:
            raise ValueError("one torque limit per actuated joint")


@dataclass
class WbcSolution:
    qdd: np.ndarray
    forces: np.ndarray      # (n_points, 2)
    tau: np.ndarray
    objective: float
    kkt: KktReport
    iterations: int


def joint_torque_limits(model: RobotModel, q_joints) -> np.ndarray:
    """Largest joint torque each planar joint can produce without any actuator exceeding its force limit."""
    names = [j.name for j in model.dof_joints]
    q = dict(zip(names, q_joints))
    out = np.zeros(len(names))
    for k, jn in enumerate(names):
        for a in model.actuators:
            if jn not in a.joints:
                continue
            pair = model.pair_of_actuator(a.name)
            if pair is None:
                jac = mechanism_jacobian(a.geometry, [q[jn]], check_limits=False).J
                out[k] = a.force_limit * abs(jac[0, 0])
            else:
                qp = [q.get(j, 0.0) for j in pair.joints]
                jac = mechanism_jacobian(pair.geometry, qp, check_limits=False).J
                col = np.linalg.inv(jac.T)[:, pair.joints.index(jn)]
                out[k] = a.force_limit / np.max(np.abs(col))
            break
    return out


def assemble_tasks(tree: PlanarTree, q, v, goal: WbcGoal, weights: WbcWeights = WbcWeights(),
                   gains: WbcGains = WbcGains()) -> list:
    """Foot position and pitch for both feet, pelvis pitch, linear momentum rate, knee posture."""
    ndof = tree.ndof
    tasks = []
    for foot in ("L", "R"):
        link = FEET[foot]
        p, pv, J, bias = tree.point(q, link, SOLE_CENTER, v)
        Ja = tree.angle_jacobian(link)
        phi = tree.link_angle(q, link)
        if foot == goal.swing_foot and goal.swing_ref is not None:
            pos, vel, acc = (np.asarray(x, float) for x in goal.swing_ref)
            a_pos = acc + gains.swing_kp * (pos - p) + gains.swing_kd * (vel - pv)
            a_ori = gains.swing_kp * (0.0 - phi) - gains.swing_kd * float(Ja @ v)
        else:
            a_pos, a_ori = np.zeros(2), 0.0
        tasks.append(WbcTask(TaskKind.FootPosition, J, a_pos, bias, weights.foot_position, foot))
        tasks.append(WbcTask(TaskKind.FootOrientation, Ja, [a_ori], [0.0], weights.foot_orientation, foot))

    Jp = tree.angle_jacobian("pelvis")
    a_p = gains.pelvis_kp * (goal.pelvis_pitch - q[2]) - gains.pelvis_kd * v[2]
    tasks.append(WbcTask(TaskKind.PelvisOrientation, Jp, [a_p], [0.0], weights.pelvis))

    # momentum task per unit mass, so its weight is comparable with the motion tasks
    c, cv, Jc, cbias = tree.com(q, v)
    z_ref = c[1] if goal.com_height is None else goal.com_height
    a_z = gains.com_height_kp * (z_ref - c[1]) - gains.com_height_kd * cv[1]
    a_com = np.array([goal.momentum_rate_x / tree.total_mass, a_z])
    tasks.append(WbcTask(TaskKind.LinearMomentumRate, Jc, a_com, cbias, weights.momentum))

    knees = [tree.nb + tree.joint_names.index(n) for n in tree.joint_names if "knee" in n]
    Jk = np.zeros((len(knees), ndof))
    for r, d in enumerate(knees):
        Jk[r, d] = 1.0
    a_k = gains.posture_kp * (gains.knee_target - q[knees]) - gains.posture_kd * v[knees]
    tasks.append(WbcTask(TaskKind.PrivilegedPosture, Jk, a_k, np.zeros(len(knees)), weights.privileged))
    return tasks


def contact_set(tree: PlanarTree, stance, mu: float = 0.8) -> ContactSet:
    links = {FEET[f] for f in stance}
    idx = [i for i, n in enumerate(tree.contact_point_names) if n.split(".")[0] in links]
    return ContactSet(idx, [tree.contact_point_names[i] for i in idx], mu)


def build_problem(tree: PlanarTree, q, v, tasks, contacts: ContactSet, tau_max,
                  weights: WbcWeights = WbcWeights()) -> WbcProblem:
    links = tree.contact_pt_link[contacts.points]
    offs = tree.contact_pt_off[contacts.points]
    st = tree.evaluate(q, v, (links, offs))
    Jc = st.pJ.reshape(-1, tree.ndof) if len(contacts.points) else np.zeros((0, tree.ndof))
    return WbcProblem(st.M, st.h, Jc, contacts, tasks, np.asarray(tau_max, float), tree.nb, weights)


def _qp(problem: WbcProblem) -> QpProblem:
    n = problem.M.shape[0]
    nf = problem.Jc.shape[0]
    nx = n + nf
    nb = problem.nb
    H = np.zeros((nx, nx))
    g = np.zeros(nx)
    for t in problem.tasks:
        H[:n, :n] += t.weight * t.J.T @ t.J
        g[:n] += t.weight * t.J.T @ (t.bias - t.desired)
    H += problem.weights.regularization * np.eye(nx)

    A_eq = np.hstack([problem.M[:nb], -problem.Jc[:, :nb].T])
    b_eq = -problem.h[:nb]

    rows, rhs, labels = [], [], []
    mu = problem.contacts.mu
    for i in range(nf // 2):
        for coef, lab in (((0.0, 1.0), "normal"), ((-1.0, mu), "friction"), ((1.0, mu), "friction")):
            r = np.zeros(nx)
            r[n + 2 * i] = coef[0]
            r[n + 2 * i + 1] = coef[1]
            rows.append(r)
            rhs.append(0.0)
            labels.append(lab)
    # tau = M_a qdd + h_a - Jc_a^T f, kept within +-tau_max
    T = np.hstack([problem.M[nb:], -problem.Jc[:, nb:].T])
    ha = problem.h[nb:]
    for k in range(n - nb):
        rows.append(-T[k])
        rhs.append(ha[k] - problem.tau_max[k])
        labels.append("torque")
        rows.append(T[k])
        rhs.append(-problem.tau_max[k] - ha[k])
        labels.append("torque")
    return QpProblem(H, g, A_eq, b_eq, np.array(rows).reshape(-1, nx), np.array(rhs), labels)


def inverse_dynamics(M, h, qdd, Jc, forces, nb: int = 3) -> np.ndarray:
    """Actuated rows of ``M qdd + h - Jc^T f``."""
    f = np.asarray(forces, float).ravel()
    full = M @ qdd + h - (Jc.T @ f if f.size else 0.0)
    return full[nb:]


def solve_wbc(problem: WbcProblem) -> WbcSolution:
    qp = _qp(problem)
    r = solve_qp(qp)
    n = problem.M.shape[0]
    qdd = r.x[:n]
    f = r.x[n:]
    tau = inverse_dynamics(problem.M, problem.h, qdd, problem.Jc, f, problem.nb)
    return WbcSolution(qdd, f.reshape(-1, 2), tau, r.objective,
                       kkt_residuals(qp, r.x, r.lam_eq, r.lam_in), r.iterations)


def check_kkt(solution: WbcSolution, problem: WbcProblem, lam_eq=None, lam_in=None) -> KktReport:
    """KKT residuals of ``solution``; multipliers default to those found by the solver."""
    qp = _qp(problem)
    x = np.concatenate([solution.qdd, solution.forces.ravel()])
    if lam_eq is None or lam_in is None:
        r = solve_qp(qp)
        lam_eq, lam_in = r.lam_eq, r.lam_in
    return kkt_residuals(qp, x, lam_eq, lam_in)


def dynamics_residual(problem: WbcProblem, solution: WbcSolution) -> float:
    """Norm of ``M qdd + h - S^T tau - Jc^T f`` over all rows."""
    n = problem.M.shape[0]
    S = np.zeros((n - problem.nb, n))
    S[:, problem.nb:] = np.eye(n - problem.nb)
    r = problem.M @ solution.qdd + problem.h - S.T @ solution.tau - problem.Jc.T @ solution.forces.ravel()
    return float(np.linalg.norm(r))
