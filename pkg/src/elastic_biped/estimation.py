"""State estimation for the elastic biped.

Per joint, a Kalman filter fuses the absolute joint encoder, the motor
encoder (mapped through the linkage) and the force sensor (mapped to joint
torque) to recover the link-side angle past the structural compliance. The
floating base is then placed by forward kinematics from the stance foot,
which is anchored where it touched down.

Measurement model, state ``[q, qd, delta]``:
    joint encoder   q + delta        (reads in front of the compliant links)
    motor encoder   q + delta        (backlash folded into its noise)
    force           k_nom * delta    (joint torque)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import COUNTS_PER_REV, ImuSample
from .kinematics import PlanarTree
from .linkage import actuator_to_joint, mechanism_jacobian
from .model import RobotModel

FEET = {"L": "l_foot", "R": "r_foot"}
SOLE_CENTER = (0.04, -0.08)


class NoContactError(RuntimeError):
    pass


@dataclass(frozen=True)
class KfNoise:
    sigma_joint: float = 5e-5       # rad, encoder quantization and mounting
    sigma_motor: float = 2e-3       # rad, inflated by the backlash band
    sigma_force: float = 0.15       # N m, conditioned force channel in joint torque
    sigma_acc: float = 300.0        # rad/s^2, white acceleration driving q
    sigma_defl: float = 0.5         # rad/sqrt(s), random walk of the deflection


@dataclass
class JointKfState:
    x: np.ndarray                   # [q, qd, delta]
    P: np.ndarray
    k_nom: float                    # N m/rad
    noise: KfNoise = field(default_factory=KfNoise)
    resets: int = 0
    innovation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_gain: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @property
    def q(self) -> float:
        return float(self.x[0])

    @property
    def qd(self) -> float:
        return float(self.x[1])

    @property
    def delta(self) -> float:
        return float(self.x[2])


PRIOR = np.diag([1e-2, 1.0, 1e-3])


def kf_init(q0: float, k_nom: float, noise: KfNoise = KfNoise(), delta0: float = 0.0) -> JointKfState:
    if k_nom <= 0:
        raise ValueError("nominal stiffness must be > 0")
    return JointKfState(np.array([q0, 0.0, delta0]), PRIOR.copy(), float(k_nom), noise)


def _is_spd(P) -> bool:
    try:
        np.linalg.cholesky(P)
        return True
    except np.linalg.LinAlgError:
        return False


def kf_update(kf: JointKfState, z_joint, z_motor, z_force, dt: float, use_force: bool = True) -> JointKfState:
    """Predict by ``dt`` then fuse whichever measurements are not ``None``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    n = kf.noise
    F = np.array([[1.0, dt, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    qa = n.sigma_acc**2
    Q = np.array([[qa * dt**3 / 3, qa * dt**2 / 2, 0.0],
                  [qa * dt**2 / 2, qa * dt, 0.0],
                  [0.0, 0.0, n.sigma_defl**2 * dt]])
    x = F @ kf.x
    P = F @ kf.P @ F.T + Q

    rows, z, r = [], [], []
    if z_joint is not None:
        rows.append([1.0, 0.0, 1.0]); z.append(z_joint); r.append(n.sigma_joint**2)
    if z_motor is not None:
        rows.append([1.0, 0.0, 1.0]); z.append(z_motor); r.append(n.sigma_motor**2)
    if z_force is not None and use_force:
        rows.append([0.0, 0.0, kf.k_nom]); z.append(z_force); r.append(n.sigma_force**2)
    K = np.zeros((3, 0))
    innov = np.zeros(0)
    if rows:
        H = np.array(rows)
        R = np.diag(r)
        innov = np.asarray(z) - H @ x
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ innov
        # Joseph form keeps P symmetric positive semidefinite under rounding
        IKH = np.eye(3) - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    if not _is_spd(P) or not np.all(np.isfinite(x)):
        kf.resets += 1
        P = PRIOR.copy()
        if not np.all(np.isfinite(x)):
            x = kf.x.copy()
    kf.x, kf.P = x, P
    kf.innovation = innov
    kf.last_gain = K
    return kf


def stiffness_heuristic(q_meas, tau_est, k_heur):
    """``q_meas + tau_est / k_heur``; ``tau_est`` is the load torque the links carry."""
    if np.any(np.asarray(k_heur) <= 0):
        raise ValueError("k_heur must be > 0")
    return np.asarray(q_meas) + np.asarray(tau_est) / np.asarray(k_heur)


# ------------------------------------------------------------------------------------------


@dataclass
class Measurements:
    """Master-side view of one high-level tick, keyed by model names."""

    joint_pos: dict          # joint -> rad (joint encoder)
    joint_vel: dict          # joint -> rad/s (LLC filtered derivative)
    actuator_force: dict     # actuator -> N (conditioned)
    motor_counts: dict       # actuator -> counts
    foot_force: dict         # "L"/"R" -> (fx, fz) N
    imu: ImuSample


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "kf"                  # "kf", "heuristic" or "raw"
    k_heur: float | None = None       # N m/rad; defaults to the model's joint stiffness
    contact_threshold: float = 30.0   # N, contact is declared above this
    contact_release: float = 15.0     # N, and dropped below this
    vel_cutoff: float = 10.0          # Hz, CoM velocity low-pass
    tilt_cutoff: float = 0.5          # Hz, complementary filter: inclination below, gyro above
    kf_noise: KfNoise = KfNoise()
    use_force: bool = True

    def __post_init__(self):
        if self.mode not in ("kf", "heuristic", "raw"):
            raise ValueError(f"unknown estimator mode {self.mode!r}")


@dataclass(frozen=True)
class ComEstimate:
    com: np.ndarray
    com_vel: np.ndarray
    anchor: str
    pitch: float


@dataclass
class EstimatedState:
    q: np.ndarray            # full generalized coordinates
    v: np.ndarray
    com: ComEstimate
    contacts: dict           # "L"/"R" -> bool
    touchdown: dict          # "L"/"R" -> contact onset this tick
    feet: dict               # "L"/"R" -> sole-center position from FK
    joint_raw: np.ndarray    # encoder reading, for comparison


class JointMaps:
    """Motor counts and actuator forces to joint-space quantities for the planar joints."""

    def __init__(self, model: RobotModel, joint_names):
        self.model = model
        self.joint_names = list(joint_names)
        self.items = []          # (joint index, actuators, geometry, position of the joint in the geometry)
        for k, jn in enumerate(self.joint_names):
            acts = [a for a in model.actuators if jn in a.joints]
            pair = model.pair_of_actuator(acts[0].name)
            if pair is None:
                self.items.append((k, (acts[0].name,), acts[0].geometry, 0, (jn,)))
            else:
                self.items.append((k, tuple(pair.actuators), pair.geometry, pair.joints.index(jn), pair.joints))
        self._guess = {}

    def motor_side(self, counts: dict, q_hint) -> np.ndarray:
        out = np.zeros(len(self.joint_names))
        for k, acts, geom, pos, joints in self.items:
            travel = np.array([counts[a] * self.model.actuator(a).screw_pitch / COUNTS_PER_REV for a in acts])
            guess = self._guess.get(k)
            if guess is None:
                guess = np.zeros(len(joints))
                guess[pos] = q_hint[k]
            sol = actuator_to_joint(geom, travel, q_guess=guess)
            self._guess[k] = sol
            out[k] = sol[pos]
        return out

    def joint_torque(self, forces: dict, q) -> np.ndarray:
        out = np.zeros(len(self.joint_names))
        for k, acts, geom, pos, joints in self.items:
            qq = np.zeros(len(joints))
            qq[pos] = q[k]
            J = mechanism_jacobian(geom, qq, check_limits=False).J
            f = np.array([forces[a] for a in acts])
            out[k] = (J.T @ f)[pos]
        return out


class StateEstimator:
    def __init__(self, model: RobotModel, tree: PlanarTree, q_init, config: EstimatorConfig = EstimatorConfig()):
        self.model = model
        self.tree = tree
        self.config = config
        nb = tree.nb
        self.nb = nb
        self.maps = JointMaps(model, tree.joint_names)
        stiff = np.array([model.joint(j).elasticity.stiffness for j in tree.joint_names])
        self.k_nom = stiff
        self.k_heur = stiff if config.k_heur is None else np.full(len(stiff), config.k_heur)
        q_init = np.asarray(q_init, float)
        self.kfs = None        # initialised from the first measurements
        # feet start where the initial pose puts them
        self.foot_world = {f: self._sole(q_init, f) for f in FEET}
        self.anchor = "L"
        self.contacts = {"L": True, "R": True}
        self.base = q_init[:2].copy()
        self.base_vel = np.zeros(2)
        self.com_vel = np.zeros(2)
        self._prev_com = None
        self.pitch = None
        self.kf_min_eig = np.inf
        self.history_spd_ok = True
        self.last_tau = np.zeros(tree.nj)

    def _sole(self, q, foot):
        return self.tree.point(q, FEET[foot], SOLE_CENTER)[0]

    def joint_estimate(self, z_joint, z_motor, tau, qd_meas, dt):
        mode = self.config.mode
        if mode == "raw":
            return z_joint.copy(), qd_meas.copy()
        if mode == "heuristic":
            # load torque on the links is the opposite of the spring torque they receive
            return stiffness_heuristic(z_joint, -tau, self.k_heur), qd_meas.copy()
        if self.kfs is None:
            self.kfs = [kf_init(z_joint[k] - tau[k] / self.k_nom[k], self.k_nom[k], self.config.kf_noise,
                                tau[k] / self.k_nom[k]) for k in range(len(z_joint))]
        q = np.zeros(len(z_joint))
        qd = np.zeros(len(z_joint))
        for k, kf in enumerate(self.kfs):
            kf_update(kf, z_joint[k], z_motor[k], tau[k], dt, self.config.use_force)
            ev = float(np.linalg.eigvalsh(kf.P).min())
            self.kf_min_eig = min(self.kf_min_eig, ev)
            if ev <= 0:
                self.history_spd_ok = False
            q[k], qd[k] = kf.q, kf.qd
        return q, qd

    def update(self, m: Measurements, dt: float) -> EstimatedState:
        tree = self.tree
        names = tree.joint_names
        z_joint = np.array([m.joint_pos[j] for j in names])
        qd_meas = np.array([m.joint_vel[j] for j in names])
        z_motor = self.maps.motor_side(m.motor_counts, z_joint) if self.config.mode == "kf" else None
        tau = self.maps.joint_torque(m.actuator_force, z_joint)
        self.last_tau = tau
        qj, qdj = self.joint_estimate(z_joint, z_motor if z_motor is not None else z_joint, tau, qd_meas, dt)

        rate = m.imu.rate
        if self.pitch is None:
            self.pitch = m.imu.pitch
        else:
            a = math.exp(-2 * math.pi * self.config.tilt_cutoff * dt)
            self.pitch = a * (self.pitch + rate * dt) + (1 - a) * m.imu.pitch
        pitch = self.pitch
        cfg = self.config
        contacts = {f: float(m.foot_force[f][1]) > (cfg.contact_release if self.contacts[f] else cfg.contact_threshold)
                    for f in FEET}
        if not any(contacts.values()):
            raise NoContactError("no foot above the contact threshold")
        touchdown = {f: contacts[f] and not self.contacts[f] for f in FEET}

        q = np.zeros(tree.ndof)
        q[2] = pitch
        q[self.nb:] = qj
        # feet relative to a base at the origin
        rel = {f: self._sole(q, f) for f in FEET}
        if not contacts[self.anchor]:
            self.anchor = "L" if contacts["L"] else "R"
        base = self.foot_world[self.anchor] - rel[self.anchor]
        for f in FEET:
            if touchdown[f]:
                # anchor reset: the new stance foot is wherever FK puts it now
                self.foot_world[f] = base + rel[f]
        self.contacts = contacts
        q[:2] = base

        # base velocity from the anchor foot's no-slip constraint instead of differentiating
        # positions, which jump whenever the anchor changes
        v = np.zeros(tree.ndof)
        v[2] = rate
        v[self.nb:] = qdj
        _, pv, _, _ = tree.point(q, FEET[self.anchor], SOLE_CENTER, v)
        v[:2] = -pv
        com, com_vel, _, _ = tree.com(q, v)
        beta = 1.0 - math.exp(-2 * math.pi * cfg.vel_cutoff * dt)
        if self._prev_com is None:
            self.com_vel = com_vel.copy()
        self.com_vel += beta * (com_vel - self.com_vel)
        self._prev_com = com.copy()
        self.base_vel = v[:2].copy()
        feet = {f: base + rel[f] for f in FEET}
        return EstimatedState(q, v, ComEstimate(com, self.com_vel.copy(), self.anchor, pitch),
                              contacts, touchdown, feet, z_joint)


def estimate_com(tree: PlanarTree, q_joints, pitch: float, anchor_world, anchor: str = "L",
                 contacts: dict | None = None) -> ComEstimate:
    """CoM from forward kinematics with the ``anchor`` foot's sole center pinned at ``anchor_world``."""
    contacts = contacts if contacts is not None else {anchor: True}
    if not contacts.get(anchor, False):
        raise NoContactError(f"anchor foot {anchor} is not in contact")
    q = np.zeros(tree.ndof)
    q[2] = pitch
    q[tree.nb:] = q_joints
    rel = tree.point(q, FEET[anchor], SOLE_CENTER)[0]
    q[:2] = np.asarray(anchor_world, float) - rel
    return ComEstimate(tree.com(q)[0], np.zeros(2), anchor, pitch)


def kinematic_error(left, right, known) -> float:
    """``|| (right - left) - known ||``: FK inter-foot vector against the physical one."""
    return float(np.linalg.norm((np.asarray(right) - np.asarray(left)) - np.asarray(known)))


@dataclass
class KinematicErrorMetric:
    known: np.ndarray
    samples: list = field(default_factory=list)

    def add(self, t, left, right) -> float:
        e = kinematic_error(left, right, self.known)
        self.samples.append((t, e))
        return e

    @property
    def peak(self) -> float:
        return max((e for _, e in self.samples), default=0.0)
