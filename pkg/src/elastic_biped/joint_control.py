"""Low-level controller core: what one LLC runs every millisecond for its two actuators.

Pipeline per tick: signal conditioning (60 Hz notch, 200 Hz low-pass on the
force and current channels), safety checks, joint impedance -> torque,
torque -> actuator force through the inverse mechanism Jacobian, and a
disturbance-observer force loop per actuator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .dynamics import SensorFrame
from .linkage import (
    SingularJacobianError,
    mechanism_jacobian,
    torque_to_force,
)
from .model import RobotModel

LLC_RATE = 1000.0


class Biquad:
    """Direct-form II transposed second-order section."""

    def __init__(self, b, a):
        b = np.asarray(b, dtype=float) / a[0]
        a = np.asarray(a, dtype=float) / a[0]
        self.b0, self.b1, self.b2 = (float(x) for x in b)
        self.a1, self.a2 = float(a[1]), float(a[2])
        self.z1 = 0.0
        self.z2 = 0.0

    def __call__(self, x: float) -> float:
        y = self.b0 * x + self.z1
        self.z1 = self.b1 * x - self.a1 * y + self.z2
        self.z2 = self.b2 * x - self.a2 * y
        return y

    def prime(self, x: float):
        """Set the state to the steady state for a constant input ``x``."""
        g = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
        y = g * x
        self.z2 = self.b2 * x - self.a2 * y
        self.z1 = self.b1 * x - self.a1 * y + self.z2

    def response(self, f, fs):
        _, hh = signal.freqz([self.b0, self.b1, self.b2], [1.0, self.a1, self.a2], worN=[f], fs=fs)
        return hh[0]


@dataclass(frozen=True)
class FilterConfig:
    notch_hz: float = 60.0
    notch_q: float = 10.0
    lowpass_hz: float = 200.0
    fs: float = LLC_RATE


def notch_filter(cfg: FilterConfig) -> Biquad:
    b, a = signal.iirnotch(cfg.notch_hz, cfg.notch_q, fs=cfg.fs)
    return Biquad(b, a)


def lowpass_filter(cfg: FilterConfig) -> Biquad:
    b, a = signal.butter(2, cfg.lowpass_hz, fs=cfg.fs)
    return Biquad(b, a)


class ChannelConditioner:
    """Notch then low-pass for one scalar channel."""

    def __init__(self, cfg: FilterConfig | None = None):
        cfg = cfg or FilterConfig()
        self.notch = notch_filter(cfg)
        self.lowpass = lowpass_filter(cfg)
        self.primed = False

    def __call__(self, x: float) -> float:
        if not self.primed:
            self.notch.prime(x)
            self.lowpass.prime(x)
            self.primed = True
        return self.lowpass(self.notch(x))

    def gain(self, f, fs=LLC_RATE):
        return self.notch.response(f, fs) * self.lowpass.response(f, fs)


class SignalConditioner:
    """Per-LLC conditioning state: force and current channels are filtered, encoders pass through."""

    def __init__(self, n_actuators: int, cfg: FilterConfig | None = None):
        self.force = [ChannelConditioner(cfg) for _ in range(n_actuators)]
        self.current = [ChannelConditioner(cfg) for _ in range(n_actuators)]


def condition_signals(raw: SensorFrame, cond: SignalConditioner) -> SensorFrame:
    force = np.array([f(x) for f, x in zip(cond.force, raw.force)])
    current = np.array([f(x) for f, x in zip(cond.current, raw.current)])
    return SensorFrame(raw.llc, raw.joint_enc, raw.motor_enc, force, current, raw.foot_ft, raw.timestamp)


# ------------------------------------------------------------------------------------------


@dataclass
class ImpedanceSetpoint:
    tau_ff: float = 0.0
    q_des: float = 0.0
    qd_des: float = 0.0
    k_p: float = 0.0
    k_d: float = 0.0

    def __post_init__(self):
        if self.k_p < 0 or self.k_d < 0:
            raise ValueError("impedance gains must be >= 0")


def impedance_to_torque(sp: ImpedanceSetpoint, q: float, qd: float) -> float:
    return sp.tau_ff + sp.k_p * (sp.q_des - q) + sp.k_d * (sp.qd_des - qd)


# ------------------------------------------------------------------------------------------


@dataclass
class DobState:
    """Disturbance-observer force loop for one actuator.

    Nominal plant: sensed force follows the command through a first-order
    lag ``tau_n``, the series spring being an ideal leaf spring ``k_nom``, so
    the force rate is ``k_nom * v_rel`` with ``v_rel`` the spring deflection
    rate in actuator space. Inverting it gives the command that would explain
    the measurement; the Q-filtered difference to the command actually sent
    is the disturbance estimate ``d_hat``.

    The command is ``PI(f_des - f) + f_des - k_d * fdot - k_dob * d_hat``. The
    force-rate term damps the rotor/spring resonance, which the actuator lag
    would otherwise destabilize.
    """

    k_dob: float = 0.8
    k_nom: float = 3.5e5          # N/m (350 N/mm leaf spring)
    q_cutoff: float = 5.0         # Hz, first-order Q-filter
    tau_n: float = 0.005          # s, nominal actuator lag
    k_p: float = 2.0
    k_i: float = 50.0             # 1/s
    k_d: float = 0.04             # s, force-rate damping
    rate_cutoff: float = 60.0     # Hz, smoothing of the force-rate estimate
    force_limit: float = 2000.0
    d_hat: float = 0.0
    integ: float = 0.0
    u_prev: float = 0.0
    f_prev: float | None = None
    f_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.k_dob <= 1.0:
            raise ValueError("k_dob must lie in [0, 1]")
        if self.q_cutoff <= 0:
            raise ValueError("Q-filter cutoff must be > 0")

    def reset(self):
        self.d_hat = self.integ = self.u_prev = self.f_rate = 0.0
        self.f_prev = None


def dob_force_control(dob: DobState, f_des: float, f_meas: float, v_rel: float | None = None,
                      dt: float = 1.0 / LLC_RATE) -> tuple[float, bool]:
    """One force-loop update. Returns ``(command, saturated)``.

    ``v_rel`` is the measured spring deflection rate (actuator minus load
    velocity, m/s). Without a link-side velocity sensor pass ``None`` and the
    rate is inferred from the force signal through the leaf-spring model.
    """
    if dob.f_prev is None:
        dob.f_prev = f_meas
    beta = 1.0 - math.exp(-2.0 * math.pi * dob.rate_cutoff * dt)
    dob.f_rate += beta * ((f_meas - dob.f_prev) / dt - dob.f_rate)
    dob.f_prev = f_meas
    if v_rel is None:
        v_rel = dob.f_rate / dob.k_nom
    f_rate = dob.k_nom * v_rel

    u_hat = f_meas + dob.tau_n * f_rate
    alpha = 1.0 - math.exp(-2.0 * math.pi * dob.q_cutoff * dt)
    dob.d_hat += alpha * ((u_hat - dob.u_prev) - dob.d_hat)
    err = f_des - f_meas
    integ = dob.integ + dob.k_i * err * dt
    u = dob.k_p * err + integ + f_des - dob.k_d * f_rate - dob.k_dob * dob.d_hat
    lim = dob.force_limit
    saturated = abs(u) > lim
    if saturated:
        u = math.copysign(lim, u)
    else:
        dob.integ = integ  # no integration while saturated
    dob.u_prev = u
    return u, saturated


KDOB_BY_CLASS = {"hip": 0.8, "ankle": 0.8, "thigh": 0.4, "knee": 0.4}


def actuator_class(model: RobotModel, actuator: str) -> str:
    """Hip (roll/yaw pair), thigh (hip pitch), knee or ankle, from the joints it drives."""
    joints = model.actuator(actuator).joints
    names = " ".join(joints)
    if "knee" in names:
        return "knee"
    if "ankle" in names:
        return "ankle"
    if "hip_pitch" in names:
        return "thigh"
    if "hip" in names:
        return "hip"
    raise KeyError(f"actuator {actuator!r} drives no joint of a known class ({names})")


def assign_kdob(model: RobotModel) -> dict:
    """Hip and ankle actuators 0.8, thigh and knee actuators 0.4."""
    return {a.name: KDOB_BY_CLASS[actuator_class(model, a.name)] for a in model.actuators}


# ------------------------------------------------------------------------------------------


class HaltCode(enum.Enum):
    JointLimitMin = "JointLimitMin"
    JointLimitMax = "JointLimitMax"
    ForceLimit = "ForceLimit"
    CommTimeout = "CommTimeout"
    DeadlineMiss = "DeadlineMiss"
    Operator = "Operator"


@dataclass(frozen=True)
class HaltReason:
    code: HaltCode
    llc_id: str
    detail: str
    time: float


@dataclass(frozen=True)
class SafetyLimits:
    joint_names: tuple
    q_min: np.ndarray
    q_max: np.ndarray
    force_limit: np.ndarray


def safety_limits(model: RobotModel, llc: str) -> SafetyLimits:
    spec = model.llc(llc)
    joints = []
    for a in spec.actuators:
        for j in model.actuator(a).joints:
            if j not in joints:
                joints.append(j)
    return SafetyLimits(
        tuple(joints),
        np.array([model.joint(j).q_min for j in joints]),
        np.array([model.joint(j).q_max for j in joints]),
        np.array([model.actuator(a).force_limit for a in spec.actuators]),
    )


def safety_check(frame: SensorFrame, limits: SafetyLimits) -> HaltReason | None:
    for j, q in enumerate(frame.joint_enc):
        if q < limits.q_min[j]:
            return HaltReason(HaltCode.JointLimitMin, frame.llc,
                              f"{limits.joint_names[j]}={q:.4f} < {limits.q_min[j]}", frame.timestamp)
        if q > limits.q_max[j]:
            return HaltReason(HaltCode.JointLimitMax, frame.llc,
                              f"{limits.joint_names[j]}={q:.4f} > {limits.q_max[j]}", frame.timestamp)
    for i, f in enumerate(frame.force):
        if abs(f) > limits.force_limit[i]:
            return HaltReason(HaltCode.ForceLimit, frame.llc,
                              f"actuator {i}: |{f:.1f}| N > {limits.force_limit[i]}", frame.timestamp)
    return None


# ------------------------------------------------------------------------------------------


@dataclass
class LlcFeedback:
    """What the LLC swaps into the bus frame: conditioned feedback plus status."""

    llc: str
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    force: np.ndarray
    motor_enc: np.ndarray
    foot_ft: np.ndarray | None
    halt: HaltReason | None
    saturated: tuple
    timestamp: float


@dataclass
class _Group:
    joints: tuple            # joint indices within the LLC joint list
    actuators: tuple         # actuator indices within the LLC actuator list
    geometry: object         # LinkageGeometry


class Llc:
    """State owned by one low-level controller."""

    def __init__(self, model: RobotModel, name: str, k_dob=None, dob_defaults: dict | None = None,
                 filters: FilterConfig | None = None, vel_cutoff: float = 100.0):
        self.model = model
        self.name = name
        spec = model.llc(name)
        self.actuators = tuple(spec.actuators)
        self.limits = safety_limits(model, name)
        self.joints = self.limits.joint_names
        self.conditioner = SignalConditioner(len(self.actuators), filters)
        kd = assign_kdob(model) if k_dob is None else k_dob
        if not isinstance(kd, dict):
            kd = {a: float(kd) for a in self.actuators}
        opts = dob_defaults or {}
        self.dobs = [DobState(k_dob=kd[a], force_limit=model.actuator(a).force_limit, **opts)
                     for a in self.actuators]
        self.groups = []
        seen = set()
        for i, a in enumerate(self.actuators):
            if i in seen:
                continue
            pair = model.pair_of_actuator(a)
            if pair is None:
                act = model.actuator(a)
                self.groups.append(_Group((self.joints.index(act.joints[0]),), (i,), act.geometry))
                seen.add(i)
            else:
                acts = tuple(self.actuators.index(x) for x in pair.actuators)
                self.groups.append(_Group(tuple(self.joints.index(j) for j in pair.joints), acts, pair.geometry))
                seen.update(acts)
        self.halt: HaltReason | None = None
        self._prev = None
        self._vel = np.zeros(len(self.joints))
        self._beta = 1.0 - math.exp(-2 * math.pi * vel_cutoff / LLC_RATE)
        self.commands = np.zeros(len(self.actuators))

    def latch(self, reason: HaltReason):
        if self.halt is None:
            self.halt = reason

    def reset(self):
        """Operator reset: clears the latch and the controller memory."""
        self.halt = None
        for d in self.dobs:
            d.reset()


def llc_tick(llc: Llc, frame: SensorFrame, setpoints: dict, dt: float = 1.0 / LLC_RATE):
    """Run one LLC cycle. ``setpoints`` maps joint name to :class:`ImpedanceSetpoint`.

    Returns ``(commands, feedback)``; commands are ordered like ``llc.actuators``.
    """
    cond = condition_signals(frame, llc.conditioner)
    q = cond.joint_enc
    if llc._prev is None:
        llc._prev = q.copy()
    dq = (q - llc._prev) / dt
    llc._prev = q.copy()
    llc._vel += llc._beta * (dq - llc._vel)

    reason = safety_check(cond, llc.limits)
    if reason is not None:
        llc.latch(reason)
    n = len(llc.actuators)
    sat = [False] * n
    if llc.halt is not None:
        cmds = np.zeros(n)
    else:
        tau = np.array([
            impedance_to_torque(setpoints.get(j, ImpedanceSetpoint()), q[k], llc._vel[k])
            for k, j in enumerate(llc.joints)
        ])
        f_des = np.zeros(n)
        for g in llc.groups:
            qg = q[list(g.joints)]
            try:
                jac = mechanism_jacobian(g.geometry, qg, check_limits=False)
                f_des[list(g.actuators)] = torque_to_force(jac, tau[list(g.joints)])
            except SingularJacobianError as exc:
                llc.latch(HaltReason(HaltCode.ForceLimit, llc.name, str(exc), frame.timestamp))
                break
        cmds = np.zeros(n)
        if llc.halt is None:
            for i, d in enumerate(llc.dobs):
                cmds[i], sat[i] = dob_force_control(d, f_des[i], cond.force[i], None, dt)
    llc.commands = cmds
    fb = LlcFeedback(llc.name, q.copy(), llc._vel.copy(), cond.force.copy(), cond.motor_enc.copy(),
                     cond.foot_ft, llc.halt, tuple(sat), frame.timestamp)
    return cmds, fb
