"""Divergent-component-of-motion balance and stepping planner (sagittal axis).

The LIP dynamics ``x'' = w^2 (x - vrp)`` split into a stable CoM part and the
unstable DCM ``xi = x + x'/w`` with ``xi' = w (xi - vrp)``. A per-axis LQR on
the DCM error picks the VRP offset; the reference comes from a backward
recursion over the VRPs implied by a footstep plan.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np


class PlannerError(ValueError):
    pass


class IllegalEvent(PlannerError):
    pass


def natural_frequency(z0: float, g: float = 9.81) -> float:
    if z0 <= 0:
        raise PlannerError("CoM height must be > 0")
    return math.sqrt(g / z0)


@dataclass(frozen=True)
class DcmState:
    x_com: float
    xd_com: float
    omega: float

    def __post_init__(self):
        if self.omega <= 0:
            raise PlannerError("omega must be > 0")

    @property
    def xi(self) -> float:
        return compute_dcm(self.x_com, self.xd_com, self.omega)


def compute_dcm(x, xd, omega):
    if omega <= 0:
        raise PlannerError("omega must be > 0")
    return x + xd / omega


def dcm_lqr_gain(omega: float, q: float = 10.0, r: float = 1.0) -> float:
    """Feedback gain ``k`` for ``e' = w e - w u`` with ``u = k e``.

    The scalar Riccati equation ``2aP - P^2 b^2/r + q = 0`` with ``a = w``,
    ``b = -w`` gives ``P = r (a + sqrt(a^2 + b^2 q/r)) / b^2`` and
    ``k = -b P / r = 1 + sqrt(1 + q/r)``. The closed-loop pole is
    ``-w sqrt(1 + q/r)``.
    """
    if q <= 0 or r <= 0:
        raise PlannerError("LQR weights must be > 0")
    if omega <= 0:
        raise PlannerError("omega must be > 0")
    a, b = omega, -omega
    P = r * (a + math.sqrt(a * a + b * b * q / r)) / (b * b)
    return -b * P / r


def vrp_command(xi, xi_ref, vrp_ref, k):
    """VRP that drives the DCM error to zero: ``vrp_ref + k (xi - xi_ref)``."""
    return vrp_ref + k * (xi - xi_ref)


def momentum_rate(mass, omega, x_com, vrp_cmd):
    """Horizontal linear-momentum rate the LIP needs to realise ``vrp_cmd``."""
    return mass * omega**2 * (x_com - vrp_cmd)


# ------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Footstep:
    foot: str           # "L" or "R"
    position: float     # m, sole center along x
    touchdown: float    # s


@dataclass(frozen=True)
class FootstepPlan:
    """Footsteps in time order; feet start at ``start`` and the plan ends ``final_ds`` after the last touchdown."""

    start: dict         # {"L": x, "R": x}
    steps: tuple = ()
    ds_duration: float = 0.8
    ss_duration: float = 0.6
    final_ds: float = 1.0

    def __post_init__(self):
        if min(self.ds_duration, self.ss_duration, self.final_ds) <= 0:
            raise PlannerError("phase durations must be > 0")
        for a, b in zip(self.steps, self.steps[1:]):
            if a.foot == b.foot:
                raise PlannerError("footsteps must alternate feet")
            if b.touchdown - a.touchdown < self.ss_duration - 1e-12:
                raise PlannerError("footsteps overlap in time")

    @property
    def horizon(self) -> float:
        t0 = self.steps[-1].touchdown if self.steps else 0.0
        return t0 + self.final_ds

    def segments(self):
        """``[(t_start, t_end, vrp)]`` covering ``[0, horizon]``."""
        feet = dict(self.start)
        segs = []
        t = 0.0
        for s in self.steps:
            lift = s.touchdown - self.ss_duration
            if lift > t:
                segs.append((t, lift, 0.5 * (feet["L"] + feet["R"])))
            stance = feet["R" if s.foot == "L" else "L"]
            segs.append((max(lift, t), s.touchdown, stance))
            feet[s.foot] = s.position
            t = s.touchdown
        segs.append((t, self.horizon, 0.5 * (feet["L"] + feet["R"])))
        return segs

    def shifted(self, dt: float) -> "FootstepPlan":
        return replace(self, steps=tuple(replace(s, touchdown=s.touchdown + dt) for s in self.steps))


def step_in_place_plan(x_left: float, x_right: float, n_steps: int, t0: float = 0.0,
                       ds: float = 0.8, ss: float = 0.6, first: str = "L") -> FootstepPlan:
    feet = {"L": x_left, "R": x_right}
    steps, foot, t = [], first, t0
    for _ in range(n_steps):
        t += ds + ss
        steps.append(Footstep(foot, feet[foot], t))
        foot = "R" if foot == "L" else "L"
    return FootstepPlan(feet, tuple(steps), ds, ss)


def plan_reference(plan: FootstepPlan, t: float, omega: float):
    """``(xi_ref, vrp_ref)`` at time ``t`` by backward recursion over the VRP segments."""
    if t < -1e-12 or t > plan.horizon + 1e-12:
        raise PlannerError(f"t={t:.3f} s outside plan horizon [0, {plan.horizon:.3f}]")
    segs = plan.segments()
    xi_end = segs[-1][2]
    ends = [0.0] * len(segs)
    for i in range(len(segs) - 1, -1, -1):
        t0, t1, r = segs[i]
        ends[i] = xi_end
        xi_end = r + (xi_end - r) * math.exp(-omega * (t1 - t0))
    for i, (t0, t1, r) in enumerate(segs):
        if t <= t1 or i == len(segs) - 1:
            return r + (ends[i] - r) * math.exp(omega * (min(t, t1) - t1)), r
    raise AssertionError("unreachable")


# ------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class SwingTrajectory:
    start: tuple        # (x, z)
    end: tuple
    duration: float
    apex: float = 0.05

    def __post_init__(self):
        if self.duration <= 0:
            raise PlannerError("swing duration must be > 0")


def _quintic(s):
    """Minimum-jerk blend and its first two derivatives in ``s``."""
    return (10 * s**3 - 15 * s**4 + 6 * s**5,
            30 * s**2 - 60 * s**3 + 30 * s**4,
            60 * s - 180 * s**2 + 120 * s**3)


def swing_eval(traj: SwingTrajectory, s: float):
    """Foot position, velocity and acceleration (time derivatives) at phase ``s``."""
    if not -1e-12 <= s <= 1 + 1e-12:
        raise PlannerError("phase fraction must lie in [0, 1]")
    s = min(max(s, 0.0), 1.0)
    T = traj.duration
    p0, p1 = np.asarray(traj.start, float), np.asarray(traj.end, float)
    b, bd, bdd = _quintic(s)
    pos = p0 + (p1 - p0) * b
    vel = (p1 - p0) * bd / T
    acc = (p1 - p0) * bdd / T**2
    # vertical: quintic up to the apex over the first half, mirrored back down
    u = 2 * s if s <= 0.5 else 2 * (1 - s)
    sign = 1.0 if s <= 0.5 else -1.0
    h, hd, hdd = _quintic(u)
    base_z = pos[1]
    pos = pos.copy()
    pos[1] = base_z + traj.apex * h
    vel[1] += traj.apex * hd * 2 * sign / T
    acc[1] += traj.apex * hdd * 4 / T**2
    return pos, vel, acc


# ------------------------------------------------------------------------------------------


class Phase(enum.Enum):
    DoubleSupport = "DoubleSupport"
    TransferToL = "TransferToL"
    TransferToR = "TransferToR"
    SwingL = "SwingL"
    SwingR = "SwingR"
    Halted = "Halted"


@dataclass(frozen=True)
class GaitTiming:
    ds: float = 0.8           # total double support, half settling and half weight transfer
    ss: float = 0.6
    early_touchdown: float = 0.5   # touchdowns before this swing fraction are ignored as contact chatter
    late_touchdown: float = 1.5    # beyond this the fall-risk flag is raised

    def __post_init__(self):
        if self.ds <= 0 or self.ss <= 0:
            raise PlannerError("phase durations must be > 0")


@dataclass(frozen=True)
class GaitPhase:
    state: Phase = Phase.DoubleSupport
    clock: float = 0.0
    next_swing: str = "L"
    steps: int = 0
    fall_risk: bool = False


@dataclass(frozen=True)
class Directives:
    """What the WBC should change this tick."""

    stance: tuple                 # feet carrying contact constraints
    swing: str | None = None      # foot with the swing-tracking task
    remove_contact: str | None = None
    add_contact: str | None = None
    swing_started: bool = False
    touchdown: bool = False


def _other(foot):
    return "R" if foot == "L" else "L"


def _swing_state(foot):
    return Phase.SwingL if foot == "L" else Phase.SwingR


def _transfer_state(foot):
    # TransferToL is the weight shift that precedes lifting the left foot
    return Phase.TransferToL if foot == "L" else Phase.TransferToR


def step_state_machine(phase: GaitPhase, dt: float, timing: GaitTiming = GaitTiming(),
                       touchdown: dict | None = None, halt: bool = False, stepping: bool = True):
    """Advance the gait phase by ``dt``. ``touchdown`` maps foot to a touchdown edge this tick.

    Returns ``(new_phase, directives)``.
    """
    touchdown = touchdown or {}
    both = ("L", "R")
    st = phase.state
    if halt or st is Phase.Halted:
        return replace(phase, state=Phase.Halted), Directives(both)
    clock = phase.clock + dt
    if st in (Phase.DoubleSupport, Phase.TransferToL, Phase.TransferToR):
        if any(touchdown.values()):
            raise IllegalEvent(f"touchdown during {st.value}")
        if not stepping:
            return replace(phase, clock=clock), Directives(both)
        foot = phase.next_swing
        if st is Phase.DoubleSupport and clock >= timing.ds / 2:
            return replace(phase, state=_transfer_state(foot), clock=clock - timing.ds / 2), Directives(both)
        if st is not Phase.DoubleSupport and clock >= timing.ds / 2:
            new = replace(phase, state=_swing_state(foot), clock=clock - timing.ds / 2)
            return new, Directives((_other(foot),), swing=foot, remove_contact=foot, swing_started=True)
        return replace(phase, clock=clock), Directives(both)

    # single support
    foot = "L" if st is Phase.SwingL else "R"
    frac = clock / timing.ss
    if touchdown.get(_other(foot)):
        raise IllegalEvent(f"touchdown of the stance foot during {st.value}")
    if touchdown.get(foot) and frac >= timing.early_touchdown:
        new = GaitPhase(Phase.DoubleSupport, 0.0, _other(foot), phase.steps + 1, phase.fall_risk)
        return new, Directives(both, add_contact=foot, touchdown=True)
    fall = phase.fall_risk or frac > timing.late_touchdown
    return replace(phase, clock=clock, fall_risk=fall), Directives((_other(foot),), swing=foot)
