"""Ground-truth plant: planar floating-base robot with flexible joints.

Each moving joint is a two-inertia system. The motor side ``theta`` (reflected
rotor inertia ``B = rotor_inertia * N**2``) is driven by its linear
actuator(s) through the linkage; the link side ``q`` belongs to the rigid-body
tree. They are coupled by

    tau_s = K * deadzone(theta - q, b) + D * (thetadot - qdot)

Actuator forces follow a first-order lag with saturation and see Coulomb +
viscous friction on the pushrod. Ground contact is a penalty spring-damper in
the normal direction with regularized Coulomb friction; the contact damping
and friction are handled linearly-implicitly so that the 1e-3 m/s stiction
band stays stable at dt = 1e-4 s.

Integration is semi-implicit Euler. Velocities after a step are centred half a
step behind the positions, so :func:`energy_audit` evaluates energies at the
mid-step configuration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .kinematics import PlanarTree, _tree_kernel
from .model import RobotModel

COUNTS_PER_REV = 2048
AXIS_CODE = {"x": 0, "y": 1, "z": 2}


class SimulationBlowUp(RuntimeError):
    def __init__(self, time, coordinate):
        super().__init__(f"non-finite state at t={time:.6f} s in {coordinate}")
        self.time = time
        self.coordinate = coordinate


def deadzone(delta, width):
    """Backlash dead zone: zero inside ``|delta| <= width/2``, shifted linear outside."""
    delta = np.asarray(delta, dtype=float)
    half = 0.5 * np.asarray(width, dtype=float)
    out = np.sign(delta) * np.maximum(np.abs(delta) - half, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PlantParams:
    k_ground: float = 1e5        # N/m
    d_ground: float = 3e3        # N*s/m
    mu: float = 0.8
    v_reg: float = 1e-3          # stiction regularization, m/s
    rotor_inertia: float = 1e-5  # kg*m^2, scaled by N^2 onto the joint
    friction_vel: float = 1e-3   # Coulomb friction smoothing on the pushrod, m/s


@dataclass
class SimState:
    """Ground truth. ``q``/``v`` are generalized: base ``[x, z, pitch]`` first when floating."""

    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    thetadot: np.ndarray
    f_act: np.ndarray       # lagged actuator forces, one per simulated actuator
    time: float = 0.0
    dt_last: float = 1e-4
    # cumulative energy flows (J)
    dissipated: float = 0.0
    actuator_work: float = 0.0
    external_work: float = 0.0

    def copy(self) -> "SimState":
        return replace(self, q=self.q.copy(), v=self.v.copy(), theta=self.theta.copy(),
                       thetadot=self.thetadot.copy(), f_act=self.f_act.copy())


@dataclass
class FootContact:
    in_contact: bool
    grf: np.ndarray            # (tangential x, normal z)
    contact_point: np.ndarray  # center of pressure (world), or foot sole center when airborne
    penetration: float


@dataclass
class ContactState:
    feet: dict = field(default_factory=dict)
    point_forces: np.ndarray = None   # (n_points, 2) world-frame forces on the robot

    def total_normal(self) -> float:
        return float(sum(f.grf[1] for f in self.feet.values()))


@dataclass(frozen=True)
class Push:
    start: float
    duration: float
    force: tuple[float, float]
    link: str = "pelvis"
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class DisturbanceProfile:
    pushes: tuple[Push, ...] = ()

    def __post_init__(self):
        by_point = {}
        for p in self.pushes:
            if p.duration <= 0:
                raise ValueError("push duration must be > 0")
            by_point.setdefault((p.link, tuple(p.offset)), []).append(p)
        for lst in by_point.values():
            lst.sort(key=lambda p: p.start)
            for a, b in zip(lst, lst[1:]):
                if b.start < a.start + a.duration:
                    raise ValueError(f"overlapping pushes on {a.link} at t={b.start}")

    def active(self, t: float):
        return [p for p in self.pushes if p.start <= t < p.start + p.duration]


# ------------------------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _axis_rot(axis, a, x):
    c = np.cos(a)
    s = np.sin(a)
    out = np.empty(3)
    dout = np.empty(3)
    if axis == 0:
        out[0] = x[0]
        out[1] = c * x[1] - s * x[2]
        out[2] = s * x[1] + c * x[2]
        dout[0] = 0.0
        dout[1] = -s * x[1] - c * x[2]
        dout[2] = c * x[1] - s * x[2]
    elif axis == 1:
        out[0] = c * x[0] + s * x[2]
        out[1] = x[1]
        out[2] = -s * x[0] + c * x[2]
        dout[0] = -s * x[0] + c * x[2]
        dout[1] = 0.0
        dout[2] = -c * x[0] - s * x[2]
    else:
        out[0] = c * x[0] - s * x[1]
        out[1] = s * x[0] + c * x[1]
        out[2] = x[2]
        dout[0] = -s * x[0] - c * x[1]
        dout[1] = c * x[0] - s * x[1]
        dout[2] = 0.0
    return out, dout


@njit(cache=True)
def _transmission(theta, act_joint, act_axis, act_p, act_d, act_L0):
    """Pushrod travel and d(travel)/d(theta) for every simulated actuator."""
    na = act_joint.shape[0]
    travel = np.zeros(na)
    jac = np.zeros(na)
    for i in range(na):
        rd, drd = _axis_rot(act_axis[i], theta[act_joint[i]], act_d[i])
        diff = rd - act_p[i]
        L = np.sqrt(diff[0] ** 2 + diff[1] ** 2 + diff[2] ** 2)
        travel[i] = L - act_L0[i]
        jac[i] = (diff[0] * drd[0] + diff[1] * drd[1] + diff[2] * drd[2]) / L
    return travel, jac


@njit(cache=True)
def _chol_solve(A, b):
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    y = np.zeros(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _step_kernel(
    q, v, th, thd, fa, cmd, dt,
    nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
    link_mass, link_inertia, link_com, path,
    pt_link, pt_off, n_contact,
    K, D, b, B,
    act_joint, act_axis, act_p, act_d, act_L0, act_tau, act_limit, act_fc, act_fv, fric_vel,
    kg, dg, mu, vreg,
    ext_force,
):
    ndof = q.shape[0]
    nj = th.shape[0]
    M, h, phi, phid, o, P, V, Bias, J = _tree_kernel(
        q, v, nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
        link_mass, link_inertia, link_com, path, pt_link, pt_off,
    )

    # joint springs
    qj = q[nb:]
    vj = v[nb:]
    tau_s = np.zeros(nj)
    tau_el = np.zeros(nj)
    for j in range(nj):
        dlt = th[j] - qj[j]
        half = 0.5 * b[j]
        dz = 0.0
        if dlt > half:
            dz = dlt - half
        elif dlt < -half:
            dz = dlt + half
        tau_el[j] = K[j] * dz
        tau_s[j] = tau_el[j] + D[j] * (thd[j] - vj[j])

    # actuators: lag, saturation, pushrod friction, transmission
    na = act_joint.shape[0]
    fa_new = np.zeros(na)
    travel, tj = _transmission(th, act_joint, act_axis, act_p, act_d, act_L0)
    tau_act = np.zeros(nj)
    tau_fric = np.zeros(nj)
    for i in range(na):
        c = cmd[i]
        if c > act_limit[i]:
            c = act_limit[i]
        elif c < -act_limit[i]:
            c = -act_limit[i]
        alpha = 1.0 - np.exp(-dt / act_tau[i])
        fa_new[i] = fa[i] + alpha * (c - fa[i])
        va = tj[i] * thd[act_joint[i]]
        ff = -act_fc[i] * np.tanh(va / fric_vel) - act_fv[i] * va
        tau_act[act_joint[i]] += tj[i] * fa[i]
        tau_fric[act_joint[i]] += tj[i] * ff

    thd_new = np.empty(nj)
    for j in range(nj):
        thd_new[j] = thd[j] + dt * (tau_act[j] + tau_fric[j] - tau_s[j]) / B[j]

    # link side: explicit generalized forces
    Q = -h
    for j in range(nj):
        Q[nb + j] += tau_s[j]
    n_ext = pt_link.shape[0] - n_contact
    for e in range(n_ext):
        i = n_contact + e
        for k in range(ndof):
            Q[k] += J[i, 0, k] * ext_force[e, 0] + J[i, 1, k] * ext_force[e, 1]

    # contact, with damping and friction taken implicitly
    active = np.zeros(n_contact, dtype=np.bool_)
    fn_est = np.zeros(n_contact)
    for i in range(n_contact):
        pen = -P[i, 1]
        if pen > 0.0:
            f = kg * pen - dg * V[i, 1]
            if f > 0.0:
                active[i] = True
                fn_est[i] = f
    v_new = np.empty(ndof)
    ct = np.zeros(n_contact)
    for it in range(n_contact + 1):
        A = M.copy()
        rhs = M @ v + dt * Q
        for i in range(n_contact):
            if not active[i]:
                continue
            pen = -P[i, 1]
            avx = abs(V[i, 0])
            ct[i] = mu * fn_est[i] / (avx if avx > vreg else vreg)
            for r in range(ndof):
                rhs[r] += dt * J[i, 1, r] * kg * pen
                for s in range(ndof):
                    A[r, s] += dt * (dg * J[i, 1, r] * J[i, 1, s] + ct[i] * J[i, 0, r] * J[i, 0, s])
        v_new = _chol_solve(A, rhs)
        # drop any point whose implicit normal force came out attractive, then re-solve
        changed = False
        for i in range(n_contact):
            if active[i]:
                vz = 0.0
                for r in range(ndof):
                    vz += J[i, 1, r] * v_new[r]
                if kg * (-P[i, 1]) - dg * vz < 0.0:
                    active[i] = False
                    changed = True
        if not changed:
            break

    fc = np.zeros((n_contact, 2))
    for i in range(n_contact):
        if active[i]:
            vx = 0.0
            vz = 0.0
            for r in range(ndof):
                vx += J[i, 0, r] * v_new[r]
                vz += J[i, 1, r] * v_new[r]
            fc[i, 0] = -ct[i] * vx
            fc[i, 1] = kg * (-P[i, 1]) - dg * vz

    # energy flows, each force paired with the step-averaged velocity
    vbar = 0.5 * (v + v_new)
    thbar = 0.5 * (thd + thd_new)
    w_act = 0.0
    diss = 0.0
    for i in range(na):
        j = act_joint[i]
        w_act += dt * tj[i] * fa[i] * thbar[j]
    for j in range(nj):
        diss -= dt * tau_fric[j] * thbar[j]
        diss += dt * D[j] * (thd[j] - vj[j]) * (thbar[j] - vbar[nb + j])
    for i in range(n_contact):
        if active[i]:
            vx = 0.0
            vz = 0.0
            for r in range(ndof):
                vx += J[i, 0, r] * vbar[r]
                vz += J[i, 1, r] * vbar[r]
            diss -= dt * (fc[i, 0] * vx + (fc[i, 1] - kg * (-P[i, 1])) * vz)
    w_ext = 0.0
    for e in range(n_ext):
        i = n_contact + e
        for r in range(ndof):
            w_ext += dt * (J[i, 0, r] * ext_force[e, 0] + J[i, 1, r] * ext_force[e, 1]) * vbar[r]

    q_new = q + dt * v_new
    th_new = th + dt * thd_new
    return q_new, v_new, th_new, thd_new, fa_new, fc, P[:n_contact].copy(), tau_s, w_act, diss, w_ext


@njit(cache=True)
def _multi_step_kernel(
    n, q, v, th, thd, fa, cmd, dt,
    nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
    link_mass, link_inertia, link_com, path,
    pt_link, pt_off, n_contact,
    K, D, b, B,
    act_joint, act_axis, act_p, act_d, act_L0, act_tau, act_limit, act_fc, act_fv, fric_vel,
    kg, dg, mu, vreg,
    ext_force,
):
    w_act = 0.0
    diss = 0.0
    w_ext = 0.0
    fc = np.zeros((n_contact, 2))
    pc = np.zeros((n_contact, 2))
    for _ in range(n):
        q, v, th, thd, fa, fc, pc, tau_s, wa, di, we = _step_kernel(
            q, v, th, thd, fa, cmd, dt,
            nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
            link_mass, link_inertia, link_com, path,
            pt_link, pt_off, n_contact,
            K, D, b, B,
            act_joint, act_axis, act_p, act_d, act_L0, act_tau, act_limit, act_fc, act_fv, fric_vel,
            kg, dg, mu, vreg,
            ext_force,
        )
        w_act += wa
        diss += di
        w_ext += we
    return q, v, th, thd, fa, fc, pc, w_act, diss, w_ext


@njit(cache=True)
def _energy_kernel(
    q, v, th, nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
    link_mass, link_inertia, link_com, path, pt_link, pt_off, K, b, kg,
):
    M, h, phi, phid, o, P, V, Bias, J = _tree_kernel(
        q, np.zeros_like(v), nb, gravity, link_parent, link_joint_dof, link_axis, link_origin,
        link_mass, link_inertia, link_com, path, pt_link, pt_off,
    )
    kin = 0.5 * (v @ M @ v)
    n_links = link_mass.shape[0]
    grav = 0.0
    for k in range(n_links):
        c = np.cos(phi[k])
        s = np.sin(phi[k])
        grav += link_mass[k] * gravity * (o[k, 1] + s * link_com[k, 0] + c * link_com[k, 1])
    spring = 0.0
    for j in range(th.shape[0]):
        dlt = th[j] - q[nb + j]
        half = 0.5 * b[j]
        dz = 0.0
        if dlt > half:
            dz = dlt - half
        elif dlt < -half:
            dz = dlt + half
        spring += 0.5 * K[j] * dz * dz
    contact = 0.0
    for i in range(pt_link.shape[0]):
        if P[i, 1] < 0.0:
            contact += 0.5 * kg * P[i, 1] ** 2
    return kin, grav, spring, contact


# ------------------------------------------------------------------------------------------


class Plant:
    """Simulation-ready arrays derived from a :class:`RobotModel`.

    Simulated actuators are those driving an unlocked joint: single-joint
    cranks, and coupled-pair actuators whose pair contains a moving joint (the
    locked partner coordinate is held at 0, so each pushrod reduces to a
    single-axis rotation about the moving joint's axis).
    """

    def __init__(self, model: RobotModel, params: PlantParams | None = None):
        self.model = model
        self.params = params or PlantParams()
        self.tree = PlanarTree(model)
        tree = self.tree
        joints = model.dof_joints
        self.K = np.array([j.elasticity.stiffness for j in joints])
        self.D = np.array([j.elasticity.damping for j in joints])
        self.b = np.array([j.elasticity.backlash for j in joints])
        self.B = np.array([self.params.rotor_inertia * j.elasticity.gear_ratio**2 for j in joints])

        names, jidx, axes, ps, ds, taus, lims, fcs, fvs = [], [], [], [], [], [], [], [], []
        for a in model.actuators:
            pair = model.pair_of_actuator(a.name)
            if pair is None:
                jn, geom = a.joints[0], a.geometry
                if model.joint(jn).locked:
                    continue
                axis = 2
                k = 0
                p = np.append(geom.proximal[0], 0.0)
                d = np.append(geom.distal[0], 0.0)
            else:
                moving = [n for n in pair.joints if not model.joint(n).locked]
                if not moving:
                    continue
                if len(moving) != 1:
                    raise ValueError(f"pair {pair.name}: planar simulation needs exactly one moving joint")
                jn, geom = moving[0], pair.geometry
                k = list(pair.actuators).index(a.name)
                axis = AXIS_CODE[geom.axes[pair.joints.index(jn)]]
                p = np.asarray(geom.proximal[k], dtype=float)
                d = np.asarray(geom.distal[k], dtype=float)
            names.append(a.name)
            jidx.append(tree.joint_names.index(jn))
            axes.append(axis)
            ps.append(p)
            ds.append(d)
            taus.append(a.lag_time_constant)
            lims.append(a.force_limit)
            fcs.append(a.coulomb_friction)
            fvs.append(a.viscous_friction)
        self.actuator_names = names
        self.act_joint = np.asarray(jidx, dtype=np.int64)
        self.act_axis = np.asarray(axes, dtype=np.int64)
        self.act_p = np.asarray(ps, dtype=float).reshape(-1, 3)
        self.act_d = np.asarray(ds, dtype=float).reshape(-1, 3)
        self.act_L0 = np.linalg.norm(self.act_p - self.act_d, axis=1)
        self.act_tau = np.asarray(taus, dtype=float)
        self.act_limit = np.asarray(lims, dtype=float)
        self.act_fc = np.asarray(fcs, dtype=float)
        self.act_fv = np.asarray(fvs, dtype=float)
        self.n_act = len(names)

        # contact points first, then (per step) disturbance points
        self.n_contact = len(tree.contact_point_names)
        self.foot_points = {}
        for i, n in enumerate(tree.contact_point_names):
            self.foot_points.setdefault(n.split(".")[0], []).append(i)

    # convenience ----------------------------------------------------------------------------

    def actuator_index(self, name: str) -> int:
        return self.actuator_names.index(name)

    def transmission(self, theta):
        """Pushrod travel (m) and ``d travel / d theta`` per simulated actuator."""
        return _transmission(np.asarray(theta, dtype=float), self.act_joint, self.act_axis,
                             self.act_p, self.act_d, self.act_L0)

    def initial_state(self, q=None, v=None, theta=None, dt: float = 1e-4) -> SimState:
        """State at rest with the motor side matching the link side (springs relaxed) by default."""
        tree = self.tree
        q = np.zeros(tree.ndof) if q is None else np.array(q, dtype=float)
        v = np.zeros(tree.ndof) if v is None else np.array(v, dtype=float)
        theta = q[tree.nb:].copy() if theta is None else np.array(theta, dtype=float)
        return SimState(q, v, theta, np.zeros(tree.nj), np.zeros(self.n_act), 0.0, dt)

    def static_theta(self, q, tau_joint):
        """Motor-side angles that make the springs carry ``tau_joint`` at link pose ``q``."""
        qj = np.asarray(q, dtype=float)[self.tree.nb:]
        tau = np.asarray(tau_joint, dtype=float)
        return qj + np.sign(tau) * (np.abs(tau) / self.K + np.where(tau != 0, 0.5 * self.b, 0.0))

    def standing_pose(self, knee: float = 0.3, stagger: float = 0.0, feet_width=0.0):
        """Floating-base pose with flat feet on the ground and the given knee bend.

        ``stagger`` moves the left foot forward and the right foot back by
        half the value each (hip and ankle angles adjusted so both feet stay flat).
        """
        tree = self.tree
        model = self.model
        thigh = model.link("l_thigh").length
        shin = model.link("l_shin").length
        sole = -model.link("l_foot").contact_points[0].offset[1]

        def leg(dx):
            # hip pitch a, knee k (flexion), ankle c with a - k + c = 0 (flat foot);
            # foot relative to hip: x = thigh*sin(a) + shin*sin(a-k), z = -(thigh*cos(a) + shin*cos(a-k))
            # choose knee bend and solve for a such that x = dx
            k = knee
            lo, hi = -1.0, 1.0
            for _ in range(80):
                a = 0.5 * (lo + hi)
                x = thigh * np.sin(a) + shin * np.sin(a - k)
                if x < dx:
                    lo = a
                else:
                    hi = a
            z = thigh * np.cos(a) + shin * np.cos(a - k)
            return a, k, k - a, z

        al, kl, cl, zl = leg(0.5 * stagger)
        ar, kr, cr, zr = leg(-0.5 * stagger)
        q = np.zeros(tree.ndof)
        q[0] = 0.0
        q[1] = 0.5 * (zl + zr) + sole
        idx = {n: tree.nb + i for i, n in enumerate(tree.joint_names)}
        q[idx["l_hip_pitch"]], q[idx["l_knee"]], q[idx["l_ankle_pitch"]] = al, kl, cl
        q[idx["r_hip_pitch"]], q[idx["r_knee"]], q[idx["r_ankle_pitch"]] = ar, kr, cr
        return q

    # stepping -------------------------------------------------------------------------------

    def step(self, state: SimState, motor_force_cmd, disturbance=(), dt: float = 1e-4):
        """Advance one step. ``motor_force_cmd`` is ordered like ``actuator_names``.

        ``disturbance`` is a sequence of ``(link, offset, force)`` triples.
        """
        return self.advance(state, motor_force_cmd, disturbance, dt, 1)

    def advance(self, state: SimState, motor_force_cmd, disturbance=(), dt: float = 1e-4, n: int = 1):
        """``n`` steps with commands and disturbance held constant (one call into compiled code)."""
        if not (0.0 < dt <= 1e-3):
            raise ValueError(f"dt must be in (0, 1e-3], got {dt}")
        cmd = np.ascontiguousarray(motor_force_cmd, dtype=float)
        if cmd.shape != (self.n_act,) or not np.all(np.isfinite(cmd)):
            raise ValueError("motor_force_cmd must be finite, one entry per simulated actuator")
        tree = self.tree
        p = self.params
        if disturbance:
            el, eo = tree.points([d[0] for d in disturbance], [d[1] for d in disturbance])
            ef = np.asarray([d[2] for d in disturbance], dtype=float).reshape(-1, 2)
            pl = np.concatenate([tree.contact_pt_link, el])
            po = np.concatenate([tree.contact_pt_off, eo])
        else:
            pl, po, ef = tree.contact_pt_link, tree.contact_pt_off, np.zeros((0, 2))
        q, v, th, thd, fa, fc, pc, w_act, diss, w_ext = _multi_step_kernel(
            n, state.q, state.v, state.theta, state.thetadot, state.f_act, cmd, dt,
            tree.nb, tree.gravity, tree.link_parent, tree.link_joint_dof, tree.link_axis, tree.link_origin,
            tree.link_mass, tree.link_inertia, tree.link_com, tree.path,
            pl, po, self.n_contact,
            self.K, self.D, self.b, self.B,
            self.act_joint, self.act_axis, self.act_p, self.act_d, self.act_L0, self.act_tau,
            self.act_limit, self.act_fc, self.act_fv, p.friction_vel,
            p.k_ground, p.d_ground, p.mu, p.v_reg,
            ef,
        )
        t = state.time + n * dt
        new = SimState(q, v, th, thd, fa, t, dt,
                       state.dissipated + diss, state.actuator_work + w_act, state.external_work + w_ext)
        self._check_finite(new)
        return new, self._contact_state(fc, pc)

    def _check_finite(self, s: SimState):
        for label, arr in (("q", s.q), ("v", s.v), ("theta", s.theta), ("thetadot", s.thetadot),
                           ("f_act", s.f_act)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise SimulationBlowUp(s.time, f"{label}[{self._coord_name(label, bad[0])}]")

    def _coord_name(self, label, i):
        tree = self.tree
        if label in ("q", "v"):
            names = (["x", "z", "pitch"] if tree.floating else []) + tree.joint_names
            return names[i]
        if label == "f_act":
            return self.actuator_names[i]
        return tree.joint_names[i]

    def _contact_state(self, fc, pc) -> ContactState:
        feet = {}
        for foot, idx in self.foot_points.items():
            f = fc[idx]
            grf = f.sum(axis=0)
            pen = float(max(0.0, -pc[idx, 1].min()))
            if grf[1] > 0.0:
                cop = (f[:, 1] @ pc[idx]) / grf[1]
            else:
                cop = pc[idx].mean(axis=0)
            feet[foot] = FootContact(bool(grf[1] > 0.0), grf, cop, pen)
        return ContactState(feet, fc)

    def contact_state(self, state: SimState) -> ContactState:
        """Spring-only contact forces at the current pose (no step taken)."""
        st = self.tree.evaluate(state.q, state.v, (self.tree.contact_pt_link, self.tree.contact_pt_off))
        p = self.params
        fc = np.zeros((self.n_contact, 2))
        pen = -st.p[:, 1]
        fn = np.where(pen > 0, np.maximum(p.k_ground * pen - p.d_ground * st.pv[:, 1], 0.0), 0.0)
        fc[:, 1] = fn
        return self._contact_state(fc, st.p)

    # derived quantities ---------------------------------------------------------------------

    def spring_torque(self, state: SimState) -> np.ndarray:
        qj = state.q[self.tree.nb:]
        vj = state.v[self.tree.nb:]
        return self.K * deadzone(state.theta - qj, self.b) + self.D * (state.thetadot - vj)

    def actuator_spring_force(self, state: SimState) -> np.ndarray:
        """Pushrod force balancing the spring torque through the linkage, per actuator.

        Joints driven by two actuators split the torque evenly between them.
        """
        _, jac = self.transmission(state.theta)
        tau = self.spring_torque(state)
        share = np.bincount(self.act_joint, minlength=self.tree.nj)[self.act_joint]
        return tau[self.act_joint] / (jac * share)


def energy_audit(plant: Plant, state: SimState, contact: ContactState | None = None) -> dict:
    """Energy breakdown at the mid-step configuration.

    ``balance = kinetic + gravity + spring + dissipated - actuator_work - external_work``
    stays constant along a trajectory up to integration error.
    """
    tree = plant.tree
    h = 0.5 * state.dt_last
    q = state.q - h * state.v
    th = state.theta - h * state.thetadot
    kin, grav, spring, cont = _energy_kernel(
        q, state.v, th, tree.nb, tree.gravity, tree.link_parent, tree.link_joint_dof, tree.link_axis,
        tree.link_origin, tree.link_mass, tree.link_inertia, tree.link_com, tree.path,
        tree.contact_pt_link, tree.contact_pt_off, plant.K, plant.b, plant.params.k_ground,
    )
    kin += 0.5 * float(plant.B @ state.thetadot**2)
    out = {
        "kinetic": float(kin),
        "gravity": float(grav),
        "spring": float(spring + cont),
        "dissipated": state.dissipated,
        "actuator_work": state.actuator_work,
        "external_work": state.external_work,
    }
    out["balance"] = out["kinetic"] + out["gravity"] + out["spring"] + out["dissipated"] \
        - out["actuator_work"] - out["external_work"]
    return out


# ------------------------------------------------------------------------------------------
# sensing


@dataclass(frozen=True)
class NoiseConfig:
    sigma_force: float = 2.0          # N, actuator force sensor
    hum_amplitude: float = 5.0        # N, 60 Hz mains pickup on force and current channels
    hum_frequency: float = 60.0
    sigma_current: float = 0.05       # A
    sigma_ft: float = 2.0             # N, foot F/T sensor
    sigma_imu_pitch: float = math.radians(0.2)
    imu_corr_time: float = 0.05       # s, AR(1) correlation of the pitch error
    sigma_gyro: float = 0.005         # rad/s
    torque_constant: float = 0.1      # N*m/A

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 60.0, 0.0, 0.0, 0.0, 0.05, 0.0)


@dataclass
class SensorFrame:
    """One LLC's measurement packet."""

    llc: str
    joint_enc: np.ndarray     # rad, per joint owned by the LLC
    motor_enc: np.ndarray     # quadrature counts, per actuator
    force: np.ndarray         # N, per actuator
    current: np.ndarray       # A, per actuator
    foot_ft: np.ndarray | None
    timestamp: float


@dataclass
class ImuSample:
    pitch: float
    rate: float
    timestamp: float


def quantize(x, bits):
    res = 2.0 * np.pi / 2**bits
    return np.round(np.asarray(x, dtype=float) / res) * res


class Sensors:
    """Seeded measurement model for every LLC plus the base IMU.

    The absolute joint encoder sits on the actuator side of the structural
    compliance, past the backlash, so it reads ``q + deadzone(theta - q, b)``.
    The motor encoder counts screw revolutions, i.e. actuator travel through
    the linkage divided by the screw pitch.

    ``link_side_encoder`` models rigid links: all compliance sits in the
    actuator and the joint encoder reads the link angle ``q`` directly.
    """

    def __init__(self, plant: Plant, noise: NoiseConfig | None = None, seed: int = 0,
                 link_side_encoder: bool = False):
        self.plant = plant
        self.link_side_encoder = link_side_encoder
        self.noise = noise or NoiseConfig()
        self.rng = np.random.default_rng(seed)
        model = plant.model
        tree = plant.tree
        self._imu_err = 0.0
        self.layout = {}
        for llc in model.llcs:
            joints = []
            for an in llc.actuators:
                for jn in model.actuator(an).joints:
                    if jn not in joints:
                        joints.append(jn)
            acts = list(llc.actuators)
            sim_idx = [plant.actuator_names.index(a) if a in plant.actuator_names else -1 for a in acts]
            dof_idx = [tree.joint_names.index(j) if j in tree.joint_names else -1 for j in joints]
            foot = None
            for jn in joints:
                child = model.joint(jn).child
                if child and model.link(child).contact_points:
                    foot = child
            self.layout[llc.name] = (joints, acts, sim_idx, dof_idx, foot)
        self.pitch = np.array([model.actuator(a).screw_pitch for a in plant.actuator_names])

    def joint_encoders(self, state: SimState) -> np.ndarray:
        nb = self.plant.tree.nb
        if self.link_side_encoder:
            return state.q[nb:].copy()
        return state.q[nb:] + deadzone(state.theta - state.q[nb:], self.plant.b)

    def measure(self, state: SimState, contact: ContactState) -> dict:
        n = self.noise
        plant = self.plant
        model = plant.model
        travel, _ = plant.transmission(state.theta)
        f_true = plant.actuator_spring_force(state)
        enc = self.joint_encoders(state)
        hum = n.hum_amplitude * np.sin(2 * np.pi * n.hum_frequency * state.time)
        frames = {}
        for name, (joints, acts, sim_idx, dof_idx, foot) in self.layout.items():
            je = np.array([enc[d] if d >= 0 else 0.0 for d in dof_idx])
            bits = np.array([model.joint(j).encoder_bits for j in joints])
            je = np.array([quantize(x, bb) for x, bb in zip(je, bits)])
            me = np.zeros(len(acts))
            fs = np.zeros(len(acts))
            for k, i in enumerate(sim_idx):
                if i >= 0:
                    me[k] = np.round(travel[i] / self.pitch[i] * COUNTS_PER_REV)
                    fs[k] = f_true[i]
            force = fs + self.rng.normal(0.0, 1.0, len(acts)) * n.sigma_force + hum
            kt = n.torque_constant
            cur = np.array([
                (state.f_act[i] if i >= 0 else 0.0) * model.actuator(a).screw_pitch / (2 * np.pi * kt)
                for a, i in zip(acts, sim_idx)
            ])
            cur = cur + self.rng.normal(0.0, 1.0, len(acts)) * n.sigma_current + hum * 1e-3
            ft = None
            if foot is not None:
                ft = contact.feet[foot].grf + self.rng.normal(0.0, 1.0, 2) * n.sigma_ft
            frames[name] = SensorFrame(name, je, me, force, cur, ft, state.time)
        return frames

    def imu(self, state: SimState, dt: float) -> ImuSample:
        """Base pitch with AR(1)-correlated error of stationary std ``sigma_imu_pitch``."""
        n = self.noise
        if not self.plant.tree.floating:
            return ImuSample(0.0, 0.0, state.time)
        a = math.exp(-dt / n.imu_corr_time)
        self._imu_err = a * self._imu_err + math.sqrt(1 - a * a) * n.sigma_imu_pitch * self.rng.normal()
        rate = state.v[2] + n.sigma_gyro * self.rng.normal()
        return ImuSample(float(state.q[2] + self._imu_err), float(rate), state.time)


def measure(plant: Plant, state: SimState, contact: ContactState, noise_seed: int = 0,
            noise: NoiseConfig | None = None) -> dict:
    """One-shot measurement: per-LLC :class:`SensorFrame` dict, deterministic in ``noise_seed``."""
    return Sensors(plant, noise, noise_seed).measure(state, contact)


# ------------------------------------------------------------------------------------------


class TrajectoryLog:
    """Per-step ground-truth recorder with CSV export.

    Columns: ``t``, generalized ``q_*``/``v_*``, motor-side ``theta_*``,
    actuator forces ``f_*``, then per-foot ``grf_x``/``grf_z``.
    """

    def __init__(self, plant: Plant, every: int = 1):
        tree = plant.tree
        base = ["x", "z", "pitch"] if tree.floating else []
        gen = base + tree.joint_names
        self.header = (["t"] + [f"q_{n}" for n in gen] + [f"v_{n}" for n in gen]
                       + [f"theta_{n}" for n in tree.joint_names] + [f"f_{n}" for n in plant.actuator_names])
        self.feet = list(plant.foot_points)
        for f in self.feet:
            self.header += [f"{f}_grf_x", f"{f}_grf_z"]
        self.rows = []
        self.every = every
        self._n = 0

    def record(self, state: SimState, contact: ContactState):
        self._n += 1
        if (self._n - 1) % self.every:
            return
        row = [state.time, *state.q, *state.v, *state.theta, *state.f_act]
        for f in self.feet:
            row += list(contact.feet[f].grf)
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([f"{x:.9g}" for x in r])
