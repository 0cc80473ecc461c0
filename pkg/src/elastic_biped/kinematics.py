"""Planar rigid-body tree: forward kinematics, point Jacobians, mass matrix and bias forces.

Generalized coordinates are ``[x, z, pitch, q_1 .. q_n]`` for a floating base
and ``[q_1 .. q_n]`` for a fixed one, where ``q_i`` are the moving (unlocked)
joints in model order. Equations of motion take the form
``M(q) qdd + h(q, qd) = S^T tau + sum_c J_c^T f_c``.

Point accelerations are ``J qdd + bias``; in the plane the bias term reduces
to ``-sum_i phidot_i^2 * r_i`` over the segments ``r_i`` on the path from the
base to the point, which keeps everything closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import RobotModel


@njit(cache=True)
def _tree_kernel(
    q, v, nb, gravity,
    link_parent, link_joint_dof, link_axis, link_origin,
    link_mass, link_inertia, link_com, path,
    pt_link, pt_off,
):
    n_links = link_parent.shape[0]
    ndof = q.shape[0]
    phi = np.zeros(n_links)
    phid = np.zeros(n_links)
    o = np.zeros((n_links, 2))
    od = np.zeros((n_links, 2))
    ob = np.zeros((n_links, 2))
    if nb == 3:
        o[0, 0] = q[0]
        o[0, 1] = q[1]
        phi[0] = q[2]
        od[0, 0] = v[0]
        od[0, 1] = v[1]
        phid[0] = v[2]
    for k in range(1, n_links):
        p = link_parent[k]
        c = np.cos(phi[p])
        s = np.sin(phi[p])
        rx = c * link_origin[k, 0] - s * link_origin[k, 1]
        rz = s * link_origin[k, 0] + c * link_origin[k, 1]
        o[k, 0] = o[p, 0] + rx
        o[k, 1] = o[p, 1] + rz
        od[k, 0] = od[p, 0] - phid[p] * rz
        od[k, 1] = od[p, 1] + phid[p] * rx
        ob[k, 0] = ob[p, 0] - phid[p] * phid[p] * rx
        ob[k, 1] = ob[p, 1] - phid[p] * phid[p] * rz
        d = link_joint_dof[k]
        phi[k] = phi[p] + link_axis[k] * q[d]
        phid[k] = phid[p] + link_axis[k] * v[d]

    # mass matrix and bias forces from the link centers of mass
    M = np.zeros((ndof, ndof))
    h = np.zeros(ndof)
    Jc = np.zeros((2, ndof))
    jw = np.zeros(ndof)
    for k in range(n_links):
        c = np.cos(phi[k])
        s = np.sin(phi[k])
        rx = c * link_com[k, 0] - s * link_com[k, 1]
        rz = s * link_com[k, 0] + c * link_com[k, 1]
        px = o[k, 0] + rx
        pz = o[k, 1] + rz
        bx = ob[k, 0] - phid[k] * phid[k] * rx
        bz = ob[k, 1] - phid[k] * phid[k] * rz
        Jc[:, :] = 0.0
        jw[:] = 0.0
        if nb == 3:
            Jc[0, 0] = 1.0
            Jc[1, 1] = 1.0
            Jc[0, 2] = -(pz - o[0, 1])
            Jc[1, 2] = px - o[0, 0]
            jw[2] = 1.0
        for a in range(n_links):
            if path[k, a] and a > 0:
                d = link_joint_dof[a]
                ax = link_axis[a]
                Jc[0, d] = -ax * (pz - o[a, 1])
                Jc[1, d] = ax * (px - o[a, 0])
                jw[d] = ax
        m = link_mass[k]
        I = link_inertia[k]
        for i in range(ndof):
            h[i] += m * (Jc[0, i] * bx + Jc[1, i] * (bz + gravity))
            for j in range(ndof):
                M[i, j] += m * (Jc[0, i] * Jc[0, j] + Jc[1, i] * Jc[1, j]) + I * jw[i] * jw[j]

    npts = pt_link.shape[0]
    P = np.zeros((npts, 2))
    V = np.zeros((npts, 2))
    B = np.zeros((npts, 2))
    J = np.zeros((npts, 2, ndof))
    for i in range(npts):
        k = pt_link[i]
        c = np.cos(phi[k])
        s = np.sin(phi[k])
        rx = c * pt_off[i, 0] - s * pt_off[i, 1]
        rz = s * pt_off[i, 0] + c * pt_off[i, 1]
        px = o[k, 0] + rx
        pz = o[k, 1] + rz
        P[i, 0] = px
        P[i, 1] = pz
        V[i, 0] = od[k, 0] - phid[k] * rz
        V[i, 1] = od[k, 1] + phid[k] * rx
        B[i, 0] = ob[k, 0] - phid[k] * phid[k] * rx
        B[i, 1] = ob[k, 1] - phid[k] * phid[k] * rz
        if nb == 3:
            J[i, 0, 0] = 1.0
            J[i, 1, 1] = 1.0
            J[i, 0, 2] = -(pz - o[0, 1])
            J[i, 1, 2] = px - o[0, 0]
        for a in range(n_links):
            if path[k, a] and a > 0:
                d = link_joint_dof[a]
                ax = link_axis[a]
                J[i, 0, d] = -ax * (pz - o[a, 1])
                J[i, 1, d] = ax * (px - o[a, 0])
    return M, h, phi, phid, o, P, V, B, J


@dataclass
class TreeState:
    """Everything the kernel computes for one ``(q, v)``."""

    M: np.ndarray
    h: np.ndarray
    phi: np.ndarray       # absolute link angles
    phid: np.ndarray      # absolute link angular rates
    origins: np.ndarray   # link frame origins (joint locations), world
    p: np.ndarray         # requested points: positions (n, 2)
    pv: np.ndarray        # velocities
    pbias: np.ndarray     # Jdot * v
    pJ: np.ndarray        # Jacobians (n, 2, ndof)


class PlanarTree:
    """Kinematic/dynamic evaluator built from a :class:`RobotModel`.

    Links are re-ordered so that parents precede children; ``link_index``
    maps names to that order.
    """

    def __init__(self, model: RobotModel):
        self.model = model
        self.floating = model.floating_base
        self.nb = 3 if self.floating else 0
        joints = model.dof_joints
        self.joint_names = [j.name for j in joints]
        self.nj = len(joints)
        self.ndof = self.nb + self.nj
        child_joint = {j.child: j for j in joints}

        base = model.links[0].name
        order = [base]
        frontier = [base]
        while frontier:
            nxt = []
            for ln in frontier:
                for j in joints:
                    if j.parent == ln:
                        order.append(j.child)
                        nxt.append(j.child)
            frontier = nxt
        self.link_names = order
        self.link_index = {n: i for i, n in enumerate(order)}
        n = len(order)
        self.link_parent = np.full(n, -1, dtype=np.int64)
        self.link_joint_dof = np.full(n, -1, dtype=np.int64)
        self.link_axis = np.zeros(n)
        self.link_origin = np.zeros((n, 2))
        self.link_mass = np.zeros(n)
        self.link_inertia = np.zeros(n)
        self.link_com = np.zeros((n, 2))
        self.joint_child_link = np.zeros(self.nj, dtype=np.int64)
        for i, ln in enumerate(order):
            spec = model.link(ln)
            self.link_mass[i] = spec.mass
            self.link_inertia[i] = spec.inertia
            self.link_com[i] = spec.com_offset
            if i == 0:
                continue
            j = child_joint[ln]
            parent = model.link(j.parent)
            self.link_parent[i] = self.link_index[j.parent]
            ji = self.joint_names.index(j.name)
            self.link_joint_dof[i] = self.nb + ji
            self.joint_child_link[ji] = i
            self.link_axis[i] = j.axis
            self.link_origin[i] = j.origin if j.origin is not None else (0.0, -parent.length)
        # path[k, a]: link a lies on the chain from the base to link k (inclusive)
        self.path = np.zeros((n, n), dtype=np.bool_)
        for k in range(n):
            a = k
            while a >= 0:
                self.path[k, a] = True
                a = self.link_parent[a]
        self.total_mass = float(self.link_mass.sum())
        self.gravity = model.gravity
        self._com_links = np.arange(n, dtype=np.int64)
        self._no_pts = (np.zeros(0, dtype=np.int64), np.zeros((0, 2)))

        # contact points, grouped by link
        self.contact_links = []
        self.contact_point_names = []
        cl, co = [], []
        for ln in order:
            spec = model.link(ln)
            if spec.contact_points:
                self.contact_links.append(ln)
            for cp in spec.contact_points:
                self.contact_point_names.append(f"{ln}.{cp.name}")
                cl.append(self.link_index[ln])
                co.append(cp.offset)
        self.contact_pt_link = np.asarray(cl, dtype=np.int64)
        self.contact_pt_off = np.asarray(co, dtype=float).reshape(-1, 2)

    # ------------------------------------------------------------------------------------

    def points(self, links, offsets):
        links = np.asarray([self.link_index[l] if isinstance(l, str) else l for l in links], dtype=np.int64)
        return links, np.asarray(offsets, dtype=float).reshape(-1, 2)

    def evaluate(self, q, v=None, pts=None) -> TreeState:
        q = np.ascontiguousarray(q, dtype=float)
        v = np.zeros(self.ndof) if v is None else np.ascontiguousarray(v, dtype=float)
        pl, po = self._no_pts if pts is None else pts
        M, h, phi, phid, o, P, V, B, J = _tree_kernel(
            q, v, self.nb, self.gravity,
            self.link_parent, self.link_joint_dof, self.link_axis, self.link_origin,
            self.link_mass, self.link_inertia, self.link_com, self.path,
            pl, po,
        )
        return TreeState(M, h, phi, phid, o, P, V, B, J)

    def mass_matrix(self, q):
        return self.evaluate(q).M

    def bias_forces(self, q, v):
        return self.evaluate(q, v).h

    def gravity_forces(self, q):
        return self.evaluate(q).h

    def com(self, q, v=None):
        """CoM position, velocity, Jacobian and bias acceleration."""
        st = self.evaluate(q, v, (self._com_links, self.link_com))
        w = self.link_mass / self.total_mass
        p = w @ st.p
        vel = w @ st.pv
        J = np.einsum("k,kij->ij", w, st.pJ)
        bias = w @ st.pbias
        return p, vel, J, bias

    def point(self, q, link, offset=(0.0, 0.0), v=None):
        st = self.evaluate(q, v, self.points([link], [offset]))
        return st.p[0], st.pv[0], st.pJ[0], st.pbias[0]

    def link_angle(self, q, link) -> float:
        return float(self.evaluate(q).phi[self.link_index[link]])

    def angle_jacobian(self, link) -> np.ndarray:
        """Row mapping generalized velocity to the link's absolute angular rate."""
        k = self.link_index[link]
        row = np.zeros(self.ndof)
        if self.floating:
            row[2] = 1.0
        for a in range(1, len(self.link_names)):
            if self.path[k, a]:
                row[self.link_joint_dof[a]] = self.link_axis[a]
        return row

    def kinetic_energy(self, q, v) -> float:
        return 0.5 * float(v @ self.mass_matrix(q) @ v)

    def potential_energy(self, q) -> float:
        st = self.evaluate(q, None, (self._com_links, self.link_com))
        return float(self.gravity * (self.link_mass @ st.p[:, 1]))

    def joint_slice(self) -> slice:
        return slice(self.nb, self.ndof)
