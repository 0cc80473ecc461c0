"""Actuator <-> joint <-> motor kinematic maps for linear-actuator linkages.

Two mechanism kinds are supported:

``crank``
    One linear actuator driving one revolute joint in a plane. The proximal
    attachment point is fixed in the parent frame, the distal one rotates with
    the joint coordinate ``q``.

``gimbal``
    Two linear actuators driving a two-axis gimbal (e.g. ankle roll/pitch),
    so both actuators contribute to both joints. Rotation is
    ``R = R_a0(q0) @ R_a1(q1)`` with axes taken from ``axes``.

Actuator position ``q_act`` is the pushrod length minus its neutral length
(length at ``q = 0``), so the neutral pose maps to zero travel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SINGULARITY_CONDITION = 1e6


class LinkageError(ValueError):
    pass


class JointLimitError(LinkageError):
    pass


class SingularJacobianError(LinkageError):
    pass


def _rot2(q: float) -> np.ndarray:
    c, s = np.cos(q), np.sin(q)
    return np.array([[c, -s], [s, c]])


def _drot2(q: float) -> np.ndarray:
    c, s = np.cos(q), np.sin(q)
    return np.array([[-s, -c], [c, -s]])


def _rot3(axis: str, q: float) -> np.ndarray:
    c, s = np.cos(q), np.sin(q)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise LinkageError(f"unknown rotation axis {axis!r}")


def _drot3(axis: str, q: float) -> np.ndarray:
    c, s = np.cos(q), np.sin(q)
    if axis == "x":
        return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    if axis == "y":
        return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class LinkageGeometry:
    """Attachment-point description of a crank or gimbal mechanism.

    ``proximal[i]`` / ``distal[i]`` are actuator ``i``'s attachment points in
    the parent and child frames, both measured from the joint center.
    Optional ``q_min``/``q_max`` bound the joint coordinates.
    """

    kind: str
    proximal: tuple[tuple[float, ...], ...]
    distal: tuple[tuple[float, ...], ...]
    axes: tuple[str, ...] = ()
    q_min: tuple[float, ...] | None = None
    q_max: tuple[float, ...] | None = None

    def __post_init__(self):
        problems = geometry_violations(self)
        if problems:
            raise LinkageError("; ".join(problems))

    @property
    def n_joints(self) -> int:
        return 1 if self.kind == "crank" else 2

    @property
    def n_actuators(self) -> int:
        return len(self.proximal)

    @property
    def neutral_length(self) -> np.ndarray:
        p = np.asarray(self.proximal, dtype=float)
        d = np.asarray(self.distal, dtype=float)
        return np.linalg.norm(p - d, axis=1)

    def with_limits(self, q_min, q_max) -> "LinkageGeometry":
        return LinkageGeometry(
            self.kind,
            self.proximal,
            self.distal,
            self.axes,
            tuple(float(v) for v in q_min),
            tuple(float(v) for v in q_max),
        )

    def rotation(self, q) -> np.ndarray:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if self.kind == "crank":
            return _rot2(q[0])
        return _rot3(self.axes[0], q[0]) @ _rot3(self.axes[1], q[1])

    def rotation_derivatives(self, q) -> list[np.ndarray]:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if self.kind == "crank":
            return [_drot2(q[0])]
        r0, r1 = _rot3(self.axes[0], q[0]), _rot3(self.axes[1], q[1])
        return [_drot3(self.axes[0], q[0]) @ r1, r0 @ _drot3(self.axes[1], q[1])]


def geometry_violations(geom: LinkageGeometry) -> list[str]:
    out = []
    if geom.kind not in ("crank", "gimbal"):
        return [f"kind must be 'crank' or 'gimbal', got {geom.kind!r}"]
    dim = 2 if geom.kind == "crank" else 3
    n_act = 1 if geom.kind == "crank" else 2
    if len(geom.proximal) != n_act or len(geom.distal) != n_act:
        out.append(f"{geom.kind} needs exactly {n_act} actuator attachment pair(s)")
        return out
    for pts in (geom.proximal, geom.distal):
        if any(len(p) != dim for p in pts):
            out.append(f"{geom.kind} attachment points must be {dim}-vectors")
            return out
    if geom.kind == "gimbal":
        if len(geom.axes) != 2 or any(a not in "xyz" for a in geom.axes) or geom.axes[0] == geom.axes[1]:
            out.append("gimbal axes must be two distinct names from x/y/z")
    p = np.asarray(geom.proximal, dtype=float)
    d = np.asarray(geom.distal, dtype=float)
    if np.any(np.linalg.norm(p - d, axis=1) <= 0.0):
        out.append("attachment points must be distinct (neutral length > 0)")
    if (geom.q_min is None) != (geom.q_max is None):
        out.append("q_min and q_max must be given together")
    elif geom.q_min is not None:
        if len(geom.q_min) != n_act or len(geom.q_max) != n_act:
            out.append("limit vectors must match the joint count")
        elif any(lo >= hi for lo, hi in zip(geom.q_min, geom.q_max)):
            out.append("q_min must be < q_max")
    return out


@dataclass(frozen=True)
class MechanismJacobian:
    """``J[i, j] = d q_act[i] / d q_joint[j]``."""

    J: np.ndarray
    condition_number: float

    @property
    def singular(self) -> bool:
        return not np.isfinite(self.condition_number) or self.condition_number > SINGULARITY_CONDITION


def _check_limits(geom: LinkageGeometry, q: np.ndarray) -> None:
    if geom.q_min is None:
        return
    lo, hi = np.asarray(geom.q_min), np.asarray(geom.q_max)
    if np.any(q < lo) or np.any(q > hi):
        raise JointLimitError(f"joint position {q} outside limits [{lo}, {hi}]")


def _as_q(geom: LinkageGeometry, q_joint) -> np.ndarray:
    q = np.atleast_1d(np.asarray(q_joint, dtype=float))
    if q.shape != (geom.n_joints,):
        raise LinkageError(f"expected {geom.n_joints} joint coordinate(s), got shape {q.shape}")
    return q


def joint_to_actuator(geom: LinkageGeometry, q_joint, check_limits: bool = True) -> np.ndarray:
    """Actuator travel (m) for the given joint coordinates."""
    q = _as_q(geom, q_joint)
    if check_limits:
        _check_limits(geom, q)
    p = np.asarray(geom.proximal, dtype=float)
    d = np.asarray(geom.distal, dtype=float)
    rd = d @ geom.rotation(q).T
    return np.linalg.norm(p - rd, axis=1) - geom.neutral_length


def actuator_lengths(geom: LinkageGeometry, q_joint) -> np.ndarray:
    return joint_to_actuator(geom, q_joint, check_limits=False) + geom.neutral_length


def motor_to_actuator(screw_pitch, q_motor) -> np.ndarray:
    """Ball-screw map from motor revolutions to actuator travel."""
    return np.asarray(screw_pitch, dtype=float) * np.asarray(q_motor, dtype=float)


def actuator_to_motor(screw_pitch, q_act) -> np.ndarray:
    return np.asarray(q_act, dtype=float) / np.asarray(screw_pitch, dtype=float)


def mechanism_jacobian(geom: LinkageGeometry, q_joint, check_limits: bool = True) -> MechanismJacobian:
    q = _as_q(geom, q_joint)
    if check_limits:
        _check_limits(geom, q)
    p = np.asarray(geom.proximal, dtype=float)
    d = np.asarray(geom.distal, dtype=float)
    rd = d @ geom.rotation(q).T
    diff = rd - p
    length = np.linalg.norm(diff, axis=1)
    J = np.empty((geom.n_actuators, geom.n_joints))
    for j, dR in enumerate(geom.rotation_derivatives(q)):
        J[:, j] = np.einsum("ij,ij->i", diff, d @ dR.T) / length
    if geom.kind == "crank":
        # a scalar's 2-norm condition is always 1; measure against the best lever arm instead
        s = np.array([np.linalg.norm(d[0]), abs(J[0, 0])])
    else:
        s = np.linalg.svd(J, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0.0 else float("inf")
    return MechanismJacobian(J, cond)


def torque_to_force(jac: MechanismJacobian, tau_joint) -> np.ndarray:
    """Actuator forces producing ``tau_joint``: ``f = J^{-T} tau``."""
    if jac.singular:
        raise SingularJacobianError(f"mechanism Jacobian is singular (cond={jac.condition_number:.3g})")
    tau = np.atleast_1d(np.asarray(tau_joint, dtype=float))
    return np.linalg.solve(jac.J.T, tau)


def force_to_torque(jac: MechanismJacobian, f_act) -> np.ndarray:
    return jac.J.T @ np.atleast_1d(np.asarray(f_act, dtype=float))


def actuator_to_joint(geom: LinkageGeometry, q_act, q_guess=None, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Invert ``joint_to_actuator`` with Newton iterations.

    Converges for poses inside the limit box, where the map is injective.
    """
    target = np.atleast_1d(np.asarray(q_act, dtype=float))
    if q_guess is None and geom.q_min is not None:
        q = 0.5 * (np.asarray(geom.q_min) + np.asarray(geom.q_max))
    elif q_guess is None:
        q = np.zeros(geom.n_joints)
    else:
        q = np.atleast_1d(np.asarray(q_guess, dtype=float)).copy()
    for _ in range(max_iter):
        r = joint_to_actuator(geom, q, check_limits=False) - target
        if np.max(np.abs(r)) < tol:
            break
        J = mechanism_jacobian(geom, q, check_limits=False).J
        q = q - np.linalg.solve(J, r)
    return q


def crank_geometry(lever_arm: float, reach: float, perpendicular_at: float = 0.0) -> LinkageGeometry:
    """Planar crank whose pushrod is perpendicular to the lever at ``perpendicular_at``.

    The proximal point sits ``reach`` from the joint; the lever arm has length
    ``lever_arm``. Travel is monotone for ``|q - perpendicular_at| < pi/2``.
    """
    a = -perpendicular_at
    return LinkageGeometry(
        "crank",
        proximal=((0.0, float(reach)),),
        distal=((float(lever_arm * np.cos(a)), float(lever_arm * np.sin(a))),),
    )


def default_ankle_gimbal() -> LinkageGeometry:
    """Shipped ankle roll/pitch gimbal: two pushrods running down the shin to the heel."""
    return LinkageGeometry(
        "gimbal",
        proximal=((-0.05, 0.05, 0.30), (-0.05, -0.05, 0.30)),
        distal=((-0.06, 0.05, 0.0), (-0.06, -0.05, 0.0)),
        axes=("x", "y"),
        q_min=(-0.4, -0.8),
        q_max=(0.4, 0.8),
    )
