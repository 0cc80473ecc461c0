"""Dense dual active-set QP (Goldfarb-Idnani) for small, strictly convex problems.

    minimize    0.5 x'Hx + g'x
    subject to  A_eq x  = b_eq
                A_in x >= b_in

The method starts from the equality-constrained minimizer and repeatedly adds
the most violated inequality, dropping active constraints whose multipliers
would turn negative. Steps are computed from a Cholesky factor of ``H``
rather than updated factorizations; at the sizes used here (tens of
variables) that is cheap and easy to audit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class QpError(RuntimeError):
    pass


class QpInfeasible(QpError):
    def __init__(self, message, constraint_set=None):
        super().__init__(message)
        self.constraint_set = constraint_set


class QpNotConverged(QpError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    # optional label per inequality row, used in infeasibility reports
    in_labels: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.g)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        if self.A_in is None:
            self.A_in, self.b_in = np.zeros((0, n)), np.zeros(0)


@dataclass
class QpResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray      # >= 0, zero for inactive rows
    active: list
    objective: float
    iterations: int


def solve_qp(p: QpProblem, tol: float = 1e-10, max_iter: int = 200) -> QpResult:
    H, g = p.H, p.g
    m_eq = p.A_eq.shape[0]
    m_in = p.A_in.shape[0]
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise QpError("Hessian is not positive definite") from exc

    def hinv(v):
        return np.linalg.solve(L.T, np.linalg.solve(L, v))

    active: list[int] = []   # inequality indices, in order of addition

    def normals():
        return np.vstack([p.A_eq, p.A_in[active]]) if active else p.A_eq

    def solve_active():
        N = normals()
        rhs = np.concatenate([p.b_eq, p.b_in[active]])
        x0 = -hinv(g)
        if N.shape[0] == 0:
            return x0, np.zeros(0)
        HiNt = hinv(N.T)
        S = N @ HiNt
        lam = np.linalg.solve(S, rhs - N @ x0)
        return x0 + HiNt @ lam, lam

    try:
        x, lam = solve_active()
    except np.linalg.LinAlgError as exc:
        raise QpInfeasible("equality constraints are rank deficient", "equality") from exc
    if m_eq and np.max(np.abs(p.A_eq @ x - p.b_eq)) > 1e-8 * max(1.0, np.max(np.abs(p.b_eq))):
        raise QpInfeasible("equality constraints are inconsistent", "equality")
    lam_act = lam.copy()      # multipliers for [eq..., active ineq...]

    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise QpNotConverged(f"active set did not settle in {max_iter} iterations")
        slack = p.A_in @ x - p.b_in if m_in else np.zeros(0)
        if active:
            slack[active] = np.inf
        if m_in == 0 or slack.min() >= -tol * max(1.0, np.abs(p.b_in).max()):
            break
        k = int(np.argmin(slack))
        nk = p.A_in[k]
        t_k = 0.0
        while True:
            N = normals()
            if N.shape[0]:
                HiNt = hinv(N.T)
                S = N @ HiNt
                r = np.linalg.solve(S, HiNt.T @ nk)   # dual step direction
                z = hinv(nk) - HiNt @ r                # primal step direction
            else:
                r = np.zeros(0)
                z = hinv(nk)
            # dual blocking: an active inequality multiplier reaching zero
            t1, block = np.inf, -1
            for j in range(len(active)):
                rj = r[m_eq + j]
                if rj > tol:
                    ratio = lam_act[m_eq + j] / rj
                    if ratio < t1:
                        t1, block = ratio, j
            nz = float(nk @ z)
            t2 = -float(nk @ x - p.b_in[k]) / nz if nz > tol * max(1.0, nk @ nk) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                label = p.in_labels[k] if p.in_labels else k
                raise QpInfeasible(f"inequality {label} cannot be satisfied", label)
            if np.isfinite(t2):
                x = x + t * z
            lam_act = lam_act - t * r
            t_k += t
            if t == t2:
                active.append(k)
                lam_act = np.append(lam_act, t_k)
                break
            # drop the blocking constraint and keep pushing on k
            del active[block]
            lam_act = np.delete(lam_act, m_eq + block)

    lam_in = np.zeros(m_in)
    for j, k in enumerate(active):
        lam_in[k] = max(lam_act[m_eq + j], 0.0)
    lam_eq = lam_act[:m_eq]
    obj = 0.5 * float(x @ H @ x) + float(g @ x)
    return QpResult(x, lam_eq, lam_in, list(active), obj, it)


@dataclass
class KktReport:
    stationarity: float
    primal_eq: float
    primal_in: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_in, self.dual, self.complementarity)


def kkt_residuals(p: QpProblem, x, lam_eq, lam_in) -> KktReport:
    grad = p.H @ x + p.g - p.A_eq.T @ lam_eq - p.A_in.T @ lam_in
    slack = p.A_in @ x - p.b_in
    return KktReport(
        stationarity=float(np.max(np.abs(grad))) if grad.size else 0.0,
        primal_eq=float(np.max(np.abs(p.A_eq @ x - p.b_eq))) if p.b_eq.size else 0.0,
        primal_in=float(max(0.0, -slack.min())) if slack.size else 0.0,
        dual=float(max(0.0, -lam_in.min())) if lam_in.size else 0.0,
        complementarity=float(np.max(np.abs(lam_in * slack))) if slack.size else 0.0,
    )
