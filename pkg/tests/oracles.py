"""Closed-form reference models, kept independent of the simulator code paths."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PendulumTestbed:
    mass: float = 5.0
    length: float = 0.5       # pivot to center of mass
    inertia: float = 0.05     # about the center of mass
    K: float = 800.0
    D: float = 2.0
    b: float = 0.0
    lever_arm: float = 0.05

    def __post_init__(self):
        if min(self.mass, self.length, self.inertia, self.K, self.lever_arm) <= 0 or self.D < 0 or self.b < 0:
            raise ValueError("testbed parameters must be positive")


def pendulum_static_deflection(tb: PendulumTestbed, load: float) -> float:
    """Spring deflection (motor side minus link side) carrying a static ``load`` torque."""
    if load == 0.0:
        return 0.0
    return load / tb.K + math.copysign(tb.b / 2, load)


@dataclass(frozen=True)
class LipModel:
    mass: float
    z0: float
    g: float = 9.81

    def __post_init__(self):
        if self.z0 <= 0:
            raise ValueError("z0 must be > 0")

    @property
    def omega(self) -> float:
        return math.sqrt(self.g / self.z0)


def lip_closed_form(lip: LipModel, x0, xd0, vrp, t):
    """x'' = w^2 (x - vrp) with constant vrp."""
    w = lip.omega
    t = np.asarray(t, dtype=float)
    c, s = np.cosh(w * t), np.sinh(w * t)
    x = vrp + (x0 - vrp) * c + xd0 / w * s
    xd = (x0 - vrp) * w * s + xd0 * c
    return x, xd
