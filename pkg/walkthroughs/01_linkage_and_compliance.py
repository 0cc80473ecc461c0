"""
Linkages and structural compliance
==================================

Each joint of the biped is driven through a ball-screw linkage. The ankle
pairs two screws in a gimbal, the knee and hip pitch use a single crank.
This walkthrough maps joint torques to screw forces and back, then looks at
how much a compliant joint gives under a static load.
"""

import numpy as np

from elastic_biped.linkage import (
    crank_geometry,
    default_ankle_gimbal,
    force_to_torque,
    mechanism_jacobian,
    torque_to_force,
)
from elastic_biped.model import load_shipped

# the ankle gimbal: two screws, two joints (roll, pitch)
ankle = default_ankle_gimbal()
q = np.array([0.05, -0.1])
jac = mechanism_jacobian(ankle, q)
print("ankle Jacobian d(screw length)/d(joint angle):")
print(np.round(jac.J, 4))
print(f"condition number {jac.condition_number:.2f}")

# 10 N m of pitch torque needs these screw forces, and they map straight back
tau = np.array([0.0, 10.0])
f = torque_to_force(jac, tau)
print("screw forces for 10 N m pitch:", np.round(f, 1), "N")
print("round trip:", force_to_torque(jac, f))

# the single crank: the effective lever arm shrinks away from the perpendicular pose
crank = crank_geometry(lever_arm=0.05, reach=0.3)
for a in (0.0, 0.4, 0.8):
    J = mechanism_jacobian(crank, [a]).J[0, 0]
    print(f"crank at {a:.1f} rad: lever arm {abs(J) * 1000:.1f} mm")

# compliance: joint stiffness K with a small backlash band
model = load_shipped()
el = model.joint("l_knee").elasticity
for load in (0.0, 8.0, 40.0):
    defl = 0.0 if load == 0 else load / el.stiffness + np.sign(load) * el.backlash / 2
    print(f"{load:5.1f} N m on the knee -> {defl * 1e3:.2f} mrad of deflection")
