"""
Force control with a disturbance observer
=========================================

The actuator test bed is a single elastic pendulum. The controller tracks a
100 N step in screw force while the real spring is only half as stiff as the
controller believes. The observer gain k_dob decides how much of the model
mismatch is cancelled.
"""

import numpy as np

from elastic_biped.harness import HALF_K, dob_step_response
from elastic_biped.joint_control import assign_kdob
from elastic_biped.model import load_shipped

testbed = load_shipped("pendulum_testbed")

for k_dob in (0.0, 0.4, 0.8):
    rows = np.array(dob_step_response(testbed, k_dob, HALF_K, duration=1.5, seed=0))
    tail = rows[-300:, 2].mean()
    print(f"k_dob {k_dob:.1f}: steady force {tail:6.2f} N, error {abs(tail - 100) :.2f} %")

# the biped uses 0.8 on hip and ankle screws, 0.4 on thigh and knee
for name, k in sorted(assign_kdob(load_shipped()).items()):
    print(f"  {name:16s} k_dob {k}")
