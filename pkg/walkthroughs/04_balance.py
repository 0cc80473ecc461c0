"""
Balancing through a push
========================

The full loop: simulator at 10 kHz, six joint controllers at 1 kHz on a
daisy-chained bus, and the estimator, DCM planner and whole-body QP at
500 Hz. A 20 N push hits the pelvis for 0.2 s.
"""

from elastic_biped.closed_loop import COLUMNS, ClosedLoop, LoopConfig
from elastic_biped.dynamics import DisturbanceProfile, Push
from elastic_biped.model import load_shipped

push = DisturbanceProfile((Push(1.0, 0.2, (20.0, 0.0), "pelvis", (0.0, 0.12)),))
loop = ClosedLoop(load_shipped(), LoopConfig(pushes=push), seed=0)
rows = loop.run(3.0)
col = {c: i for i, c in enumerate(COLUMNS)}

for r in rows[::100]:
    print(f"t {r[col['t']]:4.1f} s  CoM x {r[col['com_x']] * 100:6.2f} cm  "
          f"estimate {r[col['com_x_est']] * 100:6.2f} cm  DCM {r[col['xi']] * 100:6.2f} cm")
print("bus halted:", loop.bus.halted())
