"""
Seeing past the compliance
==========================

The joint encoders sit in front of the compliant links, so forward kinematics
from raw readings puts the feet in the wrong place once the legs carry load.
Here the biped balances in a staggered stance; we compare the foot position
error of raw encoders, the stiffness heuristic and the Kalman filter.
"""

import numpy as np

from elastic_biped.closed_loop import COLUMNS, ClosedLoop, LoopConfig
from elastic_biped.model import load_shipped

loop = ClosedLoop(load_shipped(), LoopConfig(stagger=0.1, wiggle=(15.0, 1.0, 1.0, 2.0)), seed=0)
rows = loop.run(2.0)
col = {c: i for i, c in enumerate(COLUMNS)}
data = np.array([[np.nan if isinstance(x, str) else x for x in r] for r in rows])

static = (data[:, col["t"]] >= 0.5) & (data[:, col["t"]] < 1.0)
for m in ("raw", "heur", "kf"):
    print(f"static foot FK error, {m:4s}: {data[static, col['fk_err_' + m]].mean() * 1e3:.3f} mm")

late = data[:, col["t"]] >= 0.5
peak = np.nanmax(data[late, col["kin_err_raw"]])
print(f"peak inter-foot error from raw encoders while wiggled: {peak * 100:.2f} cm")
