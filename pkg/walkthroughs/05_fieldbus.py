"""
Faults on the bus
=================

The master sends one frame every 2 ms down a chain of six joint controllers.
A HALT raised anywhere must reach every node within a cycle; a node that
overruns its 1 ms loop five times in a row halts the robot.
"""

from elastic_biped.fieldbus import BusTopology, Fault, Fieldbus, halt_propagation

bus = Fieldbus(BusTopology(hop_latency=50e-6))
rep = halt_propagation(bus, "l_thigh", raise_time=0.0103)
for name, t in rep.latch_times.items():
    print(f"{name:8s} latched {1e3 * (t - rep.raise_time):.3f} ms after the raise")

bus = Fieldbus(faults=(Fault("overrun", 0.010, llc="r_ankle", value=1.8),))
for k in range(12):
    bus.run_cycle(k)
for e in bus.events[:10]:
    print(" ".join(e.row()))
