"""Run the booster scenario and measure the 3 Hz ramping mode.

The bend supply plays a looped 4167-point sine: one set-point every 80 us
with three interpolated values in between, so the fundamental period is
4167 * 80 us = 0.33336 s.  The measurement below recovers the period from
mean crossings of the logged read current.
"""

import os

import numpy as np

from pscsim import build_machine, load_scenario

here = os.path.dirname(__file__)
cfg = load_scenario(os.path.join(here, "scenarios", "booster.json"))
cfg["run"].pop("metrics_path", None)  # keep rows in memory for this demo

machine = build_machine(cfg)
machine.run(6.0)

rows = [r for r in machine.metrics.memory if r[1] == "BO-B01" and r[0] > 1e9]
t = np.array([r[0] for r in rows]) * 1e-9
i_read = np.array([r[3] for r in rows])

x = i_read - i_read.mean()
asc = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
tc = t[asc] + (t[asc + 1] - t[asc]) * (-x[asc]) / (x[asc + 1] - x[asc])
period = (tc[-1] - tc[0]) / (len(tc) - 1)

print("booster bend followed the ramp for %.1f s of virtual time" % t[-1])
print("peak current   : %8.2f A" % i_read.max())
print("mean period    : %.6f s  (4167 * 80 us = 0.333360 s)" % period)
print("fundamental    : %.4f Hz" % (1.0 / period))
machine.close()
