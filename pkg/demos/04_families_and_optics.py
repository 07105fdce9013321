"""Drive the machine through families and the five optic knobs.

A family writes scale*value + offset to each member supply; the optic
layer reduces everything to energy, tune shifts and chromaticity shifts,
mapped to family currents through the response matrix.  Large knob moves
go out as one synchronized ramp.
"""

import os

from pscsim import build_machine, load_scenario

here = os.path.dirname(__file__)
machine = build_machine(load_scenario(os.path.join(here, "scenarios",
                                                   "small_ring.json")))
s = machine.server
machine.run(0.3)

print("theoretical optics:")
for fam in ("QF", "QD", "SF"):
    print("  %s set %.2f A, members read back %s"
          % (fam, s.ch_get(fam + ":I-SET"),
             ["%.3f" % s.records[m.ps].i_read
              for m in machine.machine_layer.families[fam].members]))

print("\nfamily put QF -> 101.0 A (members get scale*value + offset)")
machine.machine_layer.family_put("QF", 101.0)
machine.run(machine.sim.now / 1e9 + 0.5)
for ps in ("SR-Q01", "SR-Q02"):
    print("  %s I-SET %.3f A, I-READ %.3f A"
          % (ps, s.ch_get(ps + ":I-SET"), s.ch_get(ps + ":I-READ")))

print("\noptic knob: horizontal tune shift +0.05 at fixed energy")
currents = machine.machine_layer.optic_put({"dnu_x": 0.05})
for fam, i in zip(machine.machine_layer.optic.families, currents):
    print("  %s -> %.3f A" % (fam, i))
machine.run(machine.sim.now / 1e9 + 3.0)
print("ramp state after apply: %s" % s.ch_get("SR-Q01:RAMP-STATE"))

print("\nhysteresis after the up-move: %s (standardize restores the branch)"
      % s.ch_get("QF:HYST-STATE"))
machine.close()
