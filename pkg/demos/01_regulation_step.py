"""Step the three stock PS classes and watch the digital loop settle.

Each supply runs its 50 kHz PI loop against the exact R-L plant; the
read-back is the 17-bit-plus-sign quantized current.  The printout shows
the settling tick, the final error in ADC lsb, and the steady output
voltage (Ohm's law when regulated).
"""

import math

from pscsim import DEFAULT_CLASSES, registers as reg
from pscsim.controller import FleetEngine, PscController
from pscsim.link import Link
from pscsim.sim import Simulator

for cls_name in ("corrector", "sr-quadrupole", "booster-bend"):
    ps_class = DEFAULT_CLASSES[cls_name]
    p = ps_class.params
    sim = Simulator(seed=1)
    fleet = FleetEngine(sim)
    c = PscController(sim, fleet, "PS", ps_class)
    fleet.build()
    c.link = Link(sim, c.handle_frame)
    fleet.start()

    lsb = p.I_max / 2**17
    step = 0.15 * p.V_max / (p.L * 2 * math.pi * ps_class.f_c)
    step = round(step / lsb) * lsb
    c.set_mode(reg.MODE_ON)
    c.reg_write(reg.I_SET, reg.f32_to_word(step), via_link=False)

    settle_tick = None
    for k in range(1, 1001):
        sim.advance_until(k * 20_000)
        if settle_tick is None and abs(c.i_read - step) <= lsb:
            settle_tick = k
    # V_out is the instantaneous quantized command, so it dithers within
    # one DAC step of the resistive value
    print("%-14s step %8.4f A -> settled at tick %3d (%.2f ms), "
          "err %.2f lsb, V_out %.4f V (R*I = %.4f V, DAC step %.4f V)"
          % (cls_name, step, settle_tick, settle_tick * 0.02,
             abs(c.i_read - step) / lsb, float(fleet.V_out[0]), p.R * step,
             c.cfg.dac_lsb))
