"""Saturate one 5 MHz register link and punch priority writes through it.

Normal single-register writes stream back to back (72-bit frames every
14.4 us), giving the sustained throughput.  Priority writes are injected
at the next byte boundary, so even on the saturated wire every one of
them round-trips inside the 30 us budget.
"""

import numpy as np

from pscsim import registers as reg
from pscsim.controller import FleetEngine, PscController
from pscsim.link import Frame, Link, OP_WRITE
from pscsim.plant import DEFAULT_CLASSES
from pscsim.sim import NS_PER_S, Simulator

sim = Simulator(seed=2)
fleet = FleetEngine(sim)
c = PscController(sim, fleet, "PS", DEFAULT_CLASSES["corrector"])
fleet.build()
link = Link(sim, c.handle_frame)
c.link = link
fleet.start()
c.set_mode(reg.MODE_ON)

word = reg.f32_to_word(0.5)
normals = [link.transact(Frame(prio=False, opcode=OP_WRITE, addr=reg.I_SET,
                               count=1, payload=(word,)))
           for _ in range(80_000)]

rng = np.random.default_rng(7)
latencies = []


def fire_priority():
    # one outstanding priority transaction per link, like the orbit feedback
    if len(latencies) >= 2000:
        return
    fr = Frame(prio=True, opcode=OP_WRITE, addr=reg.I_SET, count=1,
               payload=(word,))
    link.transact(fr, prio=True, origin="fofb", on_done=note)


def note(txn):
    latencies.append(txn.latency_ns)
    sim.schedule_after(int(rng.integers(0, 80_000)), fire_priority)


fire_priority()
sim.advance_until(int(1.5 * NS_PER_S))

done = [t for t in normals if t.deliver_t is not None and t.deliver_t <= NS_PER_S]
print("normal throughput : %d writes in the first virtual second" % len(done))
lat = np.array(latencies)
print("priority writes   : %d issued on the saturated link" % len(lat))
print("latency us        : min %.1f / mean %.1f / max %.1f  (budget 30)"
      % (lat.min() / 1e3, lat.mean() / 1e3, lat.max() / 1e3))
print("violations        : %d" % int((lat > 30_000).sum()))
