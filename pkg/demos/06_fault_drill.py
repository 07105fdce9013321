"""Commissioning-style fault drill: shorted winding, swapped magnets, dead fiber.

The controller's load-resistance estimate feeds a +-10 % alarm band with a
three-strike filter, the same diagnostic that catches winding shorts and
cabling mix-ups; link breaks flag immediately.
"""

from pscsim import build_machine

cfg = {
    "ps_instances": [
        {"id": "SR-S01", "class": "sr-sextupole", "i_set": 75.0},
        {"id": "SR-Q01", "class": "sr-quadrupole", "i_set": 60.0},
        {"id": "SR-Q02", "class": "sr-quadrupole", "i_set": 60.0, "R": 0.32},
        {"id": "SR-C01", "class": "corrector", "i_set": 1.0},
    ],
    "faults": [
        {"t": 2.0, "ps": "SR-S01", "kind": "resistance_change", "new_R": 0.4},
        {"t": 2.5, "ps": "SR-Q01", "kind": "swap_with", "other": "SR-Q02"},
        {"t": 3.0, "ps": "SR-C01", "kind": "link_break", "direction": "rx",
         "broken": True},
    ],
    "run": {"seed": 5},
}

machine = build_machine(cfg)
s = machine.server
log = []
for ps in ("SR-S01", "SR-Q01", "SR-Q02", "SR-C01"):
    s.ch_monitor(ps + ":ALARM",
                 lambda n, v, a, t, ps=ps: log.append((t, ps, v)))

machine.run(8.0)

print("injected: winding short on SR-S01 at 2.0 s (0.5 -> 0.4 ohm)")
print("          SR-Q01/SR-Q02 cabling swap at 2.5 s (0.25 vs 0.32 ohm)")
print("          SR-C01 receive fiber dark at 3.0 s\n")
print("alarm log:")
for t, ps, v in log:
    if v["severity"] != "none":
        print("  t=%7.3f s  %-7s %-6s %s" % (t / 1e9, ps, v["severity"],
                                             ",".join(v["reasons"])))
print("\nresistance read-backs after the dust settled:")
for ps in ("SR-S01", "SR-Q01", "SR-Q02"):
    print("  %s R_LOAD = %.4f ohm (nominal %.2f)"
          % (ps, s.ch_get(ps + ":R-LOAD"), s.records[ps].r_nominal))
machine.close()
