"""Machine layer: magnet families and the optic parameter database.

A family drives a set of PS from one set value, each member with its own
offset and scale.  The optic model reduces the whole machine to five
physical quantities (energy plus horizontal/vertical tune and
chromaticity shifts):

    I_f = g_f * (E/E0) * (I0_f + (M @ dq)_f),  dq = (dnu_x, dnu_y, dxi_x, dxi_y)

Energy scales every current with the beam rigidity, the four shift knobs
enter linearly through the response matrix M, and saturation of the iron
is folded into the per-family gradient g_f.  I0, M and g come from an
off-line model and are accepted here as configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelError, PutTicket

KNOB_NAMES = ("E", "dnu_x", "dnu_y", "dxi_x", "dxi_y")


@dataclass
class FamilyMember:
    ps: str
    offset: float = 0.0
    scale: float = 1.0


@dataclass
class FamilySpec:
    name: str
    members: list
    set_value: float = 0.0


@dataclass
class OpticModel:
    E0: float  # reference energy, GeV
    families: list  # family names in matrix-row order
    I0: np.ndarray  # theoretical currents, A, per family
    M: np.ndarray  # families x 4, A per knob unit
    g: np.ndarray  # per-family gradient

    def __post_init__(self):
        self.I0 = np.asarray(self.I0, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        n = len(self.families)
        if self.M.shape != (n, 4):
            raise ValueError("optic matrix must be %d x 4, got %r" % (n, self.M.shape))
        if self.I0.shape != (n,) or self.g.shape != (n,):
            raise ValueError("I0 and g must have one entry per family")
        if not np.all(self.g > 0):
            raise ValueError("family gradients must be positive")
        if not self.E0 > 0:
            raise ValueError("reference energy must be positive")

    def currents(self, q: dict) -> np.ndarray:
        """Family currents for knob settings q (missing knobs default to
        E=E0 and zero shifts)."""
        e = float(q.get("E", self.E0))
        dq = np.array([float(q.get(k, 0.0)) for k in KNOB_NAMES[1:]])
        return self.g * (e / self.E0) * (self.I0 + self.M @ dq)


class MachineLayer:
    """Families and optics on top of the channel server."""

    def __init__(self, server):
        self.server = server
        self.families = {}
        self.optic = None
        self.knobs = {k: 0.0 for k in KNOB_NAMES}
        self.optic_ramp_s = 2.0
        self._install_optic_channels()

    # -- configuration ------------------------------------------------------------

    def load_config(self, cfg: dict):
        """Install families and the optic model from the machine config
        mapping {families: [...], optic: {...}}."""
        seen = {}
        fams = []
        for f in cfg.get("families", []):
            members = [FamilyMember(m["ps"], float(m.get("offset", 0.0)),
                                    float(m.get("scale", 1.0)))
                       for m in f["members"]]
            ids = [m.ps for m in members]
            if len(set(ids)) != len(ids):
                raise ValueError("duplicate_member: %s lists a PS twice" % f["name"])
            for ps in ids:
                if ps in seen:
                    raise ValueError("duplicate_member: %s in %s and %s"
                                     % (ps, seen[ps], f["name"]))
                if ps not in self.server.records:
                    raise ValueError("unknown PS %r in family %s" % (ps, f["name"]))
                seen[ps] = f["name"]
            fams.append(FamilySpec(f["name"], members))
        for spec in fams:
            self._install_family(spec)
        if "optic" in cfg:
            o = cfg["optic"]
            names = sorted(o["I0"])
            missing = [n for n in names if n not in self.families]
            if missing:
                raise ValueError("optic references unknown families: %s" % missing)
            if sorted(o["M"]) != names or sorted(o["g"]) != names:
                raise ValueError("dimension: I0, M and g must cover the same families")
            self.optic = OpticModel(
                E0=float(o["E0"]),
                families=names,
                I0=[o["I0"][n] for n in names],
                M=[o["M"][n] for n in names],
                g=[o["g"][n] for n in names],
            )
            self.knobs = {"E": self.optic.E0, "dnu_x": 0.0, "dnu_y": 0.0,
                          "dxi_x": 0.0, "dxi_y": 0.0}
            self.server._set_value("OPTIC:KNOBS", dict(self.knobs))

    def _install_family(self, spec: FamilySpec):
        self.families[spec.name] = spec
        add = self.server.add_channel
        name = spec.name
        add(name + ":I-SET", value=spec.set_value, writable=True,
            putter=lambda v, t, s=spec: self._family_put_ticket(s, v, t))
        add(name + ":I-READ", value=0.0)
        add(name + ":COMPARE", value="ok")
        add(name + ":HYST-STATE", value="on_branch")
        add(name + ":ALARM", value={"severity": "none", "reasons": []})
        add(name + ":RAMP-STATE", value="idle")
        add(name + ":MODE", value="off", writable=True,
            putter=lambda v, t, s=spec: self._family_mode(s, v, t))
        add(name + ":CYCLE-CMD", value=0, writable=True,
            putter=lambda v, t, s=spec: self._family_cycle(s, v, t))
        for m in spec.members:
            for f in ("I-READ", "COMPARE", "HYST-STATE", "ALARM", "MODE", "STATUS"):
                self.server.ch_monitor(m.ps + ":" + f,
                                       lambda *a, s=spec: self._refresh_family(s))

    def _install_optic_channels(self):
        self.server.add_channel("OPTIC:KNOBS", value=dict(self.knobs),
                                writable=True,
                                putter=lambda v, t: self._optic_put_ticket(v, t))

    # -- family operations -----------------------------------------------------------

    def member_targets(self, spec: FamilySpec, value: float):
        return [(m, m.scale * value + m.offset) for m in spec.members]

    def family_put(self, family: str, value: float):
        """Write scale*value + offset to every member; atomic range check."""
        spec = self.families.get(family)
        if spec is None:
            raise ChannelError("no_such_channel", family)
        value = float(value)
        if not math.isfinite(value):
            raise ChannelError("bad_value")
        targets = self.member_targets(spec, value)
        for m, t in targets:
            rec = self.server.records[m.ps]
            p = rec.ps_class.params
            if not (p.i_min <= t <= p.I_max):
                raise ChannelError("range", "%s -> %.6g A out of class range"
                                   % (m.ps, t))
        for m, t in targets:
            self.server.ch_put(m.ps + ":I-SET", t)
        spec.set_value = value
        self.server._set_value(family + ":I-SET", value)
        return targets

    def _family_put_ticket(self, spec, value, ticket: PutTicket):
        self.family_put(spec.name, value)
        ticket._resolve()

    def _family_mode(self, spec, value, ticket):
        for m in spec.members:
            self.server.ch_put(m.ps + ":MODE", value)
        ticket._resolve()

    def _family_cycle(self, spec, value, ticket):
        for m in spec.members:
            self.server.standardize(m.ps)
        ticket._resolve()

    def _refresh_family(self, spec):
        recs = [self.server.records[m.ps] for m in spec.members]
        sev = "none"
        for rec in recs:
            s = rec.severity()
            if {"none": 0, "minor": 1, "major": 2}[s] > {"none": 0, "minor": 1, "major": 2}[sev]:
                sev = s
        compare = "ok"
        for m in recs:
            v = self.server.ch_get(m.ps_id + ":COMPARE")
            if v == "alarm":
                compare = "alarm"
            elif v == "suppressed" and compare == "ok":
                compare = "suppressed"
        hyst = "on_branch"
        if any(self.server.ch_get(m.ps_id + ":HYST-STATE") == "off_branch"
               for m in recs):
            hyst = "off_branch"
        reads = []
        for m, rec in zip(spec.members, recs):
            if m.scale:
                reads.append((rec.i_read - m.offset) / m.scale)
        name = spec.name
        self.server._set_value(name + ":COMPARE", compare,
                               alarm="minor" if compare == "alarm" else "none")
        self.server._set_value(name + ":HYST-STATE", hyst)
        self.server._set_value(name + ":ALARM",
                               {"severity": sev, "reasons": []}, alarm=sev)
        if reads:
            self.server._set_value(name + ":I-READ", sum(reads) / len(reads))
        modes = {self.server.ch_get(m.ps + ":MODE") for m in spec.members}
        self.server._set_value(name + ":MODE",
                               "on" if modes == {"on"} else
                               ("off" if modes == {"off"} else "mixed"))

    # -- optic operations ----------------------------------------------------------------

    def optic_put(self, q: dict):
        """Apply knob settings to every family; smooth transitions go through
        one synchronized ramp, small trims are written directly."""
        if self.optic is None:
            raise ChannelError("no_optic_model")
        unknown = set(q) - set(KNOB_NAMES)
        if unknown:
            raise ChannelError("bad_value", "unknown knobs %s" % sorted(unknown))
        currents = self.optic.currents(q)
        plan = []  # (member, rec, target)
        for fam_name, fam_current in zip(self.optic.families, currents):
            spec = self.families[fam_name]
            for m, t in self.member_targets(spec, float(fam_current)):
                rec = self.server.records[m.ps]
                p = rec.ps_class.params
                if not (p.i_min <= t <= p.I_max):
                    raise ChannelError("range", "%s -> %.6g A out of class range"
                                       % (m.ps, t))
                plan.append((m, rec, t))
        big = any(abs(t - rec.i_set) > 0.01 * rec.ps_class.params.I_max
                  for _, rec, t in plan)
        if big:
            self.server.sync_ramp([m.ps for m, _, _ in plan],
                                  [t for _, _, t in plan], self.optic_ramp_s)
        else:
            for m, _, t in plan:
                self.server.ch_put(m.ps + ":I-SET", t)
        for fam_name, fam_current in zip(self.optic.families, currents):
            self.families[fam_name].set_value = float(fam_current)
            self.server._set_value(fam_name + ":I-SET", float(fam_current))
        self.knobs = {k: float(q.get(k, self.knobs.get(k, 0.0))) for k in KNOB_NAMES}
        if "E" not in q:
            self.knobs["E"] = self.optic.E0 if self.optic else 0.0
        self.server._set_value("OPTIC:KNOBS", dict(self.knobs))
        return currents

    def _optic_put_ticket(self, value, ticket):
        if not isinstance(value, dict):
            raise ChannelError("bad_value")
        self.optic_put(value)
        ticket._resolve()


def toy_machine_config(rng, n_quad_families=31, n_sext_families=9,
                       members_per_family=2, quad_class="sr-quadrupole",
                       sext_class="sr-sextupole"):
    """Random but well-conditioned machine config for tests.

    Returns (machine_cfg, ps_instances): the PS list feeds the scenario
    builder, the config feeds MachineLayer.load_config.
    """
    families = []
    instances = []
    I0, M, g = {}, {}, {}
    for kind, count, cls, base in (("Q", n_quad_families, quad_class, 60.0),
                                   ("S", n_sext_families, sext_class, 80.0)):
        for i in range(count):
            name = "%sF%02d" % (kind, i + 1)
            members = []
            for j in range(members_per_family):
                ps = "%s-%02d%s" % (name, j + 1, "")
                instances.append({"id": ps, "class": cls})
                members.append({"ps": ps,
                                "offset": round(float(rng.uniform(-0.5, 0.5)), 3),
                                "scale": round(float(rng.uniform(0.98, 1.02)), 4)})
            families.append({"name": name, "members": members})
            I0[name] = base + float(rng.uniform(-10, 10))
            row = rng.uniform(-0.5, 0.5, size=4)
            row[i % 4] += 2.0  # keep the knob response well conditioned
            M[name] = [float(x) for x in row]
            g[name] = float(rng.uniform(0.9, 1.05))
    cfg = {"families": families,
           "optic": {"E0": 2.4, "I0": I0, "M": M, "g": g}}
    return cfg, instances
