"""Scenario configuration: schema validation and assembly of the machine.

A scenario JSON file describes the installed supplies, optional families
and optic model, the orbit-feedback block, scripted faults and the run
parameters:

    {
      "classes": {"corrector": {"f_c": 1200.0}, ...},        # overrides
      "ps_instances": [{"id": "SR-C01", "class": "corrector",
                        "mode": "on", "i_set": 0.0,
                        "link": {"bit_ns": 200, "t_proc_ns": 4000},
                        "waveform": {"sine": {"n": 4167, "amplitude": 475,
                                              "level": 475, "phase_deg": -90},
                                     "loop_mode": "loop",
                                     "trigger_at_s": 0.01}}],
      "families": [...], "optic": {...},                     # machine layer
      "feedback": {"correctors": [...], "bpms": [...], "R_om": [[...]],
                   "d": [...], "alpha": 0.5, "noise_sigma": 0.0,
                   "enabled": true},
      "faults": [{"t": 2.0, "ps": "SR-S01", "kind": "resistance_change",
                  "new_R": 0.4}],
      "run": {"until_s": 10.0, "seed": 1, "metrics_path": "out.csv",
              "sample_period_ms": 10}
    }

Fault kinds: resistance_change(new_R), swap_with(other), link_break
(direction tx|rx, broken), local(on).
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import registers as reg
from .channels import ChannelError, ChannelServer
from .controller import FleetEngine, PscController
from .link import Link
from .machine import MachineLayer
from .metrics import MetricsRecorder
from .orbit import OrbitFeedback
from .plant import DEFAULT_CLASSES, PlantParams, PsClass
from .sim import Simulator, s_to_ns

SEED_ENV = "PSC_SIM_SEED"


class ScenarioError(ValueError):
    pass


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ScenarioError("cannot read scenario: %s" % e)
    except json.JSONDecodeError as e:
        raise ScenarioError("scenario is not valid JSON: %s" % e)
    if not isinstance(cfg, dict):
        raise ScenarioError("scenario must be a JSON object")
    return cfg


def _resolve_classes(cfg) -> dict:
    classes = dict(DEFAULT_CLASSES)
    for name, spec in (cfg.get("classes") or {}).items():
        if not isinstance(spec, dict):
            raise ScenarioError("class %r must be an object" % name)
        if name in classes:
            try:
                classes[name] = classes[name].with_overrides(**spec)
            except TypeError as e:
                raise ScenarioError("class %r: %s" % (name, e))
        else:
            try:
                params = PlantParams(R=spec["R"], L=spec["L"], I_max=spec["I_max"],
                                     V_max=spec["V_max"],
                                     quadrants=spec.get("quadrants", 4),
                                     class_name=name)
                classes[name] = PsClass(
                    params=params, f_c=spec["f_c"],
                    noise_sigma=spec.get("noise_sigma", 0.0),
                    ramp_rate=spec.get("ramp_rate", 10.0),
                    hysteresis_tracked=spec.get("hysteresis_tracked", False),
                    compare_tol_ppm=spec.get("compare_tol_ppm", 100.0))
            except KeyError as e:
                raise ScenarioError("class %r is missing field %s" % (name, e))
            except ValueError as e:
                raise ScenarioError("class %r: %s" % (name, e))
    return classes


def make_sine(n, amplitude, level=0.0, phase_deg=0.0):
    k = np.arange(n)
    return level + amplitude * np.sin(2 * np.pi * k / n + math.radians(phase_deg))


class Machine:
    """A built scenario: simulator plus every layer, ready to run."""

    def __init__(self, cfg: dict, seed_override=None, state_dir=None):
        run = cfg.get("run") or {}
        seed = run.get("seed", 0)
        if seed_override is not None:
            seed = seed_override
        self.cfg = cfg
        self.sim = Simulator(seed=int(seed), trace=bool(run.get("event_trace")))
        self.classes = _resolve_classes(cfg)
        self.fleet = FleetEngine(self.sim)
        self.controllers = {}
        self.links = {}
        self.wf_trace = [] if run.get("wf_trace") else None
        self._build_ps(cfg, state_dir)
        self.fleet.build()
        self._bind_links(cfg)
        self.server = ChannelServer(self.sim)
        for ps_id, c in self.controllers.items():
            self.server.add_ps(c, self.links[ps_id],
                               r_nominal=c.ps_class.params.R)
        self.machine_layer = MachineLayer(self.server)
        if cfg.get("families") or cfg.get("optic"):
            try:
                self.machine_layer.load_config(cfg)
            except ValueError as e:
                raise ScenarioError(str(e))
        self.feedback = self._build_feedback(cfg.get("feedback"))
        self._sys_channels()
        self._initial_conditions(cfg)
        self._schedule_faults(cfg.get("faults") or [])
        sample_ns = int(run.get("sample_period_ms", 10) * 1e6)
        self.metrics = MetricsRecorder(
            self.sim, self.controllers.values(), self.server,
            path=run.get("metrics_path"), sample_period_ns=sample_ns,
            dac_trace_path=run.get("dac_trace_path"))
        self.fleet.dac_recorder = self.metrics.record_dac
        if self.wf_trace is not None:
            self.fleet.wf_trace = lambda ps, t, i: self.wf_trace.append((ps, t, i))
        self.server.start()
        self.metrics.start()
        self.fleet.start()

    # -- assembly ------------------------------------------------------------

    def _build_ps(self, cfg, state_dir):
        instances = cfg.get("ps_instances")
        if not instances:
            raise ScenarioError("scenario needs at least one entry in ps_instances")
        for inst in instances:
            try:
                ps_id = inst["id"]
                cls_name = inst["class"]
            except KeyError as e:
                raise ScenarioError("ps instance missing field %s" % e)
            if ps_id in self.controllers:
                raise ScenarioError("duplicate ps id %r" % ps_id)
            if cls_name not in self.classes:
                raise ScenarioError("unknown class %r for %s (have: %s)"
                                    % (cls_name, ps_id, ", ".join(sorted(self.classes))))
            ps_class = self.classes[cls_name]
            overrides = {k: inst[k] for k in ("R", "L", "f_c", "noise_sigma")
                         if k in inst}
            if overrides:
                ps_class = ps_class.with_overrides(**overrides)
            c = PscController(self.sim, self.fleet, ps_id, ps_class,
                              state_dir=state_dir)
            c.topology = {k: inst[k] for k in ("crate", "carrier", "ip") if k in inst}
            self.controllers[ps_id] = c

    def _bind_links(self, cfg):
        for inst in cfg["ps_instances"]:
            c = self.controllers[inst["id"]]
            lp = inst.get("link") or {}
            link = Link(self.sim, c.handle_frame,
                        bit_ns=int(lp.get("bit_ns", 200)),
                        t_proc_ns=int(lp.get("t_proc_ns", 4000)),
                        name=inst["id"])
            c.link = link
            self.links[inst["id"]] = link

    def _build_feedback(self, fb):
        if not fb:
            return None
        missing = [k for k in ("correctors", "R_om", "d") if k not in fb]
        if missing:
            raise ScenarioError("feedback block missing %s" % missing)
        ctls, links = [], []
        for ps_id in fb["correctors"]:
            if ps_id not in self.controllers:
                raise ScenarioError("feedback corrector %r not in ps_instances" % ps_id)
            ctls.append(self.controllers[ps_id])
            links.append(self.links[ps_id])
        feedback = OrbitFeedback(
            self.sim, self.server, ctls, links, fb["R_om"], fb["d"],
            alpha=fb.get("alpha", 0.5), noise_sigma=fb.get("noise_sigma", 0.0),
            bpms=fb.get("bpms"),
            period_ns=int(fb.get("period_ms", 1.0) * 1e6))
        if fb.get("d_sine"):
            feedback.d_sine = (float(fb["d_sine"]["freq_hz"]),
                               np.asarray(fb["d_sine"]["amp"], dtype=float))
        if fb.get("enabled"):
            feedback.enable(True)
        return feedback

    def _sys_channels(self):
        add = self.server.add_channel

        def ramp_putter(value, ticket):
            if not isinstance(value, dict):
                raise ChannelError("bad_value")
            t0 = value.get("t0_s")
            self.server.sync_ramp(value["members"], value["targets"],
                                  float(value.get("duration_s", 1.0)),
                                  None if t0 is None else s_to_ns(float(t0)))
            ticket._resolve()

        def trigger_putter(value, ticket):
            ids = value["ps"] if isinstance(value, dict) else [value]
            for ps_id in ids:
                if ps_id not in self.controllers:
                    raise ChannelError("no_such_channel", ps_id)
            for ps_id in ids:
                self.controllers[ps_id].fire_trigger()
            ticket._resolve()

        def feedback_putter(value, ticket):
            if self.feedback is None:
                raise ChannelError("no_feedback")
            on = value in (True, 1, "on")
            self.feedback.enable(on)
            self.server._set_value("SYS:FEEDBACK", "on" if on else "off")
            ticket._resolve()

        add("SYS:RAMP", writable=True, putter=ramp_putter)
        add("SYS:TRIGGER", writable=True, putter=trigger_putter)
        add("SYS:FEEDBACK", value="off", writable=True, putter=feedback_putter)
        add("SYS:LAYOUT", value={
            "ps": [{"id": ps_id, "class": c.ps_class.params.class_name,
                    "i_max": c.ps_class.params.I_max}
                   for ps_id, c in self.controllers.items()],
            "families": [f["name"] for f in self.cfg.get("families") or []],
            "optic": bool(self.cfg.get("optic")),
            "feedback": bool(self.cfg.get("feedback")),
        })

    def _initial_conditions(self, cfg):
        for inst in cfg["ps_instances"]:
            c = self.controllers[inst["id"]]
            mode = inst.get("mode", "on")
            c.set_mode({"off": reg.MODE_OFF, "on": reg.MODE_ON,
                        "local": reg.MODE_LOCAL}[mode])
            if "i_set" in inst:
                code = c.reg_write(reg.I_SET, reg.f32_to_word(float(inst["i_set"])),
                                   via_link=False)
                if code is not None:
                    raise ScenarioError("bad i_set for %s" % inst["id"])
            wf = inst.get("waveform")
            if wf:
                self._provision_waveform(c, wf)
            rec = self.server.records[c.ps_id]
            rec.mode = c.mode
            rec.i_set = reg.word_to_f32(c.reg_read(reg.I_SET))
            rec.hyst.last_set = rec.i_set
            self.server._set_value(c.ps_id + ":MODE",
                                   {0: "off", 1: "on", 2: "local"}[c.mode])
            self.server._set_value(c.ps_id + ":I-SET", rec.i_set)

    def _provision_waveform(self, c, wf):
        if "file" in wf:
            with open(wf["file"]) as fh:
                spec = json.load(fh)
            merged = dict(spec)
            merged.update({k: v for k, v in wf.items() if k != "file"})
            wf = merged
        if "sine" in wf:
            s = wf["sine"]
            points = make_sine(int(s["n"]), float(s["amplitude"]),
                               float(s.get("level", 0.0)),
                               float(s.get("phase_deg", 0.0)))
        else:
            points = wf["points"]
        c.load_waveform(points, loop_mode=wf.get("loop_mode", "once"),
                        target=wf.get("target", "volatile"),
                        offset=wf.get("offset"), scale=wf.get("scale"),
                        name=wf.get("name", ""))
        if "trigger_at_s" in wf:
            c.reg_write(reg.TRIG_ARM, 1, via_link=False)
            self.sim.schedule_at(s_to_ns(float(wf["trigger_at_s"])),
                                 c.fire_trigger)

    def _schedule_faults(self, faults):
        for f in faults:
            try:
                t_ns = s_to_ns(float(f["t"]))
                kind = f["kind"]
                ps_id = f["ps"]
            except KeyError as e:
                raise ScenarioError("fault missing field %s" % e)
            if ps_id not in self.controllers:
                raise ScenarioError("fault references unknown ps %r" % ps_id)
            run = cfg_run = self.cfg.get("run") or {}
            if cfg_run.get("until_s") is not None and f["t"] > cfg_run["until_s"]:
                raise ScenarioError("fault at %gs is outside the run window" % f["t"])
            self.sim.schedule_at(t_ns, self._fault_action(f))

    def _fault_action(self, f):
        kind = f["kind"]
        ps_id = f["ps"]

        def apply():
            self.inject_fault(ps_id, kind, f)

        return apply

    def inject_fault(self, ps_id, kind, args=None):
        args = args or {}
        c = self.controllers[ps_id]
        if kind == "resistance_change":
            self.fleet.set_resistance(c.idx, float(args["new_R"]))
        elif kind == "swap_with":
            other = self.controllers[args["other"]]
            self.fleet.swap_plants(c.idx, other.idx)
        elif kind == "link_break":
            self.links[ps_id].set_broken(args.get("direction", "rx"),
                                         bool(args.get("broken", True)))
        elif kind == "local":
            c.set_local(bool(args.get("on", True)))
        else:
            raise ScenarioError("unknown fault kind %r" % kind)

    # -- run -------------------------------------------------------------------

    def run(self, until_s=None):
        run = self.cfg.get("run") or {}
        until = until_s if until_s is not None else run.get("until_s", 1.0)
        self.sim.advance_until(s_to_ns(float(until)))

    def close(self):
        self.metrics.close()


def build_machine(cfg: dict, seed_override=None, state_dir=None) -> Machine:
    return Machine(cfg, seed_override=seed_override, state_dir=state_dir)


def seed_from_env():
    v = os.environ.get(SEED_ENV)
    return int(v) if v else None
