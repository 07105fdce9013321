"""Channel layer: named control-system variables over the register link.

Every PS exposes the same 18-channel template ("<ps>:<FIELD>"):

    I-SET I-READ MODE STATUS COMPARE HYST-STATE CYCLE-CMD R-LOAD V-OUT
    LINK-TX-OK LINK-RX-OK LOCAL WF-OFFSET WF-SCALE WF-LOAD TRIG-ARM
    ALARM RAMP-STATE

Register-backed channels are refreshed by a 100 ms poll (one BLOCK_READ of
registers 0x00..0x08 per PS) and by write-through on puts, so a get right
after a completed put sees the written value.  Everything else is soft
state computed here: the compare flag, hysteresis bookkeeping, the cycle
("standardize") machine, synchronized slow ramps and alarm aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import registers as reg
from .link import Frame, OP_BLOCK_READ, OP_BLOCK_WRITE, OP_WRITE, NAK_NAMES
from .sim import NS_PER_S

POLL_PERIOD_NS = 100_000_000
ALARM_PERIOD_NS = NS_PER_S
RAMP_STEP_NS = 100_000_000
R_ALARM_BAND = 0.10  # +-10 % of nominal resistance
R_ALARM_STRIKES = 3

PS_FIELDS = ("I-SET", "I-READ", "MODE", "STATUS", "COMPARE", "HYST-STATE",
             "CYCLE-CMD", "R-LOAD", "V-OUT", "LINK-TX-OK", "LINK-RX-OK",
             "LOCAL", "WF-OFFSET", "WF-SCALE", "WF-LOAD", "TRIG-ARM",
             "ALARM", "RAMP-STATE")

MODE_NAMES = {reg.MODE_OFF: "off", reg.MODE_ON: "on", reg.MODE_LOCAL: "local"}
MODE_WORDS = {v: k for k, v in MODE_NAMES.items()}

SEVERITY_ORDER = {"none": 0, "minor": 1, "major": 2}


class ChannelError(RuntimeError):
    def __init__(self, code, msg=""):
        super().__init__(code + (": " + msg if msg else ""))
        self.code = code


class PutTicket:
    """Completion handle for a put; resolves when the write round-trips."""

    __slots__ = ("done", "error", "on_done")

    def __init__(self, on_done=None):
        self.done = False
        self.error = None
        self.on_done = on_done

    def _resolve(self, error=None):
        self.done = True
        self.error = error
        if self.on_done:
            self.on_done(self)


class Subscription:
    __slots__ = ("name", "cb", "active")

    def __init__(self, name, cb):
        self.name = name
        self.cb = cb
        self.active = True


class _Channel:
    __slots__ = ("name", "value", "alarm", "writable", "subs", "putter")

    def __init__(self, name, value=None, writable=False, putter=None):
        self.name = name
        self.value = value
        self.alarm = "none"
        self.writable = writable
        self.subs = []
        self.putter = putter


@dataclass
class HysteresisState:
    tracked: bool
    on_branch: bool = True
    last_dir: str = "none"
    last_set: float = 0.0


class CycleJob:
    """The standardization current cycle of one PS.

    Program: ramp to minimum current, three full excursions to maximum
    (so the final approach to the old set-point comes from above), then
    back down to the prior set value.  One set-point write per 100 ms at
    the class ramp rate.
    """

    def __init__(self, server, record):
        self.server = server
        self.record = record
        p = record.ps_class.params
        rate = record.ps_class.ramp_rate
        set0 = record.i_set
        lo, hi = p.i_min, p.I_max
        waypoints = [set0, lo, hi, lo, hi, lo, hi, set0]
        self.values = _profile(waypoints, rate * (RAMP_STEP_NS / NS_PER_S))
        self.duration_s = len(self.values) * (RAMP_STEP_NS / NS_PER_S)
        self.step = 0
        self.state = "running"

    def start(self):
        self.server.sim.schedule_after(RAMP_STEP_NS, self._tick)

    def _tick(self):
        if self.state != "running":
            return
        value = self.values[self.step]
        self.server._write_setpoint(self.record, value, origin="cycle")
        self.step += 1
        if self.step >= len(self.values):
            self.server.sim.schedule_after(RAMP_STEP_NS, self._finish)
        else:
            self.server.sim.schedule_after(RAMP_STEP_NS, self._tick)

    def _finish(self):
        self.state = "done"
        rec = self.record
        rec.cycle_job = None
        rec.hyst.on_branch = True
        rec.hyst.last_dir = "down"
        rec.hyst.last_set = rec.i_set
        rec.cycle_count += 1
        self.server._set_value(rec.ps_id + ":CYCLE-CMD", rec.cycle_count)
        self.server._refresh_soft(rec)


def _profile(waypoints, step_amp):
    """Piecewise-linear pass through waypoints quantized to step_amp moves."""
    out = []
    pos = waypoints[0]
    for target in waypoints[1:]:
        dist = abs(target - pos)
        n = max(1, math.ceil(dist / step_amp - 1e-9))
        for k in range(1, n + 1):
            out.append(pos + (target - pos) * k / n)
        pos = target
    return out


class RampJob:
    """Synchronized linear ramp of several PS: every member's step k is
    issued inside the same event, so start skew is bounded by one tick."""

    def __init__(self, server, records, targets, duration_s, t0_ns):
        self.server = server
        self.records = records
        self.starts = [r.i_set for r in records]
        self.targets = targets
        self.n_steps = max(1, round(duration_s * NS_PER_S / RAMP_STEP_NS))
        self.t0_ns = t0_ns
        self.step = 0
        self.state = "pending"
        self.first_write_ns = {}
        self.issue_times = []

    def start(self):
        self.server.sim.schedule_at(self.t0_ns, self._tick)

    def _tick(self):
        if self.state == "pending":
            self.state = "running"
        self.step += 1
        frac = self.step / self.n_steps
        self.issue_times.append(self.server.sim.now)
        for rec, a, b in zip(self.records, self.starts, self.targets):
            value = a + (b - a) * frac
            self.server._write_setpoint(rec, value, origin="ramp",
                                        on_applied=self._note_first(rec))
        if self.step >= self.n_steps:
            self.state = "done"
            for rec in self.records:
                rec.ramp_job = None
                self.server._refresh_soft(rec)
        else:
            self.server.sim.schedule_after(RAMP_STEP_NS, self._tick)

    def _note_first(self, rec):
        def cb(t_ns):
            self.first_write_ns.setdefault(rec.ps_id, t_ns)
        return cb


class PsRecord:
    """Server-side state for one PS."""

    def __init__(self, ps_id, controller, link, ps_class, r_nominal=None):
        self.ps_id = ps_id
        self.controller = controller
        self.link = link
        self.ps_class = ps_class
        self.r_nominal = r_nominal if r_nominal is not None else ps_class.params.R
        self.tol_ppm = ps_class.compare_tol_ppm
        self.hyst = HysteresisState(tracked=ps_class.hysteresis_tracked)
        self.i_set = 0.0
        self.i_read = 0.0
        self.v_out = 0.0
        self.r_load = 0.0
        self.status = 0
        self.mode = reg.MODE_OFF
        self.cycle_job = None
        self.ramp_job = None
        self.cycle_count = 0
        self.alarm_reasons = {}
        self.r_strikes = 0

    @property
    def on(self):
        return self.mode != reg.MODE_OFF

    @property
    def busy(self):
        return self.cycle_job is not None or self.ramp_job is not None

    def severity(self):
        worst = "none"
        for sev in self.alarm_reasons.values():
            if SEVERITY_ORDER[sev] > SEVERITY_ORDER[worst]:
                worst = sev
        return worst


class ChannelServer:
    def __init__(self, sim, poll_period_ns=POLL_PERIOD_NS,
                 alarm_period_ns=ALARM_PERIOD_NS):
        self.sim = sim
        self.poll_period_ns = poll_period_ns
        self.alarm_period_ns = alarm_period_ns
        self.records = {}
        self.channels = {}
        self._started = False

    # -- wiring ---------------------------------------------------------------

    def add_ps(self, controller, link, r_nominal=None):
        ps_id = controller.ps_id
        rec = PsRecord(ps_id, controller, link, controller.ps_class, r_nominal)
        self.records[ps_id] = rec
        for f in PS_FIELDS:
            name = ps_id + ":" + f
            writable = f in ("I-SET", "MODE", "CYCLE-CMD", "LOCAL", "WF-OFFSET",
                             "WF-SCALE", "WF-LOAD", "TRIG-ARM")
            self.channels[name] = _Channel(name, writable=writable)
        link.state.on_change.append(lambda st, r=rec: self._link_changed(r))
        self._init_caches(rec)
        return rec

    def _init_caches(self, rec):
        # boot-time readout, before the clock starts running
        c = rec.controller
        rec.mode = c.mode
        rec.i_set = reg.word_to_f32(c.reg_read(reg.I_SET))
        rec.status = c.status_word()
        ps = rec.ps_id
        ch = self._set_value
        ch(ps + ":I-SET", rec.i_set)
        ch(ps + ":I-READ", 0.0)
        ch(ps + ":MODE", MODE_NAMES[rec.mode])
        ch(ps + ":STATUS", rec.status)
        ch(ps + ":COMPARE", "ok")
        ch(ps + ":HYST-STATE", "on_branch")
        ch(ps + ":CYCLE-CMD", 0)
        ch(ps + ":R-LOAD", 0.0)
        ch(ps + ":V-OUT", 0.0)
        ch(ps + ":LINK-TX-OK", True)
        ch(ps + ":LINK-RX-OK", True)
        ch(ps + ":LOCAL", False)
        ch(ps + ":WF-OFFSET", 0.0)
        ch(ps + ":WF-SCALE", 1.0)
        ch(ps + ":WF-LOAD", None)
        ch(ps + ":TRIG-ARM", 0)
        ch(ps + ":ALARM", {"severity": "none", "reasons": []})
        ch(ps + ":RAMP-STATE", "idle")

    def add_channel(self, name, value=None, writable=False, putter=None):
        """Soft or aggregate channel registered by another layer."""
        chan = _Channel(name, value=value, writable=writable, putter=putter)
        self.channels[name] = chan
        return chan

    def start(self):
        if self._started:
            return
        self._started = True
        self.sim.schedule_after(self.poll_period_ns, self._poll_event)
        self.sim.schedule_after(self.alarm_period_ns, self._alarm_event)

    # -- core ops ----------------------------------------------------------------

    def ch_get(self, name):
        chan = self.channels.get(name)
        if chan is None:
            raise ChannelError("no_such_channel", name)
        return chan.value

    def ch_put(self, name, value, on_done=None) -> PutTicket:
        chan = self.channels.get(name)
        ticket = PutTicket(on_done)
        if chan is None:
            ticket._resolve("no_such_channel")
            return ticket
        if not chan.writable:
            ticket._resolve("read_only")
            return ticket
        try:
            if chan.putter is not None:
                chan.putter(value, ticket)
            else:
                ps_id, f = name.rsplit(":", 1)
                self._ps_put(self.records[ps_id], f, value, ticket)
        except ChannelError as e:
            ticket._resolve(e.code)
        except (TypeError, ValueError):
            ticket._resolve("bad_value")
        return ticket

    def put_sync(self, name, value, timeout_ns=NS_PER_S):
        """Issue a put and drive the clock until it resolves (test/CLI aid)."""
        ticket = self.ch_put(name, value)
        deadline = self.sim.now + timeout_ns
        while not ticket.done and self.sim.now < deadline:
            nxt = self.sim.next_due()
            if nxt is None:
                break
            self.sim.advance_until(min(nxt, deadline))
        if not ticket.done:
            ticket._resolve("timeout")
        return ticket

    def ch_monitor(self, name, cb) -> Subscription:
        chan = self.channels.get(name)
        if chan is None:
            raise ChannelError("no_such_channel", name)
        sub = Subscription(name, cb)
        chan.subs.append(sub)
        return sub

    def ch_unmonitor(self, sub: Subscription):
        sub.active = False
        chan = self.channels.get(sub.name)
        if chan and sub in chan.subs:
            chan.subs.remove(sub)

    # -- puts on PS channels --------------------------------------------------------

    def _ps_put(self, rec, f, value, ticket):
        if f == "I-SET":
            value = float(value)
            if not math.isfinite(value):
                raise ChannelError("bad_value")
            if rec.cycle_job is not None:
                raise ChannelError("cycle_active")
            self._write_setpoint(rec, value, origin="channel", ticket=ticket)
        elif f == "MODE":
            word = MODE_WORDS[value] if isinstance(value, str) else int(value)
            self._write_register(rec, reg.MODE, word, ticket,
                                 lambda: self._after_mode(rec, word))
        elif f == "TRIG-ARM":
            self._write_register(rec, reg.TRIG_ARM, int(value), ticket,
                                 lambda: self._set_value(rec.ps_id + ":TRIG-ARM",
                                                         int(value)))
        elif f in ("WF-OFFSET", "WF-SCALE"):
            value = float(value)
            if not math.isfinite(value):
                raise ChannelError("bad_value")
            addr = reg.WF_OFFSET if f == "WF-OFFSET" else reg.WF_SCALE
            self._write_register(rec, addr, reg.f32_to_word(value), ticket,
                                 lambda: self._set_value(rec.ps_id + ":" + f,
                                                         reg.word_to_f32(reg.f32_to_word(value))))
        elif f == "LOCAL":
            # the physical front-panel switch, not a link write
            rec.controller.set_local(bool(value))
            rec.mode = rec.controller.mode
            self._set_value(rec.ps_id + ":LOCAL", bool(value))
            self._set_value(rec.ps_id + ":MODE", MODE_NAMES[rec.mode])
            ticket._resolve()
        elif f == "CYCLE-CMD":
            self.standardize(rec.ps_id)
            ticket._resolve()
        elif f == "WF-LOAD":
            self._download_waveform(rec, value, ticket)
        else:
            raise ChannelError("read_only")

    def _after_mode(self, rec, word):
        rec.mode = word
        self._set_value(rec.ps_id + ":MODE", MODE_NAMES[word])
        self._set_value(rec.ps_id + ":LOCAL", word == reg.MODE_LOCAL)

    def _write_register(self, rec, addr, word, ticket, side_effect=None):
        fr = Frame(prio=False, opcode=OP_WRITE, addr=addr, count=1,
                   payload=(word & 0xFFFFFFFF,))

        def done(txn):
            if txn.error:
                ticket._resolve(txn.error)
            elif txn.nak_code is not None:
                code = NAK_NAMES.get(txn.nak_code, "nak")
                if code == "local":
                    self._raise_alarm(rec, "local_write", "minor")
                ticket._resolve(code + "_mode" if code == "local" else code)
            else:
                if side_effect:
                    side_effect()
                ticket._resolve()

        rec.link.transact(fr, prio=False, origin="channel", on_done=done)

    def _write_setpoint(self, rec, value, origin, ticket=None, on_applied=None):
        f32 = reg.word_to_f32(reg.f32_to_word(value))
        word = reg.f32_to_word(value)
        fr = Frame(prio=False, opcode=OP_WRITE, addr=reg.I_SET, count=1,
                   payload=(word,))

        def done(txn):
            if txn.error or txn.nak_code is not None:
                err = txn.error or NAK_NAMES.get(txn.nak_code, "nak")
                if txn.nak_code is not None and NAK_NAMES.get(txn.nak_code) == "local":
                    self._raise_alarm(rec, "local_write", "minor")
                    err = "local_mode"
                if ticket:
                    ticket._resolve(err)
                return
            if origin != "cycle":
                self.update_hysteresis(rec.ps_id, f32)
            rec.i_set = f32
            self._set_value(rec.ps_id + ":I-SET", f32)
            self.evaluate_compare(rec.ps_id)
            if on_applied:
                on_applied(self.sim.now)
            if ticket:
                ticket._resolve()

        rec.link.transact(fr, prio=False, origin=origin, on_done=done)

    def _download_waveform(self, rec, value, ticket):
        if not isinstance(value, dict) or "points" not in value:
            raise ChannelError("bad_value")
        points = [float(p) for p in value["points"]]
        loop = value.get("loop_mode", "once") == "loop"
        if "offset" in value:
            self.ch_put(rec.ps_id + ":WF-OFFSET", float(value["offset"]))
        if "scale" in value:
            self.ch_put(rec.ps_id + ":WF-SCALE", float(value["scale"]))
        words = rec.controller.staging_words(points, loop)
        commit = 3 if value.get("target") == "persistent" else 2
        link = rec.link
        CHUNK = 14  # download window size

        def send_from(i):
            if i >= len(words):
                fr = Frame(prio=False, opcode=OP_WRITE, addr=reg.DL_CMD,
                           count=1, payload=(commit,))
                link.transact(fr, origin="download", on_done=finish)
                return
            chunk = tuple(words[i:i + CHUNK])
            fr = Frame(prio=False, opcode=OP_BLOCK_WRITE, addr=reg.DL_WINDOW,
                       count=len(chunk), payload=chunk)
            link.transact(fr, origin="download",
                          on_done=lambda txn: fail_or(txn, lambda: send_from(i + CHUNK)))

        def fail_or(txn, k):
            if txn.error or txn.nak_code is not None:
                ticket._resolve(txn.error or NAK_NAMES.get(txn.nak_code, "nak"))
            else:
                k()

        def finish(txn):
            if txn.error or txn.nak_code is not None:
                ticket._resolve(txn.error or NAK_NAMES.get(txn.nak_code, "nak"))
                return
            self._set_value(rec.ps_id + ":WF-LOAD",
                            {"name": value.get("name", ""), "points": len(points),
                             "loop_mode": "loop" if loop else "once"})
            ticket._resolve()

        begin = Frame(prio=False, opcode=OP_WRITE, addr=reg.DL_CMD, count=1,
                      payload=(1,))
        link.transact(begin, origin="download",
                      on_done=lambda txn: fail_or(txn, lambda: send_from(0)))

    # -- compare / hysteresis / cycles / ramps ------------------------------------------

    def evaluate_compare(self, ps_id):
        rec = self.records[ps_id]
        name = ps_id + ":COMPARE"
        wf_running = bool(rec.status & reg.STATUS_WAVEFORM_RUNNING)
        if wf_running or rec.busy:
            self._clear_alarm(rec, "compare")
            self._set_value(name, "suppressed")
            return "suppressed"
        if not rec.on:
            self._clear_alarm(rec, "compare")
            self._set_value(name, "ok")
            return "ok"
        tol = rec.tol_ppm * 1e-6 * rec.ps_class.params.I_max
        if abs(rec.i_set - rec.i_read) <= tol:
            self._clear_alarm(rec, "compare")
            self._set_value(name, "ok")
            return "ok"
        self._raise_alarm(rec, "compare", "minor")
        self._set_value(name, "alarm", alarm="minor")
        return "alarm"

    def update_hysteresis(self, ps_id, new_set):
        rec = self.records[ps_id]
        h = rec.hyst
        if h.tracked:
            if new_set > h.last_set:
                h.on_branch = False
                h.last_dir = "up"
            elif new_set < h.last_set:
                h.last_dir = "down"
            h.last_set = new_set
        self._set_value(ps_id + ":HYST-STATE",
                        "on_branch" if h.on_branch else "off_branch")
        return h

    def standardize(self, ps_id) -> CycleJob:
        rec = self.records.get(ps_id)
        if rec is None:
            raise ChannelError("no_such_channel", ps_id)
        if rec.mode != reg.MODE_ON:
            raise ChannelError("not_on")
        if rec.link.state.tx_broken or rec.link.state.rx_broken:
            raise ChannelError("link_down")
        if rec.ramp_job is not None:
            raise ChannelError("ramp_active")
        if rec.cycle_job is not None:
            raise ChannelError("cycle_active")
        job = CycleJob(self, rec)
        rec.cycle_job = job
        self._refresh_soft(rec)
        job.start()
        return job

    def sync_ramp(self, members, targets, duration_s, t0_ns=None) -> RampJob:
        if len(members) != len(targets):
            raise ChannelError("bad_value", "members/targets length mismatch")
        if duration_s < 0.1:
            raise ChannelError("bad_value", "duration must be >= 100 ms")
        records = []
        for ps_id, target in zip(members, targets):
            rec = self.records.get(ps_id)
            if rec is None:
                raise ChannelError("no_such_channel", ps_id)
            if rec.mode != reg.MODE_ON:
                raise ChannelError("member_not_ready", ps_id)
            if rec.busy:
                raise ChannelError("member_not_ready", ps_id + " busy")
            p = rec.ps_class.params
            if not (p.i_min <= target <= p.I_max):
                raise ChannelError("range", ps_id)
            records.append(rec)
        t0 = self.sim.now if t0_ns is None else t0_ns
        if t0 < self.sim.now:
            raise ChannelError("bad_value", "t0 in the past")
        job = RampJob(self, records, list(map(float, targets)), duration_s, t0)
        for rec in records:
            rec.ramp_job = job
            self._refresh_soft(rec)
        job.start()
        return job

    def _refresh_soft(self, rec):
        state = "cycling" if rec.cycle_job is not None else (
            "ramping" if rec.ramp_job is not None else "idle")
        self._set_value(rec.ps_id + ":RAMP-STATE", state)
        self.evaluate_compare(rec.ps_id)

    # -- polling and alarms ------------------------------------------------------------

    def _poll_event(self):
        for rec in self.records.values():
            self._poll_ps(rec)
        self.sim.schedule_after(self.poll_period_ns, self._poll_event)

    def _poll_ps(self, rec):
        if rec.link.state.tx_broken or rec.link.state.rx_broken:
            return  # polling a dead link only piles up timeouts
        fr = Frame(prio=False, opcode=OP_BLOCK_READ, addr=0x00, count=1,
                   payload=(9,))
        rec.link.transact(fr, origin="poll",
                          on_done=lambda txn: self._poll_done(rec, txn))

    def _poll_done(self, rec, txn):
        if txn.error or txn.response is None or txn.nak_code is not None:
            return
        w = txn.response.payload
        ps = rec.ps_id
        rec.mode = w[reg.MODE]
        rec.i_set = reg.word_to_f32(w[reg.I_SET])
        rec.i_read = reg.word_to_f32(w[reg.I_READ])
        rec.status = w[reg.STATUS]
        rec.r_load = reg.word_to_f32(w[reg.R_LOAD])
        rec.v_out = reg.word_to_f32(w[reg.V_OUT])
        self._set_value(ps + ":MODE", MODE_NAMES.get(rec.mode, "off"))
        self._set_value(ps + ":I-SET", rec.i_set)
        self._set_value(ps + ":I-READ", rec.i_read)
        self._set_value(ps + ":STATUS", rec.status)
        self._set_value(ps + ":R-LOAD", rec.r_load)
        self._set_value(ps + ":V-OUT", rec.v_out)
        self._set_value(ps + ":WF-OFFSET", reg.word_to_f32(w[reg.WF_OFFSET]))
        self._set_value(ps + ":WF-SCALE", reg.word_to_f32(w[reg.WF_SCALE]))
        self._set_value(ps + ":TRIG-ARM", w[reg.TRIG_ARM])
        self._set_value(ps + ":LOCAL", bool(rec.status & reg.STATUS_LOCAL))
        self.evaluate_compare(rec.ps_id)

    def _alarm_event(self):
        for rec in self.records.values():
            self.evaluate_alarms(rec.ps_id)
        self.sim.schedule_after(self.alarm_period_ns, self._alarm_event)

    def evaluate_alarms(self, ps_id):
        """Resistance band check with a three-strike filter; link and compare
        alarms are event-driven elsewhere."""
        rec = self.records[ps_id]
        c = rec.controller
        measurable = rec.on and bool(c.fleet.r_has[c.idx]) and \
            abs(rec.i_read) > 0.05 * rec.ps_class.params.I_max
        if measurable:
            r = float(c.fleet.r_est[c.idx])
            lo = (1.0 - R_ALARM_BAND) * rec.r_nominal
            hi = (1.0 + R_ALARM_BAND) * rec.r_nominal
            if r < lo or r > hi:
                rec.r_strikes += 1
                if rec.r_strikes >= R_ALARM_STRIKES:
                    self._raise_alarm(rec, "resistance", "major")
            else:
                rec.r_strikes = 0
                self._clear_alarm(rec, "resistance")
        return rec.severity()

    def _link_changed(self, rec):
        st = rec.link.state
        self._set_value(rec.ps_id + ":LINK-TX-OK", not st.tx_broken,
                        alarm="major" if st.tx_broken else "none")
        self._set_value(rec.ps_id + ":LINK-RX-OK", not st.rx_broken,
                        alarm="major" if st.rx_broken else "none")
        if st.tx_broken:
            self._raise_alarm(rec, "link_tx", "major")
        else:
            self._clear_alarm(rec, "link_tx")
        if st.rx_broken:
            self._raise_alarm(rec, "link_rx", "major")
        else:
            self._clear_alarm(rec, "link_rx")

    def _raise_alarm(self, rec, reason, severity):
        if rec.alarm_reasons.get(reason) == severity:
            return
        rec.alarm_reasons[reason] = severity
        self._push_alarm(rec)

    def _clear_alarm(self, rec, reason):
        if reason not in rec.alarm_reasons:
            return
        del rec.alarm_reasons[reason]
        self._push_alarm(rec)

    def _push_alarm(self, rec):
        sev = rec.severity()
        self._set_value(rec.ps_id + ":ALARM",
                        {"severity": sev, "reasons": sorted(rec.alarm_reasons)},
                        alarm=sev)

    # -- value fan-out ------------------------------------------------------------------

    def _set_value(self, name, value, alarm=None):
        chan = self.channels.get(name)
        if chan is None:
            return
        changed = chan.value != value
        if alarm is not None and alarm != chan.alarm:
            chan.alarm = alarm
            changed = True
        if not changed:
            return
        chan.value = value
        t = self.sim.now
        for sub in list(chan.subs):
            if sub.active:
                sub.cb(name, value, chan.alarm, t)

    # -- protocol bridge ------------------------------------------------------------------

    def execute(self, msg: dict, reply, subscriber=None):
        """Serve one client-protocol request; reply(dict) may fire later
        for puts.  subscriber(event_dict) receives monitor updates."""
        mid = msg.get("id")
        op = msg.get("op")
        name = msg.get("name")
        try:
            if op == "get":
                reply({"id": mid, "ok": True, "value": self.ch_get(name)})
            elif op == "put":
                ticket = self.ch_put(name, msg.get("value"))
                if ticket.done:
                    self._reply_ticket(reply, mid, ticket)
                else:
                    ticket.on_done = lambda t: self._reply_ticket(reply, mid, t)
            elif op == "monitor":
                if subscriber is None:
                    reply({"id": mid, "ok": False, "error": "no_subscriber"})
                    return None
                sub = self.ch_monitor(name, lambda n, v, a, t: subscriber(
                    {"ev": "update", "name": n, "value": v, "alarm": a, "t_ns": t}))
                chan = self.channels[name]
                reply({"id": mid, "ok": True, "value": chan.value})
                subscriber({"ev": "update", "name": name, "value": chan.value,
                            "alarm": chan.alarm, "t_ns": self.sim.now})
                return sub
            elif op == "unmonitor":
                reply({"id": mid, "ok": True})
            else:
                reply({"id": mid, "ok": False, "error": "bad_op"})
        except ChannelError as e:
            reply({"id": mid, "ok": False, "error": e.code})
        return None

    @staticmethod
    def _reply_ticket(reply, mid, ticket):
        if ticket.error:
            reply({"id": mid, "ok": False, "error": ticket.error})
        else:
            reply({"id": mid, "ok": True})
