"""Digital PS controller: 50 kHz regulation loop, waveform engine, diagnostics.

One controller per power supply.  The per-tick math for the whole fleet is
vectorized in FleetEngine (one event per 20 us for all supplies), which is
what keeps several-hundred-PS scenarios tractable; PscController owns the
register file, the link protocol semantics and the waveform machinery for
its own supply and reaches into the fleet arrays through its row index.

Loop design: PI tuned by pole-zero cancellation,

    Kp = L * 2*pi*f_c,  Ki = R * 2*pi*f_c
    v_k = v_{k-1} + Kp*(e_k - e_{k-1}) + Ki*T*e_k,   e_k = I_set - I_meas

which gives a first-order closed loop with bandwidth f_c and no overshoot.
The recurrence is realized in position form (v_k = Kp*e_k + i_k with
i_k = i_{k-1} + Ki*T*e_k, identical in the linear regime).  While the
command sits on a voltage rail the integrator is preset to the resistive
feedforward R*I_meas instead of integrating: the output rides the rail at
the plant's slew limit, and when it comes off the rail the loop state is
already on the pole-cancellation manifold, so the approach stays first
order instead of dragging the slow open-loop L/R tail behind it.
The converter's sub-lsb output resolution (rounding correction plus pulse
repetition modulation in the hardware) is abstracted as an error-feedback
quantizer on the voltage command: the command is rounded to the DAC grid
and the rounding error is carried into the next tick, so the average
voltage is exact to much better than one DAC step.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import registers as reg
from .link import (Frame, OP_ACK, OP_BLOCK_READ, OP_BLOCK_WRITE, OP_NAK,
                   OP_READ, OP_WRITE, NAK_BAD_REQUEST, NAK_INVALID_VALUE,
                   NAK_LOCAL, NAK_NOT_ANALOG, NAK_RANGE, NAK_READ_ONLY,
                   NAK_UNMAPPED, ack, nak)
from .plant import AdcModel, PsClass

TICK_NS = 20_000  # 50 kHz controller clock
TICKS_PER_SETPOINT = 4  # one waveform set-point each 80 us, 3 interpolations
MAX_WAVEFORM_POINTS = 32768
R_EST_TAU_S = 0.100  # load-resistance estimator time constant
R_EST_GUARD = 0.05  # no estimate below this fraction of full scale
R_EST_TRACK = 0.02  # and none while the loop still slews to its target
TRIP_FRACTION = 1.05  # overcurrent latch threshold
SCALAR_FLEET_MAX = 8  # per-PS loop below this, vectorized numpy above


class WaveformError(ValueError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


def quantize_ef(u: float, err, lsb):
    """Error-feedback quantizer: returns (q, err') with q on the lsb grid.

    q = round((u + err)/lsb)*lsb rounding ties away from zero, and
    err' = u + err - q stays within half an lsb, so the running sum of q
    never departs from the running sum of u by more than lsb/2.  Works on
    floats, Fractions or anything with arithmetic.
    """
    s = u + err
    r = s / lsb
    q = math.floor(abs(r) + type(r)(1) / 2) * lsb
    if r < 0:
        q = -q
    return q, s - q


@dataclass
class ControllerConfig:
    """Per-class regulation constants; tick * 50000 == 1 s always."""

    f_c: float
    Kp: float
    Ki: float
    adc: AdcModel
    dac_lsb: float
    tick_ns: int = TICK_NS

    @classmethod
    def from_class(cls, ps_class: PsClass, dac_lsb: float | None = None):
        p = ps_class.params
        wc = 2.0 * math.pi * ps_class.f_c
        return cls(
            f_c=ps_class.f_c,
            Kp=p.L * wc,
            Ki=p.R * wc,
            adc=AdcModel(i_max=p.I_max, noise_sigma=ps_class.noise_sigma),
            dac_lsb=dac_lsb if dac_lsb is not None else p.V_max / 32768.0,
        )


class _Waveform:
    """Staged or running waveform; offset/scale are read live from registers."""

    __slots__ = ("points", "loop", "running", "counter", "name")

    def __init__(self, points, loop, name=""):
        self.points = np.asarray(points, dtype=np.float64)
        self.loop = loop
        self.running = False
        self.counter = 0
        self.name = name


class FleetEngine:
    """Vectorized per-tick state for every PS in the scenario."""

    def __init__(self, sim):
        self.sim = sim
        self.controllers = []
        self._built = False
        self.wf_trace = None  # callable(ps_id, t_ns, setpoint_index)
        self.dac_recorder = None  # callable(t_ns, ps_id, dac_name, value)
        self._dac_taps = []  # (idx, name, src, offset, scale)

    def add(self, controller) -> int:
        assert not self._built, "fleet is frozen once built"
        self.controllers.append(controller)
        return len(self.controllers) - 1

    def build(self):
        n = len(self.controllers)
        self.n = n
        params = [c.ps_class.params for c in self.controllers]
        cfg = [c.cfg for c in self.controllers]
        as_f = lambda vals: np.array(vals, dtype=np.float64)
        self.R = as_f([p.R for p in params])
        self.L = as_f([p.L for p in params])
        self.I_max = as_f([p.I_max for p in params])
        self.V_max = as_f([p.V_max for p in params])
        self.V_min = as_f([p.v_min for p in params])
        self.I_min = as_f([p.i_min for p in params])
        self.unipolar = np.array([p.quadrants in (1, 2) for p in params])
        self.dt = TICK_NS * 1e-9
        self.phi = np.exp(-self.R * self.dt / self.L)
        self.psi = (1.0 - self.phi) / self.R
        self.R_ctl = self.R.copy()  # the tuning's belief; faults move R only
        self.phi_ctl = self.phi.copy()
        self.psi_ctl = self.psi.copy()
        self.Kp = as_f([c.Kp for c in cfg])
        self.KiT = as_f([c.Ki * self.dt for c in cfg])
        self.adc_lsb = as_f([c.adc.lsb for c in cfg])
        self.sigma = as_f([c.adc.noise_sigma for c in cfg])
        self.dac_lsb = as_f([c.dac_lsb for c in cfg])
        self.I = np.zeros(n)
        self.I_read = np.zeros(n)
        self.V_out = np.zeros(n)
        self.i_state = np.zeros(n)  # PI integrator, volts
        self.ef_err = np.zeros(n)
        self.set_reg = np.zeros(n)
        self.eff_set = np.zeros(n)
        self.mode = np.zeros(n, dtype=np.int8)
        self.fault = np.zeros(n, dtype=bool)
        self.limit = np.zeros(n, dtype=bool)
        self.r_est = np.zeros(n)
        self.r_has = np.zeros(n, dtype=bool)
        self.alpha_r = 1.0 - math.exp(-self.dt / R_EST_TAU_S)
        self.tick_count = 0
        self.trip_count = np.zeros(n, dtype=np.int64)
        self.wf_on = np.zeros(n, dtype=bool)
        self._active_wfs = []
        self._has_noise = bool(np.any(self.sigma > 0.0))
        self._built = True

    # -- fault injection ------------------------------------------------------

    def set_resistance(self, idx: int, new_r: float):
        if not new_r > 0:
            raise ValueError("resistance must be positive")
        self.R[idx] = new_r
        self.phi[idx] = math.exp(-new_r * self.dt / self.L[idx])
        self.psi[idx] = (1.0 - self.phi[idx]) / new_r
        # the controller keeps regulating with its nominal tuning

    def swap_plants(self, a: int, b: int):
        """Exchange the magnets (with their stored current) behind two PS."""
        for arr in (self.R, self.L, self.phi, self.psi, self.I):
            arr[a], arr[b] = arr[b], arr[a]

    # -- the 50 kHz tick --------------------------------------------------------

    def start(self, first_tick_ns=TICK_NS):
        self.sim.schedule_at(first_tick_ns, self._tick_event)

    def _tick_event(self):
        self.tick()
        self.sim.schedule_after(TICK_NS, self._tick_event)

    def tick(self):
        t = self.sim.now
        if self._active_wfs:
            # playback overwrites the set-point register before regulation
            self._advance_waveforms(t)
        if self.n <= SCALAR_FLEET_MAX:
            self._tick_scalar()
        else:
            self._tick_vector()
        self.tick_count += 1
        if self._dac_taps and self.dac_recorder is not None:
            for i, name, src, off, scale in self._dac_taps:
                value = scale * self.controllers[i]._analog_value(src) + off
                self.dac_recorder(t, self.controllers[i].ps_id, name, value)

    def _tick_scalar(self):
        """Per-PS float loop: same math as the vectorized path, much faster
        for the handful-of-supplies case (numpy call overhead dominates
        below roughly ten supplies)."""
        rng = self.sim.rng
        for i in range(self.n):
            x = self.I[i]
            if self.sigma[i] > 0.0:
                x += self.sigma[i] * float(rng.standard_normal())
            lsb = self.adc_lsb[i]
            r = x / lsb
            q = math.floor(abs(r) + 0.5) * lsb
            if r < 0:
                q = -q
            i_max = self.I_max[i]
            self.I_read[i] = min(max(q, -i_max), i_max)
            if abs(q) > TRIP_FRACTION * i_max and self.mode[i] > 0 \
                    and not self.fault[i]:
                self.fault[i] = True
                self.mode[i] = reg.MODE_OFF
                self.trip_count[i] += 1
                self.controllers[i]._on_trip()
            active = self.mode[i] > 0 and not self.fault[i]

            eff = min(max(self.set_reg[i], self.I_min[i]), i_max)
            self.limit[i] = eff != self.set_reg[i]
            self.eff_set[i] = eff
            e = eff - self.I_read[i]
            i_cand = self.i_state[i] + self.KiT[i] * e
            u_raw = self.Kp[i] * e + i_cand
            u = min(max(u_raw, self.V_min[i]), self.V_max[i])
            if (u_raw > self.V_max[i] and e > 0) or (u_raw < self.V_min[i] and e < 0):
                i_cand = self.R_ctl[i] * (self.phi_ctl[i] * self.I_read[i]
                                          + self.psi_ctl[i] * u)
            if not active:
                i_cand = 0.0
                u = 0.0
            self.i_state[i] = i_cand
            s = u + self.ef_err[i]
            r = s / self.dac_lsb[i]
            v_cmd = math.floor(abs(r) + 0.5) * self.dac_lsb[i]
            if r < 0:
                v_cmd = -v_cmd
            if not active:
                v_cmd = 0.0
                self.ef_err[i] = 0.0
            else:
                self.ef_err[i] = s - v_cmd
            i_new = self.I[i] * self.phi[i] + self.psi[i] * v_cmd
            if self.unipolar[i] and i_new < 0.0:
                i_new = 0.0
            self.I[i] = i_new
            self.V_out[i] = v_cmd
            if active and not self.wf_on[i] \
                    and abs(self.I_read[i]) > R_EST_GUARD * i_max \
                    and abs(e) <= R_EST_TRACK * i_max:
                r_new = v_cmd / self.I_read[i]
                self.r_est[i] += self.alpha_r * (r_new - self.r_est[i])
                self.r_has[i] = True

    def _tick_vector(self):
        # measurement: noise enters before the 17-bit quantizer
        x = self.I
        if self._has_noise:
            x = x + self.sigma * self.sim.rng.standard_normal(self.n)
        lsb = self.adc_lsb
        q = np.copysign(np.floor(np.abs(x) / lsb + 0.5), x) * lsb
        np.clip(q, -self.I_max, self.I_max, out=self.I_read)

        # overcurrent trip latches fault and forces the supply off; the
        # protection comparator sees the raw quantized signal, because the
        # reported reading above saturates at full scale
        tripped = (np.abs(q) > TRIP_FRACTION * self.I_max) \
            & (self.mode > 0) & ~self.fault
        if tripped.any():
            self.fault |= tripped
            self.mode[tripped] = reg.MODE_OFF
            self.trip_count[tripped] += 1
            for i in np.flatnonzero(tripped):
                self.controllers[i]._on_trip()
        active = (self.mode > 0) & ~self.fault

        eff = np.clip(self.set_reg, self.I_min, self.I_max)
        np.not_equal(eff, self.set_reg, out=self.limit)
        self.eff_set = eff

        e = eff - self.I_read
        i_cand = self.i_state + self.KiT * e
        u_raw = self.Kp * e + i_cand
        u = np.clip(u_raw, self.V_min, self.V_max)
        # anti-windup: while pinned at a rail, hold the integrator at the
        # resistive feedforward R*I predicted for the end of this tick, so
        # the release lands on the cancellation manifold (i = R*I along the
        # ideal first-order trajectory) and no slow open-loop tail remains
        railed = ((u_raw > self.V_max) & (e > 0)) | ((u_raw < self.V_min) & (e < 0))
        if railed.any():
            i_ff = self.R_ctl * (self.phi_ctl * self.I_read + self.psi_ctl * u)
            self.i_state = np.where(railed, i_ff, i_cand)
        else:
            self.i_state = i_cand
        self.i_state[~active] = 0.0
        u[~active] = 0.0
        # error-feedback quantization of the voltage command
        s = u + self.ef_err
        r = s / self.dac_lsb
        v_cmd = np.copysign(np.floor(np.abs(r) + 0.5), r) * self.dac_lsb
        self.ef_err = s - v_cmd
        self.ef_err[~active] = 0.0
        v_cmd[~active] = 0.0

        # exact R-L step under the held voltage
        self.I = self.I * self.phi + self.psi * v_cmd
        np.maximum(self.I, 0.0, where=self.unipolar, out=self.I)
        self.V_out = v_cmd

        # load-resistance estimator: EWMA of V/I above the current guard.
        # Samples are also gated on near-target tracking and off during fast
        # waveforms, because while the current slews the ratio carries the
        # large L*dI/dt term and would poison the average.
        guard = active & ~self.wf_on \
            & (np.abs(self.I_read) > R_EST_GUARD * self.I_max) \
            & (np.abs(e) <= R_EST_TRACK * self.I_max)
        if guard.any():
            idx = np.flatnonzero(guard)
            r_new = self.V_out[idx] / self.I_read[idx]
            self.r_est[idx] += self.alpha_r * (r_new - self.r_est[idx])
            self.r_has[idx] = True

    def _advance_waveforms(self, t):
        for ctl in list(self._active_wfs):
            wf = ctl.waveform
            i = ctl.idx
            pts = wf.points
            n = len(pts)
            seg, phase = divmod(wf.counter, TICKS_PER_SETPOINT)
            if wf.loop:
                if seg and seg % n == 0 and phase == 0:
                    ctl.diag[reg.DIAG_WF_LOOPS] += 1
                idx = seg % n
                nxt = (idx + 1) % n
                raw = pts[idx] + (pts[nxt] - pts[idx]) * (phase / TICKS_PER_SETPOINT)
            else:
                idx = min(seg, n - 1)
                if seg >= n - 1:
                    raw = pts[n - 1]
                else:
                    raw = pts[seg] + (pts[seg + 1] - pts[seg]) * (phase / TICKS_PER_SETPOINT)
            target = ctl.wf_scale * raw + ctl.wf_offset
            f32 = np.float32(target)
            ctl.regs[reg.I_SET] = reg.f32_to_word(float(f32))
            self.set_reg[i] = float(f32)
            if phase == 0 and self.wf_trace is not None:
                self.wf_trace(ctl.ps_id, t, idx)
            if not wf.loop and seg >= n - 1:
                wf.running = False
                self.wf_on[i] = False
                self._active_wfs.remove(ctl)
                ctl._on_waveform_done()
            else:
                wf.counter += 1

    def set_dac_tap(self, idx, name, src, offset, scale):
        self._dac_taps = [t for t in self._dac_taps if not (t[0] == idx and t[1] == name)]
        if src is not None:
            self._dac_taps.append((idx, name, src, offset, scale))


class PscController:
    """Register file, link protocol semantics and waveform control of one PS."""

    def __init__(self, sim, fleet: FleetEngine, ps_id: str, ps_class: PsClass,
                 dac_lsb=None, state_dir=None):
        self.sim = sim
        self.fleet = fleet
        self.ps_id = ps_id
        self.ps_class = ps_class
        self.cfg = ControllerConfig.from_class(ps_class, dac_lsb)
        self.idx = fleet.add(self)
        self.link = None  # bound by the scenario builder
        self.state_dir = state_dir
        self.regs = {reg.WF_SCALE: reg.f32_to_word(1.0)}
        self.diag = {a: 0 for a in range(reg.DIAG_BASE, reg.DIAG_TOP + 1)}
        self.waveform = None
        self._staging = []
        self.topology = {}

    # -- convenience views ------------------------------------------------------

    @property
    def mode(self):
        return int(self.fleet.mode[self.idx])

    @property
    def i_read(self):
        return float(self.fleet.I_read[self.idx])

    @property
    def i_true(self):
        return float(self.fleet.I[self.idx])

    @property
    def wf_offset(self):
        return reg.word_to_f32(self.regs.get(reg.WF_OFFSET, 0))

    @property
    def wf_scale(self):
        return reg.word_to_f32(self.regs.get(reg.WF_SCALE, reg.f32_to_word(1.0)))

    @property
    def armed(self):
        return self.regs.get(reg.TRIG_ARM, 0) != 0

    def status_word(self) -> int:
        f = self.fleet
        i = self.idx
        w = 0
        if f.mode[i] > 0:
            w |= reg.STATUS_ON | reg.STATUS_REGULATING
        if self.waveform is not None and self.waveform.running:
            w |= reg.STATUS_WAVEFORM_RUNNING
        if self.armed:
            w |= reg.STATUS_TRIGGER_ARMED
        if f.fault[i]:
            w |= reg.STATUS_FAULT
        if self.link is not None and self.link.state.tx_broken:
            w |= reg.STATUS_TX_BROKEN
        if self.link is not None and self.link.state.rx_broken:
            w |= reg.STATUS_RX_BROKEN
        if f.mode[i] == reg.MODE_LOCAL:
            w |= reg.STATUS_LOCAL
        if f.limit[i]:
            w |= reg.STATUS_LIMIT
        return w

    # -- register access ----------------------------------------------------------

    def reg_read(self, addr: int) -> int:
        """Read one register word; unmapped addresses read as zero."""
        f = self.fleet
        i = self.idx
        if addr == reg.I_READ:
            return reg.f32_to_word(f.I_read[i])
        if addr == reg.STATUS:
            return self.status_word()
        if addr == reg.R_LOAD:
            return reg.f32_to_word(f.r_est[i] if f.r_has[i] else 0.0)
        if addr == reg.V_OUT:
            return reg.f32_to_word(f.V_out[i])
        if addr == reg.MODE:
            return int(f.mode[i])
        if reg.DIAG_BASE <= addr <= reg.DIAG_TOP:
            if addr == reg.DIAG_TICKS:
                return f.tick_count & 0xFFFFFFFF
            if addr == reg.DIAG_TRIPS:
                return int(f.trip_count[i]) & 0xFFFFFFFF
            return self.diag.get(addr, 0) & 0xFFFFFFFF
        if addr == reg.DL_STAT:
            return len(self._staging)
        return self.regs.get(addr, 0) & 0xFFFFFFFF

    def reg_write(self, addr: int, word: int, via_link: bool = True):
        """Write one register word.  Returns None on success, a NAK code on
        rejection.  Remote writes are blocked in local mode except MODE."""
        word &= 0xFFFFFFFF
        if via_link and self.mode == reg.MODE_LOCAL and addr != reg.MODE:
            return NAK_LOCAL
        if addr not in reg.WRITABLE_REGS:
            return NAK_READ_ONLY if addr in reg.READONLY_REGS else NAK_UNMAPPED
        if addr == reg.MODE:
            if word not in (reg.MODE_OFF, reg.MODE_ON, reg.MODE_LOCAL):
                return NAK_INVALID_VALUE
            self.fleet.mode[self.idx] = word
            if word == reg.MODE_OFF:
                self.fleet.fault[self.idx] = False  # off acknowledges the latch
            self.regs[addr] = word
            return None
        if addr in (reg.I_SET, reg.WF_OFFSET, reg.WF_SCALE):
            val = reg.word_to_f32(word)
            if not math.isfinite(val):
                return NAK_INVALID_VALUE
            self.regs[addr] = word
            if addr == reg.I_SET:
                self.fleet.set_reg[self.idx] = val
            return None
        if addr in (reg.DAC_A_SRC, reg.DAC_B_SRC):
            src, _off = reg.unpack_dac_src(word)
            if src not in reg.ANALOG_REGS:
                return NAK_NOT_ANALOG
            self.regs[addr] = word
            self._sync_dac_tap("A" if addr == reg.DAC_A_SRC else "B")
            return None
        if addr in (reg.DAC_A_SCALE, reg.DAC_B_SCALE):
            if not math.isfinite(reg.word_to_f32(word)):
                return NAK_INVALID_VALUE
            self.regs[addr] = word
            self._sync_dac_tap("A" if addr == reg.DAC_A_SCALE else "B")
            return None
        if addr == reg.DL_CMD:
            return self._download_command(word)
        if reg.DL_WINDOW <= addr <= reg.DL_TOP:
            self._staging.append(word)
            return None
        self.regs[addr] = word
        if addr == reg.TRIG_ARM:
            pass  # picked up at the next trigger edge
        return None

    def _sync_dac_tap(self, name):
        src_addr = reg.DAC_A_SRC if name == "A" else reg.DAC_B_SRC
        scale_addr = reg.DAC_A_SCALE if name == "A" else reg.DAC_B_SCALE
        if src_addr not in self.regs:
            return
        src, offset = reg.unpack_dac_src(self.regs[src_addr])
        scale = reg.word_to_f32(self.regs.get(scale_addr, reg.f32_to_word(1.0)))
        self.fleet.set_dac_tap(self.idx, name, src, offset, scale)

    def _analog_value(self, src: int) -> float:
        return reg.word_to_f32(self.reg_read(src))

    # -- link protocol -----------------------------------------------------------

    def handle_frame(self, frame: Frame) -> Frame:
        """Slave-side service of one request frame (already CRC-checked)."""
        self.diag[reg.DIAG_RX_FRAMES] += 1
        resp = self._serve(frame)
        self.diag[reg.DIAG_TX_FRAMES] += 1
        if resp.opcode == OP_NAK:
            self.diag[reg.DIAG_NAKS] += 1
        return resp

    def _serve(self, frame: Frame) -> Frame:
        if frame.opcode == OP_READ:
            if frame.count != 0:
                return nak(frame, NAK_BAD_REQUEST)
            return ack(frame, (self.reg_read(frame.addr),))
        if frame.opcode == OP_WRITE:
            if frame.count != 1:
                return nak(frame, NAK_BAD_REQUEST)
            code = self.reg_write(frame.addr, frame.payload[0])
            return ack(frame) if code is None else nak(frame, code)
        if frame.opcode == OP_BLOCK_WRITE:
            if frame.addr + frame.count > 256:
                return nak(frame, NAK_RANGE)
            for k, w in enumerate(frame.payload):
                code = self.reg_write(frame.addr + k, w)
                if code is not None:
                    return nak(frame, code)
            return ack(frame)
        if frame.opcode == OP_BLOCK_READ:
            if frame.count != 1:
                return nak(frame, NAK_BAD_REQUEST)
            n = frame.payload[0]
            if not 1 <= n <= 256 or frame.addr + n > 256:
                return nak(frame, NAK_RANGE)
            return ack(frame, tuple(self.reg_read(frame.addr + k) for k in range(n)))
        return nak(frame, NAK_BAD_REQUEST)

    # -- waveforms ------------------------------------------------------------------

    def load_waveform(self, points, loop_mode="once", target="volatile",
                      offset=None, scale=None, name=""):
        """Stage a current waveform; persistent targets survive a reboot."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 1 or len(pts) < 2:
            raise WaveformError("too_short")
        if len(pts) > MAX_WAVEFORM_POINTS:
            raise WaveformError("too_long")
        if not np.all(np.isfinite(pts)):
            raise WaveformError("non_finite")
        if loop_mode not in ("once", "loop"):
            raise WaveformError("bad_loop_mode")
        if target not in ("volatile", "persistent"):
            raise WaveformError("bad_target")
        if offset is not None:
            self.reg_write(reg.WF_OFFSET, reg.f32_to_word(offset), via_link=False)
        if scale is not None:
            self.reg_write(reg.WF_SCALE, reg.f32_to_word(scale), via_link=False)
        eff = self.wf_scale * pts + self.wf_offset
        i_max = self.ps_class.params.I_max
        if np.any(np.abs(eff) > i_max):
            raise WaveformError("out_of_range")
        self.waveform = _Waveform(pts, loop_mode == "loop", name)
        if target == "persistent":
            self._persist_state()
        return self.waveform

    def fire_trigger(self):
        """Optical trigger edge: starts playback at the next 20 us tick."""
        if not self.armed or self.waveform is None:
            self.diag[reg.DIAG_TRIG_IGNORED] += 1
            return False
        self.regs[reg.TRIG_ARM] = 0
        wf = self.waveform
        wf.counter = 0
        wf.running = True
        self.fleet.wf_on[self.idx] = True
        if self not in self.fleet._active_wfs:
            self.fleet._active_wfs.append(self)
        return True

    def _on_waveform_done(self):
        pass  # I_SET already holds the final effective value

    def _on_trip(self):
        # the tick already forced MODE off; V goes to zero on the same tick
        pass

    def _download_command(self, word):
        if word == 0:
            self._staging = []
            return None
        if word == 1:
            self._staging = []
            return None
        if word in (2, 3):
            if len(self._staging) < 4:
                return NAK_BAD_REQUEST
            n, flags = self._staging[0], self._staging[1]
            if len(self._staging) != 2 + n:
                return NAK_BAD_REQUEST
            pts = [reg.word_to_f32(w) for w in self._staging[2:]]
            try:
                self.load_waveform(pts, loop_mode="loop" if flags & 1 else "once",
                                   target="persistent" if word == 3 else "volatile")
            except WaveformError:
                return NAK_RANGE
            self._staging = []
            return None
        return NAK_INVALID_VALUE

    @staticmethod
    def staging_words(points, loop: bool):
        """Word stream for a download-window transfer of a waveform."""
        return [len(points), 1 if loop else 0] + [reg.f32_to_word(p) for p in points]

    # -- persistence ---------------------------------------------------------------

    def _state_path(self):
        return os.path.join(self.state_dir, self.ps_id + ".json") if self.state_dir else None

    def _persist_state(self):
        path = self._state_path()
        if path is None or self.waveform is None:
            return
        os.makedirs(self.state_dir, exist_ok=True)
        payload = {"waveform": {"points": [float(p) for p in self.waveform.points],
                                "loop_mode": "loop" if self.waveform.loop else "once",
                                "name": self.waveform.name}}
        fd, tmp = tempfile.mkstemp(dir=self.state_dir, prefix=self.ps_id + ".")
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)

    def reboot(self):
        """Power-cycle the controller: volatile state clears, flash survives."""
        if self.waveform is not None and self.waveform.running:
            self.fleet._active_wfs.remove(self)
        self.fleet.wf_on[self.idx] = False
        self.waveform = None
        self._staging = []
        self.regs = {reg.WF_SCALE: reg.f32_to_word(1.0)}
        i = self.idx
        self.fleet.mode[i] = reg.MODE_OFF
        self.fleet.fault[i] = False
        for arr in (self.fleet.set_reg, self.fleet.i_state,
                    self.fleet.ef_err, self.fleet.r_est):
            arr[i] = 0.0
        self.fleet.r_has[i] = False
        path = self._state_path()
        if path and os.path.exists(path):
            with open(path) as fh:
                saved = json.load(fh)
            wf = saved.get("waveform")
            if wf:
                self.load_waveform(wf["points"], loop_mode=wf["loop_mode"],
                                   name=wf.get("name", ""))

    # -- local operator API (used by tests, scenario faults, the panel) -----------

    def set_mode(self, mode_word: int):
        code = self.reg_write(reg.MODE, mode_word, via_link=False)
        if code is not None:
            raise ValueError("bad mode %r" % mode_word)

    def set_local(self, local: bool):
        self.set_mode(reg.MODE_LOCAL if local else reg.MODE_ON)

    def assign_dac(self, dac: str, source_reg, offset: float, scale: float):
        """Route an analog register to a diagnostic DAC: out = scale*value + offset."""
        if dac not in ("A", "B"):
            raise ValueError("dac must be 'A' or 'B'")
        src_addr = reg.DAC_A_SRC if dac == "A" else reg.DAC_B_SRC
        scale_addr = reg.DAC_A_SCALE if dac == "A" else reg.DAC_B_SCALE
        code = self.reg_write(src_addr, reg.pack_dac_src(source_reg, offset),
                              via_link=False)
        if code is not None:
            return code
        return self.reg_write(scale_addr, reg.f32_to_word(scale), via_link=False)
