"""Fast orbit feedback harness: BPM model, pseudo-inverse, 1 kHz corrector writes.

The beam response is y = R_om @ I + d(t) + noise, where I are the corrector
set currents the feedback has applied (the corrector loops track their
set-points far faster than the 1 ms feedback period, and their accuracy is
covered by the regulation tests).  Each period the feedback writes

    I <- I - alpha * P @ y

to the corrector set-point registers through the high-priority link path,
where P is the Moore-Penrose pseudo-inverse of R_om.  Corrections smaller
than one 17-bit current lsb are suppressed to keep the loop from
chattering at the quantization floor.
"""

from __future__ import annotations

import math

import numpy as np

from . import registers as reg
from .link import Frame, OP_WRITE

FEEDBACK_PERIOD_NS = 1_000_000  # 1 kHz


class SingularResponseError(ValueError):
    pass


def compute_pinv(r_om, cond_limit=1e10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of the response matrix.

    Solves (R^T R) P = R^T column by column with Gauss-Jordan elimination
    and partial pivoting; the matrices here are at most a few dozen rows,
    so no external solver is warranted.  Raises SingularResponseError when
    the normal matrix looks singular (pivot ratio above cond_limit).
    """
    r = np.asarray(r_om, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError("response matrix must be 2-D")
    m, n = r.shape
    a = r.T @ r  # n x n
    rhs = r.T.copy()  # n x m
    aug = np.hstack([a, rhs])
    piv_max, piv_min = 0.0, math.inf
    for col in range(n):
        p = col + int(np.argmax(np.abs(aug[col:, col])))
        pivot = abs(aug[p, col])
        if pivot == 0.0:
            raise SingularResponseError("singular_response")
        piv_max = max(piv_max, pivot)
        piv_min = min(piv_min, pivot)
        if piv_max / piv_min > cond_limit:
            raise SingularResponseError("singular_response")
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col and aug[row, col] != 0.0:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


class OrbitFeedback:
    """Periodic corrector update through the priority register path."""

    def __init__(self, sim, server, correctors, links, r_om, disturbance,
                 alpha=0.5, noise_sigma=0.0, bpms=None, period_ns=FEEDBACK_PERIOD_NS):
        self.sim = sim
        self.server = server
        self.correctors = list(correctors)  # controller objects, matrix column order
        self.links = list(links)
        self.r_om = np.asarray(r_om, dtype=np.float64)
        self.bpms = bpms or ["BPM%02d" % i for i in range(self.r_om.shape[0])]
        if self.r_om.shape != (len(self.bpms), len(self.correctors)):
            raise ValueError("response matrix is %r, expected %d x %d"
                             % (self.r_om.shape, len(self.bpms), len(self.correctors)))
        self.p = compute_pinv(self.r_om)
        self.alpha = float(alpha)
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("gain must be in (0, 1]")
        self.noise_sigma = float(noise_sigma)
        self.period_ns = period_ns
        self.d_static = np.asarray(disturbance, dtype=np.float64)
        self.d_sine = None  # optional (freq_hz, amplitude vector)
        self.enabled = False
        self.paused = False
        self.step_times = []
        self.y_log = []  # orbit as measured at each step
        self.last_y = None
        self.write_latencies = []
        self._ev = None
        for lk in self.links:
            lk.state.on_change.append(lambda st: self._link_changed())

    # -- control -------------------------------------------------------------

    def enable(self, on=True):
        self.enabled = on
        if on and self._ev is None:
            self._ev = self.sim.schedule_after(self.period_ns, self._step_event)
        if not on and self._ev is not None:
            self.sim.cancel(self._ev)
            self._ev = None

    def _link_changed(self):
        down = any(lk.state.tx_broken or lk.state.rx_broken for lk in self.links)
        if down and not self.paused:
            self.paused = True
            for c in self.correctors:
                rec = self.server.records.get(c.ps_id)
                if rec is not None:
                    self.server._raise_alarm(rec, "feedback", "major")
        elif not down and self.paused:
            self.paused = False
            for c in self.correctors:
                rec = self.server.records.get(c.ps_id)
                if rec is not None:
                    self.server._clear_alarm(rec, "feedback")

    # -- the 1 kHz step ----------------------------------------------------------

    def read_orbit(self) -> np.ndarray:
        i_applied = np.array([reg.word_to_f32(c.reg_read(reg.I_SET))
                              for c in self.correctors])
        y = self.r_om @ i_applied + self.disturbance_now()
        if self.noise_sigma > 0.0:
            y = y + self.noise_sigma * self.sim.rng.standard_normal(len(y))
        return y

    def disturbance_now(self) -> np.ndarray:
        d = self.d_static
        if self.d_sine is not None:
            freq_hz, amp = self.d_sine
            d = d + amp * math.sin(2 * math.pi * freq_hz * self.sim.now * 1e-9)
        return d

    def _step_event(self):
        self._ev = self.sim.schedule_after(self.period_ns, self._step_event)
        if not self.enabled or self.paused:
            return
        self.step_times.append(self.sim.now)
        y = self.read_orbit()
        self.last_y = y
        self.y_log.append(y)
        delta = -self.alpha * (self.p @ y)
        for j, c in enumerate(self.correctors):
            lsb = c.cfg.adc.lsb
            if abs(delta[j]) < lsb:
                continue  # dead-band at the 17-bit granularity floor
            new_set = reg.word_to_f32(c.reg_read(reg.I_SET)) + delta[j]
            fr = Frame(prio=True, opcode=OP_WRITE, addr=reg.I_SET, count=1,
                       payload=(reg.f32_to_word(new_set),))
            self.links[j].transact(fr, prio=True, origin="feedback",
                                   on_done=self._note_write)

    def _note_write(self, txn):
        if txn.latency_ns is not None:
            self.write_latencies.append(txn.latency_ns)

    def rms(self, y=None) -> float:
        y = self.last_y if y is None else y
        return float(np.sqrt(np.mean(np.square(y)))) if y is not None else 0.0
