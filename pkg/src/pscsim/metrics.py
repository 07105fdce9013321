"""Metrics streams: the per-PS CSV and the full-rate diagnostic DAC trace.

CSV schema (stable): t_ns, ps_id, I_set, I_read, V_out, R_load,
status_bits, alarm.  One row per PS per sample period, time-ordered;
floats are written with repr so identical runs produce identical bytes.
"""

from __future__ import annotations

from . import registers as reg

CSV_HEADER = "t_ns,ps_id,I_set,I_read,V_out,R_load,status_bits,alarm\n"


class MetricsRecorder:
    def __init__(self, sim, controllers, server=None, path=None,
                 sample_period_ns=10_000_000, dac_trace_path=None):
        self.sim = sim
        self.controllers = list(controllers)
        self.server = server
        self.sample_period_ns = sample_period_ns
        self.rows = 0
        self._fh = open(path, "w") if path else None
        if self._fh:
            self._fh.write(CSV_HEADER)
        self._dac_fh = open(dac_trace_path, "w") if dac_trace_path else None
        if self._dac_fh:
            self._dac_fh.write("t_ns,ps_id,dac,value\n")
        self.memory = []  # rows kept in memory when no path is given

    def start(self):
        self.sim.schedule_after(self.sample_period_ns, self._sample_event)

    def _sample_event(self):
        t = self.sim.now
        for c in self.controllers:
            f = c.fleet
            i = c.idx
            alarm = "none"
            if self.server is not None:
                rec = self.server.records.get(c.ps_id)
                if rec is not None:
                    alarm = rec.severity()
            row = (t, c.ps_id,
                   reg.word_to_f32(c.regs.get(reg.I_SET, 0)),
                   float(f.I_read[i]), float(f.V_out[i]),
                   float(f.r_est[i]) if f.r_has[i] else 0.0,
                   c.status_word(), alarm)
            if self._fh:
                self._fh.write("%d,%s,%r,%r,%r,%r,%d,%s\n" % row)
            else:
                self.memory.append(row)
            self.rows += 1
        self.sim.schedule_after(self.sample_period_ns, self._sample_event)

    def record_dac(self, t_ns, ps_id, dac, value):
        if self._dac_fh:
            self._dac_fh.write("%d,%s,%s,%r\n" % (t_ns, ps_id, dac, value))

    def close(self):
        for fh in (self._fh, self._dac_fh):
            if fh:
                fh.close()
        self._fh = self._dac_fh = None
