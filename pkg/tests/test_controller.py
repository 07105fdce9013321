"""Controller: quantizer, register semantics, regulation, waveforms, diagnostics."""

import math
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_rig, turn_on
from pscsim import registers as reg
from pscsim.controller import (ControllerConfig, MAX_WAVEFORM_POINTS,
                               WaveformError, quantize_ef)
from pscsim.link import (Frame, NAK_INVALID_VALUE, NAK_LOCAL, NAK_NOT_ANALOG,
                         NAK_READ_ONLY, NAK_UNMAPPED, OP_READ, OP_WRITE)
from pscsim.plant import DEFAULT_CLASSES, PlantState, plant_step

TICK = 20_000


# -- error-feedback quantizer -------------------------------------------------


def test_quantize_ef_hand_trace_exact():
    # constant input 0.3 on a unit grid, traced in exact arithmetic:
    # carried error walks 0.3, -0.4, -0.1, 0.2, -0.5 (tie away from zero),
    # -0.2, 0.1, 0.4, -0.3, 0.0 and emits a 1 whenever the sum crosses half
    u, lsb = Fraction(3, 10), Fraction(1)
    err = Fraction(0)
    out = []
    for _ in range(10):
        q, err = quantize_ef(u, err, lsb)
        assert abs(err) <= lsb / 2
        out.append(int(q))
    assert out == [0, 1, 0, 0, 1, 0, 0, 0, 1, 0]
    assert Fraction(sum(out), 10) == u  # mean recovers the input exactly


def test_quantize_ef_multiples_pass_through():
    q, err = quantize_ef(3.0, 0.0, 0.5)
    assert q == 3.0 and err == 0.0


def test_quantize_ef_bounded_cumulative_error():
    rng = np.random.default_rng(9)
    lsb = 6.1e-4
    err = 0.0
    acc = 0.0
    for _ in range(5000):
        u = float(rng.uniform(-2, 2))
        q, err = quantize_ef(u, err, lsb)
        assert q / lsb == pytest.approx(round(q / lsb), abs=1e-6)
        acc += q - u
        # running sums never drift apart by more than half a step
        assert abs(acc) <= lsb / 2 + 1e-12
        assert abs(err) <= lsb / 2 + 1e-12


def test_fleet_quantizer_matches_scalar():
    # the vectorized tick arithmetic reproduces the scalar recurrence
    _, fleet, _, _ = make_rig()
    rng = np.random.default_rng(2)
    lsb = float(fleet.dac_lsb[0])
    err_vec = 0.0
    err_ref = 0.0
    for u in rng.uniform(-20, 20, size=500):
        s = float(u) + err_vec
        r = s / lsb
        q_vec = float(np.copysign(np.floor(np.abs(r) + 0.5), r) * lsb)
        err_vec = s - q_vec
        q_ref, err_ref = quantize_ef(float(u), err_ref, lsb)
        assert q_vec == pytest.approx(q_ref, abs=1e-15)
        assert err_vec == pytest.approx(err_ref, abs=1e-15)


# -- register file semantics ------------------------------------------------------


def test_config_tuning_rule():
    cfg = ControllerConfig.from_class(DEFAULT_CLASSES["corrector"])
    assert cfg.Kp == pytest.approx(62.83185, rel=1e-6)
    assert cfg.Ki == pytest.approx(3141.593, rel=1e-6)
    assert cfg.tick_ns * 50_000 == 1_000_000_000


def test_write_and_read_back_i_set(rig):
    sim, fleet, c, link = rig
    assert c.reg_write(reg.I_SET, reg.f32_to_word(2.0)) is None
    assert reg.word_to_f32(c.reg_read(reg.I_SET)) == 2.0


def test_read_only_and_unmapped_writes_rejected(rig):
    _, _, c, _ = rig
    assert c.reg_write(reg.I_READ, 0) == NAK_READ_ONLY
    assert c.reg_write(reg.STATUS, 0) == NAK_READ_ONLY
    assert c.reg_write(0x9A, 1) == NAK_UNMAPPED


def test_unmapped_reads_as_zero(rig):
    _, _, c, _ = rig
    assert c.reg_read(0x9A) == 0


def test_non_finite_set_rejected(rig):
    _, _, c, _ = rig
    nan_word = reg.f32_to_word(float("nan"))
    assert c.reg_write(reg.I_SET, nan_word) == NAK_INVALID_VALUE
    inf_word = reg.f32_to_word(float("inf"))
    assert c.reg_write(reg.WF_SCALE, inf_word) == NAK_INVALID_VALUE


def test_local_mode_blocks_remote_writes_except_mode(rig):
    _, _, c, _ = rig
    c.set_local(True)
    assert c.reg_write(reg.I_SET, reg.f32_to_word(1.0)) == NAK_LOCAL
    assert c.status_word() & reg.STATUS_LOCAL
    # MODE stays writable so the control room can take the PS back
    assert c.reg_write(reg.MODE, reg.MODE_ON) is None
    assert c.reg_write(reg.I_SET, reg.f32_to_word(1.0)) is None


def test_link_frame_read_write_round_trip(rig):
    sim, _, c, link = rig
    wr = Frame(prio=False, opcode=OP_WRITE, addr=reg.I_SET, count=1,
               payload=(reg.f32_to_word(1.5),))
    t1 = link.transact(wr)
    rd = Frame(prio=False, opcode=OP_READ, addr=reg.I_SET, count=0)
    t2 = link.transact(rd)
    sim.advance_until(1_000_000)
    assert t1.error is None and t1.nak_code is None
    assert reg.word_to_f32(t2.response.payload[0]) == 1.5


# -- regulation ---------------------------------------------------------------------


def test_zero_set_zero_state_stays_zero(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 0.0)
    sim.advance_until(2_000_000)
    assert fleet.I[0] == 0.0 and fleet.V_out[0] == 0.0


def test_step_regulation_2A_settles(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 2.0)
    lsb = c.cfg.adc.lsb
    peak = 0.0
    t_settle = None
    for k in range(1, 251):  # 5 ms
        sim.advance_until(k * TICK)
        peak = max(peak, fleet.I[0])
        if t_settle is None and abs(c.i_read - 2.0) <= lsb:
            t_settle = sim.now
    assert t_settle is not None and t_settle <= 5_000_000
    assert (peak - 2.0) / 2.0 <= 0.02  # overshoot bound
    # voltage settles to the resistive value
    assert fleet.V_out[0] == pytest.approx(1.0, abs=0.01)


def test_set_beyond_range_clamped_with_limit_bit(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 5.0)  # corrector full scale is 3 A
    sim.advance_until(40_000_000)
    assert c.status_word() & reg.STATUS_LIMIT
    assert fleet.I[0] <= 3.0 + 1e-9
    assert abs(c.i_read - 3.0) <= 2 * c.cfg.adc.lsb


def test_overcurrent_trip_latches(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 2.0)
    sim.advance_until(5_000_000)
    fleet.I[0] = 3.3  # beyond 1.05 * 3 A: a measurement the latch must catch
    sim.advance_until(5_020_000)  # one tick later
    assert fleet.fault[0]
    assert c.mode == reg.MODE_OFF
    assert c.status_word() & reg.STATUS_FAULT
    sim.advance_until(5_040_000)
    assert fleet.V_out[0] == 0.0
    # off acknowledges the latch; the PS can be turned on again
    assert c.reg_write(reg.MODE, reg.MODE_OFF) is None
    assert not fleet.fault[0]


def test_scalar_and_vector_tick_paths_agree():
    # the small-fleet loop and the vectorized loop implement the same tick
    rig_a = make_rig(seed=5)
    rig_b = make_rig(seed=5)
    _, fa, ca, _ = rig_a
    _, fb, cb, _ = rig_b
    for c in (ca, cb):
        turn_on(c, 2.0)
    for k in range(400):
        if k == 200:  # mid-run retarget, exercises the rail both ways
            ca.reg_write(reg.I_SET, reg.f32_to_word(-1.0), via_link=False)
            cb.reg_write(reg.I_SET, reg.f32_to_word(-1.0), via_link=False)
        fa._tick_scalar()
        fb._tick_vector()
        for name in ("I", "I_read", "V_out", "i_state", "ef_err", "r_est"):
            va, vb = getattr(fa, name), getattr(fb, name)
            assert float(va[0]) == pytest.approx(float(vb[0]), rel=1e-12, abs=1e-15), \
                "%s diverged at tick %d" % (name, k)


def test_fleet_plant_step_matches_scalar(rig):
    _, fleet, c, _ = rig
    params = c.ps_class.params
    rng = np.random.default_rng(4)
    for _ in range(100):
        i0 = float(rng.uniform(-3, 3))
        v = float(rng.uniform(-20, 20))
        fleet.I[0] = i0
        fleet.mode[0] = reg.MODE_ON
        # apply one pure plant update using the fleet coefficients
        i_fleet = i0 * float(fleet.phi[0]) + float(fleet.psi[0]) * v
        i_scalar = plant_step(PlantState(I=i0), params, v, 20e-6).I
        assert i_fleet == pytest.approx(i_scalar, rel=1e-12, abs=1e-15)


# -- resistance estimator -------------------------------------------------------------


def test_estimator_converges_to_ohms_law(rig):
    # the V/I samples taken during the turn-on transient wash out with the
    # 100 ms averaging constant, leaving Ohm's law at steady state
    sim, fleet, c, _ = rig
    turn_on(c, 2.0)
    sim.advance_until(1_500_000_000)
    assert reg.word_to_f32(c.reg_read(reg.R_LOAD)) == pytest.approx(0.5, abs=0.005)


def test_estimator_frozen_below_guard(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 2.0)
    sim.advance_until(1_500_000_000)
    c.reg_write(reg.I_SET, reg.f32_to_word(0.0), via_link=False)
    sim.advance_until(1_600_000_000)  # well past the decay to zero current
    r_frozen = float(fleet.r_est[0])
    sim.advance_until(2_500_000_000)
    assert float(fleet.r_est[0]) == r_frozen  # held while below the guard


def test_estimator_tracks_resistance_fault(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 2.0)
    sim.advance_until(1_500_000_000)  # settled at 0.5 ohm
    fleet.set_resistance(0, 0.4)
    sim.advance_until(2_000_000_000)  # 500 ms after the fault
    assert float(fleet.r_est[0]) == pytest.approx(0.4, abs=0.005)


def test_swap_exchanges_plants():
    sim, fleet, (c1, c2), _ = make_rig(n_ps=2)
    fleet.set_resistance(c2.idx, 0.35)
    turn_on(c1, 2.0)
    turn_on(c2, 2.0)
    sim.advance_until(1_500_000_000)
    fleet.swap_plants(c1.idx, c2.idx)
    sim.advance_until(2_200_000_000)
    assert float(fleet.r_est[c1.idx]) == pytest.approx(0.35, abs=0.005)
    assert float(fleet.r_est[c2.idx]) == pytest.approx(0.50, abs=0.005)


def test_swap_with_self_is_identity(rig):
    sim, fleet, c, _ = rig
    turn_on(c, 1.0)
    sim.advance_until(10_000_000)
    before = float(fleet.I[0])
    fleet.swap_plants(0, 0)
    assert float(fleet.I[0]) == before


def test_negative_resistance_rejected(rig):
    _, fleet, _, _ = rig
    with pytest.raises(ValueError):
        fleet.set_resistance(0, -1.0)


# -- waveforms ---------------------------------------------------------------------------


def test_waveform_validation(rig):
    _, _, c, _ = rig
    with pytest.raises(WaveformError, match="too_short"):
        c.load_waveform([1.0])
    with pytest.raises(WaveformError, match="too_long"):
        c.load_waveform(np.zeros(MAX_WAVEFORM_POINTS + 1))
    with pytest.raises(WaveformError, match="non_finite"):
        c.load_waveform([0.0, float("nan")])
    with pytest.raises(WaveformError, match="out_of_range"):
        c.load_waveform([0.0, 4.0])  # 4 A > corrector full scale
    with pytest.raises(WaveformError, match="out_of_range"):
        c.load_waveform([0.0, 2.0], scale=2.0)


def test_playback_interpolates_three_steps(rig):
    sim, fleet, c, _ = rig
    turn_on(c)
    c.load_waveform([0.0, 4.0], scale=0.5)  # effective end point 2 A
    c.reg_write(reg.TRIG_ARM, 1, via_link=False)
    assert c.fire_trigger()
    targets = []
    for k in range(1, 6):
        sim.advance_until(sim.now + TICK)
        targets.append(round(float(fleet.set_reg[0]) / 0.5, 6))
    assert targets == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert not c.waveform.running  # single pass ended on the last point
    assert not (c.status_word() & reg.STATUS_WAVEFORM_RUNNING)


def test_playback_affine_offset_scale(rig):
    sim, fleet, c, _ = rig
    turn_on(c)
    c.load_waveform([4.0, 4.0], scale=0.5, offset=1.0)
    c.reg_write(reg.TRIG_ARM, 1, via_link=False)
    c.fire_trigger()
    sim.advance_until(sim.now + TICK)
    assert float(fleet.set_reg[0]) == pytest.approx(3.0)  # 0.5*4 + 1


def test_setpoint_spacing_is_80us_and_updates_every_tick(rig):
    sim, fleet, c, _ = rig
    trace = []
    fleet.wf_trace = lambda ps, t, i: trace.append((t, i))
    turn_on(c)
    n = 50
    pts = np.linspace(0.0, 2.0, n)
    c.load_waveform(pts)
    c.reg_write(reg.TRIG_ARM, 1, via_link=False)
    c.fire_trigger()
    values = []
    start = sim.now
    for k in range(4 * (n - 1) + 1):
        sim.advance_until(start + (k + 1) * TICK)
        values.append(float(fleet.set_reg[0]))
    times = [t for t, _ in trace]
    assert all(b - a == 80_000 for a, b in zip(times, times[1:]))
    assert [i for _, i in trace] == list(range(n))
    # output moves every 20 us tick during a monotone ramp
    assert all(b > a for a, b in zip(values[:-1], values[1:]))


def test_loop_mode_wraps_with_exact_period(rig):
    sim, fleet, c, _ = rig
    trace = []
    fleet.wf_trace = lambda ps, t, i: trace.append((t, i))
    turn_on(c)
    n = 25
    pts = 1.0 + 0.5 * np.sin(2 * np.pi * np.arange(n) / n)
    c.load_waveform(pts, loop_mode="loop")
    c.reg_write(reg.TRIG_ARM, 1, via_link=False)
    c.fire_trigger()
    sim.advance_until(sim.now + 3 * n * 4 * TICK + TICK)
    zero_hits = [t for t, i in trace if i == 0]
    assert len(zero_hits) >= 3
    periods = [b - a for a, b in zip(zero_hits, zero_hits[1:])]
    assert all(p == n * 80_000 for p in periods)
    assert c.reg_read(reg.DIAG_WF_LOOPS) >= 2


def test_trigger_without_arm_ignored(rig):
    _, _, c, _ = rig
    c.load_waveform([0.0, 1.0])
    assert not c.fire_trigger()
    assert c.reg_read(reg.DIAG_TRIG_IGNORED) == 1


def test_booster_ramp_period_arithmetic():
    # 4167 points at 80 us spacing is one 3 Hz period
    assert 4167 * 80_000 == 333_360_000  # 0.33336 s
    assert 2500 * 80_000 == 200_000_000  # 5 Hz wobble


# -- diagnostic DACs ---------------------------------------------------------------------


def test_dac_identity_tap_records(rig):
    sim, fleet, c, _ = rig
    rows = []
    fleet.dac_recorder = lambda t, ps, d, v: rows.append((t, ps, d, v))
    turn_on(c, 1.0)
    assert c.assign_dac("A", reg.I_READ, offset=0.0, scale=1.0) is None
    sim.advance_until(100 * TICK)
    assert rows and rows[-1][1] == "PS1" and rows[-1][2] == "A"
    assert rows[-1][3] == pytest.approx(c.i_read, abs=1e-6)
    assert all(b[0] - a[0] == TICK for a, b in zip(rows[:-1], rows[1:]))


def test_dac_magnified_residual_view(rig):
    sim, fleet, c, _ = rig
    rows = []
    fleet.dac_recorder = lambda t, ps, d, v: rows.append(v)
    turn_on(c, 2.0)
    sim.advance_until(5_000_000)
    c.assign_dac("B", reg.I_READ, offset=-2.0 * 2**14, scale=2**14)
    rows.clear()
    sim.advance_until(10_000_000)
    # magnified view of the sub-lsb ripple around the 2 A set point
    assert rows
    assert max(abs(v) for v in rows) <= 2**14 * 2 * c.cfg.adc.lsb + 1e-3


def test_dac_rejects_non_analog_source(rig):
    _, _, c, _ = rig
    assert c.assign_dac("A", reg.STATUS, 0.0, 1.0) == NAK_NOT_ANALOG


# -- persistence ---------------------------------------------------------------------------


def test_persistent_waveform_survives_reboot(tmp_path):
    sim, fleet, c, _ = make_rig(state_dir=str(tmp_path))
    pts = [0.0, 1.0, 2.0]
    c.load_waveform(pts, loop_mode="loop", target="persistent", name="ramp-a")
    c.reboot()
    assert c.waveform is not None
    assert list(c.waveform.points) == pts
    assert c.waveform.loop
    assert c.mode == reg.MODE_OFF


def test_volatile_waveform_cleared_by_reboot(tmp_path):
    sim, fleet, c, _ = make_rig(state_dir=str(tmp_path))
    c.load_waveform([0.0, 1.0], target="volatile")
    c.reboot()
    assert c.waveform is None
