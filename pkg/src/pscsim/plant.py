"""Magnet load model: R-L circuit, operating-quadrant limits, ADC quantization.

The plant is advanced with the exact solution of L dI/dt = V - R*I for a
voltage held constant over the step, so any step size is stable and the
result is oracle-checkable against fine-step integration:

    I' = I * exp(-R*dt/L) + (V/R) * (1 - exp(-R*dt/L))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

ADC_BITS = 17  # effective resolution, plus sign
ADC_STEPS = 1 << ADC_BITS


@dataclass
class PlantParams:
    """Electrical ratings of one power-supply class.

    quadrants: 1 = unipolar current and voltage, 2 = unipolar current with
    bipolar voltage, 4 = fully bipolar.
    """

    R: float  # ohm
    L: float  # henry
    I_max: float  # ampere, full scale
    V_max: float  # volt, ceiling
    quadrants: int = 4
    class_name: str = ""

    def __post_init__(self):
        if not (self.R > 0 and self.L > 0 and self.I_max > 0 and self.V_max > 0):
            raise ValueError("R, L, I_max, V_max must all be positive")
        if self.quadrants not in (1, 2, 4):
            raise ValueError("quadrants must be 1, 2 or 4")

    @property
    def v_min(self) -> float:
        return 0.0 if self.quadrants == 1 else -self.V_max

    @property
    def i_min(self) -> float:
        return 0.0 if self.quadrants in (1, 2) else -self.I_max


@dataclass
class PlantState:
    I: float = 0.0  # ampere
    V_applied: float = 0.0  # volt


@dataclass
class AdcModel:
    """Current-measurement path: 17 bit plus sign over the class full scale."""

    i_max: float
    noise_sigma: float = 0.0

    @property
    def lsb(self) -> float:
        return self.i_max / ADC_STEPS


def round_half_away(x: float) -> float:
    """Round to nearest integer, ties away from zero (the global rule here)."""
    return math.floor(abs(x) + 0.5) * (1.0 if x >= 0 else -1.0)


def clamp_voltage(V: float, params: PlantParams) -> float:
    """Clip a voltage command to the class ceiling and quadrant rules."""
    return min(max(V, params.v_min), params.V_max)


def plant_step(state: PlantState, params: PlantParams, V: float, dt: float) -> PlantState:
    """Advance the load by dt seconds under constant applied voltage V.

    V is expected to be pre-clamped (clamp_voltage); unipolar-current
    classes additionally pin the current at zero, which is where a real
    converter's freewheeling path stops.
    """
    if not (math.isfinite(V) and math.isfinite(dt) and math.isfinite(state.I)):
        raise ValueError("non-finite plant input")
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = math.exp(-params.R * dt / params.L)
    i_new = state.I * a + (V / params.R) * (1.0 - a)
    if params.quadrants in (1, 2) and i_new < 0.0:
        i_new = 0.0
    return PlantState(I=i_new, V_applied=V)


def measure_current(I: float, adc: AdcModel, rng=None) -> float:
    """ADC reading of the magnet current.

    Gaussian noise (if configured) enters the analog signal before the
    quantizer, as it does in the hardware; the reading is then a multiple
    of the lsb, saturated at full scale.
    """
    x = I
    if adc.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noisy measurement needs the simulator generator")
        x += adc.noise_sigma * float(rng.standard_normal())
    lsb = adc.lsb
    q = round_half_away(x / lsb) * lsb
    return min(max(q, -adc.i_max), adc.i_max)


# Default class table.  The corrector / storage-ring / booster ratings are
# the fleet endpoints; R, L and the loop bandwidth f_c are scenario defaults
# and every value can be overridden per scenario or per instance.
@dataclass
class PsClass:
    params: PlantParams
    f_c: float  # target closed-loop bandwidth, Hz
    noise_sigma: float = 0.0
    ramp_rate: float = 10.0  # A/s, slow-cycle rate
    hysteresis_tracked: bool = False
    compare_tol_ppm: float = 100.0

    def with_overrides(self, **kw) -> "PsClass":
        plant_keys = {k: kw.pop(k) for k in ("R", "L", "I_max", "V_max", "quadrants") if k in kw}
        c = replace(self, **kw) if kw else replace(self)
        if plant_keys:
            c = replace(c, params=replace(self.params, **plant_keys))
        return c


DEFAULT_CLASSES = {
    "corrector": PsClass(
        params=PlantParams(R=0.5, L=0.010, I_max=3.0, V_max=20.0, quadrants=4,
                           class_name="corrector"),
        f_c=1000.0,
        ramp_rate=3.0,
    ),
    "sr-quadrupole": PsClass(
        params=PlantParams(R=0.25, L=0.060, I_max=120.0, V_max=80.0, quadrants=1,
                           class_name="sr-quadrupole"),
        f_c=500.0,
        ramp_rate=10.0,
        hysteresis_tracked=True,
    ),
    "sr-sextupole": PsClass(
        params=PlantParams(R=0.5, L=0.050, I_max=150.0, V_max=120.0, quadrants=1,
                           class_name="sr-sextupole"),
        f_c=500.0,
        ramp_rate=12.0,
        hysteresis_tracked=True,
    ),
    "booster-bend": PsClass(
        params=PlantParams(R=0.08, L=0.120, I_max=950.0, V_max=1000.0, quadrants=2,
                           class_name="booster-bend"),
        f_c=300.0,
        ramp_rate=100.0,
        hysteresis_tracked=True,
    ),
}
