"""
Two-area load-frequency control plant
=====================================

Per-unit model of two interconnected control areas. Each area has a swing
equation, a first-order governor lag with droop feedback, a first-order
turbine lag, and an integral AGC loop acting on the area control error:

    dΔf_1/dt   = (ΔP_m1 - ΔP_L1 - D_1 Δf_1 - ΔP_tie) / (2 H_1)
    dΔf_2/dt   = (ΔP_m2 - ΔP_L2 - D_2 Δf_2 + ΔP_tie) / (2 H_2)
    dΔP_tie/dt = T_12 (Δf_1 - Δf_2)
    dΔP_g,i/dt = (ΔP_ref,i - db(Δf_i) / R_i - ΔP_g,i) / T_g,i
    dΔP_m,i/dt = grc((ΔP_g,i - ΔP_m,i) / T_t,i)
    dΔP_ref,i/dt = -K_i ACE_i(t - delay)

    ACE_1 = B_1 Δf_1 + ΔP_tie,   ACE_2 = B_2 Δf_2 - ΔP_tie

ΔP_tie > 0 means power flowing from area 1 to area 2. The AGC loop sees the
*measured* frequencies and tie-line flow, which a measurement hook may corrupt;
the governors sense their local shaft speed directly.

The deadband ``db`` and the generation rate constraint ``grc`` are memoryless
and are only active in nonlinear mode, together with the (optional) transport
delay on the ACE signal.

Integration is classical RK4 at a fixed internal step; samples are recorded on
a coarser grid. Additive-ramp hooks and the identity hook run through a
numba kernel; arbitrary Python hooks fall back to a slower reference loop
built on :func:`derivatives`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Union

import numba
import numpy as np

SIGNALS = ("delta_f1", "delta_f2", "delta_p_tie")
STATE_NAMES = ("df1", "df2", "p_tie", "pg1", "pg2", "pm1", "pm2", "pref1", "pref2")
N_STATES = len(STATE_NAMES)


class InvalidStateError(ValueError):
    pass


class SimulationDivergedError(RuntimeError):
    """Raised when the trajectory leaves the finite floats."""

    def __init__(self, step: int, time: float):
        super().__init__(f"non-finite state after internal step {step} (t = {time:.4f} s)")
        self.step = step
        self.time = time


@dataclass(frozen=True)
class AreaParams:
    inertia_H: float
    damping_D: float
    bias_B: float
    governor_Tg: float
    turbine_Tt: float
    droop_R: float
    agc_gain_Ki: float

    def __post_init__(self):
        if not (self.inertia_H > 0 and self.governor_Tg > 0 and self.turbine_Tt > 0):
            raise ValueError("inertia and time constants must be positive")
        if not self.droop_R > 0:
            raise ValueError("droop_R must be positive")
        if self.damping_D < 0 or self.agc_gain_Ki < 0:
            raise ValueError("damping_D and agc_gain_Ki must be non-negative")


@dataclass(frozen=True)
class SystemParams:
    area1: AreaParams
    area2: AreaParams
    tie_sync_T12: float = 2.0
    deadband_width: float = 0.0006
    grc_limit: float = 3.0 / 60.0
    ace_delay: float = 0.0
    nonlinear_mode: bool = False

    def __post_init__(self):
        if not self.tie_sync_T12 > 0:
            raise ValueError("tie_sync_T12 must be positive")
        if self.deadband_width < 0:
            raise ValueError("deadband_width must be non-negative")
        if not self.grc_limit > 0:
            raise ValueError("grc_limit must be positive")
        if self.ace_delay < 0:
            raise ValueError("ace_delay must be non-negative")

    def with_agc_gain(self, ki: float) -> "SystemParams":
        return replace(
            self,
            area1=replace(self.area1, agc_gain_Ki=ki),
            area2=replace(self.area2, agc_gain_Ki=ki),
        )

    def to_dict(self) -> dict:
        return {
            "area1": vars(self.area1).copy(),
            "area2": vars(self.area2).copy(),
            "tie_sync_T12": self.tie_sync_T12,
            "deadband_width": self.deadband_width,
            "grc_limit": self.grc_limit,
            "ace_delay": self.ace_delay,
            "nonlinear_mode": self.nonlinear_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemParams":
        d = dict(d)
        return cls(area1=AreaParams(**d.pop("area1")), area2=AreaParams(**d.pop("area2")), **d)


def default_system(nonlinear_mode: bool = False, **overrides) -> SystemParams:
    """Parameter set of the reference two-area system (per-unit frequency)."""
    area1 = AreaParams(
        inertia_H=5.0, damping_D=0.6, bias_B=20.6, governor_Tg=0.2,
        turbine_Tt=0.5, droop_R=0.05, agc_gain_Ki=0.3,
    )
    area2 = AreaParams(
        inertia_H=4.0, damping_D=0.3, bias_B=16.3, governor_Tg=0.3,
        turbine_Tt=0.6, droop_R=0.0625, agc_gain_Ki=0.3,
    )
    # the tabulated bias equals D + 1/R only for per-unit frequency
    for a in (area1, area2):
        assert math.isclose(a.damping_D + 1.0 / a.droop_R, a.bias_B, rel_tol=1e-12), a
    return SystemParams(area1=area1, area2=area2, nonlinear_mode=nonlinear_mode, **overrides)


@dataclass(frozen=True)
class DisturbanceSpec:
    area: int
    magnitude: float
    start_time: float

    def __post_init__(self):
        if self.area not in (1, 2):
            raise ValueError(f"disturbance area must be 1 or 2, got {self.area}")
        if not math.isfinite(self.magnitude):
            raise ValueError("disturbance magnitude must be finite")
        if not 0.0 <= self.start_time <= 30.0:
            raise ValueError("disturbance start_time must lie in [0, 30] s")


@dataclass(frozen=True)
class ScenarioConfig:
    system: SystemParams
    disturbance: DisturbanceSpec
    process_noise_std: float = 1e-6
    measurement_noise_std: float = 1e-6
    window: float = 60.0
    record_dt: float = 0.3
    internal_dt: float = 0.01
    seed: int = 0

    def __post_init__(self):
        ratio = Fraction(str(self.record_dt)) / Fraction(str(self.internal_dt))
        if ratio.denominator != 1 or ratio < 1:
            raise ValueError("record_dt must be an integer multiple of internal_dt")
        n = Fraction(str(self.window)) / Fraction(str(self.record_dt))
        if n.denominator != 1 or n < 2:
            raise ValueError("window must be an integer multiple of record_dt")
        if self.process_noise_std < 0 or self.measurement_noise_std < 0:
            raise ValueError("noise std must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_points(self) -> int:
        return int(Fraction(str(self.window)) / Fraction(str(self.record_dt)))

    @property
    def steps_per_record(self) -> int:
        return int(Fraction(str(self.record_dt)) / Fraction(str(self.internal_dt)))

    def record_times(self) -> np.ndarray:
        r = Fraction(str(self.record_dt))
        return np.array([k * r.numerator / r.denominator for k in range(self.n_points)])

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "disturbance": vars(self.disturbance).copy(),
            "process_noise_std": self.process_noise_std,
            "measurement_noise_std": self.measurement_noise_std,
            "window": self.window,
            "record_dt": self.record_dt,
            "internal_dt": self.internal_dt,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        return cls(
            system=SystemParams.from_dict(d.pop("system")),
            disturbance=DisturbanceSpec(**d.pop("disturbance")),
            **d,
        )


@dataclass
class SignalTrace:
    """Recorded (possibly corrupted) measurements on the sampling grid."""

    t: np.ndarray
    delta_f1: np.ndarray
    delta_f2: np.ndarray
    delta_p_tie: np.ndarray
    ace1: np.ndarray
    ace2: np.ndarray
    # true plant states at the recording instants, shape (n, 9)
    states: Optional[np.ndarray] = field(default=None, repr=False)
    # mechanical power at every internal step, shape (n_steps + 1, 2)
    pm_internal: Optional[np.ndarray] = field(default=None, repr=False)

    def signal(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def stacked(self) -> np.ndarray:
        return np.vstack([self.delta_f1, self.delta_f2, self.delta_p_tie])


@dataclass(frozen=True)
class AdditiveRamp:
    """Measurement hook adding ``scale * ramp(v_start -> v_end)`` to one signal from ``t_start``.

    The kernel fast path recognises this hook; calling it directly gives the
    same corruption for the Python reference loop.
    """

    signal: str
    t_start: float
    t_end: float
    v_start: float
    v_end: float
    scale: float = 1.0

    def injection(self, t: float) -> float:
        if t < self.t_start:
            return 0.0
        frac = (t - self.t_start) / (self.t_end - self.t_start)
        return self.scale * (self.v_start + (self.v_end - self.v_start) * frac)

    @property
    def breakpoints(self) -> tuple:
        return (self.t_start,)

    def __call__(self, signal: str, value: float, t: float) -> float:
        if signal != self.signal:
            return value
        return value + self.injection(t)


MeasurementHook = Callable[[str, float, float], float]


def identity_hook(signal: str, value: float, t: float) -> float:
    return value


def apply_deadband(freq_error: float, width: float) -> float:
    """Offset dead zone with total band ``width``."""
    h = width / 2.0
    if freq_error > h:
        return freq_error - h
    if freq_error < -h:
        return freq_error + h
    return 0.0


def clamp_grc(turbine_rate: float, limit: float) -> float:
    return min(max(turbine_rate, -limit), limit)


def ace_values(params: SystemParams, df1, df2, p_tie):
    """Area control errors from (measured) frequencies and tie-line flow."""
    return params.area1.bias_B * df1 + p_tie, params.area2.bias_B * df2 - p_tie


def derivatives(state, params: SystemParams, load, corrupted_measurements=None, ace=None) -> np.ndarray:
    """Time derivative of the 9-element plant state.

    ``load`` holds the per-area load deviations. ``corrupted_measurements`` are
    the (Δf1, Δf2, ΔP_tie) values seen by the AGC loop; ``None`` means the
    true state. ``ace`` overrides the ACE pair fed to the integrators (used
    for the delayed path).
    """
    x = np.asarray(state, dtype=float)
    if x.shape != (N_STATES,) or not np.all(np.isfinite(x)):
        raise InvalidStateError(f"state must be 9 finite values, got {state!r}")
    df1, df2, pt, pg1, pg2, pm1, pm2, pr1, pr2 = x
    a1, a2 = params.area1, params.area2
    if ace is None:
        meas = x[:3] if corrupted_measurements is None else corrupted_measurements
        ace = ace_values(params, meas[0], meas[1], meas[2])

    if params.nonlinear_mode:
        g1 = apply_deadband(df1, params.deadband_width)
        g2 = apply_deadband(df2, params.deadband_width)
    else:
        g1, g2 = df1, df2
    r1 = (pg1 - pm1) / a1.turbine_Tt
    r2 = (pg2 - pm2) / a2.turbine_Tt
    if params.nonlinear_mode:
        r1 = clamp_grc(r1, params.grc_limit)
        r2 = clamp_grc(r2, params.grc_limit)

    return np.array([
        (pm1 - load[0] - a1.damping_D * df1 - pt) / (2.0 * a1.inertia_H),
        (pm2 - load[1] - a2.damping_D * df2 + pt) / (2.0 * a2.inertia_H),
        params.tie_sync_T12 * (df1 - df2),
        (pr1 - g1 / a1.droop_R - pg1) / a1.governor_Tg,
        (pr2 - g2 / a2.droop_R - pg2) / a2.governor_Tg,
        r1,
        r2,
        -a1.agc_gain_Ki * ace[0],
        -a2.agc_gain_Ki * ace[1],
    ])


# --------------------------------------------------------------------------
# numba fast path
# --------------------------------------------------------------------------

# packed parameter layout for the kernel
_P_LEN = 18


def _pack(params: SystemParams) -> np.ndarray:
    a1, a2 = params.area1, params.area2
    return np.array([
        a1.inertia_H, a1.damping_D, a1.governor_Tg, a1.turbine_Tt, a1.droop_R, a1.agc_gain_Ki, a1.bias_B,
        a2.inertia_H, a2.damping_D, a2.governor_Tg, a2.turbine_Tt, a2.droop_R, a2.agc_gain_Ki, a2.bias_B,
        params.tie_sync_T12, params.deadband_width, params.grc_limit,
        1.0 if params.nonlinear_mode else 0.0,
    ])


@numba.njit(cache=True)
def _injection(t, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale):
    if t < atk_t0:
        return 0.0
    frac = (t - atk_t0) / (atk_t1 - atk_t0)
    return atk_scale * (atk_v0 + (atk_v1 - atk_v0) * frac)


@numba.njit(cache=True)
def _deadband(x, width):
    h = width / 2.0
    if x > h:
        return x - h
    if x < -h:
        return x + h
    return 0.0


@numba.njit(cache=True)
def _kernel_deriv(x, out, p, load1, load2, ace1, ace2):
    nonlinear = p[17] > 0.5
    if nonlinear:
        g1 = _deadband(x[0], p[15])
        g2 = _deadband(x[1], p[15])
    else:
        g1 = x[0]
        g2 = x[1]
    r1 = (x[3] - x[5]) / p[3]
    r2 = (x[4] - x[6]) / p[10]
    if nonlinear:
        lim = p[16]
        r1 = min(max(r1, -lim), lim)
        r2 = min(max(r2, -lim), lim)
    out[0] = (x[5] - load1 - p[1] * x[0] - x[2]) / (2.0 * p[0])
    out[1] = (x[6] - load2 - p[8] * x[1] + x[2]) / (2.0 * p[7])
    out[2] = p[14] * (x[0] - x[1])
    out[3] = (x[7] - g1 / p[4] - x[3]) / p[2]
    out[4] = (x[8] - g2 / p[11] - x[4]) / p[9]
    out[5] = r1
    out[6] = r2
    out[7] = -p[5] * ace1
    out[8] = -p[12] * ace2


@numba.njit(cache=True)
def _stage(x, out, t, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
           delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale):
    load1 = pnoise[k_rec, 0]
    load2 = pnoise[k_rec, 1]
    if t >= dist_t0:
        if dist_area == 1:
            load1 = load1 + dist_mag
        else:
            load2 = load2 + dist_mag
    if delayed:
        ace1 = ace1_d
        ace2 = ace2_d
    else:
        m0 = x[0]
        m1 = x[1]
        m2 = x[2]
        if atk_sig >= 0:
            inj = _injection(t, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
            if atk_sig == 0:
                m0 = m0 + inj
            elif atk_sig == 1:
                m1 = m1 + inj
            else:
                m2 = m2 + inj
        ace1 = p[6] * m0 + m2
        ace2 = p[13] * m1 - m2
    _kernel_deriv(x, out, p, load1, load2, ace1, ace2)


@numba.njit(cache=True)
def _rk4_sub(x, xs, k1, k2, k3, k4, ta, tm, tb, h, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
             delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale):
    """One classical RK4 step of length ``h``; stages are evaluated at ``ta``, ``tm``, ``tm``, ``tb``."""
    _stage(x, k1, ta, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
           delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
    for j in range(9):
        xs[j] = x[j] + 0.5 * h * k1[j]
    _stage(xs, k2, tm, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
           delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
    for j in range(9):
        xs[j] = x[j] + 0.5 * h * k2[j]
    _stage(xs, k3, tm, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
           delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
    for j in range(9):
        xs[j] = x[j] + h * k3[j]
    _stage(xs, k4, tb, k_rec, p, dist_area, dist_mag, dist_t0, pnoise,
           delayed, ace1_d, ace2_d, atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
    for j in range(9):
        x[j] = x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])


@numba.njit(cache=True)
def _simulate_kernel(p, dist_area, dist_mag, dist_t0, pnoise, dt_num, dt_den,
                     steps_per_record, n_rec, delay_steps,
                     atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale):
    n_steps = (n_rec - 1) * steps_per_record
    dt = dt_num / dt_den
    rec = np.zeros((n_rec, 9))
    meas = np.zeros((n_rec, 3))
    pm_hist = np.zeros((n_steps + 1, 2))
    ace_hist = np.zeros((n_steps + 1, 2))
    x = np.zeros(9)
    xs = np.zeros(9)
    k1 = np.zeros(9)
    k2 = np.zeros(9)
    k3 = np.zeros(9)
    k4 = np.zeros(9)
    delayed = delay_steps > 0
    # input discontinuities: load step and attack onset
    bp0 = dist_t0
    bp1 = atk_t0 if atk_sig >= 0 else np.inf
    if bp1 < bp0:
        bp0, bp1 = bp1, bp0
    for n in range(n_steps + 1):
        t = (n * dt_num) / dt_den
        inj = 0.0
        if atk_sig >= 0:
            inj = _injection(t, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
        m0 = x[0] + (inj if atk_sig == 0 else 0.0)
        m1 = x[1] + (inj if atk_sig == 1 else 0.0)
        m2 = x[2] + (inj if atk_sig == 2 else 0.0)
        ace_hist[n, 0] = p[6] * m0 + m2
        ace_hist[n, 1] = p[13] * m1 - m2
        pm_hist[n, 0] = x[5]
        pm_hist[n, 1] = x[6]
        if n % steps_per_record == 0:
            k = n // steps_per_record
            for j in range(9):
                rec[k, j] = x[j]
            meas[k, 0] = m0
            meas[k, 1] = m1
            meas[k, 2] = m2
        if n == n_steps:
            break

        k_rec = n // steps_per_record
        ace1_d = 0.0
        ace2_d = 0.0
        if delayed and n - delay_steps >= 0:
            ace1_d = ace_hist[n - delay_steps, 0]
            ace2_d = ace_hist[n - delay_steps, 1]
        t_next = ((n + 1) * dt_num) / dt_den
        if (t < bp0 < t_next) or (t < bp1 < t_next):
            # split the step at interior discontinuities
            ta = t
            for bp in (bp0, bp1):
                if ta < bp < t_next:
                    h = bp - ta
                    _rk4_sub(x, xs, k1, k2, k3, k4, ta, ta + 0.5 * h, np.nextafter(bp, -np.inf), h,
                             k_rec, p, dist_area, dist_mag, dist_t0, pnoise, delayed, ace1_d, ace2_d,
                             atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
                    ta = bp
            h = t_next - ta
            tb = t_next
            if t_next == bp0 or t_next == bp1:
                tb = np.nextafter(t_next, -np.inf)
            _rk4_sub(x, xs, k1, k2, k3, k4, ta, ta + 0.5 * h, tb, h,
                     k_rec, p, dist_area, dist_mag, dist_t0, pnoise, delayed, ace1_d, ace2_d,
                     atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
        else:
            t_half = ((2 * n + 1) * dt_num) / (2.0 * dt_den)
            tb = t_next
            if t_next == bp0 or t_next == bp1:
                # a discontinuity on the grid takes effect from the next step
                tb = np.nextafter(t_next, -np.inf)
            _rk4_sub(x, xs, k1, k2, k3, k4, t, t_half, tb, dt,
                     k_rec, p, dist_area, dist_mag, dist_t0, pnoise, delayed, ace1_d, ace2_d,
                     atk_sig, atk_t0, atk_t1, atk_v0, atk_v1, atk_scale)
        ok = True
        for j in range(9):
            if not np.isfinite(x[j]):
                ok = False
        if not ok:
            return rec, meas, pm_hist, n + 1
    return rec, meas, pm_hist, -1


def _noise(scenario: ScenarioConfig):
    """Process noise (held per recording interval, per area) and measurement noise."""
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n_points
    pnoise = rng.normal(0.0, 1.0, size=(n, 2)) * scenario.process_noise_std
    mnoise = rng.normal(0.0, 1.0, size=(n, 3)) * scenario.measurement_noise_std
    return pnoise, mnoise


def _delay_steps(scenario: ScenarioConfig) -> int:
    if not scenario.system.nonlinear_mode or scenario.system.ace_delay == 0:
        return 0
    return int(round(scenario.system.ace_delay / scenario.internal_dt))


def simulate(scenario: ScenarioConfig, hook: Union[MeasurementHook, None] = None) -> SignalTrace:
    """Integrate one scenario and record the (possibly corrupted) measurements.

    ``hook`` maps ``(signal, true value, t)`` to the value seen by both the AGC
    loop and the recorder. ``None`` is the identity.
    """
    pnoise, mnoise = _noise(scenario)
    if hook is None or hook is identity_hook or isinstance(hook, AdditiveRamp):
        rec, meas, pm_hist = _run_kernel(scenario, pnoise, hook)
    else:
        rec, meas, pm_hist = _run_python(scenario, pnoise, hook)

    meas = meas + mnoise
    params = scenario.system
    ace1, ace2 = ace_values(params, meas[:, 0], meas[:, 1], meas[:, 2])
    return SignalTrace(
        t=scenario.record_times(),
        delta_f1=meas[:, 0].copy(),
        delta_f2=meas[:, 1].copy(),
        delta_p_tie=meas[:, 2].copy(),
        ace1=ace1,
        ace2=ace2,
        states=rec,
        pm_internal=pm_hist,
    )


def _run_kernel(scenario: ScenarioConfig, pnoise, hook):
    dt = Fraction(str(scenario.internal_dt))
    d = scenario.disturbance
    if isinstance(hook, AdditiveRamp):
        atk = (SIGNALS.index(hook.signal), hook.t_start, hook.t_end, hook.v_start, hook.v_end, hook.scale)
    else:
        atk = (-1, 0.0, 1.0, 0.0, 0.0, 0.0)
    rec, meas, pm_hist, bad = _simulate_kernel(
        _pack(scenario.system), d.area, float(d.magnitude), float(d.start_time), pnoise,
        float(dt.numerator), float(dt.denominator), scenario.steps_per_record, scenario.n_points,
        _delay_steps(scenario), *atk,
    )
    if bad >= 0:
        raise SimulationDivergedError(bad, bad * scenario.internal_dt)
    return rec, meas, pm_hist


def _run_python(scenario: ScenarioConfig, pnoise, hook: MeasurementHook):
    """Reference RK4 loop for arbitrary hooks (slow, used for cross-checks)."""
    params = scenario.system
    dt = Fraction(str(scenario.internal_dt))
    num, den = dt.numerator, dt.denominator
    h = num / den
    spr = scenario.steps_per_record
    n_rec = scenario.n_points
    n_steps = (n_rec - 1) * spr
    delay = _delay_steps(scenario)
    d = scenario.disturbance
    # input discontinuities; hooks may declare theirs via ``breakpoints``
    bps = sorted({float(d.start_time), *(float(b) for b in getattr(hook, "breakpoints", ()))})

    def measured(x, t):
        return [hook(s, float(x[j]), t) for j, s in enumerate(SIGNALS)]

    def load_at(t, k):
        load = [pnoise[k, 0], pnoise[k, 1]]
        if t >= d.start_time:
            load[d.area - 1] += d.magnitude
        return load

    def f(x, t, k, ace_d):
        if ace_d is not None:
            return derivatives(x, params, load_at(t, k), ace=ace_d)
        return derivatives(x, params, load_at(t, k), measured(x, t))

    rec = np.zeros((n_rec, N_STATES))
    meas = np.zeros((n_rec, 3))
    pm_hist = np.zeros((n_steps + 1, 2))
    ace_hist = np.zeros((n_steps + 1, 2))
    x = np.zeros(N_STATES)
    for n in range(n_steps + 1):
        t = n * num / den
        m = measured(x, t)
        ace_hist[n] = ace_values(params, *m)
        pm_hist[n] = x[5:7]
        if n % spr == 0:
            rec[n // spr] = x
            meas[n // spr] = m
        if n == n_steps:
            break
        k = n // spr
        ace_d = None
        if delay > 0:
            ace_d = ace_hist[n - delay] if n - delay >= 0 else (0.0, 0.0)
        t_next = (n + 1) * num / den

        def sub(x, ta, tm, tb, hh):
            k1 = f(x, ta, k, ace_d)
            k2 = f(x + 0.5 * hh * k1, tm, k, ace_d)
            k3 = f(x + 0.5 * hh * k2, tm, k, ace_d)
            k4 = f(x + hh * k3, tb, k, ace_d)
            return x + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        end_t = np.nextafter(t_next, -np.inf) if t_next in bps else t_next
        inner = [b for b in bps if t < b < t_next]
        if inner:
            ta = t
            for b in inner:
                x = sub(x, ta, ta + 0.5 * (b - ta), np.nextafter(b, -np.inf), b - ta)
                ta = b
            x = sub(x, ta, ta + 0.5 * (t_next - ta), end_t, t_next - ta)
        else:
            x = sub(x, t, (2 * n + 1) * num / (2.0 * den), end_t, h)
        if not np.all(np.isfinite(x)):
            raise SimulationDivergedError(n + 1, t_next)
    return rec, meas, pm_hist
