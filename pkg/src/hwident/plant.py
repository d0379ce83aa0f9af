"""Average-value reference inverters used as black boxes.

Both models live in the dq frame of the converter's own angle (droop angle
for the grid-forming unit, PLL angle for the grid-following unit) and are
integrated with fixed-step RK4 while the excitation is held constant over
each sample interval. Only the terminal record leaves this module.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numba
import numpy as np

from .exceptions import ConfigError, DataError, DivergenceError, LockError
from .timeseries import TimeSeries, dq_to_abc

__all__ = [
    "GfmParams",
    "GflParams",
    "PlantScenario",
    "integrate",
    "simulate_gfm",
    "simulate_gfl",
    "simulate",
    "add_measurement_noise",
    "TERMINAL_CHANNELS",
]

F_NOM = 50.0
OMEGA_B = 2.0 * math.pi * F_NOM
DIVERGENCE_LIMIT = 100.0
TERMINAL_CHANNELS = ("i_d", "i_q", "u_d", "u_q", "f")
EXCITATION_CHANNELS = ("u_ref", "f_ref", "p_load", "q_load")


def integrate(rhs, x0, step, t_end, t0=0.0):
    """Classical fixed-step RK4 for ``dx/dt = rhs(t, x)``.

    Returns ``(t, X)`` with ``X[k]`` the state at ``t[k]``. The last step is
    shortened so the trajectory ends exactly at ``t_end``.
    """
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step!r}")
    x = np.array(x0, dtype=float, ndmin=1)
    n = int(math.ceil((t_end - t0) / step - 1e-9))
    ts = [t0]
    xs = [x.copy()]
    t = t0
    for _ in range(n):
        h = min(step, t_end - t)
        k1 = np.asarray(rhs(t, x), dtype=float)
        k2 = np.asarray(rhs(t + h / 2, x + h / 2 * k1), dtype=float)
        k3 = np.asarray(rhs(t + h / 2, x + h / 2 * k2), dtype=float)
        k4 = np.asarray(rhs(t + h, x + h * k3), dtype=float)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state", time=t)
        ts.append(t)
        xs.append(x.copy())
    return np.array(ts), np.array(xs)


@dataclass(frozen=True)
class GfmParams:
    v_set: float = 1.0
    f_set: float = F_NOM
    m_p: float = 0.2  # Hz / pu active power
    n_q: float = 0.05  # pu voltage / pu reactive power
    power_filter_hz: float = 5.0
    L_f: float = 0.08
    C_f: float = 0.074
    R_f: float = 0.005
    k_pv: float = 0.5
    k_iv: float = 100.0
    k_pc: float = 0.64  # ~400 Hz current loop
    k_ic: float = 80.0
    current_feedforward: float = 0.9
    load_g: float = 0.0  # local load conductance (pu)
    load_b: float = 0.0  # local load inductive susceptance (pu)
    meas_filter_hz: float = 100.0  # dq measurement (anti-aliasing) filter
    grid_connected: bool = False
    grid_voltage: float = 1.0
    grid_frequency: float = F_NOM
    R_g: float = 0.01
    L_g: float = 0.1
    grid_frequency_tau: float = 0.1
    grid_voltage_tau: float = 0.05

    def __post_init__(self):
        if self.grid_frequency_tau < 0 or self.grid_voltage_tau < 0:
            raise ConfigError("grid time constants must be >= 0")
        gains = (self.m_p, self.n_q, self.k_pv, self.k_iv, self.k_pc, self.k_ic)
        if min(gains) < 0:
            raise ConfigError("GFM gains must be non-negative")
        if self.L_f <= 0 or self.C_f <= 0 or self.m_p <= 0:
            raise ConfigError("GFM requires L_f, C_f, m_p > 0")
        if self.grid_connected and self.L_g <= 0:
            raise ConfigError("grid connection requires L_g > 0")


@dataclass(frozen=True)
class GflParams:
    grid_voltage: float = 1.0
    grid_frequency: float = F_NOM
    R_g: float = 0.01
    L_g: float = 0.05
    L_f: float = 0.08
    C_f: float = 0.074
    R_f: float = 0.005
    r_active_damping: float = 1.0  # capacitor-current feedback (pu)
    k_p_pll: float = 177.7  # ~20 Hz PLL
    k_i_pll: float = 15791.0
    k_pc: float = 0.64
    k_ic: float = 80.0
    i_d_ref: float = 0.5
    i_q_ref: float = 0.0
    f_droop: float = 0.5  # pu current / Hz (frequency-watt support)
    v_droop: float = 1.0  # pu current / pu voltage (volt-var support)
    freq_filter_hz: float = 10.0  # PLL frequency estimate filter (feeds the droop)
    meas_filter_hz: float = 100.0  # dq measurement (anti-aliasing) filter
    # grid source time constants; a real grid's frequency cannot jump
    grid_frequency_tau: float = 0.1
    grid_voltage_tau: float = 0.05

    def __post_init__(self):
        if self.grid_frequency_tau < 0 or self.grid_voltage_tau < 0:
            raise ConfigError("grid time constants must be >= 0")
        if self.k_p_pll <= 0 or self.k_i_pll <= 0:
            raise ConfigError("PLL gains must be positive")
        if self.L_g <= 0 or self.L_f <= 0 or self.C_f <= 0:
            raise ConfigError("GFL requires L_g, L_f, C_f > 0")
        if min(self.k_pc, self.k_ic, self.f_droop, self.v_droop) < 0:
            raise ConfigError("GFL gains must be non-negative")


@dataclass(frozen=True)
class PlantScenario:
    """Plant parameters plus the excitation that drives them.

    Excitation channels: ``u_ref`` and ``f_ref`` set the grid source (or the
    GFM setpoints when islanded); ``p_load`` sets the GFM load conductance or
    the GFL active current reference; ``q_load`` sets the GFM inductive load
    susceptance.
    """

    params: GfmParams | GflParams
    excitation: TimeSeries
    solver_step: float = 1e-4
    preroll: float = 5.0

    def __post_init__(self):
        dt = self.excitation.sample_time
        if not 0 < self.solver_step <= dt * (1 + 1e-12):
            raise ConfigError("solver step must not exceed the excitation sample time")
        ratio = dt / self.solver_step
        if abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError("excitation sample time must be a multiple of the solver step")
        unknown = set(self.excitation.names) - set(EXCITATION_CHANNELS)
        if unknown:
            raise ConfigError(f"unknown excitation channels {sorted(unknown)}")

    @property
    def substeps(self) -> int:
        return int(round(self.excitation.sample_time / self.solver_step))

    @property
    def duration(self) -> float:
        return self.excitation.duration


# ---------------------------------------------------------------------------
# numba kernels. Parameter vectors are packed by _gfm_vector/_gfl_vector; the
# input row is (u_ref, f_ref, p_load, q_load).


@numba.njit(cache=True)
def _gfm_terminal(x, u, p):
    v_set, f_set, m_p, n_q = p[0], p[1], p[2], p[3]
    grid = p[15]
    g = u[2]
    load_b = u[3]
    vd, vq = x[2], x[3]
    iod = g * vd + load_b * vq
    ioq = g * vq - load_b * vd
    if grid > 0.5:
        iod += x[10]
        ioq += x[11]
    f = f_set - m_p * x[8]
    return iod, ioq, f


@numba.njit(cache=True)
def _gfm_rhs(x, u, p):
    v_set, f_set, m_p, n_q, w_c = p[0], p[1], p[2], p[3], p[4]
    L_f, C_f, R_f = p[5], p[6], p[7]
    k_pv, k_iv, k_pc, k_ic = p[8], p[9], p[10], p[11]
    R_g, L_g = p[12], p[13]
    grid = p[15]
    islanded_setpoints = grid < 0.5
    if islanded_setpoints:
        v_set = u[0]
        f_set = u[1]
    wb = 2.0 * np.pi * 50.0
    iLd, iLq, vd, vq = x[0], x[1], x[2], x[3]
    phid, phiq, gamd, gamq = x[4], x[5], x[6], x[7]
    Pf, Qf = x[8], x[9]
    iod, ioq, _ = _gfm_terminal(x, u, p)
    f = f_set - m_p * Pf
    w = f / 50.0
    P = vd * iod + vq * ioq
    Q = vq * iod - vd * ioq
    v_ref = v_set - n_q * Qf
    evd = v_ref - vd
    evq = -vq
    ff = p[16]
    iLd_ref = k_pv * evd + k_iv * phid + ff * iod - w * C_f * vq
    iLq_ref = k_pv * evq + k_iv * phiq + ff * ioq + w * C_f * vd
    eid = iLd_ref - iLd
    eiq = iLq_ref - iLq
    vid = k_pc * eid + k_ic * gamd - w * L_f * iLq + vd
    viq = k_pc * eiq + k_ic * gamq + w * L_f * iLd + vq
    dx = np.zeros(20)
    dx[0] = wb / L_f * (vid - R_f * iLd + w * L_f * iLq - vd)
    dx[1] = wb / L_f * (viq - R_f * iLq - w * L_f * iLd - vq)
    dx[2] = wb / C_f * (iLd - iod + w * C_f * vq)
    dx[3] = wb / C_f * (iLq - ioq - w * C_f * vd)
    dx[4] = evd
    dx[5] = evq
    dx[6] = eid
    dx[7] = eiq
    dx[8] = w_c * (P - Pf)
    dx[9] = w_c * (Q - Qf)
    if grid > 0.5:
        delta = x[18]
        E_g = x[16] if p[19] > 0.0 else u[0]
        f_g = x[17] if p[18] > 0.0 else u[1]
        egd = E_g * np.cos(delta)
        egq = E_g * np.sin(delta)
        igd, igq = x[10], x[11]
        dx[10] = wb / L_g * (vd - R_g * igd + w * L_g * igq - egd)
        dx[11] = wb / L_g * (vq - R_g * igq - w * L_g * igd - egq)
        dx[16] = p[19] * (u[0] - x[16])
        dx[17] = p[18] * (u[1] - x[17])
        dx[18] = 2.0 * np.pi * (f_g - f)
    w_m = p[17]
    dx[12] = w_m * (iod - x[12])
    dx[13] = w_m * (ioq - x[13])
    dx[14] = w_m * (vd - x[14])
    dx[15] = w_m * (vq - x[15])
    dx[19] = 2.0 * np.pi * f
    return dx


@numba.njit(cache=True)
def _gfm_outputs(x, u, p):
    f = p[1] - p[2] * x[8]
    if p[15] < 0.5:
        f = u[1] - p[2] * x[8]
    return x[12], x[13], x[14], x[15], f


@numba.njit(cache=True)
def _gfl_refs(x, p):
    k_p_pll = p[6]
    i_d0, i_q0, f_droop, v_droop = p[10], p[11], p[12], p[13]
    vd, vq = x[2], x[3]
    w_pll = 2.0 * np.pi * 50.0 + k_p_pll * vq + x[8]
    f = w_pll / (2.0 * np.pi)
    vmag = np.sqrt(vd * vd + vq * vq)
    id_ref = i_d0 - f_droop * (x[9] - 50.0)
    iq_ref = i_q0 + v_droop * (vmag - 1.0)
    return id_ref, iq_ref, f


@numba.njit(cache=True)
def _gfl_rhs(x, u, p):
    R_g, L_g, L_f, C_f, R_f = p[0], p[1], p[2], p[3], p[4]
    k_i_pll = p[7]
    k_pc, k_ic = p[8], p[9]
    wb = 2.0 * np.pi * 50.0
    iLd, iLq, vd, vq, igd, igq = x[0], x[1], x[2], x[3], x[4], x[5]
    gamd, gamq, delta = x[6], x[7], x[16]
    # grid source: first-order magnitude/frequency dynamics (rate 0 = ideal)
    E_g = x[14] if p[17] > 0.0 else u[0]
    f_g = x[15] if p[16] > 0.0 else u[1]
    id_ref, iq_ref, f = _gfl_refs(x, p)
    if u[2] == u[2]:
        id_ref += u[2] - p[10]
    w = f / 50.0
    iLd_ref = id_ref - w * C_f * vq
    iLq_ref = iq_ref + w * C_f * vd
    eid = iLd_ref - iLd
    eiq = iLq_ref - iLq
    r_ad = p[5]
    vid = k_pc * eid + k_ic * gamd - w * L_f * iLq + vd - r_ad * (iLd - igd)
    viq = k_pc * eiq + k_ic * gamq + w * L_f * iLd + vq - r_ad * (iLq - igq)
    egd = E_g * np.cos(delta)
    egq = E_g * np.sin(delta)
    dx = np.zeros(18)
    dx[0] = wb / L_f * (vid - R_f * iLd + w * L_f * iLq - vd)
    dx[1] = wb / L_f * (viq - R_f * iLq - w * L_f * iLd - vq)
    dx[2] = wb / C_f * (iLd - igd + w * C_f * vq)
    dx[3] = wb / C_f * (iLq - igq - w * C_f * vd)
    dx[4] = wb / L_g * (vd - R_g * igd + w * L_g * igq - egd)
    dx[5] = wb / L_g * (vq - R_g * igq - w * L_g * igd - egq)
    dx[6] = eid
    dx[7] = eiq
    dx[8] = k_i_pll * vq
    dx[9] = p[14] * (f - x[9])
    w_m = p[15]
    dx[10] = w_m * (igd - x[10])
    dx[11] = w_m * (igq - x[11])
    dx[12] = w_m * (vd - x[12])
    dx[13] = w_m * (vq - x[13])
    dx[14] = p[17] * (u[0] - x[14])
    dx[15] = p[16] * (u[1] - x[15])
    dx[16] = 2.0 * np.pi * (f_g - f)
    dx[17] = 2.0 * np.pi * f
    return dx


@numba.njit(cache=True)
def _gfl_outputs(x, u, p):
    return x[10], x[11], x[12], x[13], x[9]


@numba.njit(cache=True)
def _rk4_hold(rhs, x0, inputs, p, h, substeps, n_angles):
    """Integrate with each input row held for ``substeps`` RK4 steps.

    Returns the states at every sample instant and the index of the first
    divergent sample (-1 when bounded). The last ``n_angles`` states are
    excluded from the divergence check.
    """
    n = inputs.shape[0]
    nx = x0.size
    out = np.empty((n, nx))
    x = x0.copy()
    for k in range(n):
        out[k] = x
        for i in range(nx - n_angles):
            if not abs(x[i]) <= 100.0:
                return out, k
        u = inputs[k]
        for _ in range(substeps):
            k1 = rhs(x, u, p)
            k2 = rhs(x + 0.5 * h * k1, u, p)
            k3 = rhs(x + 0.5 * h * k2, u, p)
            k4 = rhs(x + h * k3, u, p)
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out, -1


def _gfm_vector(prm: GfmParams) -> np.ndarray:
    return np.array(
        [
            prm.v_set, prm.f_set, prm.m_p, prm.n_q, 2 * math.pi * prm.power_filter_hz,
            prm.L_f, prm.C_f, prm.R_f, prm.k_pv, prm.k_iv, prm.k_pc, prm.k_ic,
            prm.R_g, prm.L_g, 0.0, 1.0 if prm.grid_connected else 0.0,
            prm.current_feedforward, 2 * math.pi * prm.meas_filter_hz,
            _rate(prm.grid_frequency_tau), _rate(prm.grid_voltage_tau),
        ]
    )


def _rate(tau):
    return 1.0 / tau if tau > 0 else 0.0


def _gfl_vector(prm: GflParams) -> np.ndarray:
    return np.array(
        [
            prm.R_g, prm.L_g, prm.L_f, prm.C_f, prm.R_f, prm.r_active_damping,
            prm.k_p_pll, prm.k_i_pll, prm.k_pc, prm.k_ic,
            prm.i_d_ref, prm.i_q_ref, prm.f_droop, prm.v_droop,
            2 * math.pi * prm.freq_filter_hz, 2 * math.pi * prm.meas_filter_hz,
            _rate(prm.grid_frequency_tau), _rate(prm.grid_voltage_tau),
        ]
    )


def _input_matrix(scenario: PlantScenario, defaults) -> np.ndarray:
    exc = scenario.excitation
    cols = []
    for name, default in zip(EXCITATION_CHANNELS, defaults):
        cols.append(exc[name] if name in exc else np.full(len(exc), default))
    return np.column_stack(cols)


def _run(rhs, outputs, x0, inputs, pvec, scenario, n_angles):
    dt = scenario.excitation.sample_time
    h = scenario.solver_step
    sub = scenario.substeps
    n_pre = int(round(scenario.preroll / dt))
    if n_pre:
        pre_inputs = np.repeat(inputs[:1], n_pre, axis=0)
        pre, bad = _rk4_hold(rhs, x0, pre_inputs, pvec, h, sub, n_angles)
        if bad >= 0:
            raise DivergenceError("state divergence during pre-roll", time=(bad - n_pre) * dt)
        x0 = pre[-1].copy()
        # one more held interval to land on the record start
        last, _ = _rk4_hold(rhs, x0, pre_inputs[:2], pvec, h, sub, n_angles)
        x0 = last[1].copy()
    x0[-1] = 0.0  # absolute angle restarts at the record origin
    states, bad = _rk4_hold(rhs, x0, inputs, pvec, h, sub, n_angles)
    if bad >= 0:
        raise DivergenceError("state divergence (|x| > 100 pu)", time=bad * dt)
    if not np.all(np.isfinite(states)):
        raise DivergenceError("non-finite state")
    n = states.shape[0]
    term = np.empty((n, 5))
    for k in range(n):
        term[k] = outputs(states[k], inputs[k], pvec)
    return states, term


def _terminal_series(dt, term, theta) -> TimeSeries:
    i_d, i_q, u_d, u_q, f = term.T
    i_a, i_b, i_c = dq_to_abc(i_d, i_q, theta)
    u_a, u_b, u_c = dq_to_abc(u_d, u_q, theta)
    return TimeSeries.from_channels(
        dt,
        {
            "i_d": i_d, "i_q": i_q, "u_d": u_d, "u_q": u_q, "f": f,
            "i_a": i_a, "i_b": i_b, "i_c": i_c,
            "u_a": u_a, "u_b": u_b, "u_c": u_c,
            "theta": theta,
        },
    )


def simulate_gfm(scenario: PlantScenario) -> TimeSeries:
    """Terminal record of the droop-controlled grid-forming inverter."""
    prm = scenario.params
    if not isinstance(prm, GfmParams):
        raise ConfigError("simulate_gfm needs GfmParams")
    defaults = (
        prm.grid_voltage if prm.grid_connected else prm.v_set,
        prm.grid_frequency if prm.grid_connected else prm.f_set,
        prm.load_g,
        prm.load_b,
    )
    inputs = _input_matrix(scenario, defaults)
    pvec = _gfm_vector(prm)
    x0 = np.zeros(20)
    x0[2] = prm.v_set
    x0[14] = prm.v_set
    x0[16] = inputs[0, 0]
    x0[17] = inputs[0, 1]
    states, term = _run(_gfm_rhs, _gfm_outputs, x0, inputs, pvec, scenario, n_angles=2)
    return _terminal_series(scenario.excitation.sample_time, term, states[:, -1])


def simulate_gfl(scenario: PlantScenario) -> TimeSeries:
    """Terminal record of the PLL-synchronised current-controlled inverter."""
    prm = scenario.params
    if not isinstance(prm, GflParams):
        raise ConfigError("simulate_gfl needs GflParams")
    defaults = (prm.grid_voltage, prm.grid_frequency, math.nan, 0.0)
    inputs = _input_matrix(scenario, defaults)
    pvec = _gfl_vector(prm)
    x0 = np.zeros(18)
    x0[2] = inputs[0, 0]
    x0[9] = F_NOM
    x0[12] = inputs[0, 0]
    x0[14] = inputs[0, 0]
    x0[15] = inputs[0, 1]
    dt = scenario.excitation.sample_time
    lock_n = int(round(max(scenario.preroll, 2.0) / dt))
    lock_inputs = np.repeat(inputs[:1], lock_n, axis=0)
    lock_states, bad = _rk4_hold(
        _gfl_rhs, x0, lock_inputs, pvec, scenario.solver_step, scenario.substeps, 2
    )
    if bad >= 0 or abs(lock_states[-1, 3]) >= 0.05:
        raise LockError("PLL did not lock within the pre-roll at constant grid")
    states, term = _run(_gfl_rhs, _gfl_outputs, x0, inputs, pvec, scenario, n_angles=2)
    return _terminal_series(dt, term, states[:, -1])


def simulate(scenario: PlantScenario) -> TimeSeries:
    if isinstance(scenario.params, GfmParams):
        return simulate_gfm(scenario)
    return simulate_gfl(scenario)


def add_measurement_noise(series: TimeSeries, channels, ratio: float, seed: int) -> TimeSeries:
    """Add white Gaussian noise with std ``ratio * std(channel)`` to ``channels``."""
    if ratio < 0:
        raise ConfigError("noise ratio must be non-negative")
    if ratio == 0:
        return series
    rng = np.random.default_rng(seed)
    noisy = {}
    for name in channels:
        x = series[name]
        noisy[name] = x + ratio * np.std(x) * rng.standard_normal(x.size)
    return series.with_channels(**noisy)


def params_to_dict(params) -> dict:
    d = asdict(params)
    d["kind"] = "gfm" if isinstance(params, GfmParams) else "gfl"
    return d


def params_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "gfm")
    cls = {"gfm": GfmParams, "gfl": GflParams}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown plant kind {kind!r}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
