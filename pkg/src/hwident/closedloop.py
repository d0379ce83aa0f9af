"""Run an identified surrogate in place of the inverter inside a small grid.

The surrogate sees abc currents and returns abc voltages; a Park transform
at its own angle (integrated from its own frequency output) adapts both
sides. The network, a series R-L line to a specified-voltage source, is
integrated over each sample interval. With implicit coupling the voltage
ramps linearly to the next sample's value, solved together with the line
current; explicit coupling holds it and delays the exchange by one sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, DivergenceError
from .hwmodel import HWModelMimo
from .plant import F_NOM, GflParams, GfmParams, PlantScenario, simulate
from .timeseries import TimeSeries, abc_to_dq, dq_to_abc

__all__ = [
    "AdaptedModel",
    "MicrogridScene",
    "ComparisonResult",
    "step_adapted_model",
    "run_scene",
    "run_comparison",
    "staircase",
]

COMPARED = ("u_d", "u_q", "f")
COUPLINGS = ("implicit", "explicit")
W_BASE = 2.0 * math.pi * F_NOM


class AdaptedModel:
    """MIMO surrogate wrapped with dq<->abc adaptation.

    Inputs other than i_d/i_q that name one of the model's own outputs are
    fed back from the previous step.
    """

    def __init__(self, model: HWModelMimo, f0: float = F_NOM, theta0: float = 0.0):
        self.model = model
        self.theta = float(theta0)
        self.f_prev = float(f0)
        self._steppers = [b.stepper() for b in model.blocks]
        self._last = {b.output_name: b.output_offset for b in model.blocks}
        if "f" not in model.output_names:
            raise ConfigError("the surrogate needs an 'f' output to drive its angle")

    def advance(self, i_dq, dt, theta=None):
        """One sample with dq currents already in the surrogate frame."""
        signals = {"i_d": float(i_dq[0]), "i_q": float(i_dq[1]), **self._last}
        out = {}
        for block, st in zip(self.model.blocks, self._steppers):
            out[block.output_name] = st.step([signals[n] for n in block.input_names])
        if not all(math.isfinite(v) for v in out.values()):
            raise DivergenceError("non-finite surrogate output")
        self._last = out
        self.f_prev = out["f"]
        return out

    def peek(self, i_dq):
        """Outputs the next :meth:`advance` would give, without stepping."""
        signals = {"i_d": float(i_dq[0]), "i_q": float(i_dq[1]), **self._last}
        return {
            b.output_name: st.peek([signals[n] for n in b.input_names])
            for b, st in zip(self.model.blocks, self._steppers)
        }


def step_adapted_model(model: AdaptedModel, i_abc, dt: float, theta: float | None = None):
    """theta += 2 pi f_prev dt; i_abc -> i_dq; advance; u_dq -> u_abc.

    Returns (u_abc tuple, f). An externally supplied ``theta`` replaces the
    self-integrated angle (grid-following use).
    """
    if theta is None:
        model.theta += 2.0 * math.pi * model.f_prev * dt
    else:
        model.theta = float(theta)
    th = np.array([model.theta])
    i_d, i_q = abc_to_dq(*(np.array([float(x)]) for x in i_abc), th)
    out = model.advance((i_d[0], i_q[0]), dt)
    u = dq_to_abc(np.array([out["u_d"]]), np.array([out.get("u_q", 0.0)]), th)
    return tuple(float(x[0]) for x in u), out["f"]


def staircase(levels, hold: float, sample_time: float = 1e-3, f_ref: float = F_NOM) -> TimeSeries:
    """Specified-voltage schedule: each level held for `hold` seconds."""
    n = int(round(hold / sample_time))
    u = np.repeat(np.asarray(levels, dtype=float), n)
    return TimeSeries.from_channels(sample_time, {"u_ref": u, "f_ref": np.full(u.size, f_ref)})


@dataclass(frozen=True)
class MicrogridScene:
    """One device at the PCC, a line, and a specified-voltage source."""

    device: object  # GfmParams, GflParams or HWModelMimo
    schedule: TimeSeries  # u_ref (pu), f_ref (Hz) of the source
    R_g: float = 0.01
    L_g: float = 0.1
    grid_voltage_tau: float = 0.05
    grid_frequency_tau: float = 0.1
    preroll: float = 5.0
    solver_step: float = 1e-4
    coupling: str = "implicit"  # or "explicit": zero-order hold, one-sample delay
    label: str = ""

    def __post_init__(self):
        if not isinstance(self.device, (GfmParams, GflParams, HWModelMimo)):
            raise ConfigError("scene device must be plant parameters or an HWModelMimo")
        for ch in ("u_ref", "f_ref"):
            if ch not in self.schedule:
                raise ConfigError(f"scene schedule lacks {ch!r}")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}")
        if self.L_g <= 0 or self.solver_step <= 0:
            raise ConfigError("scene needs L_g > 0 and a positive solver step")

    @property
    def duration(self):
        return self.schedule.duration

    @property
    def sample_time(self):
        return self.schedule.sample_time


def _plant_run(scene: MicrogridScene) -> TimeSeries:
    common = dict(R_g=scene.R_g, L_g=scene.L_g, grid_voltage_tau=scene.grid_voltage_tau,
                  grid_frequency_tau=scene.grid_frequency_tau)
    prm = scene.device
    if isinstance(prm, GfmParams):
        prm = replace(prm, grid_connected=True, **common)
    else:
        prm = replace(prm, **common)
    out = simulate(PlantScenario(prm, scene.schedule, scene.solver_step, scene.preroll))
    return out.select(COMPARED)


def _network_rhs(x, u0, du, tau, w, E_ref, f_ref, scene, rates):
    """Line, source and the two unit-voltage sensitivities of the line current.

    x = (i_d, i_q, E, f_g, delta, s_dd, s_qd, s_dq, s_qq) in the surrogate
    frame, delta = grid angle - device angle. The device voltage is
    u0 + tau du over the interval (tau in [0, 1]); s_*j is the line current
    produced by a unit ramp on voltage axis j, so the end-of-interval current
    is affine in the end-of-interval voltage.
    """
    L, R = scene.L_g, scene.R_g
    E_now = x[2] if rates[0] > 0 else E_ref
    f_now = x[3] if rates[1] > 0 else f_ref
    e_d, e_q = E_now * math.cos(x[4]), E_now * math.sin(x[4])
    wl = w / W_BASE * L
    k = W_BASE / L
    u_d = u0[0] + tau * du[0]
    u_q = u0[1] + tau * du[1]
    return np.array([
        k * (u_d - R * x[0] + wl * x[1] - e_d),
        k * (u_q - R * x[1] - wl * x[0] - e_q),
        rates[0] * (E_ref - x[2]),
        rates[1] * (f_ref - x[3]),
        2.0 * math.pi * f_now - w,
        k * (tau - R * x[5] + wl * x[6]),
        k * (-R * x[6] - wl * x[5]),
        k * (-R * x[7] + wl * x[8]),
        k * (tau - R * x[8] - wl * x[7]),
    ])


def _integrate(x, u0, du, w, E_ref, f_ref, scene, rates, sub):
    h = 1.0 / sub
    dt = scene.sample_time
    y = np.concatenate([x[:5], np.zeros(4)])
    for m in range(sub):
        t0 = m * h
        k1 = _network_rhs(y, u0, du, t0, w, E_ref, f_ref, scene, rates)
        k2 = _network_rhs(y + 0.5 * h * dt * k1, u0, du, t0 + 0.5 * h, w, E_ref, f_ref, scene, rates)
        k3 = _network_rhs(y + 0.5 * h * dt * k2, u0, du, t0 + 0.5 * h, w, E_ref, f_ref, scene, rates)
        k4 = _network_rhs(y + h * dt * k3, u0, du, t0 + h, w, E_ref, f_ref, scene, rates)
        y = y + h * dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y[:5], y[5:].reshape(2, 2, order="F")


def _initial_network(model: HWModelMimo, scene: MicrogridScene, f0: float):
    """Line state at the surrogate's own operating point.

    The surrogate's offsets are the first samples of its estimation record,
    which starts in equilibrium, so the line current starts there and the
    source phasor is solved from the line equation.
    """
    offsets = {}
    for b in model.blocks:
        offsets.update(zip(b.input_names, b.input_offsets))
    i0 = complex(offsets.get("i_d", 0.0), offsets.get("i_q", 0.0))
    u0 = complex(model["u_d"].output_offset, model["u_q"].output_offset if "u_q" in model.output_names else 0.0)
    e0 = u0 - complex(scene.R_g, scene.L_g * f0 / F_NOM) * i0
    return np.array([i0.real, i0.imag, abs(e0), f0, math.atan2(e0.imag, e0.real)])


def _voltage(out):
    return np.array([out["u_d"], out.get("u_q", 0.0)])


def _solve_end_current(adapted, base, S, u0, tol=1e-10, max_iter=20):
    """Newton on i = base + S (u(i) - u0), u(i) the surrogate's next output."""
    i = base.copy()
    for _ in range(max_iter):
        u = _voltage(adapted.peek(i))
        r = i - base - S @ (u - u0)
        if np.max(np.abs(r)) < tol:
            return i
        J = np.empty((2, 2))
        for j in range(2):
            d = 1e-7 * max(1.0, abs(i[j]))
            ip = i.copy()
            ip[j] += d
            J[:, j] = (_voltage(adapted.peek(ip)) - u) / d
        try:
            i = i - np.linalg.solve(np.eye(2) - S @ J, r)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(i)):
            break
    raise DivergenceError("implicit coupling did not converge")


def _surrogate_run(scene: MicrogridScene) -> TimeSeries:
    model = scene.device
    dt = scene.sample_time
    sub = int(round(dt / scene.solver_step))
    if sub < 1 or not math.isclose(sub * scene.solver_step, dt, rel_tol=1e-9):
        raise ConfigError("sample_time must be an integer multiple of solver_step")
    rates = (
        1.0 / scene.grid_voltage_tau if scene.grid_voltage_tau > 0 else 0.0,
        1.0 / scene.grid_frequency_tau if scene.grid_frequency_tau > 0 else 0.0,
    )
    u_sched = scene.schedule["u_ref"]
    f_sched = scene.schedule["f_ref"]
    n_pre = int(round(scene.preroll / dt))
    n = len(scene.schedule)
    adapted = AdaptedModel(model, f0=f_sched[0])
    implicit = scene.coupling == "implicit"
    x = _initial_network(model, scene, f_sched[0])

    def exchange(i_dq):
        # the current reaches the surrogate through the abc interface
        th = adapted.theta + 2.0 * math.pi * adapted.f_prev * dt
        i_abc = dq_to_abc(np.array([i_dq[0]]), np.array([i_dq[1]]), np.array([th]))
        u_abc, f = step_adapted_model(adapted, [c[0] for c in i_abc], dt)
        ud, uq = abc_to_dq(*(np.array([v]) for v in u_abc), np.array([adapted.theta]))
        return np.array([ud[0], uq[0]]), f

    u, f = exchange(x[:2])
    rec = np.empty((n, 3))
    for k in range(n_pre + n):
        j = max(0, k - n_pre)
        if k >= n_pre:
            rec[j] = (u[0], u[1], f)
        w = 2.0 * math.pi * f
        if implicit:
            # first-order hold: the voltage ramps to the next sample's value,
            # which itself depends on the end-of-interval current
            base, S = _integrate(x, u, np.zeros(2), w, u_sched[j], f_sched[j], scene, rates, sub)
            i_end = _solve_end_current(adapted, base[:2], S, u)
            u_next, f_next = exchange(i_end)
            x = base
            x[:2] = base[:2] + S @ (u_next - u)
        else:
            x, _ = _integrate(x, u, np.zeros(2), w, u_sched[j], f_sched[j], scene, rates, sub)
            u_next, f_next = exchange(x[:2])
        if not np.all(np.isfinite(x)) or np.max(np.abs(x[:2])) > 100.0:
            raise DivergenceError("surrogate scene diverged", time=(k - n_pre) * dt)
        u, f = u_next, f_next
    return TimeSeries.from_channels(dt, dict(zip(COMPARED, rec.T)))


def run_scene(scene: MicrogridScene) -> TimeSeries:
    """u_d, u_q, f of the scene's device over the schedule horizon."""
    if isinstance(scene.device, HWModelMimo):
        return _surrogate_run(scene)
    return _plant_run(scene)


@dataclass
class ComparisonResult:
    series: TimeSeries  # <ch>_reference, <ch>_surrogate for ch in u_d, u_q, f
    max_abs: dict
    rms: dict
    stable: bool
    notes: list = field(default_factory=list)

    def summary(self):
        return {
            "max_abs_deviation": {k: float(v) for k, v in self.max_abs.items()},
            "rms_deviation": {k: float(v) for k, v in self.rms.items()},
            "stable": self.stable,
        }


def _bounded(series: TimeSeries) -> bool:
    u_ok = np.all(np.abs(series["u_d"]) < 2.0) and np.all(np.abs(series["u_q"]) < 2.0)
    f_ok = np.all(np.abs(series["f"] - F_NOM) < 5.0)
    return bool(u_ok and f_ok)


def run_comparison(reference: MicrogridScene, surrogate: MicrogridScene) -> ComparisonResult:
    """Run both scenes and report per-channel deviations."""
    a, b = reference.schedule, surrogate.schedule
    if a.sample_time != b.sample_time or len(a) != len(b):
        raise ConfigError("scene horizons or sample times differ")
    runs = {}
    for slot, scene in (("reference", reference), ("surrogate", surrogate)):
        try:
            runs[slot] = run_scene(scene)
        except DivergenceError as exc:
            err = DivergenceError(f"{slot} run diverged: {exc}")
            err.time = exc.time
            raise err from None
    ref, sur = runs["reference"], runs["surrogate"]
    cols, max_abs, rms = {}, {}, {}
    for ch in COMPARED:
        d = sur[ch] - ref[ch]
        cols[f"{ch}_reference"] = ref[ch]
        cols[f"{ch}_surrogate"] = sur[ch]
        max_abs[ch] = float(np.max(np.abs(d)))
        rms[ch] = float(np.sqrt(np.mean(d * d)))
    series = TimeSeries.from_channels(a.sample_time, cols)
    return ComparisonResult(series, max_abs, rms, _bounded(ref) and _bounded(sur))
