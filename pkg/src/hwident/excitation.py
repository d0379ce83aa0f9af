"""Multilevel amplitude-modulated step sequences (APRBS) for test signals.

A binary sequence only visits two amplitudes and cannot reveal the shape of
a static input nonlinearity, so every generator here uses at least three
equispaced levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .timeseries import TimeSeries

__all__ = ["ExcitationSpec", "generate_aprbs", "build_scenario_signals", "segment_levels"]


@dataclass(frozen=True)
class ExcitationSpec:
    duration: float = 30.0
    sample_time: float = 1e-3
    levels: int = 7
    bounds: tuple[float, float] = (0.9, 1.1)
    hold_range: tuple[float, float] = (0.2, 1.0)
    settle_time: float = 1.0
    seed: int = 0
    nominal: float | None = None
    name: str = "signal"

    def __post_init__(self):
        lo, hi = self.bounds
        min_hold, max_hold = self.hold_range
        if not lo < hi:
            raise ConfigError(f"bounds must satisfy min < max, got {self.bounds}")
        if self.levels < 3:
            raise ConfigError("levels must be >= 3; two-level sequences miss input nonlinearities")
        if self.sample_time <= 0:
            raise ConfigError("sample_time must be positive")
        if min_hold < 10 * self.sample_time or max_hold < min_hold:
            raise ConfigError(
                f"hold_range {self.hold_range} must satisfy 10*sample_time <= min <= max"
            )
        if self.settle_time < 0:
            raise ConfigError("settle_time must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.duration < self.settle_time + min_hold:
            raise ConfigError(
                f"duration {self.duration} s shorter than settle_time + min_hold "
                f"({self.settle_time + min_hold} s)"
            )
        if self.nominal is not None and not lo <= self.nominal <= hi:
            raise ConfigError(f"nominal {self.nominal} outside bounds {self.bounds}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.sample_time))

    @property
    def level_values(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.levels)

    @property
    def nominal_value(self) -> float:
        if self.nominal is not None:
            return float(self.nominal)
        return 0.5 * (self.bounds[0] + self.bounds[1])


def _level_sequence(rng, levels: int):
    """Uniform level draws, overridden only to keep every level inside each
    window of ``3 * levels`` consecutive segments.

    Each level carries a deadline (last use + window); a draw that would make
    the pending deadlines unmeetable is replaced by the most urgent level.
    """
    window = 3 * levels
    last = np.full(levels, -1)
    n = 0
    while True:
        pick = int(rng.integers(0, levels))
        trial = last.copy()
        trial[pick] = n
        due = np.sort(trial + window)
        # after this draw, the k-th most urgent level must fit at index n + k
        if np.any(due < n + 1 + np.arange(levels)):
            pick = int(np.argmin(last))
        last[pick] = n
        n += 1
        yield pick


def _segments(spec: ExcitationSpec):
    """Yield ``(start, stop, amplitude)`` sample ranges after the settle period."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    start = int(round(spec.settle_time / spec.sample_time))
    lo_hold = int(round(spec.hold_range[0] / spec.sample_time))
    hi_hold = int(round(spec.hold_range[1] / spec.sample_time))
    levels = spec.level_values
    picks = _level_sequence(rng, spec.levels)
    out = []
    while start < n:
        hold = int(rng.integers(lo_hold, hi_hold + 1))
        amp = levels[next(picks)]
        stop = min(n, start + hold)
        out.append((start, stop, float(amp)))
        start = stop
    return out


def segment_levels(spec: ExcitationSpec) -> np.ndarray:
    """Amplitude of every post-settle segment, in order."""
    return np.array([amp for _, _, amp in _segments(spec)])


def generate_aprbs(spec: ExcitationSpec) -> TimeSeries:
    """Piecewise-constant multilevel sequence, deterministic in ``spec.seed``."""
    x = np.full(spec.n_samples, spec.nominal_value)
    for start, stop, amp in _segments(spec):
        x[start:stop] = amp
    return TimeSeries.from_channels(spec.sample_time, {spec.name: x})


def build_scenario_signals(
    voltage_spec, frequency_spec, power_spec=None, reactive_spec=None
) -> TimeSeries:
    """Stack the ``u_ref`` / ``f_ref`` / optional ``p_load`` / ``q_load`` channels.

    ``voltage_spec`` or ``frequency_spec`` may be ``None`` to leave that
    quantity at the plant default, but at least one channel must remain.
    """
    specs = {
        "u_ref": voltage_spec,
        "f_ref": frequency_spec,
        "p_load": power_spec,
        "q_load": reactive_spec,
    }
    specs = {k: v for k, v in specs.items() if v is not None}
    if not specs:
        raise ConfigError("no excitation channel requested")
    first_name, first = next(iter(specs.items()))
    for name, spec in specs.items():
        if spec.sample_time != first.sample_time or spec.n_samples != first.n_samples:
            raise ConfigError(
                f"excitation {name!r} has sample_time/duration "
                f"({spec.sample_time}, {spec.duration}) differing from {first_name} "
                f"({first.sample_time}, {first.duration})"
            )
    channels = {name: generate_aprbs(spec).values[:, 0] for name, spec in specs.items()}
    return TimeSeries.from_channels(first.sample_time, channels)
