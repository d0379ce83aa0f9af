"""Sampled multichannel signals, Park transforms and CSV persistence."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_write_text
from .exceptions import DataError

__all__ = [
    "TimeSeries",
    "angle_from_frequency",
    "abc_to_dq",
    "dq_to_abc",
    "read_csv",
    "write_csv",
]

_TWO_PI_3 = 2.0 * math.pi / 3.0


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled record of named channels.

    ``values`` has shape ``(N, n_channels)`` and is stored read-only.
    """

    sample_time: float
    names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.sample_time) and self.sample_time > 0):
            raise DataError(f"sample_time must be positive, got {self.sample_time!r}")
        names = tuple(str(n) for n in self.names)
        if any(not n for n in names):
            raise DataError("channel names must be non-empty")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate channel names in {names}")
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1 and len(names) == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[1] != len(names):
            raise DataError(
                f"values of shape {values.shape} do not match {len(names)} channel names"
            )
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite sample in channel {names[bad[1]]!r} at index {bad[0]}")
        values.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "sample_time", float(self.sample_time))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_channels(cls, sample_time: float, channels: Mapping[str, Sequence[float]]):
        """Build a series from a ``{name: samples}`` mapping (insertion order kept)."""
        names = list(channels)
        if not names:
            raise DataError("at least one channel is required")
        arrays = [np.asarray(channels[n], dtype=float).ravel() for n in names]
        lengths = {a.size for a in arrays}
        if len(lengths) != 1:
            raise DataError(f"channels have unequal lengths {sorted(lengths)}")
        return cls(sample_time, tuple(names), np.column_stack(arrays))

    def __len__(self):
        return self.values.shape[0]

    def __contains__(self, name):
        return name in self.names

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"no channel named {name!r}; have {list(self.names)}") from None

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) * self.sample_time

    @property
    def duration(self) -> float:
        return len(self) * self.sample_time

    def select(self, names: Iterable[str]) -> "TimeSeries":
        names = list(names)
        return TimeSeries.from_channels(self.sample_time, {n: self[n] for n in names})

    def with_channels(self, **channels) -> "TimeSeries":
        """Return a copy with channels added or replaced."""
        merged = self.to_dict()
        for name, samples in channels.items():
            merged[name] = np.asarray(samples, dtype=float)
        return TimeSeries.from_channels(self.sample_time, merged)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {n: self.values[:, i].copy() for i, n in enumerate(self.names)}

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Columns for ``names`` as an ``(N, len(names))`` array."""
        return np.column_stack([self[n] for n in names]) if names else np.empty((len(self), 0))

    def slice(self, start: int, stop: int | None = None) -> "TimeSeries":
        return TimeSeries(self.sample_time, self.names, self.values[start:stop])

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.sample_time == other.sample_time
            and self.names == other.names
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    __hash__ = None


def _as_channel(x, name) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def angle_from_frequency(f, sample_time: float, theta0: float = 0.0) -> np.ndarray:
    """Integrate a frequency channel (Hz) into an unwrapped angle (rad).

    Backward rectangular rule: ``theta[k] = theta[k-1] + 2*pi*f[k]*dt``.
    """
    f = _as_channel(f, "frequency")
    if not np.all(np.isfinite(f)):
        raise DataError(f"non-finite frequency sample at index {int(np.argmin(np.isfinite(f)))}")
    if not sample_time > 0:
        raise DataError(f"sample_time must be positive, got {sample_time!r}")
    theta = np.empty_like(f)
    if f.size == 0:
        return theta
    theta[0] = theta0
    theta[1:] = theta0 + np.cumsum(2.0 * math.pi * sample_time * f[1:])
    return theta


def _check_lengths(*channels):
    lengths = {c.shape[0] for c in channels}
    if len(lengths) != 1:
        raise DataError(f"channel length mismatch: {sorted(lengths)}")


def abc_to_dq(a, b, c, theta):
    """Amplitude-invariant Park transform aligned on the phase-a cosine."""
    a, b, c, theta = (_as_channel(x, n) for x, n in zip((a, b, c, theta), "abct"))
    _check_lengths(a, b, c, theta)
    d = (2.0 / 3.0) * (
        a * np.cos(theta) + b * np.cos(theta - _TWO_PI_3) + c * np.cos(theta + _TWO_PI_3)
    )
    q = -(2.0 / 3.0) * (
        a * np.sin(theta) + b * np.sin(theta - _TWO_PI_3) + c * np.sin(theta + _TWO_PI_3)
    )
    return d, q


def dq_to_abc(d, q, theta):
    """Inverse of :func:`abc_to_dq` for balanced (zero-sequence free) signals."""
    d, q, theta = (_as_channel(x, n) for x, n in zip((d, q, theta), "dqt"))
    _check_lengths(d, q, theta)
    a = d * np.cos(theta) - q * np.sin(theta)
    b = d * np.cos(theta - _TWO_PI_3) - q * np.sin(theta - _TWO_PI_3)
    c = d * np.cos(theta + _TWO_PI_3) - q * np.sin(theta + _TWO_PI_3)
    return a, b, c


def write_csv(series: TimeSeries, path) -> None:
    """Write ``t,<names...>`` with 17 significant digits, atomically."""
    path = os.fspath(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", *series.names])
    t = series.time
    for k in range(len(series)):
        writer.writerow([repr(float(t[k]))] + [repr(float(v)) for v in series.values[k]])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> TimeSeries:
    """Parse a file written by :func:`write_csv` (or any uniform-time CSV)."""
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError("need a time column and at least one channel", line=1)
    width = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise DataError(f"expected {width} cells, found {len(row)}", line=lineno)
        try:
            data.append([float(cell) for cell in row])
        except ValueError as exc:
            raise DataError(f"non-numeric cell ({exc})", line=lineno) from None
    if len(data) < 2:
        raise DataError("need at least two samples to infer the sample time", line=len(rows))
    arr = np.asarray(data)
    t = arr[:, 0]
    dt = t[1] - t[0]
    if not dt > 0:
        raise DataError("time column must be increasing", line=3)
    expected = t[0] + dt * np.arange(len(t))
    dev = np.abs(t - expected)
    bad = np.nonzero(dev > 1e-9 * dt + 1e-12 * np.abs(expected))[0]
    if bad.size:
        raise DataError("non-uniform time column", line=int(bad[0]) + 2)
    return TimeSeries(float(dt), tuple(header[1:]), arr[:, 1:])
