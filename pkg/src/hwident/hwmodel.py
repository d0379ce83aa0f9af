"""Hammerstein-Wiener blocks: MISO composition, MIMO stacking, simulation.

A MISO block maps inputs u_i to one output y through

    z_i = (u_i - mu_i) / s_i          input normalization
    w_i = f_i(z_i)                    static input nonlinearity
    x   = sum_i B_i(q) q^-nk / F(q) w_i
    y   = mu_y + s_y * h(x)           static output nonlinearity, de-normalized

The normalization offsets default to the first sample of the estimation
record, so zero initial filter states are consistent with data that starts
in steady state.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from ._io import atomic_write_json
from .exceptions import ConfigError, DataError
from .nonlinearity import Identity, Nonlinearity, nonlinearity_from_dict
from .timeseries import TimeSeries

__all__ = [
    "LinearBlock",
    "HWModelMiso",
    "HWModelMimo",
    "MisoStepper",
    "simulate_hw",
    "simulate_mimo",
    "save_model",
    "load_model",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LinearBlock:
    """Per-input numerators over one shared monic denominator."""

    numerators: np.ndarray  # (n_inputs, n_b)
    denominator: np.ndarray  # (n_f + 1,), leading 1
    delay: int = 0
    sample_time: float = 1.0

    def __post_init__(self):
        num = np.atleast_2d(np.array(self.numerators, dtype=float))
        den = np.atleast_1d(np.array(self.denominator, dtype=float))
        if num.shape[1] < 1:
            raise ConfigError("n_b must be >= 1")
        if den[0] != 1.0:
            raise ConfigError("denominator must be monic")
        if self.delay < 0:
            raise ConfigError("delay must be >= 0")
        num.setflags(write=False)
        den.setflags(write=False)
        object.__setattr__(self, "numerators", num)
        object.__setattr__(self, "denominator", den)
        object.__setattr__(self, "delay", int(self.delay))

    @property
    def n_inputs(self):
        return self.numerators.shape[0]

    @property
    def n_b(self):
        return self.numerators.shape[1]

    @property
    def n_f(self):
        return self.denominator.size - 1

    @property
    def params(self):
        return np.concatenate([self.numerators.ravel(), self.denominator[1:]])

    @property
    def n_params(self):
        return self.numerators.size + self.n_f

    def with_params(self, p):
        p = np.asarray(p, dtype=float)
        k = self.numerators.size
        return replace(
            self,
            numerators=p[:k].reshape(self.numerators.shape),
            denominator=np.concatenate([[1.0], p[k:]]),
        )

    def padded_numerator(self, i):
        return np.concatenate([np.zeros(self.delay), self.numerators[i]])

    def is_stable(self):
        if self.n_f == 0:
            return True
        return bool(np.all(np.abs(np.roots(self.denominator)) < 1.0 - 1e-9))

    def poles_in_region(self, min_real=None):
        """Stable, and every pole has real part >= ``min_real`` (None: no bound)."""
        if not self.is_stable():
            return False
        if min_real is None or self.n_f == 0:
            return True
        return bool(np.all(np.roots(self.denominator).real >= min_real - 1e-12))

    def filter(self, W):
        """Response to normalized inputs W (N, n_inputs), zero initial state."""
        v = np.zeros(W.shape[0])
        for i in range(self.n_inputs):
            v += lfilter(self.padded_numerator(i), [1.0], W[:, i])
        return lfilter([1.0], self.denominator, v)

    def __eq__(self, other):
        return (
            isinstance(other, LinearBlock)
            and self.delay == other.delay
            and self.sample_time == other.sample_time
            and np.array_equal(self.numerators, other.numerators)
            and np.array_equal(self.denominator, other.denominator)
        )

    __hash__ = None

    def to_dict(self):
        return {
            "numerators": self.numerators.tolist(),
            "denominator": self.denominator.tolist(),
            "delay": self.delay,
            "sample_time": self.sample_time,
        }


def _as_tuple_of_floats(x, n, default):
    if x is None:
        return (default,) * n
    x = tuple(float(v) for v in x)
    if len(x) != n:
        raise ConfigError(f"expected {n} normalization entries, got {len(x)}")
    return x


@dataclass(frozen=True, eq=False)
class HWModelMiso:
    input_names: tuple
    output_name: str
    input_nonlinearities: tuple
    linear: LinearBlock
    output_nonlinearity: Nonlinearity = field(default_factory=Identity)
    input_offsets: tuple | None = None
    input_scales: tuple | None = None
    output_offset: float = 0.0
    output_scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        names = tuple(self.input_names)
        nls = tuple(self.input_nonlinearities)
        n = len(names)
        if n == 0 or len(nls) != n or self.linear.n_inputs != n:
            raise ConfigError(
                f"{n} inputs need {n} input nonlinearities and {n} numerators, "
                f"got {len(nls)} and {self.linear.n_inputs}"
            )
        object.__setattr__(self, "input_names", names)
        object.__setattr__(self, "input_nonlinearities", nls)
        object.__setattr__(self, "input_offsets", _as_tuple_of_floats(self.input_offsets, n, 0.0))
        object.__setattr__(self, "input_scales", _as_tuple_of_floats(self.input_scales, n, 1.0))
        if any(s == 0 for s in self.input_scales) or self.output_scale == 0:
            raise ConfigError("normalization scales must be nonzero")

    # parameter vector: [alpha_1 | ... | alpha_n | linear | beta]

    @property
    def theta(self) -> np.ndarray:
        parts = [nl.params for nl in self.input_nonlinearities]
        parts += [self.linear.params, self.output_nonlinearity.params]
        return np.concatenate(parts)

    @property
    def n_p(self) -> int:
        return (
            sum(nl.n_params for nl in self.input_nonlinearities)
            + self.linear.n_params
            + self.output_nonlinearity.n_params
        )

    def _splits(self):
        sizes = [nl.n_params for nl in self.input_nonlinearities]
        sizes += [self.linear.n_params, self.output_nonlinearity.n_params]
        return np.cumsum(sizes)[:-1]

    def with_theta(self, theta) -> "HWModelMiso":
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_p:
            raise ConfigError(f"theta has {theta.size} entries, model needs {self.n_p}")
        parts = np.split(theta, self._splits())
        n = len(self.input_names)
        return replace(
            self,
            input_nonlinearities=tuple(
                nl.with_params(p) for nl, p in zip(self.input_nonlinearities, parts[:n])
            ),
            linear=self.linear.with_params(parts[n]),
            output_nonlinearity=self.output_nonlinearity.with_params(parts[n + 1]),
        )

    def with_metadata(self, **kw) -> "HWModelMiso":
        return replace(self, metadata={**self.metadata, **kw})

    def is_valid(self) -> bool:
        return (
            all(nl.is_valid() for nl in self.input_nonlinearities)
            and self.output_nonlinearity.is_valid()
            and bool(np.all(np.isfinite(self.linear.params)))
            and self.linear.is_stable()
        )

    def input_matrix(self, inputs) -> np.ndarray:
        if isinstance(inputs, TimeSeries):
            missing = [n for n in self.input_names if n not in inputs]
            if missing:
                raise DataError(f"input channels missing for {self.output_name}: {missing}")
            return inputs.matrix(self.input_names)
        U = np.asarray(inputs, dtype=float)
        if U.ndim == 1 and len(self.input_names) == 1:
            U = U[:, None]
        if U.ndim != 2 or U.shape[1] != len(self.input_names):
            raise DataError(f"expected {len(self.input_names)} input columns, got shape {U.shape}")
        return U

    def normalized_inputs(self, U):
        return (U - np.asarray(self.input_offsets)) / np.asarray(self.input_scales)

    def forward(self, inputs):
        """Intermediate signals (z, w, x, y) for the given inputs."""
        U = self.input_matrix(inputs)
        Z = self.normalized_inputs(U)
        W = np.column_stack([nl(Z[:, i]) for i, nl in enumerate(self.input_nonlinearities)])
        x = self.linear.filter(W)
        y = self.output_offset + self.output_scale * self.output_nonlinearity(x)
        return Z, W, x, y

    def simulate(self, inputs) -> np.ndarray:
        return self.forward(inputs)[3]

    def output_jacobian(self, inputs) -> np.ndarray:
        """(N, n_p) analytic d y / d theta."""
        Z, W, x, _ = self.forward(inputs)
        N = Z.shape[0]
        lin = self.linear
        n_in = sum(nl.n_params for nl in self.input_nonlinearities)
        # rows are parameters so every filter runs along contiguous memory;
        # the shared 1/den part is applied once to the whole block
        M = np.zeros((n_in + lin.numerators.size + lin.n_f, N))
        r = 0
        for i, nl in enumerate(self.input_nonlinearities):
            if nl.n_params:
                dW = nl.param_jacobian(Z[:, i]).T
                M[r : r + nl.n_params] = lfilter(lin.padded_numerator(i), [1.0], dW, axis=-1)
                r += nl.n_params
        for i in range(lin.n_inputs):
            for j in range(lin.n_b):
                lag = lin.delay + j
                if lag < N:
                    M[r, lag:] = W[: N - lag, i]
                r += 1
        for j in range(1, lin.n_f + 1):
            M[r, j:] = -x[: N - j]
            r += 1
        M = lfilter([1.0], lin.denominator, M, axis=-1)
        h = self.output_nonlinearity
        M *= self.output_scale * h.derivative(x)
        if not h.n_params:
            return M.T
        J = np.empty((N, M.shape[0] + h.n_params))
        J[:, : M.shape[0]] = M.T
        J[:, M.shape[0] :] = self.output_scale * h.param_jacobian(x)
        return J

    def stepper(self) -> "MisoStepper":
        return MisoStepper(self)

    def __eq__(self, other):
        if not isinstance(other, HWModelMiso):
            return NotImplemented
        return (
            self.input_names == other.input_names
            and self.output_name == other.output_name
            and self.input_nonlinearities == other.input_nonlinearities
            and self.linear == other.linear
            and self.output_nonlinearity == other.output_nonlinearity
            and self.input_offsets == other.input_offsets
            and self.input_scales == other.input_scales
            and self.output_offset == other.output_offset
            and self.output_scale == other.output_scale
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "output": self.output_name,
            "inputs": list(self.input_names),
            "input_nonlinearities": [nl.to_dict() for nl in self.input_nonlinearities],
            "linear": self.linear.to_dict(),
            "output_nonlinearity": self.output_nonlinearity.to_dict(),
            "normalization": {
                "input_offsets": list(self.input_offsets),
                "input_scales": list(self.input_scales),
                "output_offset": self.output_offset,
                "output_scale": self.output_scale,
            },
            "n_p": self.n_p,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "HWModelMiso":
        lin = d["linear"]
        norm = d.get("normalization", {})
        return cls(
            input_names=tuple(d["inputs"]),
            output_name=d["output"],
            input_nonlinearities=tuple(nonlinearity_from_dict(x) for x in d["input_nonlinearities"]),
            linear=LinearBlock(
                np.array(lin["numerators"], dtype=float).reshape(len(d["inputs"]), -1),
                lin["denominator"],
                lin["delay"],
                lin["sample_time"],
            ),
            output_nonlinearity=nonlinearity_from_dict(d["output_nonlinearity"]),
            input_offsets=norm.get("input_offsets"),
            input_scales=norm.get("input_scales"),
            output_offset=norm.get("output_offset", 0.0),
            output_scale=norm.get("output_scale", 1.0),
            metadata=d.get("metadata", {}),
        )


class MisoStepper:
    """Sample-by-sample evaluation of a MISO block, zero initial state.

    Produces the same sequence as :meth:`HWModelMiso.simulate`.
    """

    def __init__(self, model: HWModelMiso):
        self.model = model
        lin = model.linear
        self._b = np.stack([lin.padded_numerator(i) for i in range(lin.n_inputs)])
        self._f = lin.denominator[1:]
        self._w = np.zeros_like(self._b)
        self._x = np.zeros(lin.n_f)
        self._off = np.asarray(model.input_offsets)
        self._scale = np.asarray(model.input_scales)

    def _advance(self, u):
        m = self.model
        z = (np.asarray(u, dtype=float) - self._off) / self._scale
        w = np.roll(self._w, 1, axis=1)
        for i, nl in enumerate(m.input_nonlinearities):
            w[i, 0] = nl(z[i])
        x = float(np.sum(self._b * w) - self._f @ self._x)
        return w, x, float(m.output_offset + m.output_scale * m.output_nonlinearity(x))

    def step(self, u) -> float:
        self._w, x, y = self._advance(u)
        if self._x.size:
            self._x = np.roll(self._x, 1)
            self._x[0] = x
        return y

    def peek(self, u) -> float:
        """Output :meth:`step` would return, leaving the state untouched."""
        return self._advance(u)[2]


@dataclass(frozen=True, eq=False)
class HWModelMimo:
    """Independent MISO blocks, one per output channel."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        names = [b.output_name for b in blocks]
        if not blocks or len(set(names)) != len(names):
            raise ConfigError(f"MIMO model needs uniquely named outputs, got {names}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def output_names(self):
        return tuple(b.output_name for b in self.blocks)

    @property
    def input_names(self):
        seen = []
        for b in self.blocks:
            seen += [n for n in b.input_names if n not in seen]
        return tuple(seen)

    @property
    def n_p(self):
        return sum(b.n_p for b in self.blocks)

    def __getitem__(self, name) -> HWModelMiso:
        for b in self.blocks:
            if b.output_name == name:
                return b
        raise KeyError(name)

    def simulate(self, inputs: TimeSeries) -> TimeSeries:
        return simulate_mimo(self, inputs)

    def __eq__(self, other):
        if not isinstance(other, HWModelMimo):
            return NotImplemented
        return len(self.blocks) == len(other.blocks) and all(
            a == b for a, b in zip(self.blocks, other.blocks)
        )

    __hash__ = None

    def to_dict(self):
        return {"format": FORMAT_VERSION, "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT_VERSION:
            raise DataError(f"unsupported model format {d.get('format')!r}")
        return cls(tuple(HWModelMiso.from_dict(b) for b in d["blocks"]))


def simulate_hw(model: HWModelMiso, inputs) -> np.ndarray:
    """Simulate one MISO block with zero initial filter states."""
    return model.simulate(inputs)


def simulate_mimo(model: HWModelMimo, inputs: TimeSeries) -> TimeSeries:
    cols = {b.output_name: b.simulate(inputs) for b in model.blocks}
    return TimeSeries.from_channels(inputs.sample_time, cols)


def save_model(model: HWModelMimo, path) -> None:
    atomic_write_json(path, model.to_dict())


def load_model(path) -> HWModelMimo:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            return HWModelMimo.from_dict(json.load(fh))
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model artifact {path}: {exc}") from None


def identity_chain(input_names: Sequence[str], output_name: str, sample_time=1.0) -> HWModelMiso:
    """Unit-gain, identity-nonlinearity block summing its inputs."""
    n = len(input_names)
    return HWModelMiso(
        tuple(input_names),
        output_name,
        tuple(Identity() for _ in range(n)),
        LinearBlock(np.ones((n, 1)), [1.0], 0, sample_time),
    )
