"""Memoryless nonlinearity estimators used as the f and h blocks.

Every variant is a pure function of its input sample, exposes a flat
parameter vector, and supplies its input derivative and parameter
Jacobian so the estimator can build the chain rule without differencing
the whole model.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError

__all__ = [
    "Nonlinearity",
    "Identity",
    "Polynomial",
    "PiecewiseLinear",
    "SigmoidNetwork",
    "WaveletNetwork",
    "FAMILIES",
    "make_nonlinearity",
    "nonlinearity_from_dict",
]


PARAM_LIMIT = 1e6


class Nonlinearity:
    kind = "base"

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, p):
        raise NotImplementedError

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x):
        """d output / d input, elementwise."""
        raise NotImplementedError

    def param_jacobian(self, x):
        """(len(x), n_params) matrix of d output / d params."""
        raise NotImplementedError

    def is_valid(self) -> bool:
        # inputs are normalized, so anything this large is a runaway parameter
        p = self.params
        return bool(np.all(np.isfinite(p)) and np.all(np.abs(p) <= PARAM_LIMIT))

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.params.shape == other.params.shape
            and np.array_equal(self.params, other.params)
        )

    def __repr__(self):
        return f"{type(self).__name__}(n_params={self.n_params})"


class Identity(Nonlinearity):
    kind = "identity"

    @property
    def params(self):
        return np.zeros(0)

    def with_params(self, p):
        if np.size(p):
            raise ConfigError("identity nonlinearity has no parameters")
        return self

    def __call__(self, x):
        return np.asarray(x, dtype=float)

    def derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def param_jacobian(self, x):
        return np.zeros((np.size(x), 0))

    def to_dict(self):
        return {"kind": self.kind}


class Polynomial(Nonlinearity):
    """y = c0 + c1 x + ... + cd x^d."""

    kind = "polynomial"

    def __init__(self, coefficients):
        c = np.array(coefficients, dtype=float).ravel()
        if c.size < 2:
            raise ConfigError("polynomial degree must be >= 1")
        self.coefficients = c
        self.coefficients.setflags(write=False)

    @property
    def degree(self):
        return self.coefficients.size - 1

    @property
    def params(self):
        return self.coefficients

    def with_params(self, p):
        return Polynomial(p)

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), self.coefficients)

    def derivative(self, x):
        d = np.polynomial.polynomial.polyder(self.coefficients)
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), d)

    def param_jacobian(self, x):
        x = np.asarray(x, dtype=float).ravel()
        return np.vander(x, self.degree + 1, increasing=True)

    def to_dict(self):
        return {"kind": self.kind, "coefficients": self.coefficients.tolist()}


class PiecewiseLinear(Nonlinearity):
    """Linear interpolation through (breakpoints, values), end slopes extended."""

    kind = "piecewise_linear"

    def __init__(self, breakpoints, values):
        b = np.array(breakpoints, dtype=float).ravel()
        v = np.array(values, dtype=float).ravel()
        if b.size < 2 or b.size != v.size:
            raise ConfigError("piecewise_linear needs >= 2 breakpoints and matching values")
        self.breakpoints = b
        self.values = v
        b.setflags(write=False)
        v.setflags(write=False)

    def is_valid(self):
        return super().is_valid() and bool(np.all(np.diff(self.breakpoints) > 0))

    @property
    def params(self):
        return np.concatenate([self.breakpoints, self.values])

    def with_params(self, p):
        p = np.asarray(p, dtype=float)
        m = self.breakpoints.size
        return PiecewiseLinear(p[:m], p[m:])

    def _segments(self, x):
        b = self.breakpoints
        k = np.clip(np.searchsorted(b, x, side="right") - 1, 0, b.size - 2)
        return k

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        b, v = self.breakpoints, self.values
        k = self._segments(x)
        slope = (v[k + 1] - v[k]) / (b[k + 1] - b[k])
        return v[k] + slope * (x - b[k])

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        b, v = self.breakpoints, self.values
        k = self._segments(x)
        return (v[k + 1] - v[k]) / (b[k + 1] - b[k])

    def param_jacobian(self, x):
        x = np.asarray(x, dtype=float).ravel()
        b, v = self.breakpoints, self.values
        m = b.size
        k = self._segments(x)
        width = b[k + 1] - b[k]
        t = (x - b[k]) / width
        slope = (v[k + 1] - v[k]) / width
        J = np.zeros((x.size, 2 * m))
        rows = np.arange(x.size)
        J[rows, m + k] = 1.0 - t
        J[rows, m + k + 1] = t
        # moving an end of the active segment tilts it about the other end
        J[rows, k] = slope * (t - 1.0)
        J[rows, k + 1] = -slope * t
        # on an interior breakpoint take the central value of the kink
        on = (t == 0.0) & (k > 0)
        if np.any(on):
            left = (v[k[on]] - v[k[on] - 1]) / (b[k[on]] - b[k[on] - 1])
            J[rows[on], k[on]] = -0.5 * (left + slope[on])
        return J

    def to_dict(self):
        return {
            "kind": self.kind,
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
        }


class _UnitNetwork(Nonlinearity):
    """offset + slope*x + sum_k a_k * psi(d_k * (x - t_k))."""

    def __init__(self, amplitudes, dilations, translations, offset=0.0, linear_slope=1.0):
        a = np.array(amplitudes, dtype=float).ravel()
        d = np.array(dilations, dtype=float).ravel()
        t = np.array(translations, dtype=float).ravel()
        if not a.size == d.size == t.size or a.size < 1:
            raise ConfigError(f"{self.kind} needs >= 1 unit with matching parameter arrays")
        self.amplitudes, self.dilations, self.translations = a, d, t
        for arr in (a, d, t):
            arr.setflags(write=False)
        self.offset = float(offset)
        self.linear_slope = float(linear_slope)

    @property
    def units(self):
        return self.amplitudes.size

    @property
    def params(self):
        return np.concatenate(
            [self.amplitudes, self.dilations, self.translations, [self.offset, self.linear_slope]]
        )

    def with_params(self, p):
        p = np.asarray(p, dtype=float)
        n = self.units
        return type(self)(p[:n], p[n : 2 * n], p[2 * n : 3 * n], p[3 * n], p[3 * n + 1])

    @staticmethod
    def _psi(r):
        raise NotImplementedError

    @staticmethod
    def _dpsi(r):
        raise NotImplementedError

    @classmethod
    def _psi_dpsi(cls, r):
        return cls._psi(r), cls._dpsi(r)

    def _r(self, x):
        x = np.asarray(x, dtype=float)
        return self.dilations * (x[..., None] - self.translations)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.offset + self.linear_slope * x + self._psi(self._r(x)) @ self.amplitudes

    def derivative(self, x):
        r = self._r(x)
        return self.linear_slope + self._dpsi(r) @ (self.amplitudes * self.dilations)

    def param_jacobian(self, x):
        x = np.asarray(x, dtype=float).ravel()
        r = self._r(x)
        psi, dpsi = self._psi_dpsi(r)
        g = dpsi * self.amplitudes
        return np.hstack(
            [
                psi,
                g * (x[:, None] - self.translations),
                -g * self.dilations,
                np.ones((x.size, 1)),
                x[:, None],
            ]
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "amplitudes": self.amplitudes.tolist(),
            "dilations": self.dilations.tolist(),
            "translations": self.translations.tolist(),
            "offset": self.offset,
            "linear_slope": self.linear_slope,
        }


class SigmoidNetwork(_UnitNetwork):
    kind = "sigmoid_network"

    @staticmethod
    def _psi(r):
        return expit(r)

    @staticmethod
    def _dpsi(r):
        s = expit(r)
        return s * (1.0 - s)

    @staticmethod
    def _psi_dpsi(r):
        s = expit(r)
        return s, s * (1.0 - s)


class WaveletNetwork(_UnitNetwork):
    """Mexican-hat units, psi(r) = (1 - r^2) exp(-r^2 / 2)."""

    kind = "wavelet_network"

    @staticmethod
    def _psi(r):
        r2 = r * r
        return (1.0 - r2) * np.exp(-0.5 * r2)

    @staticmethod
    def _dpsi(r):
        r2 = r * r
        return r * (r2 - 3.0) * np.exp(-0.5 * r2)

    @staticmethod
    def _psi_dpsi(r):
        r2 = r * r
        e = np.exp(-0.5 * r2)
        return (1.0 - r2) * e, r * (r2 - 3.0) * e


FAMILIES = {
    cls.kind: cls for cls in (Identity, Polynomial, PiecewiseLinear, SigmoidNetwork, WaveletNetwork)
}


def make_nonlinearity(kind, degree=None, span=(-1.0, 1.0)):
    """Build a family member that equals the identity map.

    `degree` is the polynomial degree, the breakpoint count, or the unit
    count depending on the family. Breakpoints and unit centres are spread
    evenly over `span`.
    """
    lo, hi = span
    if not hi > lo:
        lo, hi = lo - 1.0, lo + 1.0
    if kind == "identity":
        return Identity()
    if degree is None:
        raise ConfigError(f"{kind} needs a degree")
    degree = int(degree)
    if kind == "polynomial":
        if degree < 1:
            raise ConfigError("polynomial degree must be >= 1")
        c = np.zeros(degree + 1)
        c[1] = 1.0
        return Polynomial(c)
    if kind == "piecewise_linear":
        if degree < 2:
            raise ConfigError("piecewise_linear needs >= 2 breakpoints")
        b = np.linspace(lo, hi, degree)
        return PiecewiseLinear(b, b)
    if kind in ("sigmoid_network", "wavelet_network"):
        if degree < 1:
            raise ConfigError(f"{kind} needs >= 1 unit")
        width = (hi - lo) / degree
        centres = lo + width * (np.arange(degree) + 0.5)
        return FAMILIES[kind](
            np.zeros(degree), np.full(degree, 1.0 / width), centres, 0.0, 1.0
        )
    raise ConfigError(f"unknown nonlinearity family {kind!r}")


def nonlinearity_from_dict(d):
    kind = d.get("kind")
    if kind == "identity":
        return Identity()
    if kind == "polynomial":
        return Polynomial(d["coefficients"])
    if kind == "piecewise_linear":
        return PiecewiseLinear(d["breakpoints"], d["values"])
    if kind in ("sigmoid_network", "wavelet_network"):
        return FAMILIES[kind](
            d["amplitudes"], d["dilations"], d["translations"], d["offset"], d["linear_slope"]
        )
    raise ConfigError(f"unknown nonlinearity family {kind!r}")
