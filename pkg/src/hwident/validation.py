"""Residual analysis: whiteness and input-independence tests at 99 %.

A test at confidence c checks many lags at once. Each lag of an i.i.d.
sequence leaves the band with probability 1 - c, so requiring every lag to
stay inside would reject white residuals far more often than 1 - c. A test
therefore passes when the number of violating lags does not exceed the
c-quantile of the Binomial(n_lags, 1 - c) violation count.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate
from scipy.stats import binom, norm

from ._io import atomic_write_text
from .estimation import EstimationConfig, discard_count
from .exceptions import DataError
from .hwmodel import HWModelMiso

__all__ = [
    "ResidualConfig",
    "ResidualReport",
    "residuals",
    "correlation_bound",
    "correlation_test",
    "prewhiten",
    "analyze",
]

Z_099 = 2.576


@dataclass(frozen=True)
class ResidualConfig:
    max_lag: int = 25
    confidence: float = 0.99
    prewhiten_order: int = 0  # 0 disables
    decimation: int = 1  # test every q-th residual so the lags span the plant dynamics
    discard: int | None = None

    def __post_init__(self):
        if self.max_lag < 1:
            raise DataError("max_lag must be >= 1")
        if not 0 < self.confidence < 1:
            raise DataError("confidence must lie in (0, 1)")
        if self.prewhiten_order < 0:
            raise DataError("prewhiten_order must be >= 0")
        if self.decimation < 1:
            raise DataError("decimation must be >= 1")


@dataclass
class ResidualReport:
    residuals: np.ndarray
    lags: np.ndarray  # 0..max_lag
    autocorrelation: np.ndarray
    cross_lags: np.ndarray  # -max_lag..max_lag
    cross_correlation: dict  # input name -> array over cross_lags
    bound: float
    autocorrelation_pass: bool
    cross_correlation_pass: dict
    allowed_violations: tuple = (0, 0)  # (auto, cross)
    prewhitening: np.ndarray | None = None
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.autocorrelation_pass and all(self.cross_correlation_pass.values())

    @property
    def failed_checks(self) -> list:
        out = [] if self.autocorrelation_pass else ["autocorrelation"]
        out += [f"cross_correlation:{n}" for n, ok in self.cross_correlation_pass.items() if not ok]
        return out

    def violation_fraction(self) -> float:
        """Fraction of tested lags outside the bound (autocorrelation lag 0 exempt)."""
        viol = int(np.sum(np.abs(self.autocorrelation[1:]) > self.bound))
        total = self.autocorrelation.size - 1
        for r in self.cross_correlation.values():
            viol += int(np.sum(np.abs(r) > self.bound))
            total += r.size
        return viol / total if total else 0.0

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.cross_correlation)
        w.writerow(["lag", "r_ee", *[f"r_{n}_e" for n in names], "bound"])
        auto = dict(zip(self.lags.tolist(), self.autocorrelation.tolist()))
        for i, lag in enumerate(self.cross_lags.tolist()):
            r_ee = auto.get(abs(lag), "")
            w.writerow([lag, r_ee, *[self.cross_correlation[n][i] for n in names], self.bound])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv_text())

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "failed_checks": self.failed_checks,
            "bound": self.bound,
            "max_abs_autocorrelation": float(np.max(np.abs(self.autocorrelation[1:]))),
            "max_abs_cross_correlation": {
                n: float(np.max(np.abs(r))) for n, r in self.cross_correlation.items()
            },
            "prewhitening_order": 0 if self.prewhitening is None else int(self.prewhitening.size),
            "degenerate": self.degenerate,
        }


def residuals(model: HWModelMiso, data, discard: int | None = None) -> np.ndarray:
    """measured - simulated, with the estimator's transient discard."""
    if model.output_name not in data:
        raise DataError(f"measured channel {model.output_name!r} missing")
    skip = discard_count(model, EstimationConfig(discard=discard))
    with np.errstate(all="ignore"):
        yhat = model.simulate(data)
    e = data[model.output_name][skip:] - yhat[skip:]
    if not np.all(np.isfinite(e)):
        from .exceptions import DivergenceError

        raise DivergenceError(f"simulation of {model.output_name} diverged")
    return e


def correlation_bound(N: int, confidence: float = 0.99) -> float:
    z = Z_099 if confidence == 0.99 else float(norm.ppf(0.5 + confidence / 2))
    return z / np.sqrt(N)


def allowed_violations(n_lags: int, confidence: float = 0.99) -> int:
    return int(binom.ppf(confidence, n_lags, 1.0 - confidence))


def _xcorr(a, b, max_lag):
    """sum_k a[k] b[k + tau] for tau = -max_lag..max_lag."""
    full = correlate(b, a, mode="full", method="fft" if a.size > 2000 else "direct")
    mid = a.size - 1
    return full[mid - max_lag : mid + max_lag + 1]


def correlation_test(e, u=None, max_lag: int = 25, confidence: float = 0.99) -> ResidualReport:
    """Normalized auto- and cross-correlation of residuals with a 99 % band.

    ``u`` is a mapping of input name to channel (or None). Both signals are
    mean-removed before correlating.
    """
    e = np.asarray(e, dtype=float).ravel()
    N = e.size
    if N <= 10 * max_lag:
        raise DataError(f"need N > 10*max_lag, got N={N}, max_lag={max_lag}")
    u = dict(u or {})
    for name, x in u.items():
        if np.asarray(x).size != N:
            raise DataError(f"input {name!r} has {np.asarray(x).size} samples, residual has {N}")
    bound = correlation_bound(N, confidence)
    lags = np.arange(max_lag + 1)
    cross_lags = np.arange(-max_lag, max_lag + 1)
    ec = e - e.mean()
    ree0 = float(ec @ ec)
    k_auto = allowed_violations(max_lag, confidence)
    k_cross = allowed_violations(cross_lags.size, confidence)
    if ree0 <= 1e-300 * max(1, N):
        auto = np.zeros(max_lag + 1)
        auto[0] = 1.0
        cross = {n: np.zeros(cross_lags.size) for n in u}
        return ResidualReport(
            e, lags, auto, cross_lags, cross, bound, True, {n: True for n in u},
            (k_auto, k_cross), None, True, ["zero-variance residuals pass trivially"],
        )
    auto = _xcorr(ec, ec, max_lag)[max_lag:] / ree0
    auto[0] = 1.0
    auto_pass = int(np.sum(np.abs(auto[1:]) > bound)) <= k_auto
    cross, cross_pass = {}, {}
    for name, x in u.items():
        xc = np.asarray(x, dtype=float).ravel()
        xc = xc - xc.mean()
        ruu0 = float(xc @ xc)
        if ruu0 <= 0:
            r = np.zeros(cross_lags.size)
        else:
            r = _xcorr(xc, ec, max_lag) / np.sqrt(ruu0 * ree0)
        cross[name] = r
        cross_pass[name] = int(np.sum(np.abs(r) > bound)) <= k_cross
    return ResidualReport(
        e, lags, auto, cross_lags, cross, bound, auto_pass, cross_pass, (k_auto, k_cross)
    )


def prewhiten(e, order: int):
    """Least-squares AR(order) fit; returns (innovations, phi).

    e[k] = sum_i phi_i e[k-i] + eps[k]; innovations has N - order samples.
    """
    e = np.asarray(e, dtype=float).ravel()
    N = e.size
    if order < 1 or N <= 2 * order:
        raise DataError(f"prewhitening needs order >= 1 and N >> order (N={N}, order={order})")
    X = np.column_stack([e[order - i : N - i] for i in range(1, order + 1)])
    target = e[order:]
    G = X.T @ X
    scale = np.trace(G) / order if order else 0.0
    if scale <= 0 or np.linalg.matrix_rank(G, tol=1e-10 * scale) < order:
        raise DataError("singular normal equations in residual prewhitening")
    phi = np.linalg.solve(G, X.T @ target)
    return target - X @ phi, phi


def analyze(model: HWModelMiso, data, config: ResidualConfig | None = None) -> ResidualReport:
    """Residuals of `model` on `data`, optionally prewhitened, then tested."""
    config = config or ResidualConfig()
    e = residuals(model, data, config.discard)
    skip = data[model.output_name].size - e.size
    inputs = {n: data[n][skip:] for n in model.input_names}
    q = config.decimation
    if q > 1:
        e = e[::q]
        inputs = {n: x[::q] for n, x in inputs.items()}
    phi = None
    if config.prewhiten_order:
        try:
            e, phi = prewhiten(e, config.prewhiten_order)
        except DataError:
            phi = None
        else:
            inputs = {n: x[config.prewhiten_order :] for n, x in inputs.items()}
    rep = correlation_test(e, inputs, config.max_lag, config.confidence)
    rep.prewhitening = phi
    return rep
