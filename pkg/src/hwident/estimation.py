"""Output-error estimation of HW blocks: loss, Jacobian, iterative solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataError
from .hwmodel import HWModelMiso, LinearBlock
from .nonlinearity import FAMILIES, make_nonlinearity
from .timeseries import TimeSeries

__all__ = [
    "METHODS",
    "Structure",
    "EstimationConfig",
    "FitResult",
    "discard_count",
    "loss",
    "jacobian",
    "gauss_newton_step",
    "levenberg_marquardt_step",
    "estimate",
    "initialize",
    "arx",
]

log = logging.getLogger(__name__)

METHODS = (
    "subspace_gauss_newton",
    "adaptive_subspace_gauss_newton",
    "levenberg_marquardt",
    "steepest_descent",
)
TERMINATIONS = ("gradient", "loss_stalled", "max_iter", "numerical_failure")


@dataclass(frozen=True)
class Structure:
    """One point of the structure grid."""

    family: str = "polynomial"
    degree: int = 2
    n_b: int = 2
    n_f: int = 2
    n_k: int = 0
    output_family: str | None = None  # defaults to `family`
    output_degree: int | None = None

    def __post_init__(self):
        for fam in (self.family, self.out_family):
            if fam not in FAMILIES:
                raise ConfigError(f"unknown nonlinearity family {fam!r}")
        if self.n_b < 1 or self.n_f < 0 or self.n_k < 0:
            raise ConfigError(f"invalid orders n_b={self.n_b}, n_f={self.n_f}, n_k={self.n_k}")

    @property
    def out_family(self):
        return self.output_family or self.family

    @property
    def out_degree(self):
        return self.degree if self.output_degree is None else self.output_degree

    def label(self):
        return f"{self.family}:{self.degree} nb={self.n_b} nf={self.n_f} nk={self.n_k}"

    def to_dict(self):
        return {
            "family": self.family,
            "degree": self.degree,
            "n_b": self.n_b,
            "n_f": self.n_f,
            "n_k": self.n_k,
            "output_family": self.out_family,
            "output_degree": self.out_degree,
        }


@dataclass(frozen=True)
class EstimationConfig:
    weight: float = 1.0
    max_iter: int = 200
    gradient_tol: float = 1e-8
    loss_tol: float = 1e-10
    stall_window: int = 5
    method: str = "levenberg_marquardt"
    lm_lambda0: float = 1e-3
    lm_increase: float = 10.0
    lm_decrease: float = 10.0
    lm_lambda_max: float = 1e10
    subspace_rtol: float = 1e-6
    max_backtracks: int = 12
    discard: int | None = None  # None -> max(n_f, 50)
    # optional pole region Re z >= min_pole_real; 0 rules out modes faster
    # than a quarter of the sample rate
    min_pole_real: float | None = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weight, dtype=float))
        if W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
            raise ConfigError("weighting matrix must be square and symmetric")
        if np.linalg.eigvalsh(W).min() < -1e-12:
            raise ConfigError("weighting matrix must be positive semidefinite")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gradient_tol <= 0 or self.loss_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_iter < 0 or (self.discard is not None and self.discard < 0):
            raise ConfigError("max_iter and discard must be non-negative")

    @property
    def scalar_weight(self) -> float:
        W = np.atleast_2d(np.asarray(self.weight, dtype=float))
        if W.shape != (1, 1):
            raise ConfigError("a MISO block needs a scalar (1x1) weight")
        return float(W[0, 0])


@dataclass
class FitResult:
    model: HWModelMiso
    loss: float
    iterations: int
    termination: str
    loss_trace: list = field(default_factory=list)
    method: str = "levenberg_marquardt"

    @property
    def failed(self):
        return self.termination == "numerical_failure"


def discard_count(model: HWModelMiso, config: EstimationConfig) -> int:
    if config.discard is not None:
        return config.discard
    return max(model.linear.n_f, 50)


def _measured(model, data):
    if isinstance(data, TimeSeries):
        if model.output_name not in data:
            raise DataError(f"measured channel {model.output_name!r} missing")
        return data[model.output_name]
    raise DataError("estimation data must be a TimeSeries")


def _errors(model, U, y, skip, min_pole_real=None):
    if not model.is_valid() or not model.linear.poles_in_region(min_pole_real):
        return None
    with np.errstate(all="ignore"):
        yhat = model.simulate(U)
    e = y[skip:] - yhat[skip:]
    if not np.all(np.isfinite(e)):
        return None
    return e


def loss(model: HWModelMiso, data: TimeSeries, config: EstimationConfig | None = None) -> float:
    """V = (1/N) sum_t w e(t)^2 over the retained samples; inf if unsimulable."""
    config = config or EstimationConfig()
    y = _measured(model, data)
    e = _errors(model, model.input_matrix(data), y, discard_count(model, config), config.min_pole_real)
    if e is None:
        return float("inf")
    if e.size == 0:
        raise DataError("no samples left after the transient discard")
    return float(config.scalar_weight * (e @ e) / e.size)


def jacobian(model: HWModelMiso, data: TimeSeries, config: EstimationConfig | None = None):
    """(N, n_p) matrix of d e / d theta with e = measured - simulated."""
    J = -model.output_jacobian(model.input_matrix(data))
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite Jacobian entries")
    return J


def _factor(J, e, weight=1.0):
    """Eigen-decomposition of the column-scaled normal matrix.

    Returns (s, Vt, c): singular values of sqrt(w) J D, right singular
    vectors mapped back through D, and the projected right-hand side, so a
    rank-r step is -Vt[:r]' (c[:r] / s[:r]). The Gram route resolves
    singular values down to about 1e-8 s_max, which bounds useful rtol.
    """
    norms = np.sqrt(np.einsum("ij,ij->j", J, J))
    d = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
    G = weight * (d[:, None] * (J.T @ J) * d)
    lam, V = np.linalg.eigh(G)
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    s = np.sqrt(lam)
    g = weight * d * (J.T @ e)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(s > 0, (V.T @ g) / np.where(s > 0, s, 1.0), 0.0)
    return s, (V * d[:, None]).T, c


def _subspace_step(factor, rtol=1e-8, rank=None):
    s, Vt, c = factor
    if s.size == 0 or s[0] == 0:
        return np.zeros(Vt.shape[1]), 0
    r = int(np.sum(s >= rtol * s[0]))
    if rank is not None:
        r = max(1, min(r, rank))
    return -(Vt[:r].T @ (c[:r] / s[:r])), r


def gauss_newton_step(J, e, weight=1.0, rtol=1e-8, rank=None):
    """Minimum-norm solution of (J'WJ) d = -J'We on the retained SVD subspace.

    Singular values below ``rtol * s_max`` are dropped; ``rank`` caps the
    retained dimension further. Returns (step, retained dimension).
    """
    return _subspace_step(_factor(J, e, weight), rtol, rank)


def levenberg_marquardt_step(J, e, weight=1.0, lam=1e-3):
    """Solve (J'WJ + lam I) d = -J'We."""
    H = weight * (J.T @ J)
    g = weight * (J.T @ e)
    return _damped_solve(H, g, lam)


def _damped_solve(H, g, lam):
    vals, vecs = np.linalg.eigh(H)
    denom = vals + lam
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    return -(vecs @ ((vecs.T @ g) / denom))


class _Problem:
    def __init__(self, model, data, config):
        self.config = config
        self.w = config.scalar_weight
        self.U = model.input_matrix(data)
        self.y = _measured(model, data)
        self.skip = discard_count(model, config)
        if self.y.size - self.skip <= 0:
            raise DataError("no samples left after the transient discard")
        self.n = self.y.size - self.skip

    def errors(self, model):
        return _errors(model, self.U, self.y, self.skip, self.config.min_pole_real)

    def value(self, e):
        return float("inf") if e is None else float(self.w * (e @ e) / self.n)

    def jac(self, model):
        with np.errstate(all="ignore"):
            J = -model.output_jacobian(self.U)[self.skip :]
        if not np.all(np.isfinite(J)):
            raise FloatingPointError("non-finite Jacobian entries")
        return J


def estimate(initial: HWModelMiso, data: TimeSeries, config: EstimationConfig | None = None) -> FitResult:
    """Iterate the configured least-squares method from ``initial``.

    Only loss-decreasing steps are accepted, so the loss trace never rises.
    """
    config = config or EstimationConfig()
    prob = _Problem(initial, data, config)
    model = initial
    e = prob.errors(model)
    V = prob.value(e)
    trace = [V]
    method = config.method
    if e is None:
        return FitResult(model, V, 0, "numerical_failure", trace, method)

    lam = config.lm_lambda0
    rank = None
    it = 0
    reason = "max_iter"
    try:
        while it < config.max_iter:
            J = prob.jac(model)
            grad = 2.0 * prob.w * (J.T @ e) / prob.n
            if not np.all(np.isfinite(grad)):
                reason = "numerical_failure"
                break
            # tested on the loss in normalized output units, so the
            # tolerance means the same for every channel amplitude
            if grad.size == 0 or np.max(np.abs(grad)) <= config.gradient_tol * model.output_scale**2:
                reason = "gradient"
                break
            it += 1
            theta = model.theta
            accepted = None

            if method == "levenberg_marquardt":
                H = prob.w * (J.T @ J)
                g = prob.w * (J.T @ e)
                while lam <= config.lm_lambda_max:
                    cand = model.with_theta(theta + _damped_solve(H, g, lam))
                    ce = prob.errors(cand)
                    cV = prob.value(ce)
                    if cV < V:
                        accepted = (cand, ce, cV)
                        lam = max(lam / config.lm_decrease, 1e-12)
                        break
                    lam *= config.lm_increase
            elif method in ("subspace_gauss_newton", "adaptive_subspace_gauss_newton"):
                adaptive = method == "adaptive_subspace_gauss_newton"
                fac = _factor(J, e, prob.w)
                step, r = _subspace_step(fac, config.subspace_rtol, rank if adaptive else None)
                full_rank = _subspace_step(fac, config.subspace_rtol)[1]
                while accepted is None:
                    accepted = _backtrack(prob, model, theta, step, V, config.max_backtracks)
                    if accepted is not None or not adaptive or r <= 1:
                        break
                    r = max(1, r // 2)
                    step, r = _subspace_step(fac, config.subspace_rtol, r)
                if adaptive:
                    rank = min(r + 1, full_rank) if accepted is not None else r
            else:  # steepest descent with a Cauchy first trial
                gvec = prob.w * (J.T @ e)
                Jg = J @ gvec
                curv = prob.w * (Jg @ Jg)
                eta = (gvec @ gvec) / curv if curv > 0 else 1.0
                accepted = _backtrack(prob, model, theta, -eta * gvec, V, config.max_backtracks)

            if accepted is None:
                reason = "loss_stalled"
                break
            model, e, V = accepted
            trace.append(V)
            w = config.stall_window
            if len(trace) > w and trace[-w - 1] - V <= config.loss_tol * max(abs(trace[-w - 1]), 1e-300):
                reason = "loss_stalled"
                break
        else:
            reason = "max_iter"
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("numerical failure during %s: %s", method, exc)
        reason = "numerical_failure"
    return FitResult(model, V, it, reason, trace, method)


def _backtrack(prob, model, theta, step, V, max_halvings):
    alpha = 1.0
    for _ in range(max_halvings + 1):
        cand = model.with_theta(theta + alpha * step)
        ce = prob.errors(cand)
        cV = prob.value(ce)
        if cV < V:
            return cand, ce, cV
        alpha *= 0.5
    return None


def arx(z, y, n_b, n_f, n_k):
    """Equation-error fit y[k] + sum f_j y[k-j] = sum_i sum_j b_ij z_i[k-n_k-j].

    Returns (numerators (n_in, n_b), denominator, residual sum of squares,
    rank deficient flag).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float).T).T
    N, n_in = z.shape
    start = max(n_f, n_k + n_b - 1)
    rows = np.arange(start, N)
    cols = []
    for i in range(n_in):
        for j in range(n_b):
            cols.append(z[rows - n_k - j, i])
    for j in range(1, n_f + 1):
        cols.append(-y[rows - j])
    Phi = np.column_stack(cols)
    target = y[rows]
    sol, res, rank, _ = np.linalg.lstsq(Phi, target, rcond=None)
    rss = float(np.sum((target - Phi @ sol) ** 2))
    num = sol[: n_in * n_b].reshape(n_in, n_b)
    den = np.concatenate([[1.0], sol[n_in * n_b :]])
    return num, den, rss, rank < Phi.shape[1]


def _stabilize(den, min_real=None):
    """Reflect and shrink poles into the unit disc, then clip them to Re z >= min_real.

    Clipping keeps conjugate pairs paired, so the polynomial stays real.
    """
    if den.size <= 1:
        return den
    roots = np.roots(den)
    inside = np.all(np.abs(roots) < 0.999)
    if inside and (min_real is None or np.all(roots.real >= min_real)):
        return den
    mag = np.abs(roots)
    roots = np.where(mag >= 1.0, 1.0 / np.conj(roots), roots)
    roots = np.where(np.abs(roots) >= 0.999, roots / np.abs(roots) * 0.999, roots)
    if min_real is not None:
        lo = min_real + 1e-3
        roots = np.where(roots.real < lo, lo + 1j * roots.imag, roots)
        mag = np.abs(roots)
        roots = np.where(mag >= 0.999, roots / mag * 0.999, roots)
    return np.real(np.poly(roots))


def _scale(x):
    s = float(np.std(x))
    return s if s > 0 and np.isfinite(s) else 1.0


def _span(x):
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi - lo > 1e-9:
        return lo - 1.0, hi + 1.0
    return lo, hi


def initialize(
    structure: Structure, data: TimeSeries, output_name: str, input_names, min_pole_real: float | None = None
) -> HWModelMiso:
    """Identity nonlinearities around an ARX-initialized linear block.

    Channels are normalized by (first sample, standard deviation) before the
    regression. A rank-deficient regression falls back to a unit-gain block.
    ARX poles are moved inside the unit disc and to Re z >= ``min_pole_real``.
    """
    input_names = tuple(input_names)
    missing = [n for n in (*input_names, output_name) if n not in data]
    if missing:
        raise DataError(f"channels missing from data: {missing}")
    U = data.matrix(input_names)
    y = data[output_name]
    mu_u = U[0].copy()
    s_u = np.array([_scale(U[:, i]) for i in range(U.shape[1])])
    mu_y, s_y = float(y[0]), _scale(y)
    Z = (U - mu_u) / s_u
    yn = (y - mu_y) / s_y
    n_in = len(input_names)
    num, den, _, deficient = arx(Z, yn, structure.n_b, structure.n_f, structure.n_k)
    if deficient or not np.all(np.isfinite(num)) or not np.all(np.isfinite(den)):
        num = np.zeros((n_in, structure.n_b))
        num[:, 0] = 1.0 / n_in
        den = np.concatenate([[1.0], np.zeros(structure.n_f)])
    den = _stabilize(den, min_pole_real)
    lin = LinearBlock(num, den, structure.n_k, data.sample_time)
    x = lin.filter(Z)
    f = tuple(make_nonlinearity(structure.family, structure.degree, _span(Z[:, i])) for i in range(n_in))
    h = make_nonlinearity(structure.out_family, structure.out_degree, _span(x))
    return HWModelMiso(
        input_names,
        output_name,
        f,
        lin,
        h,
        input_offsets=tuple(float(v) for v in mu_u),
        input_scales=tuple(float(v) for v in s_u),
        output_offset=mu_y,
        output_scale=s_y,
        metadata={"structure": structure.to_dict()},
    )
