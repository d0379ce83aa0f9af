"""Structure search over nonlinearity families and linear orders.

Every grid point is initialized, fitted and scored (estimation NRMSE and
FPE). The incumbent is updated with the epsilon-guarded comparison, and the
validation cascade walks the resulting ranking until a candidate passes all
checks.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import atomic_write_json
from .estimation import EstimationConfig, Structure, estimate, initialize
from .exceptions import ConfigError, DataError, SearchExhaustedError
from .hwmodel import HWModelMiso
from .metrics import fpe, nrmse_fit
from .timeseries import TimeSeries
from .validation import ResidualConfig, analyze

__all__ = [
    "SearchSpace",
    "Candidate",
    "Leaderboard",
    "Rejection",
    "decide_search_algorithm",
    "compare_and_update",
    "rank_candidates",
    "run_search",
    "validation_cascade",
]

log = logging.getLogger(__name__)

DEFAULT_DEGREES = {
    "polynomial": (2, 3, 4),
    "piecewise_linear": tuple(range(6, 13)),
    "sigmoid_network": tuple(range(4, 11)),
    "wavelet_network": tuple(range(4, 11)),
    "identity": (1,),
}
LARGE_MODEL = 60
SEARCH_MAX_ITER = 10  # per candidate; the whole grid has to fit a desk-scale budget


@dataclass(frozen=True)
class SearchSpace:
    families: tuple = ("polynomial", "piecewise_linear", "sigmoid_network", "wavelet_network")
    degrees: dict = field(default_factory=lambda: dict(DEFAULT_DEGREES))
    n_b: tuple = (1, 2, 3)
    n_f: tuple = (1, 2, 3, 4)
    n_k: tuple = (0, 1, 2)
    threshold: float = 92.0
    eps1: float = 0.10
    eps2: float = 1.0
    input_names: tuple = ("i_d", "i_q")

    def __post_init__(self):
        for name in ("families", "n_b", "n_f", "n_k", "input_names"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"search space {name} must be nonempty")
            object.__setattr__(self, name, value)
        degrees = {k: tuple(int(d) for d in v) for k, v in dict(self.degrees).items()}
        for fam in self.families:
            if not degrees.get(fam):
                raise ConfigError(f"no degree range for family {fam!r}")
        object.__setattr__(self, "degrees", degrees)
        if not 0 < self.threshold < 100:
            raise ConfigError("threshold must lie in (0, 100)")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ConfigError("eps1 and eps2 must be positive")

    def grid(self):
        """All combinations in enumeration order: (index, Structure or None, reason)."""
        combos = []
        index = 0
        for fam in self.families:
            for deg, nb, nf, nk in itertools.product(self.degrees[fam], self.n_b, self.n_f, self.n_k):
                reason = None
                if nf < nb - 1:
                    reason = f"n_f={nf} < n_b-1={nb - 1}"
                elif nb < 1 or nf < 0 or nk < 0:
                    reason = "negative order"
                st = None
                if reason is None:
                    try:
                        st = Structure(fam, deg, nb, nf, nk)
                    except ConfigError as exc:
                        reason = str(exc)
                combos.append((index, st, reason, (fam, deg, nb, nf, nk)))
                index += 1
        return combos

    @property
    def cardinality(self):
        return sum(len(self.degrees[f]) for f in self.families) * (
            len(self.n_b) * len(self.n_f) * len(self.n_k)
        )

    def to_dict(self):
        return {
            "families": list(self.families),
            "degrees": {k: list(v) for k, v in self.degrees.items() if k in self.families},
            "n_b": list(self.n_b),
            "n_f": list(self.n_f),
            "n_k": list(self.n_k),
            "threshold": self.threshold,
            "eps1": self.eps1,
            "eps2": self.eps2,
            "input_names": list(self.input_names),
        }


@dataclass
class Candidate:
    index: int
    structure: Structure | None
    method: str = ""
    fit: float = -math.inf  # estimation NRMSE, percent
    fpe: float = math.inf
    n_p: int = 0
    loss: float = math.inf
    iterations: int = 0
    termination: str = ""
    status: str = "ok"  # ok | failed | invalid
    reason: str = ""
    val_fit: float | None = None
    model: HWModelMiso | None = None

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self, with_model=False):
        d = {
            "index": self.index,
            "structure": None if self.structure is None else self.structure.to_dict(),
            "method": self.method,
            "fit": _num(self.fit),
            "fpe": _num(self.fpe),
            "n_p": self.n_p,
            "loss": _num(self.loss),
            "iterations": self.iterations,
            "termination": self.termination,
            "status": self.status,
            "reason": self.reason,
            "val_fit": None if self.val_fit is None else _num(self.val_fit),
        }
        if with_model and self.model is not None:
            d["model"] = self.model.to_dict()
        return d


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def decide_search_algorithm(structure: Structure, n_p: int, previous_failure: bool = False) -> str:
    """Levenberg-Marquardt by default, subspace methods for large n_p.

    A candidate whose first attempt ended in a numerical failure is retried
    with steepest descent.
    """
    if previous_failure:
        return "steepest_descent"
    if n_p > LARGE_MODEL:
        if structure.family in ("sigmoid_network", "wavelet_network"):
            return "adaptive_subspace_gauss_newton"
        return "subspace_gauss_newton"
    return "levenberg_marquardt"


def compare_and_update(best: Candidate | None, challenger: Candidate, eps1: float, eps2: float) -> Candidate:
    """Epsilon-guarded incumbent update.

    The challenger wins when it fits better without raising FPE by more than
    the relative margin eps1, or when it lowers FPE without losing more than
    eps2 fit points. Exact ties keep the lower stable index.
    """
    if best is None or not best.ok:
        return challenger if challenger.ok or best is None else best
    if not challenger.ok:
        return best
    if challenger.fit > best.fit and challenger.fpe <= best.fpe * (1.0 + eps1):
        return challenger
    if challenger.fpe < best.fpe and challenger.fit >= best.fit - eps2:
        return challenger
    if challenger.fit == best.fit and challenger.fpe == best.fpe and challenger.index < best.index:
        return challenger
    return best


def _front(pool):
    """Candidates not strictly dominated (higher fit and lower FPE) by another."""
    order = sorted(pool, key=lambda c: -c.fit)
    front = []
    best_fpe = math.inf  # lowest FPE among strictly higher fits
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and order[j].fit == order[i].fit:
            j += 1
        group = order[i:j]
        front += [c for c in group if not c.fpe > best_fpe]
        best_fpe = min(best_fpe, min(c.fpe for c in group))
        i = j
    return front


def select_best(candidates, eps1, eps2, threshold=None):
    """Best of `candidates` by the sequential guarded update.

    The update runs in stable-index order over the non-dominated candidates
    (above the threshold when any are), so the winner is never strictly
    dominated and does not depend on evaluation order.
    """
    pool = [c for c in candidates if c.ok and math.isfinite(c.fit) and math.isfinite(c.fpe)]
    if threshold is not None and any(c.fit > threshold for c in pool):
        pool = [c for c in pool if c.fit > threshold]
    front = sorted(_front(pool), key=lambda c: c.index)
    best = None
    for c in front:
        best = compare_and_update(best, c, eps1, eps2)
    return best


def rank_candidates(candidates, eps1, eps2, threshold=None):
    """Yield candidates by repeatedly extracting the guarded-update winner."""
    remaining = [c for c in candidates if c.ok]
    while remaining:
        best = select_best(remaining, eps1, eps2, threshold)
        if best is None:
            return
        yield best
        remaining = [c for c in remaining if c.index != best.index]


@dataclass
class Leaderboard:
    output: str
    candidates: list
    best_index: int | None
    threshold: float
    space: SearchSpace | None = None
    validated_index: int | None = None
    rejections: list = field(default_factory=list)
    residuals_passed: bool | None = None

    @property
    def best(self) -> Candidate | None:
        return None if self.best_index is None else self.by_index(self.best_index)

    def by_index(self, index) -> Candidate:
        for c in self.candidates:
            if c.index == index:
                return c
        raise KeyError(index)

    @property
    def count_above_threshold(self) -> int:
        return sum(1 for c in self.candidates if c.ok and c.fit > self.threshold)

    @property
    def fitted(self):
        return [c for c in self.candidates if c.status != "invalid"]

    def to_dict(self):
        return {
            "output": self.output,
            "threshold": self.threshold,
            "count_above_threshold": self.count_above_threshold,
            "n_candidates": len(self.candidates),
            "n_fitted": len(self.fitted),
            "best_index": self.best_index,
            "validated_index": self.validated_index,
            "residuals_passed": self.residuals_passed,
            "rejections": [r.to_dict() for r in self.rejections],
            "space": None if self.space is None else self.space.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
        }

    def write(self, path):
        atomic_write_json(path, self.to_dict())


def _fit_one(args):
    index, structure, est, val, output, inputs, config = args
    cand = Candidate(index, structure)
    try:
        model = initialize(structure, est, output, inputs, config.min_pole_real)
    except (DataError, ConfigError, np.linalg.LinAlgError, ValueError) as exc:
        cand.status, cand.reason = "failed", f"initialization: {exc}"
        return cand
    cand.n_p = model.n_p
    method = decide_search_algorithm(structure, model.n_p)
    res = estimate(model, est, _with_method(config, method))
    if res.failed:
        method = decide_search_algorithm(structure, model.n_p, previous_failure=True)
        res = estimate(model, est, _with_method(config, method))
    cand.method = method
    cand.iterations, cand.termination, cand.loss = res.iterations, res.termination, res.loss
    if res.failed or not math.isfinite(res.loss):
        cand.status, cand.reason = "failed", f"estimation: {res.termination}"
        return cand
    fitted = res.model
    skip = max(fitted.linear.n_f, 50) if config.discard is None else config.discard
    y = est[output][skip:]
    yhat = fitted.simulate(est)[skip:]
    try:
        cand.fit = nrmse_fit(y, yhat)
        cand.fpe = fpe(y - yhat, fitted.n_p)
        yv = val[output][skip:]
        cand.val_fit = nrmse_fit(yv, fitted.simulate(val)[skip:])
    except DataError as exc:
        cand.status, cand.reason = "failed", str(exc)
        return cand
    if not (math.isfinite(cand.fit) and math.isfinite(cand.val_fit)):
        cand.status, cand.reason = "failed", "non-finite score"
        return cand
    cand.model = fitted.with_metadata(
        method=method, termination=res.termination, iterations=res.iterations
    )
    return cand


def _with_method(config, method):
    return replace(config, method=method)


def run_search(
    space: SearchSpace,
    est_data: TimeSeries,
    val_data: TimeSeries,
    output: str,
    config: EstimationConfig | None = None,
    workers: int = 1,
    progress=None,
) -> Leaderboard:
    """Fit every grid point for one output channel and rank the results."""
    config = config or EstimationConfig(max_iter=SEARCH_MAX_ITER)
    if est_data.sample_time != val_data.sample_time:
        raise DataError("estimation and validation data differ in sample_time")
    needed = (*space.input_names, output)
    for label, ds in (("estimation", est_data), ("validation", val_data)):
        missing = [n for n in needed if n not in ds]
        if missing:
            raise DataError(f"{label} data lacks channels {missing}")
    est = est_data.select(needed)
    val = val_data.select(needed)
    combos = space.grid()
    tasks = []
    results = {}
    for index, st, reason, raw in combos:
        if st is None:
            fam, deg, nb, nf, nk = raw
            log.info("skipping invalid combination %s:%s nb=%s nf=%s nk=%s (%s)", *raw, reason)
            results[index] = Candidate(index, None, status="invalid", reason=f"{raw}: {reason}")
        else:
            tasks.append((index, st, est, val, output, space.input_names, config))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cand in pool.map(_fit_one, tasks, chunksize=max(1, len(tasks) // (8 * workers))):
                results[cand.index] = cand
                if progress:
                    progress(cand)
    else:
        for t in tasks:
            cand = _fit_one(t)
            results[cand.index] = cand
            if progress:
                progress(cand)
    candidates = [results[i] for i in sorted(results)]
    best = select_best(candidates, space.eps1, space.eps2, space.threshold)
    return Leaderboard(output, candidates, None if best is None else best.index, space.threshold, space)


@dataclass
class Rejection:
    index: int
    failed_checks: list
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"index": self.index, "failed_checks": list(self.failed_checks), "details": self.details}


def check_candidate(cand: Candidate, val_data, residual_config, threshold):
    """Names of failed validation checks (empty when the candidate passes)."""
    model = cand.model
    failed, details = [], {}
    if model is None:
        return ["model"], details
    skip = max(model.linear.n_f, 50) if residual_config.discard is None else residual_config.discard
    y = val_data[model.output_name][skip:]
    with np.errstate(all="ignore"):
        yhat = model.simulate(val_data)[skip:]
    e = y - yhat
    if not np.all(np.isfinite(e)):
        return ["loss"], {"reason": "validation simulation diverged"}
    val_loss = float(e @ e / e.size)
    details["val_loss"] = val_loss
    try:
        val_fit = nrmse_fit(y, yhat)
        val_fpe = fpe(e, model.n_p)
    except DataError as exc:
        return ["fit"], {"reason": str(exc)}
    details.update(val_fit=val_fit, val_fpe=val_fpe)
    if not val_fit >= threshold:
        failed.append("validation_fit")
    if not math.isfinite(val_fpe):
        failed.append("fpe")
    rep = analyze(model, val_data, residual_config)
    details["residuals"] = rep.summary()
    failed += rep.failed_checks
    return failed, details


RESIDUAL_POLICIES = ("require", "prefer")


def _residual_only(failed):
    return bool(failed) and all(f == "autocorrelation" or f.startswith("cross_correlation") for f in failed)


def validation_cascade(
    board: Leaderboard,
    val_data: TimeSeries,
    residual_config: ResidualConfig | None = None,
    threshold: float | None = None,
    eps=None,
    residual_policy: str = "require",
):
    """First candidate, in guarded-update order, that passes every check.

    Returns (candidate, rejections); raises SearchExhaustedError with the
    full rejection log when nothing passes. With ``residual_policy="prefer"``
    a candidate that fails only residual tests is kept as a fallback and
    returned when no candidate passes everything; ``board.residuals_passed``
    then reads False.
    """
    if residual_policy not in RESIDUAL_POLICIES:
        raise ConfigError(f"residual_policy must be one of {RESIDUAL_POLICIES}")
    residual_config = residual_config or ResidualConfig()
    threshold = board.threshold if threshold is None else threshold
    if eps is None:
        space = board.space or SearchSpace()
        eps = (space.eps1, space.eps2)
    if not board.candidates:
        raise SearchExhaustedError("empty leaderboard", [])
    rejections = []
    fallback = None
    for cand in rank_candidates(board.candidates, eps[0], eps[1], threshold):
        failed, details = check_candidate(cand, val_data, residual_config, threshold)
        if not failed:
            board.validated_index = cand.index
            board.rejections = rejections
            board.residuals_passed = True
            return cand, rejections
        rejections.append(Rejection(cand.index, failed, details))
        log.info("candidate %d rejected: %s", cand.index, ", ".join(failed))
        if fallback is None and residual_policy == "prefer" and _residual_only(failed):
            fallback = cand
    board.rejections = rejections
    if fallback is not None:
        log.warning(
            "no candidate for %s passed the residual tests; keeping candidate %d", board.output, fallback.index
        )
        board.validated_index = fallback.index
        board.residuals_passed = False
        return fallback, rejections
    raise SearchExhaustedError(
        f"no candidate for {board.output} passed validation ({len(rejections)} rejected)", rejections
    )
