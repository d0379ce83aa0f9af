"""Figures of merit: NRMSE fit (percent) and Akaike's final prediction error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError

__all__ = ["nrmse_fit", "fpe", "FitReport"]


def nrmse_fit(measured, modeled) -> float:
    """100 * (1 - ||y - yhat|| / ||y - mean(y)||); negative for poor models."""
    y = np.asarray(measured, dtype=float).ravel()
    yhat = np.asarray(modeled, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise DataError(f"length mismatch: {y.size} measured vs {yhat.size} modeled")
    den = np.linalg.norm(y - y.mean())
    if den == 0.0:
        raise DataError("fit undefined for a constant measured channel")
    return float(100.0 * (1.0 - np.linalg.norm(y - yhat) / den))


def fpe(errors, n_p: int) -> float:
    """det(E'E / N) * (1 + n_p/N) / (1 - n_p/N) for an (N, n_y) error matrix."""
    E = np.asarray(errors, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    N = E.shape[0]
    if n_p < 0 or N <= n_p:
        raise DataError(f"FPE needs N > n_p >= 0, got N={N}, n_p={n_p}")
    cov = E.T @ E / N
    det = float(cov[0, 0]) if cov.shape == (1, 1) else float(np.linalg.det(cov))
    return det * (1.0 + n_p / N) / (1.0 - n_p / N)


@dataclass(frozen=True)
class FitReport:
    fits: dict  # output name -> percent
    fpe: float
    n_p: int
    N: int
    dataset: str = "estimation"

    def __post_init__(self):
        if self.dataset not in ("estimation", "validation"):
            raise DataError(f"dataset label must be estimation/validation, got {self.dataset!r}")

    def to_dict(self):
        return {
            "fits": {k: float(v) for k, v in self.fits.items()},
            "fpe": float(self.fpe),
            "n_p": int(self.n_p),
            "N": int(self.N),
            "dataset": self.dataset,
        }
