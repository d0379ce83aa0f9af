"""Hammerstein-Wiener surrogate identification for grid-forming and
grid-following inverter models."""

from .closedloop import AdaptedModel, MicrogridScene, run_comparison, step_adapted_model
from .estimation import EstimationConfig, Structure, estimate, initialize
from .estimators import HammersteinWienerRegressor, HWStructureSearch
from .exceptions import (
    ConfigError,
    DataError,
    DivergenceError,
    HWIdentError,
    LockError,
    SearchExhaustedError,
    ValidationFailure,
)
from .excitation import ExcitationSpec, build_scenario_signals, generate_aprbs
from .hwmodel import HWModelMimo, HWModelMiso, LinearBlock, load_model, save_model
from .metrics import fpe, nrmse_fit
from .plant import GflParams, GfmParams, PlantScenario, simulate
from .search import SearchSpace, run_search, validation_cascade
from .timeseries import TimeSeries, abc_to_dq, dq_to_abc, read_csv, write_csv
from .validation import ResidualConfig, analyze, correlation_test

__version__ = "0.1.0"
