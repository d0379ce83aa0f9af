"""Run configuration: defaults, YAML file, environment, command-line flags.

Later sources win. Environment variables use the ``HWIDENT_`` prefix; a
double underscore descends into a section, and values are parsed as YAML
scalars, e.g. ``HWIDENT_SEARCH__MAX_ITER=5`` or ``HWIDENT_SEED=3``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import yaml

from .estimation import EstimationConfig
from .exceptions import ConfigError, DataError
from .excitation import ExcitationSpec
from .plant import params_from_dict
from .search import DEFAULT_DEGREES, RESIDUAL_POLICIES, SEARCH_MAX_ITER, SearchSpace
from .validation import ResidualConfig

__all__ = ["ENV_PREFIX", "RunConfig", "default_config", "load_config"]

ENV_PREFIX = "HWIDENT_"
MODES = ("gfm", "gfl")

_SCENES = {
    # grid-connected GFM: +-5 % grid voltage, +-0.1 Hz grid frequency
    "gfm": {"voltage": [0.95, 1.05], "frequency": [49.9, 50.1], "plant": {"grid_connected": True}},
    "gfl": {"voltage": [0.9, 1.1], "frequency": [49.5, 50.5], "plant": {}},
}

_DEFAULTS = {
    "mode": "gfm",
    "seed": 1,
    "workers": 1,
    "out_dir": "out",
    "plant": {},
    "data": {
        "duration": 10.0,
        "sample_time": 1e-3,
        "noise_ratio": 0.01,
        "levels": 7,
        "hold_range": [0.2, 1.0],
        "settle_time": 1.0,
        "voltage": None,
        "frequency": None,
        "solver_step": 1e-4,
        "preroll": 5.0,
    },
    "search": {
        "families": ["polynomial", "piecewise_linear", "sigmoid_network", "wavelet_network"],
        "degrees": {k: list(v) for k, v in DEFAULT_DEGREES.items()},
        "n_b": [1, 2, 3],
        "n_f": [1, 2, 3, 4],
        "n_k": [0, 1, 2],
        "threshold": 92.0,
        "eps1": 0.10,
        "eps2": 1.0,
        "max_iter": SEARCH_MAX_ITER,
        "min_pole_real": None,
        "outputs": ["f", "u_d", "u_q"],
        "inputs": ["i_d", "i_q"],
    },
    "validation": {
        "max_lag": 25,
        "confidence": 0.99,
        # 20 ms spacing lets 25 lags cover half a second of plant dynamics
        "decimation": 20,
        "prewhiten_order": 2,
        "residual_policy": "prefer",
    },
    "closedloop": {
        "levels": [1.0, 1.05, 1.0, 0.95, 1.0],
        "hold": 2.0,
        "R_g": 0.01,
        "L_g": 0.1,
        "preroll": 5.0,
        "coupling": "implicit",
    },
}


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


def _merge(base: dict, upd: dict, path="") -> dict:
    for key, val in upd.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("plant", "degrees"):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {where!r} must be a mapping")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _env_overrides(env) -> dict:
    out: dict = {}
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX) :].split("__") if k]
        if not keys:
            continue
        try:
            val = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {name}: {exc}") from None
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = val
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    @property
    def out_dir(self) -> str:
        return str(self.raw["out_dir"])

    def plant_params(self):
        d = dict(_SCENES[self.mode]["plant"])
        d.update(self.raw["plant"])
        d["kind"] = self.mode
        return params_from_dict(d)

    def excitation_specs(self, seed: int):
        """(voltage spec, frequency spec) of the grid source for one dataset."""
        data = self.raw["data"]
        scene = _SCENES[self.mode]
        common = dict(
            duration=float(data["duration"]),
            sample_time=float(data["sample_time"]),
            levels=int(data["levels"]),
            hold_range=tuple(data["hold_range"]),
            settle_time=float(data["settle_time"]),
        )
        v = tuple(data["voltage"] or scene["voltage"])
        f = tuple(data["frequency"] or scene["frequency"])
        return (
            ExcitationSpec(bounds=v, seed=seed, name="u_ref", **common),
            ExcitationSpec(bounds=f, seed=seed + 1, name="f_ref", **common),
        )

    def search_space(self) -> SearchSpace:
        s = self.raw["search"]
        return SearchSpace(
            families=tuple(s["families"]),
            degrees={k: tuple(v) for k, v in s["degrees"].items()},
            n_b=tuple(s["n_b"]),
            n_f=tuple(s["n_f"]),
            n_k=tuple(s["n_k"]),
            threshold=float(s["threshold"]),
            eps1=float(s["eps1"]),
            eps2=float(s["eps2"]),
            input_names=tuple(s["inputs"]),
        )

    def estimation_config(self) -> EstimationConfig:
        s = self.raw["search"]
        lo = s["min_pole_real"]
        return EstimationConfig(max_iter=int(s["max_iter"]), min_pole_real=None if lo is None else float(lo))

    @property
    def outputs(self):
        return tuple(self.raw["search"]["outputs"])

    def residual_config(self) -> ResidualConfig:
        v = self.raw["validation"]
        return ResidualConfig(
            max_lag=int(v["max_lag"]),
            confidence=float(v["confidence"]),
            prewhiten_order=int(v["prewhiten_order"]),
            decimation=int(v["decimation"]),
        )

    @property
    def residual_policy(self) -> str:
        return self.raw["validation"]["residual_policy"]

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.residual_policy not in RESIDUAL_POLICIES:
            raise ConfigError(f"residual_policy must be one of {RESIDUAL_POLICIES}")
        if self.raw["closedloop"]["coupling"] not in ("implicit", "explicit"):
            raise ConfigError("closedloop.coupling must be 'implicit' or 'explicit'")
        if float(self.raw["data"]["noise_ratio"]) < 0:
            raise ConfigError("noise_ratio must be >= 0")
        # building the typed objects runs their own checks
        try:
            self.plant_params()
            self.excitation_specs(self.seed)
            self.search_space()
            self.residual_config()
        except (TypeError, ValueError, DataError) as exc:
            raise ConfigError(str(exc)) from None
        return self


def load_config(path=None, env=None, **overrides) -> RunConfig:
    """Defaults, then the YAML file, then HWIDENT_* variables, then ``overrides``.

    ``overrides`` with value None are ignored, so unset CLI flags fall through.
    """
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(text, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, text)
    _merge(cfg, _env_overrides(os.environ if env is None else env))
    _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig(cfg).validate()

