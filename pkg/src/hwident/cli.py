"""hwident command line: gen-data, identify, validate, simulate, report.

Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 data
error (including missing files), 4 search exhausted, 5 validation failed,
6 simulation diverged.

Layout under --out-dir::

    data/est.csv, data/val.csv
    model/model.json, model/leaderboard_<output>.json, model/summary.json
    validation/validation.json, validation/<output>_residuals.csv
    simulation/comparison.csv, simulation/comparison.json
    report/*.csv, report/*.svg
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from ._io import atomic_write_json
from .closedloop import MicrogridScene, run_comparison, staircase
from .config import ENV_PREFIX, RunConfig, load_config
from .estimation import EstimationConfig, discard_count
from .exceptions import (
    ConfigError,
    DataError,
    DivergenceError,
    SearchExhaustedError,
    ValidationFailure,
)
from .excitation import build_scenario_signals
from .hwmodel import HWModelMimo, load_model, save_model
from .metrics import nrmse_fit
from .plant import PlantScenario, add_measurement_noise, simulate
from .report import write_comparison_report, write_model_report
from .search import run_search, validation_cascade
from .timeseries import TimeSeries, read_csv, write_csv
from .validation import analyze

log = logging.getLogger("hwident")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EXHAUSTED = 4
EXIT_VALIDATION = 5
EXIT_DIVERGENCE = 6

OUTPUT_CHANNELS = ("u_d", "u_q", "f")
VAL_SEED_OFFSET = 1000
NOISE_SEED_OFFSET = 7


def _paths(cfg: RunConfig):
    root = cfg.out_dir
    return {
        "data": os.path.join(root, "data"),
        "model": os.path.join(root, "model"),
        "validation": os.path.join(root, "validation"),
        "simulation": os.path.join(root, "simulation"),
        "report": os.path.join(root, "report"),
    }


def _dataset(cfg: RunConfig, seed: int) -> TimeSeries:
    v, f = cfg.excitation_specs(seed)
    data = cfg.raw["data"]
    scenario = PlantScenario(
        cfg.plant_params(),
        build_scenario_signals(v, f),
        solver_step=float(data["solver_step"]),
        preroll=float(data["preroll"]),
    )
    out = simulate(scenario)
    return add_measurement_noise(out, OUTPUT_CHANNELS, float(data["noise_ratio"]), seed + NOISE_SEED_OFFSET)


def _read(path) -> TimeSeries:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return read_csv(path)


def _load_datasets(cfg):
    d = _paths(cfg)["data"]
    return _read(os.path.join(d, "est.csv")), _read(os.path.join(d, "val.csv"))


def _load_model(cfg) -> HWModelMimo:
    path = os.path.join(_paths(cfg)["model"], "model.json")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_model(path)


def cmd_gen_data(cfg: RunConfig) -> int:
    est = _dataset(cfg, cfg.seed)
    val = _dataset(cfg, cfg.seed + VAL_SEED_OFFSET)
    # both records exist before anything is written, so a diverging plant leaves no files
    d = _paths(cfg)["data"]
    os.makedirs(d, exist_ok=True)
    write_csv(est, os.path.join(d, "est.csv"))
    write_csv(val, os.path.join(d, "val.csv"))
    log.info("wrote %s and %s (%d samples each)", "est.csv", "val.csv", len(est))
    return EXIT_OK


def _fits(block, est, val):
    skip = discard_count(block, EstimationConfig())
    return {
        "estimation": nrmse_fit(est[block.output_name][skip:], block.simulate(est)[skip:]),
        "validation": nrmse_fit(val[block.output_name][skip:], block.simulate(val)[skip:]),
    }


def cmd_identify(cfg: RunConfig) -> int:
    est, val = _load_datasets(cfg)
    space = cfg.search_space()
    est_cfg = cfg.estimation_config()
    rcfg = cfg.residual_config()
    paths = _paths(cfg)
    os.makedirs(paths["model"], exist_ok=True)
    blocks, summary, exhausted = [], {"outputs": {}}, []
    for out in cfg.outputs:
        t0 = time.perf_counter()
        board = run_search(space, est, val, out, est_cfg, workers=cfg.workers)
        log.info(
            "%s: %d candidates, %d above %.0f %% (%.1f s)",
            out, len(board.fitted), board.count_above_threshold, space.threshold, time.perf_counter() - t0,
        )
        try:
            cand, rejections = validation_cascade(
                board, val, rcfg, residual_policy=cfg.residual_policy
            )
        except SearchExhaustedError as exc:
            board.write(os.path.join(paths["model"], f"leaderboard_{out}.json"))
            for r in exc.rejections:
                log.error("%s candidate %d rejected: %s", out, r.index, ", ".join(r.failed_checks))
            exhausted.append(out)
            continue
        board.write(os.path.join(paths["model"], f"leaderboard_{out}.json"))
        blocks.append(cand.model)
        summary["outputs"][out] = {
            "candidate": cand.to_dict(),
            "fits": _fits(cand.model, est, val),
            "residuals_passed": board.residuals_passed,
            "rejections": len(rejections),
            "count_above_threshold": board.count_above_threshold,
            "n_candidates": len(board.candidates),
            "n_fitted": len(board.fitted),
        }
    if exhausted:
        log.error("validation cascade exhausted for %s", ", ".join(exhausted))
        return EXIT_EXHAUSTED
    model = HWModelMimo(tuple(blocks))
    save_model(model, os.path.join(paths["model"], "model.json"))
    atomic_write_json(os.path.join(paths["model"], "summary.json"), summary)
    for out, s in summary["outputs"].items():
        log.info(
            "%s: %s fit est %.2f %% val %.2f %%%s", out, s["candidate"]["structure"], s["fits"]["estimation"],
            s["fits"]["validation"], "" if s["residuals_passed"] else " (residual tests failed)",
        )
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    est, val = _load_datasets(cfg)
    rcfg = cfg.residual_config()
    threshold = cfg.search_space().threshold
    d = _paths(cfg)["validation"]
    os.makedirs(d, exist_ok=True)
    result, failed = {}, []
    for block in model.blocks:
        out = block.output_name
        fits = _fits(block, est, val)
        rep = analyze(block, val, rcfg)
        rep.write_csv(os.path.join(d, f"{out}_residuals.csv"))
        checks = [f"{out}:{c}" for c in rep.failed_checks]
        checks += [f"{out}:fit_{k}" for k, v in fits.items() if not v >= threshold]
        failed += checks
        result[out] = {"fits": fits, "residuals": rep.summary(), "failed_checks": checks}
    atomic_write_json(os.path.join(d, "validation.json"), {"passed": not failed, "outputs": result})
    if failed:
        raise ValidationFailure(f"failed checks: {', '.join(failed)}", failed)
    return EXIT_OK


def _scenes(cfg: RunConfig, model):
    c = cfg.raw["closedloop"]
    sched = staircase(c["levels"], float(c["hold"]), float(cfg.raw["data"]["sample_time"]))
    common = dict(
        schedule=sched, R_g=float(c["R_g"]), L_g=float(c["L_g"]), preroll=float(c["preroll"]),
        solver_step=float(cfg.raw["data"]["solver_step"]), coupling=c["coupling"],
    )
    return MicrogridScene(cfg.plant_params(), label="black box", **common), MicrogridScene(
        model, label="surrogate", **common
    )


def cmd_simulate(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    ref, sur = _scenes(cfg, model)
    result = run_comparison(ref, sur)
    d = _paths(cfg)["simulation"]
    os.makedirs(d, exist_ok=True)
    write_csv(result.series, os.path.join(d, "comparison.csv"))
    atomic_write_json(os.path.join(d, "comparison.json"), result.summary())
    log.info("closed loop: %s", json.dumps(result.summary()))
    if not result.stable:
        raise DivergenceError("closed-loop outputs left the bounded region")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    est, val = _load_datasets(cfg)
    paths = _paths(cfg)
    summary, errors = write_model_report(
        model, {"estimation": est, "validation": val}, paths["report"], cfg.residual_config()
    )
    comp = os.path.join(paths["simulation"], "comparison.csv")
    if os.path.exists(comp):
        from .closedloop import ComparisonResult

        errors += write_comparison_report(ComparisonResult(read_csv(comp), {}, {}, True), paths["report"])
    atomic_write_json(os.path.join(paths["report"], "report.json"), {"outputs": summary, "plot_errors": errors})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "identify": cmd_identify,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hwident",
        description="Identify Hammerstein-Wiener surrogates of inverter models.",
        epilog=f"Any config key can be set from the environment: {ENV_PREFIX}SEED=3, "
        f"{ENV_PREFIX}SEARCH__MAX_ITER=5 (double underscore descends into a section).",
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--workers", type=int, help="parallel candidate fits")
    p.add_argument("--out-dir", help="root directory for all outputs")
    p.add_argument("--mode", choices=("gfm", "gfl"), help="plant under identification")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for noisy in ("numba", "matplotlib"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    try:
        cfg = load_config(
            args.config, seed=args.seed, workers=args.workers, out_dir=args.out_dir, mode=args.mode
        )
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_DATA
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except SearchExhaustedError as exc:
        log.error("search exhausted: %s", exc)
        return EXIT_EXHAUSTED
    except ValidationFailure as exc:
        log.error("validation failed: %s", exc)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except KeyboardInterrupt:
        return EXIT_ERROR
    except Exception:
        log.exception("unexpected error")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
