"""One test per acceptance criterion; verdicts are printed at the end of the run.

Criteria 1 and 8 run the default GFM and GFL pipelines through the CLI,
which takes a while on a single core.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_inputs, random_model
from hwident import cli
from hwident.estimation import EstimationConfig
from hwident.hwmodel import HWModelMiso, LinearBlock
from hwident.metrics import fpe, nrmse_fit
from hwident.nonlinearity import Identity, Polynomial
from hwident.plant import GflParams, GfmParams, PlantScenario, simulate
from hwident.search import Candidate, Leaderboard, SearchSpace, compare_and_update, run_search, validation_cascade
from hwident.estimation import Structure
from hwident.timeseries import TimeSeries, abc_to_dq, dq_to_abc
from hwident.validation import ResidualConfig, correlation_bound, correlation_test

OUTPUTS = ("f", "u_d", "u_q")


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(autouse=True)
def _unrecorded_is_failure(request):
    yield
    n = getattr(request.function, "criterion", None)
    if n is not None and n not in ACCEPTANCE:
        ACCEPTANCE[n] = (False, "raised before a verdict was reached")


def criterion(n):
    def mark(fn):
        fn.criterion = n
        return fn

    return mark


def _run_mode(root, mode, commands):
    out = root / mode
    times = {}
    for cmd in commands:
        t0 = time.perf_counter()
        code = cli.main([cmd, "--mode", mode, "--out-dir", str(out)])
        times[cmd] = (code, time.perf_counter() - t0)
    return out, times


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return {
        "gfm": _run_mode(root, "gfm", ("gen-data", "identify", "validate", "simulate")),
        "gfl": _run_mode(root, "gfl", ("gen-data", "identify", "validate")),
    }


@pytest.mark.slow
@criterion(1)
def test_criterion_01_default_pipeline_fits(pipelines):
    parts, ok = [], True
    for mode, (out, times) in pipelines.items():
        minutes = sum(times[c][1] for c in ("gen-data", "identify", "validate")) / 60
        if times["identify"][0] != 0:
            ok = False
            parts.append(f"{mode}: identify exit {times['identify'][0]}")
            continue
        summary = json.loads((out / "model" / "summary.json").read_text())
        fits = {o: summary["outputs"][o]["fits"] for o in OUTPUTS}
        worst = min(min(f.values()) for f in fits.values())
        ok &= worst >= 92.0 and minutes <= 15.0
        shown = " ".join(f"{o}={fits[o]['estimation']:.2f}/{fits[o]['validation']:.2f}" for o in OUTPUTS)
        parts.append(f"{mode}: est/val {shown}, {minutes:.1f} min")
    record(1, ok, "; ".join(parts))


def _self_id_data(seed, n=3000):
    rng = np.random.default_rng(seed)
    cols = {k: np.repeat(rng.uniform(-1, 1, n // 15), 15) for k in ("a", "b")}
    truth = HWModelMiso(
        ("a", "b"), "y", (Polynomial([0.0, 1.0, 0.3]), Polynomial([0.0, 1.0, -0.2])),
        LinearBlock([[0.4, 0.2], [0.3, -0.1]], np.poly([0.6]), 1, 1e-3), Identity(),
    )
    ts = TimeSeries.from_channels(1e-3, cols)
    return ts.with_channels(y=truth.simulate(ts))


@criterion(2)
def test_criterion_02_self_identification():
    space = SearchSpace(
        families=("polynomial",), degrees={"polynomial": (2, 3)}, n_b=(1, 2), n_f=(1, 2), n_k=(0, 1),
        input_names=("a", "b"),
    )
    t0 = time.perf_counter()
    board = run_search(space, _self_id_data(1), _self_id_data(2), "y", EstimationConfig(max_iter=50))
    seconds = time.perf_counter() - t0
    best = board.best
    ok = best.fit >= 99.9 and best.val_fit >= 99.5 and seconds <= 120
    record(2, ok, f"winner {best.structure.to_dict()} est {best.fit:.4f} % val {best.val_fit:.4f} %, {seconds:.0f} s")


@criterion(3)
def test_criterion_03_metric_exactness():
    fit = nrmse_fit([1, 2, 3], [1, 2, 4])
    expected = 100 * (1 - 1 / math.sqrt(2))
    v = fpe([1, -1, 1, -1], 2)
    ok = abs(fit - expected) <= 1e-9 and abs(fit - 29.289) < 1e-3 and abs(v - 3.0) <= 1e-9
    record(3, ok, f"fit {fit:.9f} %, FPE {v:.12f}")


@criterion(4)
def test_criterion_04_jacobian():
    rng = np.random.default_rng(2024)
    families = ("polynomial", "piecewise_linear", "sigmoid_network", "wavelet_network")
    worst = 0.0
    for k in range(100):
        m = random_model(families[k % 4], rng)
        data = random_inputs(rng, n=200, amplitude=4.0)
        J = m.output_jacobian(data)
        theta = m.theta
        fd = np.empty_like(J)
        for j in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd[:, j] = (m.with_theta(tp).simulate(data) - m.with_theta(tm).simulate(data)) / (2 * h)
        worst = max(worst, np.linalg.norm(J - fd) / np.linalg.norm(fd))
    record(4, worst <= 1e-4, f"worst relative error {worst:.2e} over 100 models")


@criterion(5)
def test_criterion_05_residual_suite():
    passes, rates = 0, []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        rep = correlation_test(rng.standard_normal(10000), {"u": rng.standard_normal(10000)}, max_lag=25)
        passes += rep.passed
        rates.append(rep.violation_fraction())
    alt = [correlation_test(np.tile([1.0, -1.0], n), max_lag=25).passed for n in (200, 1000, 5000)]
    bound = correlation_bound(400)
    ok = passes >= 45 and np.mean(rates) <= 0.02 and not any(alt) and abs(bound - 0.1288) <= 1e-4
    record(5, ok, f"{passes}/50 seeds pass, mean violation {100 * np.mean(rates):.2f} %, "
                  f"alternating fails {not any(alt)}, bound(400) {bound:.5f}")


@criterion(6)
def test_criterion_06_transforms():
    rng = np.random.default_rng(6)
    worst_rt = worst_ripple = 0.0
    t = np.arange(200) * 1e-3
    for _ in range(1000):
        amp, phase, f = rng.uniform(0.1, 2.0), rng.uniform(-np.pi, np.pi), rng.uniform(45, 55)
        th = 2 * np.pi * f * t + phase
        abc = [amp * np.cos(th - k * 2 * np.pi / 3) for k in range(3)]
        theta = 2 * np.pi * f * t + rng.uniform(-np.pi, np.pi)
        d, q = abc_to_dq(*abc, theta)
        back = dq_to_abc(d, q, theta)
        worst_rt = max(worst_rt, max(np.max(np.abs(b - a)) for a, b in zip(abc, back)))
        d, q = abc_to_dq(*abc, th)
        worst_ripple = max(worst_ripple, np.ptp(d), np.ptp(q))
    ok = worst_rt <= 1e-12 and worst_ripple <= 1e-9
    record(6, ok, f"round trip {worst_rt:.1e}, dq ripple {worst_ripple:.1e}")


def _settled(prm, n=3000, **channels):
    channels = channels or {"u_ref": 1.0}
    sched = TimeSeries.from_channels(1e-3, {k: np.full(n, float(v)) for k, v in channels.items()})
    out = simulate(PlantScenario(prm, sched))
    return {k: out[k][-1] for k in out.names}


@criterion(7)
def test_criterion_07_plant_physics():
    prm = GfmParams()
    droop_err = 0.0
    for p in np.round(np.arange(0.1, 1.01, 0.1), 1):
        o = _settled(prm, p_load=p)
        P = o["u_d"] * o["i_d"] + o["u_q"] * o["i_q"]
        droop_err = max(droop_err, abs(o["f"] - (50.0 - prm.m_p * P)))
    track_err = 0.0
    for i_d, i_q in ((0.5, 0.0), (1.0, -0.3), (-0.4, 0.6)):
        o = _settled(GflParams(i_d_ref=i_d, i_q_ref=i_q, f_droop=0.0, v_droop=0.0, L_g=0.01))
        track_err = max(track_err, abs(o["i_d"] - i_d), abs(o["i_q"] - i_q))
    n = 1500
    sched = TimeSeries.from_channels(1e-3, {
        "u_ref": np.where(np.arange(n) < n // 2, 1.0, 1.05),
        "f_ref": np.where(np.arange(n) < n // 3, 50.0, 49.9),
    })
    halving = 0.0
    for prm in (GfmParams(grid_connected=True), GflParams()):
        a = simulate(PlantScenario(prm, sched, solver_step=1e-4))
        b = simulate(PlantScenario(prm, sched, solver_step=5e-5))
        halving = max(halving, *(np.max(np.abs(a[c] - b[c])) for c in ("i_d", "i_q", "u_d", "u_q", "f")))
    ok = droop_err <= 1e-3 and track_err <= 1e-3 and halving <= 1e-6
    record(7, ok, f"droop error {droop_err:.1e} Hz, tracking error {track_err:.1e} pu, step halving {halving:.1e}")


@pytest.mark.slow
@criterion(8)
def test_criterion_08_closed_loop(pipelines):
    out, times = pipelines["gfm"]
    code = times["simulate"][0]
    path = out / "simulation" / "comparison.json"
    if not path.exists():
        record(8, False, f"simulate exit {code}, no comparison written")
    s = json.loads(path.read_text())
    dev = s["max_abs_deviation"]
    ok = s["stable"] and max(dev["u_d"], dev["u_q"]) <= 0.05 and dev["f"] <= 0.1 and code == 0
    record(8, ok, f"stable {s['stable']}, max |du_d| {dev['u_d']:.4f} |du_q| {dev['u_q']:.4f} pu, "
                  f"|df| {dev['f']:.4f} Hz")


MINI = """\
data: {duration: 4.0, settle_time: 0.5, hold_range: [0.1, 0.3], preroll: 2.0}
search:
  families: [polynomial, sigmoid_network]
  degrees: {polynomial: [2], sigmoid_network: [4]}
  n_b: [1, 2]
  n_f: [1, 2]
  n_k: [1]
  max_iter: 5
  threshold: 80.0
validation: {decimation: 5}
closedloop: {hold: 0.4, preroll: 1.0}
"""


def _tree(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@criterion(9)
def test_criterion_09_determinism(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(MINI)
    trees, codes = [], []
    for name, workers in (("first", "1"), ("repeat", "1"), ("parallel", "3")):
        out = tmp_path / name
        for cmd in ("gen-data", "identify", "simulate", "report"):
            codes.append(cli.main([cmd, "--config", str(cfg), "--out-dir", str(out), "--workers", workers]))
        trees.append(_tree(out))
    same = trees[0] == trees[1] == trees[2]
    ok = same and not any(codes) and len(trees[0]) > 20
    record(9, ok, f"{len(trees[0])} artifact files byte-identical across repeat and 1 vs 3 workers: {same}")


def _cand(index, fit, fpe_, gain=None):
    model = None
    if gain is not None:
        model = HWModelMiso(
            ("a",), "y", (Polynomial([0.0, 1.0, 0.3]),), LinearBlock([[0.4, 0.2]], np.poly([0.5]), 1, 1e-3),
            Identity(), output_scale=gain,
        )
    return Candidate(index, Structure(), fit=fit, fpe=fpe_, model=model)


@criterion(10)
def test_criterion_10_search_semantics():
    e1, e2 = 0.10, 1.0
    inc = _cand(0, 95.0, 1.0)
    branches = {
        "dominance": compare_and_update(inc, _cand(1, 96.0, 0.5), e1, e2).index == 1,
        "fpe guard": compare_and_update(inc, _cand(1, 98.0, 5.0), e1, e2).index == 0,
        "complexity": compare_and_update(inc, _cand(1, 94.6, 0.5), e1, e2).index == 1,
    }
    rng = np.random.default_rng(10)
    a = np.repeat(rng.uniform(-1, 1, 200), 15)
    ts = TimeSeries.from_channels(1e-3, {"a": a})
    val = ts.with_channels(y=_cand(9, 0, 0, 1.0).model.simulate(ts) + 0.01 * rng.standard_normal(a.size))
    # ranked order 0, 1, 2, 3: two flawed models, the generator, a spare
    board = Leaderboard("y", [_cand(0, 99.5, 0.1, 1.03), _cand(1, 99.0, 0.15, 0.5),
                              _cand(2, 98.0, 0.2, 1.0), _cand(3, 97.0, 0.3, 1.0)], None, 92.0,
                        SearchSpace(input_names=("a",)))
    chosen, rejections = validation_cascade(board, val, ResidualConfig(max_lag=10))
    cascade_ok = chosen.index == 2 and [r.index for r in rejections] == [0, 1] and all(
        r.failed_checks for r in rejections
    )
    ok = all(branches.values()) and cascade_ok
    record(10, ok, f"branches {branches}, cascade picked {chosen.index} after rejecting "
                   f"{[(r.index, r.failed_checks) for r in rejections]}")
