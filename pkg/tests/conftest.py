import numpy as np
import pytest

from hwident.hwmodel import HWModelMiso, LinearBlock
from hwident.nonlinearity import make_nonlinearity
from hwident.timeseries import TimeSeries

FAMILY_DEGREE = {"polynomial": 3, "piecewise_linear": 5, "sigmoid_network": 3, "wavelet_network": 3}


def randomized(nl, rng, scale=0.3):
    """Perturb an identity-initialized nonlinearity so every parameter matters."""
    p = nl.params.copy()
    if nl.kind == "piecewise_linear":
        m = p.size // 2
        p[m:] += scale * rng.standard_normal(m)
    elif nl.kind in ("sigmoid_network", "wavelet_network"):
        n = (p.size - 2) // 3
        p[:n] = 0.5 + rng.uniform(0, 0.5, n)
        p[n : 2 * n] *= 1 + 0.2 * rng.uniform(-1, 1, n)
        p[2 * n : 3 * n] += 0.1 * rng.standard_normal(n)
        p[-2] = 0.1
    else:
        p = p + scale * rng.standard_normal(p.size)
    return nl.with_params(p)


def random_model(family, rng, n_b=2, n_f=2, n_k=1, inputs=("a", "b"), output="y"):
    deg = FAMILY_DEGREE.get(family)
    f = tuple(randomized(make_nonlinearity(family, deg, (-2.0, 2.0)), rng) for _ in inputs)
    h = randomized(make_nonlinearity(family, deg, (-2.0, 2.0)), rng)
    poles = rng.uniform(0.2, 0.8, n_f)
    den = np.poly(poles) if n_f else np.array([1.0])
    num = rng.uniform(0.2, 1.0, (len(inputs), n_b))
    return HWModelMiso(
        tuple(inputs), output, f, LinearBlock(num, den, n_k, 1e-3), h,
        input_offsets=(0.1,) * len(inputs), input_scales=(1.5,) * len(inputs),
        output_offset=0.2, output_scale=0.7,
    )


def random_inputs(rng, n=400, names=("a", "b"), amplitude=1.5):
    # smooth-ish multilevel record
    cols = {
        nm: np.repeat(rng.uniform(-amplitude, amplitude, n // 20), 20) + 0.05 * rng.standard_normal(n)
        for nm in names
    }
    return TimeSeries.from_channels(1e-3, cols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 11):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
