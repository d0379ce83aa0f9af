import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hwident.estimators import HammersteinWienerRegressor, HWStructureSearch
from hwident.hwmodel import HWModelMiso, LinearBlock
from hwident.nonlinearity import Identity, Polynomial
from hwident.search import SearchSpace


def generated(seed, n=1500):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.repeat(rng.uniform(-1, 1, n // 15), 15) for _ in range(2)])
    truth = HWModelMiso(
        ("u0", "u1"), "y", (Polynomial([0.0, 1.0, 0.3]), Identity()),
        LinearBlock([[0.4, 0.2], [0.3, 0.0]], np.poly([0.5]), 1, 1e-3), Identity(),
    )
    return X, truth.simulate(X)


def test_regressor_recovers_generator():
    X, y = generated(1)
    reg = HammersteinWienerRegressor(family="polynomial", degree=2, n_b=2, n_f=1, n_k=1, max_iter=50).fit(X, y)
    Xv, yv = generated(2)
    assert reg.fit_percent(Xv, yv) >= 99.0
    assert reg.predict(Xv).shape == yv.shape
    assert reg.result_.method == "levenberg_marquardt"


def test_score_is_r2():
    X, y = generated(3)
    reg = HammersteinWienerRegressor(degree=2, n_b=2, n_f=1, n_k=1, max_iter=30).fit(X, y)
    assert reg.score(X, y) > 0.99


def test_params_and_clone():
    reg = HammersteinWienerRegressor(degree=4, method="levenberg_marquardt")
    c = clone(reg)
    assert c.get_params() == reg.get_params()
    c.set_params(n_f=3)
    assert c.n_f == 3 and reg.n_f == 2


def test_unfitted_and_shape_errors():
    with pytest.raises(NotFittedError):
        HammersteinWienerRegressor().predict(np.zeros((5, 2)))
    X, y = generated(4, n=300)
    reg = HammersteinWienerRegressor(degree=2, n_b=1, n_f=1, max_iter=2).fit(X, y)
    with pytest.raises(ValueError):
        reg.predict(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        HammersteinWienerRegressor(input_names=("a",)).fit(X, y)
    with pytest.raises(ValueError):
        HammersteinWienerRegressor().fit(X, y[:-1])


def test_structure_search():
    X, y = generated(5)
    Xv, yv = generated(6)
    space = SearchSpace(
        families=("polynomial",), degrees={"polynomial": (1, 2)}, n_b=(2,), n_f=(1,), n_k=(1,),
        input_names=("u0", "u1"),
    )
    s = HWStructureSearch(space=space, max_iter=40, residual_policy="prefer").fit(X, y, Xv, yv)
    assert s.best_candidate_.structure.degree == 2
    assert len(s.leaderboard_.candidates) == 2
    assert s.predict(Xv).shape == yv.shape


def test_structure_search_checks_names():
    X, y = generated(7, n=300)
    with pytest.raises(ValueError):
        HWStructureSearch(space=SearchSpace(input_names=("a", "b"))).fit(X, y)
