import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kklcert import KKLObserver
from kklcert.certify import BabConfig

SMALL = dict(eigenvalues=(1.0, 2.0, 3.0), hidden_layers=1, width=8, horizon=2.0, epochs=2,
             finetune_rounds=1, inverse_epochs=2, region_margin=0.0,
             training_options={"T_b": 8.0, "pool_size": 128, "lbfgs_iters": 3,
                               "inverse_samples": 200}, seed=1)


@pytest.fixture(scope="module")
def fitted():
    X = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    return KKLObserver(**SMALL).fit(X), X


def test_params_round_trip():
    est = KKLObserver(**SMALL)
    params = est.get_params()
    assert params["width"] == 8 and params["training_options"]["pool_size"] == 128
    twin = clone(est).set_params(width=4)
    assert twin.width == 4 and est.width == 8


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        KKLObserver().transform(np.zeros((1, 2)))


def test_transform_shapes(fitted):
    est, X = fitted
    Z = est.transform(X)
    assert Z.shape == (10, 3)
    assert est.inverse_transform(Z).shape == (10, 2)
    assert est.fit_transform(X).shape == (10, 3)
    assert est.residual(X).shape == (10, 3)
    with pytest.raises(ValueError):
        est.transform(np.zeros((2, 3)))


def test_fit_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        KKLObserver(**SMALL).fit(np.zeros((5, 3)))


def test_certify_and_simulate(fitted):
    est, _ = fitted
    cert = est.certify(BabConfig(max_subboxes=16))
    q = cert.quantities
    assert cert.x_ultimate >= q.reconstruction
    assert np.isfinite([q.residual_sup, q.lipschitz, q.reconstruction]).all()
    run = est.simulate([0.5, 0.0], horizon=1.0, dt=1e-2)
    assert run.error.shape == (101, 1)
    env = est.error_envelope(n_trajectories=3, horizon=4.0)
    assert np.isfinite(env.envelope)
