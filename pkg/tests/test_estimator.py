import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scanfer.estimator import ScanFerClassifier, check_images, check_labels


def small(**kw):
    params = dict(input_size=20, epochs=2, batch_size=8, lr_backbone=0.01, lr_heads=0.05, augment=False)
    params.update(kw)
    return ScanFerClassifier(**params)


@pytest.fixture(scope="module")
def data():
    r = np.random.default_rng(0)
    return r.uniform(size=(14, 3, 20, 20)), np.repeat(np.arange(7), 2)


def test_params_and_clone():
    est = small(lam=0.3)
    params = est.get_params()
    assert params["lam"] == 0.3 and params["input_size"] == 20
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=5)
    assert est.epochs == 5


def test_fit_predict(data):
    X, y = data
    est = small().fit(X, y)
    assert len(est.history_) == 2
    proba = est.predict_proba(X)
    assert proba.shape == (14, 7)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    pred = est.predict(X)
    np.testing.assert_array_equal(pred, np.argmax(est.decision_function(X), axis=1))
    assert est.score(X, y) == est.report(X, y).accuracy
    np.testing.assert_array_equal(est.classes_, np.arange(7))


def test_fit_deterministic(data):
    X, y = data
    a = small(random_state=4).fit(X, y).decision_function(X)
    b = small(random_state=4).fit(X, y).decision_function(X)
    assert a.tobytes() == b.tobytes()


def test_unfitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 3, 20, 20)))


@pytest.mark.parametrize("X", [np.zeros((2, 3, 16, 16)), np.full((2, 3, 20, 20), 1.5), np.zeros((2, 1200))])
def test_image_validation(X):
    with pytest.raises(ValueError):
        check_images(X, 20)


@pytest.mark.parametrize("y", [[0, 7], [0.5, 1.0], ["a", "b"], [-1, 0]])
def test_label_validation(y):
    with pytest.raises(ValueError):
        check_labels(y)


def test_bad_k(data):
    with pytest.raises(ValueError):
        small(k=3).fit(*data)
