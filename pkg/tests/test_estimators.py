import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dlis.errors import ShapeError
from dlis.estimators import (ChannelPrunedClassifier, CNNClassifier, TernaryClassifier,
                             WeightPrunedClassifier, check_images, check_labels)
from dlis.io import synth_dataset


@pytest.fixture(scope="module")
def data():
    d = synth_dataset(0, 48, classes=2, size=8)
    labels = np.array(["cat", "dog"])[d.labels]
    return d.images, labels


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return CNNClassifier(arch="tiny", epochs=4, lr=0.05, batch_size=8).fit(X, y)


def test_params_and_clone():
    clf = CNNClassifier(arch="tiny", lr=0.2)
    assert clf.get_params()["lr"] == 0.2
    c = clone(clf.set_params(epochs=3))
    assert c.get_params()["epochs"] == 3 and not hasattr(c, "network_")
    w = WeightPrunedClassifier(clf, levels=(0.3, 0.6))
    assert clone(w).get_params()["estimator__lr"] == 0.2


def test_fit_predict_score(fitted, data):
    X, y = data
    pred = fitted.predict(X)
    assert set(pred) <= {"cat", "dog"}
    proba = fitted.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert fitted.score(X, y) >= 0.9
    assert [s.epoch for s in fitted.history_] == [0, 1, 2, 3]


def test_fit_is_deterministic(data):
    X, y = data
    a = CNNClassifier(arch="tiny", epochs=1, batch_size=8).fit(X, y).decision_function(X)
    b = CNNClassifier(arch="tiny", epochs=1, batch_size=8).fit(X, y).decision_function(X)
    assert np.array_equal(a, b)


def test_not_fitted_and_wrong_shape(fitted):
    with pytest.raises(NotFittedError):
        CNNClassifier().predict(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError):
        fitted.predict(np.zeros((1, 3, 16, 16)))


def test_weight_pruned(fitted, data):
    X, y = data
    w = WeightPrunedClassifier(fitted, levels=(0.5,), finetune_epochs=1).fit(X, y)
    assert w.estimator_ is fitted and w.state_.technique == "weight_prune"
    assert any(l.weight_format == "csr" for l in w.network_.layers)
    assert set(w.predict(X)) <= {"cat", "dog"}
    with pytest.raises(ValueError, match="not fitted on"):
        w.fit(X, np.array(["cow"] * len(X)))


def test_channel_pruned_and_ternary(fitted, data):
    X, y = data
    c = ChannelPrunedClassifier(fitted, removals=2, prune_every=2).fit(X, y)
    assert len(c.record_.removals) == 2 and 0 < c.record_.compression_rate < 1
    assert c.predict(X).shape == (len(X),)
    t = TernaryClassifier(fitted, threshold=0.2, finetune_epochs=1).fit(X, y)
    assert t.state_.technique == "ttq"
    for layer in t.network_.layers:
        if layer.kind == "conv2d":
            assert len(np.unique(layer.params["weight"])) <= 3


def test_unfitted_base_is_fitted_on_demand(data):
    X, y = data
    base = CNNClassifier(arch="tiny", epochs=1, batch_size=8)
    w = WeightPrunedClassifier(base, levels=(0.5,), finetune_epochs=0).fit(X, y)
    assert not hasattr(base, "network_") and hasattr(w.estimator_, "network_")


def test_check_images():
    assert check_images(np.zeros((3, 4, 4))).shape == (1, 3, 4, 4)
    with pytest.raises(ShapeError):
        check_images(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="no images"):
        check_images(np.zeros((0, 3, 4, 4)))
    with pytest.raises(ValueError, match="NaN"):
        check_images(np.full((1, 3, 2, 2), np.nan))
    with pytest.raises(ValueError, match="numeric"):
        check_images(np.array([[[["a"]]]]))
    with pytest.raises(ShapeError):
        check_images(np.zeros((1, 3, 4, 4)), input_shape=(3, 8, 8))


def test_check_labels():
    assert check_labels([0, 1], 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        check_labels([0, 1, 2], 2)
    with pytest.raises(ValueError):
        check_labels(np.zeros((2, 1)), 2)
