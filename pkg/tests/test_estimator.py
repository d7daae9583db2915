import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xcos.config import SynthConfig
from xcos.data import synth_identities
from xcos.estimator import XCosVerifier, check_images, check_pairs

TINY = dict(input_size=(28, 28), block_channels=(8, 16), grid_channels=8, epochs=3, teacher_epochs=3,
            batch_size=16, calib_pairs=30)


@pytest.fixture(scope="module")
def faces():
    records = synth_identities(SynthConfig(identities=4, images_per_identity=8, image_size=(28, 28)))
    X = np.stack([r.pixels for r in records])
    y = np.array([f"id{r.identity_id}" for r in records])
    return X, y


@pytest.fixture(scope="module")
def fitted(faces):
    return XCosVerifier(**TINY).fit(*faces)


def pairs_of(X, y, idx):
    P = np.stack([np.stack([X[i], X[j]]) for i, j in idx])
    return P, np.array([y[i] == y[j] for i, j in idx])


def test_params_and_clone():
    est = XCosVerifier(variant="unit", epochs=5)
    params = est.get_params()
    assert params["variant"] == "unit" and params["epochs"] == 5 and params["random_state"] == 0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(lam=0.5).lam == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        XCosVerifier().predict(np.zeros((1, 2, 56, 56, 3), dtype=np.uint8))


def test_validation_helpers():
    assert check_images(np.zeros((2, 4, 4, 3))).dtype == np.uint8
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4, 3), 300))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 4, 3)), (8, 8))
    with pytest.raises(ValueError):
        check_pairs(np.zeros((1, 3, 4, 4, 3)))
    assert check_pairs(np.zeros((2, 2, 4, 4, 3))).shape == (2, 2, 4, 4, 3)


def test_fit_rejects_bad_input(faces):
    X, y = faces
    with pytest.raises(ValueError, match="two identities"):
        XCosVerifier(**TINY).fit(X[:4], y[:4])
    with pytest.raises(ValueError):
        XCosVerifier(**TINY).fit(X, y[:-1])
    with pytest.raises(ValueError, match="variant"):
        XCosVerifier(**{**TINY, "variant": "fancy"}).fit(X, y)


def test_fitted_attributes(fitted, faces):
    _, y = faces
    assert list(fitted.classes_) == sorted(set(y))
    assert len(fitted.history_) == 3 and np.isfinite(fitted.threshold_)
    assert fitted.calibration_.pair_count == 60


def test_predict_score_transform_explain(fitted, faces):
    X, y = faces
    P, labels = pairs_of(X, y, [(0, 1), (0, 9), (8, 10), (3, 20), (16, 17), (24, 2)])
    scores = fitted.decision_function(P)
    assert scores.shape == (6,) and np.all(np.abs(scores) <= 1 + 1e-9)
    np.testing.assert_array_equal(fitted.predict(P), scores > fitted.threshold_)
    assert 0.0 <= fitted.score(P, labels) <= 1.0
    assert fitted.teacher_score(P).shape == (6,)
    assert fitted.transform(X[:3]).shape == (3, 8 * 7 * 7)
    e = fitted.explain(X[0], X[9])
    assert e.value == pytest.approx(scores[1], abs=1e-12)
    assert e.value == pytest.approx(float(np.sum(e.s.values * e.w.values)), abs=1e-12)


def test_fit_is_deterministic(fitted, faces):
    X, y = faces
    again = XCosVerifier(**TINY).fit(X, y)
    P, _ = pairs_of(X, y, [(0, 1), (5, 30)])
    np.testing.assert_array_equal(again.decision_function(P), fitted.decision_function(P))
