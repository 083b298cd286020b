"""sklearn facade: fit/predict contracts and the perturbing transformer."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from robustkit.data import make_synthetic
from robustkit.estimator import AdversarialPerturber, RobustImageClassifier
from robustkit.validation import InvalidInputError


def arrays(num_classes=3, n=120, size=8, seed=31):
    ds = make_synthetic(num_classes, n, size, seed=seed, margin=0.12)
    return ds.images.numpy(), ds.labels.numpy()


def fast_params(**over):
    base = dict(mode="standard", epochs=10, batch_size=16, lr=0.1,
                width=8, seed=1)
    base.update(over)
    return base


@pytest.fixture(scope="module")
def fitted():
    X, y = arrays()
    return RobustImageClassifier(**fast_params()).fit(X, y)


class TestClassifier:
    def test_fit_predict_image_arrays(self, fitted):
        X, y = arrays()
        preds = fitted.predict(X)
        assert preds.shape == y.shape
        assert set(preds) <= set(y)
        assert (preds == y).mean() > 1.0 / 3.0

    def test_flat_input_round_trip(self):
        X, y = arrays()
        flat = X.reshape(X.shape[0], -1)
        clf = RobustImageClassifier(**fast_params()).fit(flat, y)
        preds = clf.predict(flat)
        assert preds.shape == y.shape
        assert clf.n_features_in_ == flat.shape[1]

    def test_noncontiguous_string_labels(self):
        X, y = arrays(num_classes=2)
        named = np.where(y == 0, "cat", "ship")
        clf = RobustImageClassifier(**fast_params()).fit(X, named)
        assert list(clf.classes_) == ["cat", "ship"]
        assert set(clf.predict(X)) <= {"cat", "ship"}

    def test_predict_proba_rows_sum_to_one(self, fitted):
        X, _ = arrays()
        proba = fitted.predict_proba(X[:10])
        assert proba.shape == (10, 3)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-6)
        assert (proba >= 0).all()

    def test_decision_function_agrees_with_predict(self, fitted):
        X, _ = arrays()
        logits = fitted.decision_function(X[:10])
        codes = logits.argmax(axis=1)
        assert np.array_equal(fitted.predict(X[:10]),
                              fitted.classes_[codes])

    def test_get_params_set_params_clone(self):
        clf = RobustImageClassifier(**fast_params(eps=4.0))
        params = clf.get_params()
        assert params["eps"] == 4.0
        assert params["mode"] == "standard"
        twin = clone(clf)
        assert twin.get_params() == params
        twin.set_params(epochs=1)
        assert twin.epochs == 1 and clf.epochs == 10

    def test_unfitted_predict_raises(self):
        clf = RobustImageClassifier()
        X, _ = arrays()
        with pytest.raises(NotFittedError):
            clf.predict(X)

    def test_single_class_rejected(self):
        X, _ = arrays()
        with pytest.raises(InvalidInputError, match="2 classes"):
            RobustImageClassifier(**fast_params()).fit(X, np.zeros(len(X)))

    def test_bad_flat_width_rejected(self):
        X, y = arrays()
        flat = X.reshape(X.shape[0], -1)[:, :-1]
        with pytest.raises(InvalidInputError, match="reshape"):
            RobustImageClassifier(**fast_params()).fit(flat, y)

    def test_distillation_mode_fits_own_teacher(self):
        X, y = arrays(n=32)
        clf = RobustImageClassifier(
            **fast_params(mode="agkd-bml", epochs=2, teacher_epochs=2))
        clf.fit(X, y)
        assert hasattr(clf, "teacher_model_")
        assert clf.teacher_model_.frozen
        assert clf.predict(X).shape == y.shape

    def test_distillation_accepts_fitted_teacher(self):
        X, y = arrays(n=32)
        teacher = RobustImageClassifier(**fast_params(epochs=2)).fit(X, y)
        clf = RobustImageClassifier(
            **fast_params(mode="agkd", epochs=1, teacher=teacher))
        clf.fit(X, y)
        assert clf.teacher_model_.frozen


class TestPerturber:
    def test_transform_stays_in_budget(self, fitted):
        X, _ = arrays()
        pert = AdversarialPerturber(fitted, attack="pgd-3", eps=8.0,
                                    seed=2).fit()
        out = pert.transform(X[:12])
        assert out.shape == X[:12].shape
        assert np.abs(out - X[:12]).max() <= 8.0 / 255.0 + 1e-6
        assert out.min() >= -1e-6 and out.max() <= 1.0 + 1e-6

    def test_flat_shape_preserved(self, fitted):
        X, _ = arrays()
        flat = X[:8].reshape(8, -1)
        pert = AdversarialPerturber(fitted, attack="fgsm", eps=4.0).fit()
        out = pert.transform(flat)
        assert out.shape == flat.shape

    def test_deterministic_given_seed(self, fitted):
        X, _ = arrays()
        pert = AdversarialPerturber(fitted, attack="pgd-3", seed=5).fit()
        assert np.array_equal(pert.transform(X[:8]), pert.transform(X[:8]))

    def test_perturbation_lowers_accuracy(self, fitted):
        X, y = arrays()
        clean_acc = (fitted.predict(X) == y).mean()
        pert = AdversarialPerturber(fitted, attack="pgd-5", eps=8.0).fit()
        adv_acc = (fitted.predict(pert.transform(X)) == y).mean()
        assert adv_acc <= clean_acc

    def test_requires_estimator_and_fit(self, fitted):
        with pytest.raises(InvalidInputError, match="estimator"):
            AdversarialPerturber().fit()
        X, _ = arrays()
        with pytest.raises(NotFittedError):
            AdversarialPerturber(fitted).transform(X[:4])
        with pytest.raises(NotFittedError):
            AdversarialPerturber(RobustImageClassifier()).fit()

    def test_works_in_pipeline(self, fitted):
        X, y = arrays()
        pipe = Pipeline([
            ("attack", AdversarialPerturber(fitted, attack="fgsm", eps=8.0)),
            ("clf", RobustImageClassifier(**fast_params(epochs=2))),
        ])
        pipe.fit(X[:32], y[:32])
        preds = pipe.predict(X[:8])
        assert preds.shape == (8,)
