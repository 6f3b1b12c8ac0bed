"""Scikit-learn estimator surface."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ivit.data import DatasetSpec, gen_synthetic
from ivit.estimator import InteractionViTClassifier


def small_problem(seed=0, n_per_class=6, classes=3):
    ds = gen_synthetic(
        DatasetSpec(classes=classes, samples=classes * n_per_class,
                    image_size=8, patch_size=4), seed=seed)
    return ds.images, ds.labels, ds.teachers


def small_estimator(**kw):
    args = dict(image_size=8, patch_size=4, embed_dim=8, heads=2, layers=1,
                gcn_hidden=4, epochs=2, batch_size=6, seed=0)
    args.update(kw)
    return InteractionViTClassifier(**args)


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = small_estimator(lr=0.123)
        params = est.get_params()
        assert params["lr"] == 0.123
        est2 = InteractionViTClassifier(**params)
        assert est2.get_params() == params

    def test_clone(self):
        est = small_estimator(epochs=3)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert c is not est

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            small_estimator().predict(np.zeros((1, 8, 8, 1)))


class TestFitPredict:
    def test_fit_predict_shapes_and_labels(self):
        X, y, teachers = small_problem()
        est = small_estimator().fit(X, y, teacher_maps=teachers)
        pred = est.predict(X)
        assert pred.shape == y.shape
        assert set(np.unique(pred)) <= set(np.unique(y))
        proba = est.predict_proba(X)
        assert proba.shape == (len(X), 3)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)

    def test_noncontiguous_label_values_mapped(self):
        X, y, _ = small_problem()
        y_shift = y * 3 + 5  # labels {5, 8, 11}
        est = small_estimator().fit(X, y_shift)
        pred = est.predict(X[:4])
        assert set(pred) <= {5, 8, 11}
        np.testing.assert_array_equal(est.classes_, [5, 8, 11])

    def test_without_teachers_plain_pretrain(self):
        X, y, _ = small_problem()
        est = small_estimator().fit(X, y)
        assert not est.switches_.iq
        assert est.interaction_maps(X[:2])["guided"] is None

    def test_with_teachers_two_stage(self):
        X, y, teachers = small_problem()
        est = small_estimator().fit(X, y, teacher_maps=teachers)
        stages = {r.stage for r in est.history_}
        assert stages == {"pretrain", "finetune"}
        maps = est.interaction_maps(X[:2])
        assert maps["guided"].shape == (2, 4)
        np.testing.assert_allclose(maps["guided"].sum(axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(maps["visual"].sum(axis=1), 1.0, atol=1e-5)

    def test_score_mixin(self):
        X, y, teachers = small_problem()
        est = small_estimator().fit(X, y, teacher_maps=teachers)
        acc = est.score(X, y)
        assert 0.0 <= acc <= 1.0

    def test_input_validation(self):
        X, y, teachers = small_problem()
        est = small_estimator()
        with pytest.raises(ValueError, match="images"):
            est.fit(np.zeros((4, 5, 5)), np.zeros(4, dtype=int))
        with pytest.raises(ValueError, match="labels"):
            est.fit(X, y[:-1])
        with pytest.raises(ValueError, match="teacher"):
            est.fit(X, y, teacher_maps=teachers[:, :2])

    def test_deterministic_per_seed(self):
        X, y, teachers = small_problem()
        a = small_estimator().fit(X, y, teacher_maps=teachers).predict_proba(X[:3])
        b = small_estimator().fit(X, y, teacher_maps=teachers).predict_proba(X[:3])
        np.testing.assert_array_equal(a, b)
