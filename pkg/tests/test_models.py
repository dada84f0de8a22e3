import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lope.core import PreconditionError
from lope.envs import action_posterior, random_tabular_env, random_tabular_policy
from lope.models import (
    ClassifierConfig,
    MlpConfig,
    fit_mlp,
    fit_ridge,
    fit_softmax_classifier,
    init_mlp_params,
    kmeans,
    mlp_backward,
    mlp_forward,
    model_from_json,
    model_to_json,
)


class TestRidge:
    def test_constant_target(self):
        m = fit_ridge(np.random.default_rng(0).normal(size=(20, 3)), np.full(20, 2.5), l2=0.0)
        np.testing.assert_allclose(m.weights, 0.0, atol=1e-12)
        assert m.intercept == pytest.approx(2.5)

    def test_exact_interpolation(self):
        m = fit_ridge(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]), l2=0.0)
        np.testing.assert_allclose(m.weights, [1.0])
        assert m.intercept == pytest.approx(0.0, abs=1e-15)

    def test_gradient_vanishes(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(50, 4)), rng.normal(size=50)
        m = fit_ridge(X, y, l2=0.1)
        resid = y - X @ m.weights - m.intercept
        grad_w = -2 * X.T @ resid + 2 * 0.1 * m.weights
        grad_b = -2 * resid.sum()
        assert np.linalg.norm(np.append(grad_w, grad_b)) <= 1e-8

    def test_singular_without_penalty(self):
        X = np.ones((5, 2))
        with pytest.raises(np.linalg.LinAlgError, match="l2 > 0"):
            fit_ridge(X, np.arange(5.0), l2=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 10.0))
    def test_normal_equations(self, seed, l2):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(30, 3)), rng.normal(size=30)
        m = fit_ridge(X, y, l2)
        Xc = X - X.mean(axis=0)
        r = (Xc.T @ Xc + l2 * np.eye(3)) @ m.weights - Xc.T @ (y - y.mean())
        assert np.linalg.norm(r) <= 1e-8 * (1 + np.linalg.norm(X.T @ y))

    def test_json_round_trip(self):
        m = fit_ridge(np.eye(3), np.array([1.0, 2.0, 3.0]))
        back = model_from_json(model_to_json(m))
        np.testing.assert_array_equal(back.weights, m.weights)
        assert back.intercept == m.intercept


class TestSoftmaxClassifier:
    def test_single_class(self):
        X = np.random.default_rng(0).normal(size=(40, 2))
        clf = fit_softmax_classifier(X, np.zeros(40, int), n_classes=3)
        p = clf.predict_proba(X)
        assert np.all(p[:, 0] > 0.9)

    def test_separable(self):
        rng = np.random.default_rng(2)
        X = np.vstack([rng.normal(-2, 0.5, (30, 2)), rng.normal(2, 0.5, (30, 2))])
        y = np.repeat([0, 1], 30)
        clf = fit_softmax_classifier(X, y)
        assert np.all(clf.predict_proba(X).argmax(axis=1) == y)

    def test_empty(self):
        with pytest.raises(PreconditionError):
            fit_softmax_classifier(np.zeros((0, 2)), np.zeros(0, int), n_classes=2)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            fit_softmax_classifier(np.zeros((2, 1)), np.array([0, 3]), n_classes=2)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_probabilities_normalized_and_floored(self, seed):
        rng = np.random.default_rng(seed)
        clf = fit_softmax_classifier(rng.normal(size=(20, 3)), rng.integers(0, 4, 20), ClassifierConfig(epochs=20), n_classes=4)
        p = clf.predict_proba(rng.normal(scale=50.0, size=(10, 3)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert p.min() >= 1e-9

    def test_recovers_bayes_posterior(self):
        tab = random_tabular_env(3, 3, 4, 3)
        pi0 = random_tabular_policy(3, 3, 4)
        ds = tab.sample_historical(pi0, 100_000, seed=0)
        cell = ds.user_index * 3 + ds.short_rewards.argmax(axis=1)
        clf = fit_softmax_classifier(np.eye(9)[cell], ds.action, n_classes=4, offsets=np.log(pi0.probs[ds.user_index]))
        fitted = clf.predict_proba(np.eye(9), offsets=np.log(pi0.probs[np.arange(9) // 3]))
        exact = action_posterior(tab, pi0).reshape(9, 4)
        tv = 0.5 * np.abs(fitted - exact).sum(axis=1)
        assert tv.max() <= 0.02

    def test_json_round_trip(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 2))
        clf = fit_softmax_classifier(X, rng.integers(0, 3, 20), ClassifierConfig(epochs=10))
        back = model_from_json(model_to_json(clf))
        np.testing.assert_array_equal(back.predict_proba(X), clf.predict_proba(X))


class TestMlp:
    def test_zero_output_layer_predicts_zero(self):
        params = init_mlp_params([4, 32, 32, 32, 1], np.random.default_rng(0))
        out, _ = mlp_forward(params, np.random.default_rng(1).normal(size=(7, 4)))
        np.testing.assert_array_equal(out, 0.0)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = init_mlp_params([3, 6, 5, 4, 1], rng, zero_output=False)
        X, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))

        def loss(ps):
            out, _ = mlp_forward(ps, X)
            return 0.5 * float(((out - y) ** 2).sum())

        out, acts = mlp_forward(params, X)
        grads = mlp_backward(params, acts, out - y)
        step = 1e-5
        for li, (W, _) in enumerate(params):
            for idx in np.ndindex(W.shape):
                plus = [(w.copy(), b.copy()) for w, b in params]
                minus = [(w.copy(), b.copy()) for w, b in params]
                plus[li][0][idx] += step
                minus[li][0][idx] -= step
                fd = (loss(plus) - loss(minus)) / (2 * step)
                an = grads[li][0][idx]
                assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd), abs(an))

    def test_fits_linear_target(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=4)
        X = rng.normal(size=(2000, 4))
        model = fit_mlp(X, X @ w, seed=0)
        X_test = rng.normal(size=(500, 4))
        assert np.mean((model.predict(X_test) - X_test @ w) ** 2) <= 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(50, 2)), rng.normal(size=50)
        cfg = MlpConfig(hidden=(8,), epochs=5)
        np.testing.assert_array_equal(fit_mlp(X, y, cfg, seed=1).predict(X), fit_mlp(X, y, cfg, seed=1).predict(X))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        X = np.random.default_rng(0).normal(size=(20, 2))
        with pytest.raises(FloatingPointError, match="epoch"):
            fit_mlp(X, np.full(20, 1e200) * np.arange(20), MlpConfig(hidden=(4,), epochs=3, learning_rate=1e10))

    def test_json_round_trip(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
        m = fit_mlp(X, y, MlpConfig(hidden=(4, 4), epochs=2))
        np.testing.assert_array_equal(model_from_json(model_to_json(m)).predict(X), m.predict(X))


class TestKMeans:
    def test_single_cluster_is_mean(self):
        pts = np.random.default_rng(0).normal(size=(30, 2))
        res = kmeans(pts, 1)
        np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0))

    def test_separated_blobs(self):
        rng = np.random.default_rng(1)
        pts = np.vstack([rng.normal(-10, 1, (25, 2)), rng.normal(10, 1, (25, 2))])
        _, assign = kmeans(pts, 2, seed=4)
        assert len(set(assign[:25])) == 1 and len(set(assign[25:])) == 1
        assert assign[0] != assign[-1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_objective_non_increasing(self, seed, k):
        pts = np.random.default_rng(seed).normal(size=(40, 3))
        trace = np.array(kmeans(pts, k, seed=seed).objective_trace)
        assert np.all(np.diff(trace) <= 1e-9 * (1 + trace[:-1]))

    def test_k_too_large(self):
        with pytest.raises(PreconditionError):
            kmeans(np.zeros((2, 2)), 3)
