import math

import numpy as np
import pytest

from core.errors import DomainError, ParseError
from core.nn import (
    Gradients,
    Mlp,
    OptimConfig,
    as_chain,
    backward,
    bce_loss,
    chain_backward,
    forward,
    gradient_check,
    load_mlp,
    mlp_from_dict,
    mlp_init,
    mlp_to_dict,
    optim_step,
    predict_labels,
    predict_proba,
    save_mlp,
    sgd_step,
    train_classifier,
)


class TestMlpInit:
    def test_layer_counts(self):
        assert len(mlp_init([2, 4, 2]).weights) == 2
        assert len(mlp_init([768, 384, 200, 150], mode="regressor").weights) == 3

    def test_classifier_head_in_unit_interval(self, rng):
        mlp = mlp_init([150, 75, 8, 1], seed=1)
        p = predict_proba(mlp, rng.normal(size=(10, 150)))
        assert np.all((p > 0) & (p < 1))

    def test_rejects_short_sizes(self):
        with pytest.raises(DomainError):
            mlp_init([3])

    def test_same_seed_same_weights(self):
        a, b = mlp_init([3, 5, 1], seed=9), mlp_init([3, 5, 1], seed=9)
        for wa, wb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(wa, wb)


class TestForward:
    def test_zero_network_gives_half(self):
        mlp = Mlp([np.zeros((3, 1))], [np.zeros(1)])
        assert forward(mlp, np.array([1.0, -2.0, 5.0]))[0] == 0.5

    def test_identity_regressor(self):
        mlp = Mlp([np.eye(3)], [np.zeros(3)], mode="regressor")
        x = np.array([1.5, -2.0, 0.25])
        np.testing.assert_array_equal(forward(mlp, x), x)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            forward(mlp_init([3, 2]), np.ones(4))

    def test_finite_for_large_inputs(self):
        mlp = mlp_init([2, 8, 1], seed=0)
        assert np.all(np.isfinite(forward(mlp, np.array([[1e6, -1e6], [1e-9, 0.0]]))))

    def test_inference_ignores_dropout(self, rng):
        mlp = mlp_init([2, 8, 1], seed=0, dropout=0.5)
        X = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(forward(mlp, X), forward(mlp, X))


class TestBce:
    def test_half_is_ln2(self):
        assert bce_loss(0.5, 1.0) == pytest.approx(math.log(2.0), abs=1e-15)
        assert bce_loss(0.5, 0.0) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_confident_correct(self):
        assert bce_loss(0.9, 1.0) == pytest.approx(0.10536051565782628, rel=1e-12)

    def test_clamped(self):
        value = bce_loss(1.0 - 1e-12, 0.0)
        assert np.isfinite(value)
        assert value == pytest.approx(-math.log(1e-7), rel=1e-6)


def _mlp_loss(X, targets, loss):
    return lambda m: backward(m, X, targets, loss)[0]


class TestBackward:
    def test_bce_gradient_matches_finite_differences(self, rng):
        mlp = mlp_init([4, 3, 1], seed=5)
        X = rng.normal(size=(10, 4))
        y = (rng.random(10) > 0.5).astype(float)
        _, grads = backward(mlp, X, y, "bce")
        assert gradient_check(mlp, _mlp_loss(X, y, "bce"), grads) <= 1e-4

    def test_xent_gradient_matches_finite_differences(self, rng):
        mlp = mlp_init([5, 4, 3], mode="regressor", seed=6)
        X = rng.normal(size=(8, 5))
        t = rng.integers(0, 3, size=8)
        _, grads = backward(mlp, X, t, "xent")
        assert gradient_check(mlp, _mlp_loss(X, t, "xent"), grads) <= 1e-4

    def test_mse_gradient_matches_finite_differences(self, rng):
        mlp = mlp_init([3, 4, 2], mode="regressor", seed=7)
        X = rng.normal(size=(6, 3))
        Y = rng.normal(size=(6, 2))
        _, grads = backward(mlp, X, Y, "mse")
        assert gradient_check(mlp, _mlp_loss(X, Y, "mse"), grads) <= 1e-4

    def test_duplicated_batch_same_gradient(self, rng):
        mlp = mlp_init([4, 3, 1], seed=8)
        X = rng.normal(size=(6, 4))
        y = (rng.random(6) > 0.5).astype(float)
        v1, g1 = backward(mlp, X, y, "bce")
        v2, g2 = backward(mlp, np.vstack([X, X]), np.concatenate([y, y]), "bce")
        assert v1 == pytest.approx(v2, rel=1e-12)
        for a, b in zip(g1.arrays(), g2.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_zero_gradient_at_minimum(self):
        mlp = Mlp([np.zeros((2, 2))], [np.zeros(2)], mode="regressor")
        X = np.array([[1.0, 2.0], [-1.0, 0.5]])
        _, grads = backward(mlp, X, np.zeros((2, 2)), "mse")
        assert grads.max_abs() <= 1e-8

    def test_unknown_loss(self):
        with pytest.raises(DomainError):
            backward(mlp_init([2, 1]), np.ones((1, 2)), [1.0], "hinge")

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            backward(mlp_init([2, 1]), np.ones((1, 3)), [1.0], "bce")


class TestChain:
    def _pair(self):
        return mlp_init([3, 4, 2], mode="regressor", seed=11), mlp_init([2, 5, 1], seed=12)

    def test_gradients_match_finite_differences(self, rng):
        encoder, clf = self._pair()
        X = rng.normal(size=(9, 3))
        y = (rng.random(9) > 0.5).astype(float)
        w = rng.uniform(0.1, 1.0, size=9)
        _, grads = chain_backward([encoder, clf], X, y, sample_weight=w)
        inner = lambda m: float(np.sum(chain_backward([m, clf], X, y, sample_weight=w)[0]))
        outer = lambda m: float(np.sum(chain_backward([encoder, m], X, y, sample_weight=w)[0]))
        assert gradient_check(encoder, inner, grads[0]) <= 1e-4
        assert gradient_check(clf, outer, grads[1]) <= 1e-4

    def test_single_net_chain_matches_backward(self, rng):
        mlp = mlp_init([4, 3, 1], seed=13)
        X = rng.normal(size=(7, 4))
        y = (rng.random(7) > 0.5).astype(float)
        value, grads = backward(mlp, X, y)
        terms, chain_grads = chain_backward([mlp], X, y)
        assert float(np.sum(terms)) == value
        for a, b in zip(grads.arrays(), chain_grads[0].arrays()):
            np.testing.assert_array_equal(a, b)

    def test_rejects_classifier_inside_chain(self):
        with pytest.raises(DomainError):
            as_chain([mlp_init([3, 2]), mlp_init([2, 1])])

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(DomainError):
            as_chain([mlp_init([3, 4], mode="regressor"), mlp_init([2, 1])])

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            as_chain([])

    def test_step_uses_pre_update_gradients(self, rng):
        encoder, clf = self._pair()
        X = rng.normal(size=(6, 3))
        y = (rng.random(6) > 0.5).astype(float)
        optim = OptimConfig(0.1, 0.0, 6, 1)
        _, grads = chain_backward([encoder, clf], X, y)
        expected = [
            [p - 0.1 * g for p, g in zip(net.parameters(), grad.arrays())]
            for net, grad in zip((encoder, clf), grads)
        ]
        sgd_step([encoder, clf], X, y, optim)
        for net, params in zip((encoder, clf), expected):
            for a, b in zip(net.parameters(), params):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_extra_gradient_is_added(self, rng):
        encoder, clf = self._pair()
        twin_encoder, twin_clf = self._pair()
        X = rng.normal(size=(6, 3))
        y = (rng.random(6) > 0.5).astype(float)
        optim = OptimConfig(0.1, 0.0, 6, 1)
        extra = Gradients.zeros_like(encoder)
        extra.weights[0][...] = 1.0
        sgd_step([encoder, clf], X, y, optim, extra=[extra, None])
        sgd_step([twin_encoder, twin_clf], X, y, optim)
        np.testing.assert_allclose(encoder.weights[0], twin_encoder.weights[0] - 0.1, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(clf.weights[0], twin_clf.weights[0])
        with pytest.raises(DomainError):
            sgd_step([encoder, clf], X, y, optim, extra=[extra])


class TestOptimStep:
    def test_zero_gradient_no_decay(self):
        mlp = mlp_init([3, 2, 1], seed=0)
        before = [p.copy() for p in mlp.parameters()]
        optim_step(mlp, Gradients.zeros_like(mlp), OptimConfig(0.1, 0.0, 8, 1))
        for a, b in zip(before, mlp.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_decoupled_weight_decay(self):
        mlp = mlp_init([3, 2, 1], seed=0)
        before = [p.copy() for p in mlp.parameters()]
        optim_step(mlp, Gradients.zeros_like(mlp), OptimConfig(0.1, 0.5, 8, 1))
        for a, b in zip(before, mlp.parameters()):
            np.testing.assert_allclose(b, a * (1.0 - 0.1 * 0.5))

    def test_rejects_bad_config(self):
        with pytest.raises(DomainError):
            OptimConfig(learning_rate=0.0)
        with pytest.raises(DomainError):
            OptimConfig(batch_size=0)


class TestTrainClassifier:
    def test_loss_decreases(self, rng):
        X = np.vstack([rng.normal(-2.0, 0.5, size=(40, 2)), rng.normal(2.0, 0.5, size=(40, 2))])
        y = np.concatenate([np.zeros(40), np.ones(40)])
        mlp = mlp_init([2, 8, 1], seed=0)
        history = train_classifier(mlp, X, y, OptimConfig(0.1, 0.0, 16, 50), seed=0)
        assert history[-1] < history[0]
        assert np.mean(predict_labels(mlp, X) == np.where(y > 0, 1, -1)) >= 0.95

    def test_trains_whole_chain(self, rng):
        X = np.vstack([rng.normal(-2.0, 0.5, size=(40, 2)), rng.normal(2.0, 0.5, size=(40, 2))])
        y = np.concatenate([np.zeros(40), np.ones(40)])
        encoder, clf = mlp_init([2, 4, 2], mode="regressor", seed=2), mlp_init([2, 8, 1], seed=3)
        before = [p.copy() for p in encoder.parameters()]
        history = train_classifier([encoder, clf], X, y, OptimConfig(0.1, 0.0, 16, 50), seed=0)
        assert history[-1] < history[0]
        assert any(not np.array_equal(a, b) for a, b in zip(before, encoder.parameters()))
        assert np.mean(predict_labels(clf, forward(encoder, X)) == np.where(y > 0, 1, -1)) >= 0.95

    def test_deterministic(self, rng):
        X = rng.normal(size=(30, 2))
        y = (X[:, 0] > 0).astype(float)
        a, b = mlp_init([2, 4, 1], seed=1, dropout=0.3), mlp_init([2, 4, 1], seed=1, dropout=0.3)
        train_classifier(a, X, y, OptimConfig(0.05, 1e-5, 8, 5), seed=4)
        train_classifier(b, X, y, OptimConfig(0.05, 1e-5, 8, 5), seed=4)
        for wa, wb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(wa, wb)


class TestSerialization:
    def test_exact_round_trip(self, tmp_path, rng):
        mlp = mlp_init([3, 5, 2], mode="regressor", seed=2, dropout=0.25)
        loaded = load_mlp(save_mlp(mlp, tmp_path / "net.json"))
        assert loaded.mode == "regressor" and loaded.dropout == 0.25
        for a, b in zip(mlp.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_wrong_format(self):
        data = mlp_to_dict(mlp_init([2, 1]))
        data["format"] = "something-else"
        with pytest.raises(ParseError):
            mlp_from_dict(data)

    def test_wrong_parameter_count(self):
        data = mlp_to_dict(mlp_init([2, 3, 1]))
        data["weights"][0] = data["weights"][0][:-1]
        with pytest.raises(ParseError):
            mlp_from_dict(data)

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  \"format\": \n}", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            load_mlp(path)
        assert info.value.line_no is not None
