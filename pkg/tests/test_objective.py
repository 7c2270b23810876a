import warnings

import numpy as np
import pytest

from spattend import gradcheck
from spattend import tensor as T
from spattend.errors import ConfigError, DataError
from spattend.objective import (LossConfig, aggregate_attention, attention_penalty, class_probabilities, loss, nll,
                                onehot, svm_train)


class TestProbabilities:
    def test_equal_logits(self):
        p = class_probabilities(np.ones((1, 2)), np.ones((2, 3))).data
        np.testing.assert_allclose(p, [[1 / 3] * 3], atol=1e-15)

    def test_zero_features_uniform(self):
        w = np.random.default_rng(0).standard_normal((5, 4))
        np.testing.assert_allclose(class_probabilities(np.zeros((2, 5)), w).data, 0.25, atol=1e-15)

    def test_direct_oracle(self):
        rng = np.random.default_rng(1)
        x, w = rng.standard_normal((3, 6)), rng.standard_normal((6, 4))
        e = np.exp(x @ w)
        want = e / e.sum(axis=1, keepdims=True)
        p = class_probabilities(x, w).data
        assert np.max(np.abs(p - want)) <= 1e-12
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12

    def test_logit_shift_invariance(self):
        logits = np.random.default_rng(2).standard_normal((2, 5))
        np.testing.assert_allclose(T.softmax(logits + 3.7).data, T.softmax(logits).data, atol=1e-12, rtol=0)


class TestLoss:
    def test_perfect_prediction(self):
        y = onehot([1], 3)
        terms = loss(y.copy(), y, None, None, LossConfig(lam=0.0, gamma=0.0))
        assert terms.total.data == 0.0

    def test_uniform_over_four(self):
        terms = loss(np.full((2, 4), 0.25), onehot([0, 3], 4), None, None, LossConfig(lam=0.0, gamma=0.0))
        assert abs(float(terms.total.data) - np.log(4)) <= 1e-12
        assert round(float(terms.total.data), 4) == 1.3863

    def test_penalty_uniform_is_exactly_zero(self):
        assert attention_penalty(np.full((1, 4), 0.25), 0.25).data[0] == 0.0

    def test_penalty_one_hot_is_075(self):
        assert attention_penalty(np.array([[1.0, 0.0, 0.0, 0.0]]), 0.25).data[0] == 0.75

    def test_penalty_through_loss_uses_tau_default(self):
        # K=2: the default tau is 1/K^2 = 0.25; four identical one-hot steps aggregate to one-hot mass
        maps = [np.array([[1.0, 0.0, 0.0, 0.0]])] * 4
        terms = loss(np.full((1, 2), 0.5), onehot([0], 2), maps, None, LossConfig(lam=1.0, gamma=0.0), grid=2)
        assert terms.penalty == 0.75
        assert abs(float(terms.total.data) - (np.log(2) + 0.75)) <= 1e-12

    def test_aggregate_mass_sums_to_one(self):
        rng = np.random.default_rng(3)
        maps = rng.dirichlet(np.ones(9), size=(2, 9))
        m = aggregate_attention(maps).data
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_nll_clamped(self):
        v = nll(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])).data[0]
        assert np.isfinite(v) and abs(v - (-np.log(1e-12))) < 1e-9

    def test_weight_decay_excludes_biases(self):
        store = T.ParameterStore()
        store.add("w", np.array([1.0, 2.0]))
        store.add("b", np.array([10.0]), decay=False)
        terms = loss(np.array([[1.0, 0.0]]), onehot([0], 2), None, store, LossConfig(lam=0.0, gamma=0.5))
        assert terms.decay == 5.0 and float(terms.total.data) == 2.5

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = rng.dirichlet(np.ones(3), size=2)
            maps = list(rng.dirichlet(np.ones(4), size=(4, 2)))
            store = T.ParameterStore()
            store.add("w", rng.standard_normal(5))
            assert float(loss(p, onehot([0, 2], 3), maps, store, LossConfig(1.0, 1e-5), grid=2).total.data) >= 0

    def test_validation_names_key(self):
        with pytest.raises(ConfigError) as err:
            LossConfig(lam=-1.0).validate()
        assert err.value.key == "attention.lambda"
        with pytest.raises(ConfigError):
            LossConfig(gamma=-1e-3).validate()

    def test_tau_bound_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            LossConfig(tau=1e-6).validate(grid=8, bilinear_dim=64)
        assert caught

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_model_gradcheck(self, seed):
        result = gradcheck.check(gradcheck.registry()["model"], seed)
        assert result.max_error <= 1e-3, result


class TestSvm:
    def test_separable_toy(self):
        X = np.array([[0, 0], [0, 1], [1, 0], [0.5, 0.5], [3, 3], [3, 4], [4, 3], [3.5, 3.5]], dtype=float)
        y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        svm = svm_train(X, y, c_reg=10.0, epochs=200, lr=0.1)
        assert np.mean(svm.predict(X) == y) == 1.0

    def test_single_vector_single_label_predicts_that_label(self):
        X = np.vstack([np.tile([1.0, 2.0], (5, 1)), [[-1.0, 0.5]]])
        y = np.array([1, 1, 1, 1, 1, 0])
        svm = svm_train(X, y)
        assert np.all(svm.predict(np.tile([1.0, 2.0], (3, 1))) == 1)

    def test_duplicates_do_not_change_decisions(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((30, 4))
        y = rng.integers(0, 3, 30)
        y[:3] = [0, 1, 2]
        a = svm_train(X, y)
        b = svm_train(np.vstack([X, X]), np.concatenate([y, y]))
        np.testing.assert_allclose(a.scores(X), b.scores(X), atol=1e-6)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_missing_class(self):
        with pytest.raises(DataError):
            svm_train(np.zeros((4, 2)), np.array([0, 0, 2, 2]))
        with pytest.raises(DataError):
            svm_train(np.zeros((4, 2)), np.zeros(4, dtype=int))
