import numpy as np
import pytest

from core.diagnostics import ks_statistic
from core.errors import DomainError
from core.evt import (
    LabeledDataset,
    RankTransformer,
    angular_projection,
    class_balance,
    empirical_tail_risk,
    fit_tail_erm,
    nested_tail_subset,
    norms,
    rank_transform_apply,
    rank_transform_fit,
    select_extremes,
    tail_count,
    tail_threshold,
    train_test_split,
)
from core.nn import OptimConfig, predict_proba


class TestLabeledDataset:
    def test_rejects_bad_labels(self):
        with pytest.raises(DomainError):
            LabeledDataset(np.ones((2, 2)), np.array([0, 1]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DomainError):
            LabeledDataset(np.ones((3, 2)), np.array([1, -1]))

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            LabeledDataset(np.array([[1.0, np.nan]]), np.array([1]))

    def test_split_sizes(self):
        data = LabeledDataset(np.random.default_rng(0).normal(size=(3000, 2)), np.ones(3000, dtype=int))
        train, test = train_test_split(data, 0.25, seed=0)
        assert (train.n, test.n) == (2250, 750)


class TestAngularProjection:
    def test_divides_by_max(self):
        np.testing.assert_allclose(angular_projection(np.array([3.0, 1.0])), [1.0, 1.0 / 3.0])

    @pytest.mark.parametrize("lam", [0.01, 1.0, 7.5, 1e6])
    def test_homogeneous(self, lam):
        x = np.array([[0.3, -2.0, 1.1], [4.0, 0.5, 0.2]])
        np.testing.assert_allclose(angular_projection(lam * x), angular_projection(x), rtol=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            angular_projection(np.array([0.0, 0.0]))

    def test_norm_is_infinity_norm(self):
        assert norms(np.array([[3.0, -4.0]]))[0] == 4.0


class TestRankTransform:
    def test_examples(self):
        rt = rank_transform_fit(np.array([[1.0], [2.0], [3.0]]))
        assert rt.ecdf(np.array([2.0]))[0] == pytest.approx(0.5)
        assert rank_transform_apply(rt, np.array([2.0]))[0] == pytest.approx(2.0)
        assert rank_transform_apply(rt, np.array([3.0]))[0] == pytest.approx(4.0)
        assert rank_transform_apply(rt, np.array([0.5]))[0] == pytest.approx(1.0)

    def test_own_data_takes_rank_values(self):
        x = np.random.default_rng(3).normal(size=(50, 2))
        t = RankTransformer.fit(x).transform(x)
        n = 50
        expected = np.sort((n + 1) / (n + 1 - np.arange(1, n + 1)))
        for j in range(2):
            np.testing.assert_allclose(np.sort(t[:, j]), expected)

    def test_pareto_margins(self):
        x = np.random.default_rng(4).lognormal(size=(10_000, 2))
        t = RankTransformer.fit(x).transform(x)
        for j in range(2):
            d, _ = ks_statistic(t[:, j], lambda v: 1.0 - 1.0 / np.maximum(v, 1.0))
            assert d <= 0.05

    def test_dimension_mismatch(self):
        rt = RankTransformer.fit(np.ones((4, 2)))
        with pytest.raises(DomainError):
            rt.transform(np.ones((1, 3)))

    def test_empty(self):
        with pytest.raises(DomainError):
            RankTransformer.fit(np.zeros((0, 2)))


class TestTailThreshold:
    def test_second_largest(self):
        th = tail_threshold(np.array([5, 4, 3, 2, 1, 0.5, 0.2, 0.1]), 0.25)
        assert (th.k, th.t) == (2, 4.0)

    def test_test_set_size(self):
        assert tail_count(3000, 0.25) == 750

    def test_constant_norms(self):
        assert tail_threshold(np.full(20, 2.5), 0.3).t == 2.5

    def test_empty_tail(self):
        with pytest.raises(DomainError):
            tail_threshold(np.array([1.0, 2.0, 3.0]), 0.25)

    def test_round_trip(self):
        th = tail_threshold(np.arange(1.0, 9.0), 0.25)
        assert type(th).from_dict(th.to_dict()) == th


class TestSelectExtremes:
    def test_examples(self):
        np.testing.assert_array_equal(select_extremes(np.array([5.0, 4.0, 3.0]), 4.0), [0, 1])
        assert select_extremes(np.array([5.0, 4.0, 3.0]), 9.0).size == 0
        np.testing.assert_array_equal(select_extremes(np.array([5.0, 4.0, 3.0]), 0.1), [0, 1, 2])

    def test_ties_are_all_included(self):
        values = np.array([3.0, 2.0, 2.0, 2.0, 1.0, 0.5, 0.1, 0.0])
        th = tail_threshold(values, 0.25)
        assert th.k == 2
        assert select_extremes(values, th.t).size == 4

    def test_nested(self):
        values = np.array([10.0, 5.0, 4.0])
        np.testing.assert_array_equal(nested_tail_subset(values, 4.0, 1.0), select_extremes(values, 4.0))
        np.testing.assert_array_equal(nested_tail_subset(values, 4.0, 2.0), [0])
        assert nested_tail_subset(values, 4.0, 1e9).size == 0
        with pytest.raises(DomainError):
            nested_tail_subset(values, 4.0, 0.5)

    def test_class_balance(self):
        assert class_balance(np.array([1, 1, 1, -1])) == 0.25
        assert class_balance(np.array([1, 1])) == 0.0


class TestEmpiricalTailRisk:
    def _extremes(self):
        return LabeledDataset(np.array([[1.0, 2.0], [3.0, 1.0], [2.0, 2.0], [0.5, 4.0]]), np.array([1, 1, -1, -1]))

    def test_three_of_four(self):
        assert empirical_tail_risk(lambda _: np.array([1, 1, -1, 1]), self._extremes()) == 0.25

    def test_all_correct(self):
        assert empirical_tail_risk(lambda _: np.array([1, 1, -1, -1]), self._extremes()) == 0.0

    def test_constant_on_balanced(self):
        assert empirical_tail_risk(lambda th: np.ones(len(th), dtype=int), self._extremes()) == 0.5

    def test_predict_receives_angles(self):
        seen = []
        empirical_tail_risk(lambda th: seen.append(th) or np.ones(len(th), dtype=int), self._extremes())
        np.testing.assert_allclose(norms(seen[0]), 1.0)


class TestTailErm:
    def _angular_clusters(self, n=40, seed=0):
        gen = np.random.default_rng(seed)
        r = gen.uniform(1.0, 50.0, n)
        u = gen.uniform(0.0, 0.2, n)
        pos = np.column_stack([np.ones(n // 2), u[: n // 2]])
        neg = np.column_stack([u[n // 2 :], np.ones(n - n // 2)])
        X = np.vstack([pos, neg]) * r[:, None]
        y = np.concatenate([np.ones(n // 2, dtype=int), -np.ones(n - n // 2, dtype=int)])
        return X, y

    def test_separable_angles(self):
        X, y = self._angular_clusters()
        clf = fit_tail_erm(X, y, optim=OptimConfig(0.1, 0.0, 16, 500), seed=1)
        assert empirical_tail_risk(clf, LabeledDataset(X, y), angular=False) == 0.0

    def test_single_class(self):
        X, _ = self._angular_clusters()
        clf = fit_tail_erm(X, -np.ones(len(X), dtype=int))
        np.testing.assert_array_equal(clf(X), -1)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 3.0, 1000.0])
    def test_scale_invariant(self, lam):
        X, y = self._angular_clusters(seed=2)
        clf = fit_tail_erm(X, y, seed=3)
        np.testing.assert_array_equal(clf(lam * X), clf(X))

    def test_empty(self):
        with pytest.raises(DomainError):
            fit_tail_erm(np.zeros((0, 2)), np.zeros(0))

    def _radial_labels(self, n=60):
        # 同一方向上按半径分类：只看角度无法区分
        r = np.linspace(1.0, 3.0, n)
        X = np.outer(r, [1.0, 1.0]) / np.sqrt(2.0)
        y = np.where(r > 2.0, 1, -1)
        return X, y

    def test_raw_coordinates_see_radius(self):
        X, y = self._radial_labels()
        optim = OptimConfig(0.1, 0.0, 16, 500)
        raw = fit_tail_erm(X, y, optim=optim, seed=4, angular=False)
        assert not raw.angular
        np.testing.assert_array_equal(predict_proba(raw.mlp, X), raw.predict_proba(X))
        assert empirical_tail_risk(raw, LabeledDataset(X, y), angular=False) < 0.25

    def test_raw_single_class_keeps_flag(self):
        X, _ = self._radial_labels()
        clf = fit_tail_erm(X, np.ones(len(X), dtype=int), angular=False)
        assert not clf.angular
        np.testing.assert_array_equal(clf(100.0 * X), 1)
