import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LinearRegression as SkLinear
from sklearn.linear_model import LogisticRegression as SkLogistic

from hemm.baselines import (BASELINES, BaggedTrees, CartTree, KNNCate, LinearRegression, LogisticRegression,
                            VTConfig, best_split, fit_linear_single, fit_linear_two, fit_virtual_twins,
                            knn_cate, make_baseline)
from hemm.data import Dataset, SyntheticSpec, generate_synthetic
from hemm.errors import InvalidInputError


def _continuous(x, t, y):
    return Dataset(np.asarray(x, float).reshape(len(t), -1), None, t, y, outcome_kind="continuous")


# -- brute-force CART oracle ----------------------------------------------------


def _sse(v):
    return float(np.sum((v - v.mean()) ** 2)) if v.size else 0.0


def _brute_split(X, y, min_leaf):
    """Every midpoint of every feature, scored by direct child sums of squares."""
    parent = _sse(y)
    best = None
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2
            left = X[:, j] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            gain = parent - _sse(y[left]) - _sse(y[~left])
            if best is None or gain > best[0]:
                best = (gain, j, thr)
    return best


def _brute_tree_predict(X, y, Xq, depth, min_leaf):
    if depth == 0:
        return np.full(Xq.shape[0], y.mean())
    split = _brute_split(X, y, min_leaf)
    if split is None or split[0] <= 1e-12 * max(_sse(y), 1.0):
        return np.full(Xq.shape[0], y.mean())
    _, j, thr = split
    out = np.empty(Xq.shape[0])
    lq = Xq[:, j] <= thr
    lx = X[:, j] <= thr
    out[lq] = _brute_tree_predict(X[lx], y[lx], Xq[lq], depth - 1, min_leaf)
    out[~lq] = _brute_tree_predict(X[~lx], y[~lx], Xq[~lq], depth - 1, min_leaf)
    return out


class TestCart:
    @given(st.integers(0, 100_000), st.integers(10, 200), st.integers(1, 4), st.integers(1, 6))
    @settings(max_examples=40)
    def test_best_split_matches_brute_force(self, seed, n, d, min_leaf):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, d))
        y = X[:, 0] ** 2 + rng.normal(size=n)
        got = best_split(X, y, min_leaf)
        want = _brute_split(X, y, min_leaf)
        if want is None:
            assert got is None
            return
        assert (got[1], got[2]) == (want[1], want[2])
        assert got[0] == pytest.approx(want[0], rel=1e-9, abs=1e-9)

    @given(st.integers(0, 100_000), st.integers(20, 200))
    @settings(max_examples=20)
    def test_tree_matches_brute_force(self, seed, n):
        rng = np.random.default_rng(seed)
        X = np.round(rng.uniform(size=(n, 3)), 2)  # repeated values exercise distinct-value thresholds
        y = (X[:, 0] > 0.4) + 0.5 * X[:, 1] + 0.1 * rng.normal(size=n)
        tree = CartTree(max_depth=3, min_samples_leaf=5).fit(X, y)
        Xq = rng.uniform(size=(100, 3))
        np.testing.assert_array_equal(tree.predict(Xq), _brute_tree_predict(X, y, Xq, 3, 5))

    def test_constant_target_is_leaf(self):
        tree = CartTree().fit(np.arange(20.0)[:, None], np.ones(20))
        assert tree.root.is_leaf and tree.root.value == 1.0

    def test_every_row_in_one_leaf(self, rng):
        X = rng.normal(size=(300, 2))
        tree = CartTree(max_depth=4).fit(X, X[:, 0] + X[:, 1])
        assert sum(leaf.n for leaf in tree.leaves()) == 300
        assert all(leaf.n >= 5 for leaf in tree.leaves())

    def test_gini_predicts_fractions(self, rng):
        X = rng.uniform(size=(200, 1))
        y = (X[:, 0] > 0.5).astype(float)
        p = CartTree(max_depth=2, criterion="gini").fit(X, y).predict(X)
        np.testing.assert_array_equal(p, y)

    def test_gini_rejects_non_binary(self):
        with pytest.raises(InvalidInputError):
            CartTree(criterion="gini").fit(np.zeros((3, 1)), [0, 0.5, 1])

    def test_export_text(self):
        X = np.r_[np.zeros(10), np.ones(10)][:, None]
        text = CartTree(max_depth=1).fit(X, X[:, 0] * 2).export_text(["age"])
        assert text.splitlines() == ["if age <= 0.5000:", "  value=0.0000 (n=10)",
                                     "else:  # age > 0.5000", "  value=2.0000 (n=10)"]

    def test_bagging_seeded(self, rng):
        X = rng.normal(size=(80, 2))
        y = X[:, 0] + rng.normal(size=80)
        a = BaggedTrees(n_trees=5, seed=3).fit(X, y).predict(X)
        b = BaggedTrees(n_trees=5, seed=3).fit(X, y).predict(X)
        np.testing.assert_array_equal(a, b)


class TestLinearModels:
    def test_regression_matches_sklearn(self, rng):
        X = rng.normal(size=(100, 3))
        y = X @ [1.0, -2.0, 0.5] + 0.3 + rng.normal(size=100)
        ours = LinearRegression().fit(X, y)
        ref = SkLinear().fit(X, y)
        np.testing.assert_allclose(ours.coef_, np.r_[ref.intercept_, ref.coef_], atol=1e-6)

    def test_logistic_matches_sklearn(self, rng):
        X = rng.normal(size=(300, 2))
        y = (rng.uniform(size=300) < 1 / (1 + np.exp(-(X @ [1.5, -1.0] + 0.2)))).astype(float)
        ours = LogisticRegression().fit(X, y)
        ref = SkLogistic(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
        np.testing.assert_allclose(ours.coef_, np.r_[ref.intercept_, ref.coef_[0]], atol=1e-4)

    def test_singular_design_survives(self):
        X = np.column_stack([np.arange(10.0), np.arange(10.0)])
        coef = LinearRegression().fit(X, np.arange(10.0)).coef_
        assert np.all(np.isfinite(coef))


class TestLinearSingle:
    def test_pure_treatment_signal(self, rng):
        t = (rng.uniform(size=50) < 0.5).astype(int)
        pred = fit_linear_single(_continuous(rng.normal(size=50), t, 2.0 * t)).predict(
            _continuous(rng.normal(size=10), np.zeros(10, int), np.zeros(10)))
        np.testing.assert_allclose(pred.cate, 2.0, atol=1e-9)

    def test_null_effect(self, rng):
        n = 5000
        x = rng.normal(size=n)
        t = (rng.uniform(size=n) < 0.5).astype(int)
        d = _continuous(x, t, x + rng.normal(size=n))
        assert abs(fit_linear_single(d).predict(d).cate[0]) < 0.1

    def test_treatment_coefficient(self):
        rng = np.random.default_rng(0)
        n = 1000
        x = rng.normal(size=n)
        t = (rng.uniform(size=n) < 0.5).astype(int)
        y = x + t + 0.5 * rng.normal(size=n)
        model = fit_linear_single(_continuous(x, t, y))
        ref = np.linalg.lstsq(np.column_stack([np.ones(n), x, t]), y, rcond=None)[0]
        np.testing.assert_allclose(model.model.coef_, ref, atol=1e-9)
        assert model.model.coef_[-1] == pytest.approx(1.0, abs=0.05)

    def test_binary_cate_in_range(self):
        d = generate_synthetic(SyntheticSpec(n=300))
        cate = fit_linear_single(d).predict(d).cate
        assert np.all((cate > -1) & (cate < 1))


class TestLinearTwo:
    def test_identical_arms(self, rng):
        n = 4000
        x = rng.normal(size=n)
        t = (rng.uniform(size=n) < 0.5).astype(int)
        d = _continuous(x, t, 3 * x + rng.normal(size=n))
        grid = np.linspace(-1, 1, 21)
        cate = fit_linear_two(d).predict(_continuous(grid, np.zeros(21, int), np.zeros(21))).cate
        assert np.max(np.abs(cate)) < 0.15

    def test_slopes(self, rng):
        n = 2000
        x = rng.uniform(-1, 1, size=n)
        t = (rng.uniform(size=n) < 0.5).astype(int)
        d = _continuous(x, t, np.where(t == 1, 2 * x, x) + 0.1 * rng.normal(size=n))
        cate = fit_linear_two(d).predict(d).cate
        np.testing.assert_allclose(cate, x, atol=0.03)

    def test_binary_cate_in_range(self):
        d = generate_synthetic(SyntheticSpec(n=300, seed=1))
        cate = fit_linear_two(d).predict(d).cate
        assert np.all((cate > -1) & (cate < 1))

    def test_coefficients_within_three_se(self):
        # single fits can miss by chance, so check 3-SE coverage over many independent draws
        rng = np.random.default_rng(0)
        truth = [np.array([0.5, 1.0, -1.0]), np.array([-0.2, 2.0, 0.3])]
        inside = []
        for _ in range(200):
            n = 400
            X = rng.normal(size=(n, 2))
            t = (rng.uniform(size=n) < 0.5).astype(int)
            y = np.where(t == 1, truth[1][0] + X @ truth[1][1:], truth[0][0] + X @ truth[0][1:])
            d = Dataset(X, None, t, y + rng.normal(size=n), outcome_kind="continuous")
            for model, beta in zip(fit_linear_two(d).models, truth):
                inside.extend(np.abs(model.coef_ - beta) < 3 * model.stderr_)
        # nominal coverage is 0.9973
        assert np.mean(inside) >= 0.99

    def test_one_arm_rejected(self):
        with pytest.raises(InvalidInputError):
            fit_linear_two(_continuous([1.0, 2.0], [1, 1], [0.0, 1.0]))


class TestKnn:
    def test_k_equals_both_arm_sizes_is_mean_difference(self, rng):
        t = np.r_[np.zeros(6), np.ones(6)].astype(int)
        y = rng.normal(size=12)
        d = _continuous(rng.normal(size=12), t, y)
        assert knn_cate(d, [0.0], k=6) == pytest.approx(y[6:].mean() - y[:6].mean(), abs=1e-15)

    def test_duplicated_query(self):
        x = np.array([0.0, 5.0, 0.0, 5.0, 9.0])
        t = np.array([0, 0, 1, 1, 1])
        y = np.array([1.0, 7.0, 4.0, 2.0, 3.0])
        assert knn_cate(_continuous(x, t, y), [0.0], k=1) == 3.0

    def test_four_row_hand_example(self):
        # x standardized: mean 1.5, std sqrt(1.25); query 2.2 maps nearest to x=2 (t=0) and x=3 (t=1)
        x = np.array([0.0, 1.0, 2.0, 3.0])
        t = np.array([1, 0, 0, 1])
        y = np.array([10.0, 20.0, 30.0, 40.0])
        assert knn_cate(_continuous(x, t, y), [2.2], k=1) == 40.0 - 30.0

    def test_tie_takes_first_row(self):
        x = np.array([-1.0, 1.0, 0.0])
        t = np.array([0, 0, 1])
        y = np.array([1.0, 2.0, 5.0])
        assert knn_cate(_continuous(x, t, y), [0.0], k=1) == 5.0 - 1.0

    def test_insufficient_arm(self):
        with pytest.raises(InvalidInputError):
            knn_cate(_continuous([0.0, 1.0, 2.0], [0, 1, 1], [0.0, 1.0, 1.0]), [0.0], k=2)


class TestVirtualTwins:
    def test_null_effect(self, rng):
        n = 1000
        x = rng.uniform(size=(n, 2))
        t = (rng.uniform(size=n) < 0.5).astype(int)
        d = Dataset(x, None, t, x[:, 0] + 0.1 * rng.normal(size=n), outcome_kind="continuous")
        score = fit_virtual_twins(d)[0].predict(d).score
        # stage-two leaves average forest noise, no leaf should carry a real effect
        assert np.mean(np.abs(score)) < 0.05
        assert np.max(np.abs(score)) < 0.2

    def test_step_effect_root_split(self, rng):
        n = 2000
        x = rng.uniform(size=(n, 2))
        t = (rng.uniform(size=n) < 0.5).astype(int)
        y = (x[:, 0] > 0.5) * t + 0.1 * rng.normal(size=n)
        _, tree = fit_virtual_twins(Dataset(x, None, t, y, outcome_kind="continuous"), VTConfig(stage2_depth=2))
        assert tree.root.feature == 0
        assert abs(tree.root.threshold - 0.5) < 0.05

    def test_depth_zero_is_mean_difference(self):
        d = generate_synthetic(SyntheticSpec(n=300, seed=2))
        vt, tree = fit_virtual_twins(d, VTConfig(stage2_depth=0, n_trees=5))
        pred = vt.predict(d)
        np.testing.assert_allclose(pred.score, np.mean(pred.f1 - pred.f0), atol=1e-12)
        assert tree.root.is_leaf

    def test_binary_stage_one_probabilities(self):
        d = generate_synthetic(SyntheticSpec(n=300, seed=3))
        pred = fit_virtual_twins(d, VTConfig(n_trees=5))[0].predict(d)
        assert np.all((pred.f0 >= 0) & (pred.f0 <= 1) & (pred.f1 >= 0) & (pred.f1 <= 1))

    def test_rules_use_feature_names(self):
        d = generate_synthetic(SyntheticSpec(n=400, seed=4))
        vt, _ = fit_virtual_twins(d, VTConfig(n_trees=5))
        assert "x0" in vt.rules() or "x1" in vt.rules()


class TestRegistry:
    def test_names(self):
        assert set(BASELINES) == {"linear1", "linear2", "knn", "vt"}

    def test_make_with_kwargs(self):
        assert make_baseline("knn", k=3).k == 3

    def test_unknown(self):
        with pytest.raises(InvalidInputError):
            make_baseline("gp")
