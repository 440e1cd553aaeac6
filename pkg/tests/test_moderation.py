import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbench.design import effect_basis
from hetbench.moderation import (
    ModerationError, bootstrap_group_se, categorical_summary, fit_tree, linear_summary,
    moderation_csv, moderation_verdict_table, quantile_cuts, quintile_groups, quintile_summary,
    school_means, tree_summary, verdict_rule,
)


def test_verdict_rule():
    assert verdict_rule([0, 1], [0.1, 0.1]) == "detected"
    assert verdict_rule([0, 0.2], [0.1, 0.1]) == "suggestive"
    assert verdict_rule([0, 0.1], [0.1, 0.1]) == "none"
    assert verdict_rule([1.0], [0.0]) == "none"


def test_constant_effects_give_none():
    rng = np.random.default_rng(0)
    r = quintile_summary(np.full(500, 0.2), rng.standard_normal(500))
    assert r.verdict == "none" and np.allclose(r.means, 0.2, atol=1e-12)


def test_identity_effects_increase():
    x = np.random.default_rng(1).standard_normal(1000)
    r = quintile_summary(x, x, name="x")
    assert r.verdict == "detected" and r.direction == "increasing"
    assert np.all(np.diff(r.means) > 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 400), st.integers(0, 2**31))
def test_quintile_sizes_balanced_without_ties(n, seed):
    x = np.random.default_rng(seed).permutation(n).astype(float)
    sizes = np.bincount(quintile_groups(x), minlength=5)
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1


def test_quantile_tie_goes_lower():
    x = np.array([1, 2, 3, 4, 5, 5, 5, 8, 9, 10], float)
    cuts = quantile_cuts(x)
    assert list(cuts) == [2, 4, 5, 8]
    g = quintile_groups(x)
    assert list(g[4:7]) == [2, 2, 2]


def test_quintile_needs_distinct_values():
    with pytest.raises(ModerationError, match="categorical"):
        quintile_summary(np.zeros(10), np.arange(10) % 3)


def test_length_mismatch():
    with pytest.raises(ModerationError, match="length"):
        categorical_summary(np.zeros(5), np.arange(4))


def test_scale_invariance_of_verdicts():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(400)
    ite = 0.1 * x + rng.standard_normal(400) * 0.3
    cl = np.arange(400) % 20
    for c in (1e-3, 7.0, 1e4):
        a = quintile_summary(ite, x, cl, seed=3)
        b = quintile_summary(c * ite + 5.0, x, cl, seed=3)
        assert a.verdict == b.verdict and a.direction == b.direction
        assert np.allclose(b.means, c * a.means + 5.0)


def test_bootstrap_se_of_identical_clusters_is_zero():
    ite = np.tile([1.0, 3.0], 10)
    groups = np.tile([0, 1], 10)
    se = bootstrap_group_se(ite, groups, 2, clusters=np.repeat(np.arange(10), 2))
    assert np.all(se == 0)


def test_categorical_direction():
    cat = np.repeat([1, 2, 3], 50)
    ite = np.repeat([0.2, 0.1, 0.3], 50) + np.random.default_rng(4).normal(0, 0.01, 150)
    r = categorical_summary(ite, pd.Series(cat, name="xc"))
    assert r.moderator == "xc" and r.direction == "lowest 2, highest 3"
    assert r.verdict == "detected" and r.group(2).n == 50


def test_linear_summary_slope():
    x = np.linspace(0, 1, 200)
    r = linear_summary(2.0 * x + 1, x)
    assert r.groups[0].mean == pytest.approx(2.0) and r.direction == "increasing"


def test_tree_step_split():
    x = np.arange(100.0)
    y = np.where(x < 40, 0.0, 1.0)
    tree = fit_tree(x, y, max_depth=1)
    assert tree.root.threshold == 39.5
    assert tree.sse() == 0


def test_tree_cp_one_is_single_leaf():
    x = np.random.default_rng(5).standard_normal((200, 2))
    tree = fit_tree(x, x[:, 0], max_depth=3, cp=1.0)
    assert tree.root.is_leaf
    r = tree_summary(x[:, 0], pd.DataFrame(x, columns=["a", "b"]), cp=1.0)
    assert r.verdict == "none" and len(r.groups) == 1


def _brute_depth2(X, y, min_leaf):
    def sse(v):
        return float(np.sum((v - v.mean()) ** 2)) if v.size else 0.0

    def best1(rows):
        best = sse(y[rows])
        for j in range(X.shape[1]):
            vals = np.unique(X[rows, j])
            for a, b in zip(vals[:-1], vals[1:]):
                m = X[rows, j] <= (a + b) / 2
                if m.sum() >= min_leaf and (~m).sum() >= min_leaf:
                    best = min(best, sse(y[rows][m]) + sse(y[rows][~m]))
        return best

    rows = np.arange(len(y))
    best = best1(rows)
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            m = X[:, j] <= (a + b) / 2
            if m.sum() >= min_leaf and (~m).sum() >= min_leaf:
                best = min(best, best1(rows[m]) + best1(rows[~m]))
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 50), st.integers(0, 2**31))
def test_greedy_tree_against_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, (n, 2)).astype(float)
    y = rng.standard_normal(n) + X[:, 0]
    d1 = fit_tree(X, y, max_depth=1)
    d2 = fit_tree(X, y, max_depth=2)
    assert d2.sse() <= d1.sse() + 1e-9 <= fit_tree(X, y, max_depth=0).sse() + 2e-9
    # the greedy depth-2 tree can never beat the exhaustive optimum
    assert d2.sse() >= _brute_depth2(X, y, 1) - 1e-9
    # one greedy split is the exhaustive optimum for a single split
    brute1 = min([float(np.sum((y - y.mean()) ** 2))] + [
        float(np.sum((y[m] - y[m].mean()) ** 2) + np.sum((y[~m] - y[~m].mean()) ** 2))
        for j, t in itertools.product(range(2), np.arange(0.5, 5.5))
        for m in [X[:, j] <= t] if m.any() and (~m).any()])
    assert d1.sse() == pytest.approx(brute1, abs=1e-9)
    # each child of the depth-2 tree holds the exhaustive best split of its rows
    if not d2.root.is_leaf:
        m = X[:, d2.root.feature] <= d2.root.threshold
        kids = sum(fit_tree(X[r], y[r], max_depth=1).sse() for r in (m, ~m))
        assert d2.sse() == pytest.approx(kids, abs=1e-9)


def test_tree_min_leaf_respected():
    x = np.random.default_rng(6).standard_normal((300, 2))
    tree = fit_tree(x, x[:, 0] + x[:, 1], max_depth=3, min_leaf=40)
    assert min(len(leaf.rows) for leaf in tree.leaves()) >= 40


def test_output_tables():
    assert moderation_verdict_table([]) == "moderator  summary  verdict  direction\n"
    assert moderation_csv([]).strip() == "moderator,kind,group,mean,se,n"
    r = quintile_summary(np.zeros(50), np.arange(50.0), name="x1")
    assert "x1" in moderation_verdict_table([r]) and " No " in moderation_verdict_table([r])


def test_school_means():
    d = pd.DataFrame({"school_id": [1, 1, 2], "x1": [0.5, 0.5, 1.0]})
    out = school_means([1.0, 3.0, 5.0], d, ["x1"])
    assert list(out["ite"]) == [2.0, 5.0] and list(out["x1"]) == [0.5, 1.0]


def test_oracle_effects_show_planted_pattern(cfg, default_gen):
    d = default_gen.data
    ite = default_gen.truth.cate.reindex(d["student_id"]).to_numpy()
    cl = d["school_id"].to_numpy()
    r = quintile_summary(ite, d["x1"], cl)
    assert r.direction == "decreasing"
    c = categorical_summary(ite, d["c1"], cl)
    assert c.direction.startswith(("lowest 1,", "lowest 13,", "lowest 14,"))
    # adjusting for the x1 and x2 steps isolates the C1 penalty
    X = effect_basis(cfg).matrix(d)
    beta = np.linalg.lstsq(X, ite, rcond=None)[0]
    assert beta[3] == pytest.approx(-0.08, abs=0.02)


def test_identical_level_distributions():
    vals = np.random.default_rng(7).standard_normal(30)
    r = categorical_summary(np.r_[vals, vals[::-1]], np.repeat(["a", "b"], 30))
    assert r.groups[0].mean == pytest.approx(r.groups[1].mean, abs=1e-15)
    assert r.verdict == "none"


def test_tree_step_at_cut():
    x1 = np.array([-0.5, 0.0, 0.06, 0.07, 0.08, 0.3])
    ite = np.where(x1 < 0.07, 0.278, 0.228)
    r = tree_summary(ite, pd.DataFrame({"x1": x1}), max_depth=1, n_boot=10)
    split = r.splits[0]
    assert split.feature == "x1" and 0.06 < split.threshold < 0.07
    assert (split.left_mean, split.right_mean) == pytest.approx((0.278, 0.228), abs=1e-15)


def test_tree_predictions_are_leaf_means():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((200, 3))
    y = X[:, 0] + rng.standard_normal(200)
    tree = fit_tree(X, y, max_depth=3, min_leaf=5)
    pred = tree.predict(X)
    for leaf in tree.leaves():
        assert np.all(pred[leaf.rows] == leaf.mean)
    r = tree_summary(y, pd.DataFrame(X, columns=list("abc")), max_depth=3, min_leaf=5)
    assert r.n == 200


def test_summaries_row_order_invariant():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(300)
    ite = 0.2 * x + rng.standard_normal(300)
    perm = rng.permutation(300)
    a = quintile_summary(ite, x, n_boot=0)
    b = quintile_summary(ite[perm], x[perm], n_boot=0)
    assert np.allclose(a.means, b.means, atol=1e-12)
    assert fit_tree(x, ite, 2).sse() == pytest.approx(fit_tree(x[perm], ite[perm], 2).sse(), abs=1e-9)


def test_verdicts_scale_with_ses():
    rng = np.random.default_rng(10)
    for _ in range(200):
        m, s = rng.standard_normal(5), rng.random(5)
        c = rng.uniform(0.01, 100)
        assert verdict_rule(m, s) == verdict_rule(c * m, c * s)


def test_default_oracle_verdict_table(default_gen):
    d = default_gen.data
    ite = default_gen.truth.cate.reindex(d["student_id"]).to_numpy()
    cl = d["school_id"].to_numpy()
    reps = [quintile_summary(ite, d[c], cl, name=c) for c in ("x1", "x2")]
    reps += [categorical_summary(ite, d[c], cl, name=c) for c in ("c1", "xc", "s3")]
    v = {r.moderator: r.verdict for r in reps}
    assert v["x1"] == v["x2"] == v["c1"] == "detected" and v["s3"] == "none"
    assert reps[3].direction.startswith("lowest 3,")
    table = moderation_verdict_table(reps).splitlines()
    assert len(table) == 6 and table[5].split()[:3] == ["s3", "categorical", "No"]
