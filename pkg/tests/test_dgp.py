import itertools
import math

import mpmath
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hetbench.dgp import (
    DgpConfig, MuModel, ResidualPool, SmoothTerm, assign_and_select, generate_dataset,
    higher_quantile, keep_probability, mu, normal_cdf, oracle_propensity, sample_errors,
    sample_school_effects, tau,
)

ZERO_SMOOTHS = MuModel(smooths=(SmoothTerm(),) * 5)
RCT = dict(sel_slope=0.0, sel_intercept=40.0, hidden_pctile=1.0)


def row(**kw):
    base = dict(s3=1, c1=1, c2=0, c3=0, xc=0, x1=0.0, x2=0.0, x3=0.5, x4=0.5, x5=1.0)
    base.update(kw)
    return pd.DataFrame([base])


def test_mu_intercept_only():
    assert mu(ZERO_SMOOTHS, row())[0] == pytest.approx(-0.279038, abs=1e-12)


def test_mu_coefficient_sum():
    w = row(s3=7, c1=5, c2=1, c3=1, xc=2)
    assert mu(ZERO_SMOOTHS, w)[0] == pytest.approx(0.690524, abs=1e-12)


def test_mu_additive_in_x1_with_zero_smooth():
    m = MuModel(smooths=(SmoothTerm(),) + MuModel().smooths[1:])
    assert mu(m, row(x1=-2.0))[0] == mu(m, row(x1=3.0))[0]


def test_mu_unknown_level_named():
    with pytest.raises(ValueError, match="S3 level 9"):
        mu(MuModel(), row(s3=9))
    with pytest.raises(ValueError, match="C1 level 16"):
        mu(MuModel(), row(c1=16))


def test_default_smooths_continuous_and_modest():
    for smooth, grid in zip(MuModel().smooths, [np.linspace(-4, 4, 4001)] * 2
                            + [np.linspace(0, 1, 4001)] * 2 + [np.linspace(0, 6, 4001)]):
        vals = smooth(grid)
        assert np.ptp(vals) <= 0.5
        assert np.max(np.abs(np.diff(vals))) < 1e-3  # no jumps on a fine grid
        for k in smooth.knots:
            assert smooth(k - 1e-9) == pytest.approx(smooth(k + 1e-9), abs=1e-8)


def test_tau_examples(cfg):
    assert tau(cfg, 0.10, 0.00, 2) == pytest.approx(0.228, abs=1e-15)
    assert tau(cfg, 0.00, -1.00, 1) == pytest.approx(0.148, abs=1e-15)


def test_tau_strict_inequalities(cfg):
    assert tau(cfg, 0.07, -0.69, 2) == pytest.approx(0.228, abs=1e-15)


def test_tau_range_over_indicator_combinations(cfg):
    vals = [tau(cfg, x1, x2, c1) for x1, x2, c1 in
            itertools.product((0.0, 1.0), (-1.0, 0.0), (1, 2))]
    assert min(vals) == pytest.approx(0.098, abs=1e-15)
    assert max(vals) == pytest.approx(0.278, abs=1e-15)


def test_school_effects(cfg):
    a, g = sample_school_effects(cfg.with_(alpha_sd=0.0), 20, np.random.default_rng(0))
    assert np.all(a == 0)
    a, _ = sample_school_effects(cfg, 100_000, np.random.default_rng(1))
    assert 0.1485 <= a.std(ddof=1) <= 0.1515
    a1, g1 = sample_school_effects(cfg, 50, np.random.default_rng(3))
    a2, g2 = sample_school_effects(cfg, 50, np.random.default_rng(3))
    assert np.array_equal(a1, a2) and np.array_equal(g1, g2)


def test_two_point_pool_balanced_draw():
    pool = ResidualPool.centered([-1.0, 1.0], jitter_sd=0.0, target_sd=0.5)
    # search for a seed whose resample is balanced
    for seed in range(1000):
        draws = np.asarray(pool.pool)[np.random.default_rng(seed).integers(0, 2, 10)]
        if draws.sum() == 0:
            break
    out = sample_errors(pool, 10, np.random.default_rng(seed))
    assert set(np.round(out, 12)) == {-0.5, 0.5}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 500), st.integers(0, 2**32), st.floats(0.0, 1.0))
def test_errors_exact_moments(n, seed, jitter):
    pool = ResidualPool.skewed(200, -1.5, jitter, 0.5)
    out = sample_errors(pool, n, np.random.default_rng(seed))
    if np.ptp(out) > 0:
        assert out.std() == pytest.approx(0.5, abs=1e-12)
    assert abs(out.mean()) <= 1e-12


def test_errors_preserve_shape():
    base = np.random.default_rng(0).standard_normal(10_000)
    pool = ResidualPool.centered(base, jitter_sd=0.0)
    out = sample_errors(pool, 10_000, np.random.default_rng(1))
    assert abs(stats.skew(out) - stats.skew(base)) <= 0.1


def test_errors_need_two_draws():
    with pytest.raises(ValueError):
        sample_errors(ResidualPool.centered([0.0, 1.0]), 1, np.random.default_rng())


def test_normal_cdf_against_mpmath():
    xs = np.concatenate([np.linspace(-8, 8, 161), [-37.0, -20.0, 1e-9, 5.5]])
    ref = np.array([float(mpmath.ncdf(mpmath.mpf(float(x)))) for x in xs])
    assert np.max(np.abs(normal_cdf(xs) - ref)) <= 1e-12


def test_drop_probabilities(cfg):
    assert 1 - keep_probability(cfg, 1 / 3) == pytest.approx(0.5, abs=1e-15)
    assert 1 - keep_probability(cfg, 0.0) == pytest.approx(0.6914624612740131, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_keep_probability_monotone(a, b):
    cfg = DgpConfig()
    lo, hi = min(a, b), max(a, b)
    assert keep_probability(cfg, lo) <= keep_probability(cfg, hi)


def test_step2_drops_exactly_top_ranks(cfg):
    c = cfg.with_(sel_intercept=40.0)
    hidden = np.arange(1.0, 101.0)
    res = assign_and_select(c, np.zeros(100), hidden, np.random.default_rng(0))
    assert res.hidden_threshold == 80.0
    expected = (res.z == 1) & (hidden >= 81)
    assert np.array_equal(res.dropped_step2, expected)
    assert not res.dropped_step1.any()
    assert res.retained[res.z == 0].all()


def test_higher_quantile_convention():
    assert higher_quantile([3, 1, 2, 4], 0.5) == 2
    assert higher_quantile([3, 1, 2, 4], 0.51) == 3
    assert higher_quantile([5, 5, 5], 0.8) == 5


def test_selection_disabled_is_rct(cfg):
    gen = generate_dataset(cfg.with_(**RCT), seed=3)
    assert gen.truth.frame["retained"].all()
    n = cfg.n_students
    frac = gen.data["z"].mean()
    assert abs(frac - 0.5) <= 5 * math.sqrt(0.25 / n)


def test_noiseless_decomposition(cfg):
    c = cfg.with_(gamma_sd=0.0, alpha_sd=0.0, error_pool=(0.0, 0.0), error_jitter_sd=0.0)
    gen = generate_dataset(c, seed=4)
    t = gen.truth.retained
    treated = t["z"].to_numpy() == 1
    gap = (t["y1"] - t["y0"]).to_numpy()[treated]
    expected = tau(c, gen.data["x1"], gen.data["x2"], gen.data["c1"])[treated]
    assert np.max(np.abs(gap - expected)) <= 1e-12


def test_exact_reconstruction_and_tau_levels(default_gen):
    d, t = default_gen.data, default_gen.truth.retained
    rebuilt = (t["alpha"] + t["mu"] + (t["tau_cov"] + t["gamma"]) * d["z"].to_numpy()
               + t["epsilon"]).to_numpy()
    assert np.max(np.abs(d["y"].to_numpy() - rebuilt)) <= 1e-12
    assert default_gen.truth.frame["tau_cov"].nunique() <= 8


def test_generation_deterministic(cfg):
    a, b = generate_dataset(cfg, seed=11), generate_dataset(cfg, seed=11)
    assert a.data.equals(b.data) and a.truth.frame.equals(b.truth.frame)
    assert a.manifest == b.manifest


def test_manifest_counts(default_gen):
    m = default_gen.manifest
    assert int(m["n_retained"]) == len(default_gen.data)
    assert int(m["n_generated"]) - int(m["n_dropped_step1"]) - int(m["n_dropped_step2"]) \
        == int(m["n_retained"])
    assert float(m["sate"]) == default_gen.truth.sate
    assert "hidden" not in default_gen.data.columns


def test_oracle_propensity_matches_empirical_rate(cfg):
    # pooled over seeds, treated share within propensity bins matches the bin's mean propensity
    es, zs = [], []
    for seed in range(6):
        gen = generate_dataset(cfg, seed=seed)
        es.append(gen.truth.retained["propensity"].to_numpy())
        zs.append(gen.data["z"].to_numpy())
    e, z = np.concatenate(es), np.concatenate(zs)
    bins = np.quantile(e, np.linspace(0, 1, 6))
    idx = np.clip(np.searchsorted(bins, e, side="right") - 1, 0, 4)
    for k in range(5):
        sel = idx == k
        se = math.sqrt(e[sel].mean() * (1 - e[sel].mean()) / sel.sum())
        assert abs(z[sel].mean() - e[sel].mean()) <= 4 * se


def test_naive_exceeds_sate_in_most_seeds(cfg):
    wins = 0
    for seed in range(50):
        gen = generate_dataset(cfg, seed=seed)
        d = gen.data
        naive = d.loc[d.z == 1, "y"].mean() - d.loc[d.z == 0, "y"].mean()
        wins += naive > gen.truth.sate
    assert wins >= 45


@pytest.mark.slow
def test_selection_disabled_gap_shrinks(cfg):
    c = cfg.with_(n_students=100_000, **RCT)
    ok = 0
    for seed in range(20):
        gen = generate_dataset(c, seed=seed)
        d = gen.data
        naive = d.loc[d.z == 1, "y"].mean() - d.loc[d.z == 0, "y"].mean()
        ok += abs(naive - gen.truth.sate) <= 0.02
    assert ok >= 19
