import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbench.covariates import (
    ConfigError, CovariateSpec, perturb_continuous, sample_school_latents, sample_schools,
    sample_students, swap_categorical,
)

ZERO_COV = tuple(tuple(0.0 for _ in range(5)) for _ in range(5))


def rng(seed=0):
    return np.random.default_rng(seed)


def test_degenerate_spec_gives_transformed_means():
    spec = CovariateSpec(school_mvn_mean=(0.0,) * 5, school_mvn_cov=ZERO_COV)
    s = sample_schools(spec, 10, rng())
    assert np.all(s[["x1", "x2"]].to_numpy() == 0.0)
    assert np.all(s[["x3", "x4"]].to_numpy() == 0.5)
    assert np.all(s["x5"] == 1.0)


def test_sample_schools_deterministic():
    a = sample_schools(CovariateSpec(), 76, rng(5))
    b = sample_schools(CovariateSpec(), 76, rng(5))
    assert a.equals(b)
    assert list(a["school_id"]) == list(range(1, 77))
    assert a["x3"].between(0, 1).all() and a["x4"].between(0, 1).all()


def test_latent_correlation_matches_spec_at_large_n():
    spec = CovariateSpec()
    latent = sample_school_latents(spec, 10_000, rng(1))
    cov = np.asarray(spec.school_mvn_cov)
    sd = np.sqrt(np.diag(cov))
    target = cov / np.outer(sd, sd)
    assert np.max(np.abs(np.corrcoef(latent, rowvar=False) - target)) <= 0.05


def test_non_psd_covariance_rejected():
    bad = [[1.0 if i == j else 0.0 for j in range(5)] for i in range(5)]
    bad[0][1] = bad[1][0] = 2.0
    with pytest.raises(ConfigError):
        CovariateSpec(school_mvn_cov=tuple(map(tuple, bad)))


def test_point_mass_s3():
    spec = CovariateSpec(s3_probs=(0, 0, 0, 1, 0, 0, 0))
    schools = sample_schools(spec, 5, rng())
    students = sample_students(spec, schools, 200, rng(1))
    assert (students["s3"] == 4).all()


def test_school_sizes_conserved():
    spec = CovariateSpec()
    schools = sample_schools(spec, 76, rng())
    students = sample_students(spec, schools, 10_000, rng(2))
    sizes = students["school_id"].value_counts()
    assert sizes.sum() == 10_000 and len(sizes) == 76 and sizes.min() >= 1


def test_uniform_c1_frequencies():
    spec = CovariateSpec(c1_probs=(1 / 15,) * 14 + (1 - 14 / 15,), c1_shift=0.0, swap_rate=0.0)
    schools = sample_schools(spec, 20, rng())
    students = sample_students(spec, schools, 150_000, rng(3))
    freq = students["c1"].value_counts(normalize=True).sort_index()
    assert np.max(np.abs(freq.to_numpy() - 1 / 15)) <= 0.005


def test_students_need_schools():
    spec = CovariateSpec()
    with pytest.raises(ConfigError):
        sample_students(spec, sample_schools(spec, 1, rng()).iloc[:0], 10, rng())
    with pytest.raises(ConfigError):
        sample_students(spec, sample_schools(spec, 5, rng()), 3, rng())


def test_perturb_vanishing_noise():
    # same stream: the noise is exactly linear in the scale, so it vanishes with it
    x = rng().normal(size=(50, 3))
    small = perturb_continuous(x, 1e-6, rng(1)) - x
    big = perturb_continuous(x, 1e-1, rng(1)) - x
    assert np.max(np.abs(small - 1e-5 * big)) <= 1e-12
    assert np.max(np.abs(small)) <= 1e-5


def test_perturb_constant_column_exact():
    x = rng().normal(size=(30, 3))
    x[:, 1] = 2.5
    out = perturb_continuous(x, 0.5, rng(1))
    assert np.all(out[:, 1] == 2.5)


def test_perturb_noise_variance():
    x = rng().standard_normal((1000, 4))
    x0 = x.copy()
    out = perturb_continuous(x, 0.1, rng(7))
    assert np.array_equal(x, x0)  # input untouched
    var = (out - x).var(axis=0, ddof=1)
    assert np.all((var >= 0.007) & (var <= 0.013))


def test_perturb_needs_two_rows():
    with pytest.raises(ValueError):
        perturb_continuous(np.ones((1, 3)), 0.1, rng())


def test_perturb_mean_drift_bound():
    x = rng().normal(size=(40, 3)) * np.array([1.0, 2.0, 0.5])
    n = len(x)
    drift = np.mean([perturb_continuous(x, 0.1, rng(s)).mean(axis=0) - x.mean(axis=0)
                     for s in range(200)], axis=0)
    bound = 4 * 0.1 * x.std(axis=0, ddof=1) / np.sqrt(200 * n)
    assert np.all(np.abs(drift) <= bound)


def test_swap_zero_rate_identity():
    v = np.arange(50)
    assert np.array_equal(swap_categorical(v, 0.0, rng()), v)


def test_swap_hamming_distance_exact():
    v = np.arange(10_000)
    out = swap_categorical(v, 0.1, rng())
    assert np.count_nonzero(out != v) == 2 * (1000 // 2)


def test_swap_rate_one_rejected():
    with pytest.raises(ConfigError):
        swap_categorical([1, 2, 3], 1.0, rng())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=200), st.floats(0, 0.99), st.integers(0, 2**32))
def test_swap_preserves_multiset(values, rate, seed):
    out = swap_categorical(values, rate, rng(seed))
    assert sorted(out.tolist()) == sorted(values)


def test_sampler_reproducible_across_calls():
    spec = CovariateSpec()
    a = sample_students(spec, sample_schools(spec, 10, rng(1)), 500, rng(2))
    b = sample_students(spec, sample_schools(spec, 10, rng(1)), 500, rng(2))
    assert a.equals(b)
