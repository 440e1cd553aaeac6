"""Multilevel covariate population sampler and privacy-style perturbations.

The school covariates come from a latent Gaussian vector (one coordinate per
X1..X5).  X1 and X2 are reported on the latent scale, X3 and X4 pass through
the logistic function to land in [0, 1], and X5 is reported as the relative
school size ``exp(latent)``.  Urbanicity (XC) is obtained by cutting one
designated latent coordinate into intervals.

This is an invented stand-in population; it is not calibrated to any real
survey's marginals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .core import C1_LEVELS, S3_LEVELS


class ConfigError(ValueError):
    pass


# Order: X1 mindset norms, X2 achievement, X3 minority latent, X4 poverty latent,
# X5 log school size.  X3 drives urbanicity, so XC inherits its links to X1/X2.
DEFAULT_SCHOOL_MEAN = (0.0, -0.3, -0.4, -0.2, 0.0)
DEFAULT_SCHOOL_COV = (
    (1.00, -0.72, 0.70, 0.35, 0.05),
    (-0.72, 1.00, -0.70, -0.45, 0.10),
    (0.70, -0.70, 1.00, 0.55, 0.10),
    (0.35, -0.45, 0.55, 1.00, 0.00),
    (0.05, 0.10, 0.10, 0.00, 0.25),
)
DEFAULT_S3_PROBS = (0.02, 0.03, 0.08, 0.22, 0.28, 0.24, 0.13)
DEFAULT_C1_PROBS = (
    0.05, 0.10, 0.03, 0.42, 0.08, 0.02, 0.02, 0.03,
    0.03, 0.03, 0.03, 0.04, 0.035, 0.035, 0.05,
)


@dataclass(frozen=True)
class CovariateSpec:
    """Sampler parameters for schools and students.

    ``xc_cuts`` are increasing thresholds on latent coordinate
    ``xc_coordinate``; interval ``k`` (counting from the left) is labelled
    ``xc_labels[k]``.  ``c1_shift`` multiplies, per school, the probability of
    the ``c1_shift_levels`` categories by ``exp(c1_shift * latent X3)``.
    """

    school_mvn_mean: tuple[float, ...] = DEFAULT_SCHOOL_MEAN
    school_mvn_cov: tuple[tuple[float, ...], ...] = DEFAULT_SCHOOL_COV
    xc_coordinate: int = 2
    xc_cuts: tuple[float, ...] = (-1.4, -1.0, -0.55, 0.2)
    xc_labels: tuple[int, ...] = (0, 1, 2, 4, 3)
    s3_probs: tuple[float, ...] = DEFAULT_S3_PROBS
    c1_probs: tuple[float, ...] = DEFAULT_C1_PROBS
    c1_shift_levels: tuple[int, ...] = (1, 13, 14)
    c1_shift: float = 1.5
    c2_prob: float = 0.5
    c3_prob: float = 0.35
    size_scale: float = 1.0
    noise_scale: float = 0.1
    swap_rate: float = 0.02

    def __post_init__(self):
        mean = np.asarray(self.school_mvn_mean, dtype=float)
        cov = np.asarray(self.school_mvn_cov, dtype=float)
        if mean.shape != (5,) or cov.shape != (5, 5):
            raise ConfigError("school latent mean must have 5 entries and covariance 5x5")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise ConfigError("school latent covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ConfigError("school latent covariance must be positive semidefinite")
        if len(self.xc_labels) != len(self.xc_cuts) + 1:
            raise ConfigError("xc_labels needs one more entry than xc_cuts")
        if list(self.xc_cuts) != sorted(self.xc_cuts):
            raise ConfigError("xc_cuts must be increasing")
        if not 0 <= self.xc_coordinate < 5:
            raise ConfigError("xc_coordinate must index one of the 5 latent coordinates")
        for name, probs, k in (("s3_probs", self.s3_probs, len(S3_LEVELS)),
                               ("c1_probs", self.c1_probs, len(C1_LEVELS))):
            p = np.asarray(probs, dtype=float)
            if p.shape != (k,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"{name} must be a {k}-vector summing to 1")
        for name in ("c2_prob", "c3_prob"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0 <= self.noise_scale <= 1:
            raise ConfigError("noise_scale must lie in [0, 1]")
        if not 0 <= self.swap_rate < 1:
            raise ConfigError("swap_rate must lie in [0, 1)")


def _mvn(mean: np.ndarray, cov: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    # eigh keeps degenerate (zero) directions exactly degenerate
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return mean + rng.standard_normal((n, len(mean))) @ root.T


def xc_from_latent(spec: CovariateSpec, latent: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(np.asarray(spec.xc_cuts), latent[:, spec.xc_coordinate], side="right")
    return np.asarray(spec.xc_labels, dtype=np.int64)[idx]


def schools_from_latent(spec: CovariateSpec, latent: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({
        "school_id": np.arange(1, len(latent) + 1, dtype=np.int64),
        "xc": xc_from_latent(spec, latent),
        "x1": latent[:, 0],
        "x2": latent[:, 1],
        "x3": expit(latent[:, 2]),
        "x4": expit(latent[:, 3]),
        "x5": np.exp(latent[:, 4]),
    })


def sample_school_latents(spec: CovariateSpec, n_schools: int,
                          rng: np.random.Generator) -> np.ndarray:
    if n_schools < 1:
        raise ConfigError("n_schools must be >= 1")
    latent = _mvn(np.asarray(spec.school_mvn_mean, float),
                  np.asarray(spec.school_mvn_cov, float), n_schools, rng)
    if spec.noise_scale > 0 and n_schools >= 2:
        latent = perturb_continuous(latent, spec.noise_scale, rng)
    return latent


def sample_schools(spec: CovariateSpec, n_schools: int, rng: np.random.Generator) -> pd.DataFrame:
    """Draw ``n_schools`` school profiles (one row each, ids 1..n)."""
    return schools_from_latent(spec, sample_school_latents(spec, n_schools, rng))


def _categorical(probs: np.ndarray, rng: np.random.Generator, levels) -> np.ndarray:
    """One categorical draw per row of the (n, k) probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(cdf.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.asarray(levels, dtype=np.int64)[idx]


def sample_students(spec: CovariateSpec, schools: pd.DataFrame, n_students: int,
                    rng: np.random.Generator) -> pd.DataFrame:
    """Allocate students to schools and draw the student-level covariates.

    Every school gets one student; the remainder are spread multinomially with
    weights ``exp(size_scale * log x5)``.  Returns student rows merged with
    their school covariates, ``z`` and ``y`` left as placeholders.
    """
    n_schools = len(schools)
    if n_schools == 0:
        raise ConfigError("cannot place students in an empty school list")
    if n_students < n_schools:
        raise ConfigError("n_students must be at least the number of schools")

    weights = np.exp(spec.size_scale * np.log(schools["x5"].to_numpy(float)))
    sizes = 1 + rng.multinomial(n_students - n_schools, weights / weights.sum())
    school_idx = np.repeat(np.arange(n_schools), sizes)

    s3p = np.tile(np.asarray(spec.s3_probs, float), (n_students, 1))
    s3 = _categorical(s3p, rng, S3_LEVELS)

    c1p = np.tile(np.asarray(spec.c1_probs, float), (n_schools, 1))
    if spec.c1_shift != 0.0:
        latent3 = -np.log(1.0 / schools["x3"].to_numpy(float) - 1.0)
        cols = [lvl - 1 for lvl in spec.c1_shift_levels]
        c1p[:, cols] *= np.exp(spec.c1_shift * latent3)[:, None]
        c1p /= c1p.sum(axis=1, keepdims=True)
    c1 = _categorical(c1p[school_idx], rng, C1_LEVELS)
    c2 = (rng.random(n_students) < spec.c2_prob).astype(np.int64)
    c3 = (rng.random(n_students) < spec.c3_prob).astype(np.int64)

    if spec.swap_rate > 0:
        # swap within schools so the multilevel structure is untouched
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        for col in (s3, c1, c2, c3):
            for a, n in zip(starts, sizes):
                col[a:a + n] = swap_categorical(col[a:a + n], spec.swap_rate, rng)

    frame = schools.iloc[school_idx].reset_index(drop=True)
    students = pd.DataFrame({
        "student_id": np.arange(1, n_students + 1, dtype=np.int64),
        "school_id": frame["school_id"].to_numpy(),
        "z": np.zeros(n_students, dtype=np.int64),
        "y": np.zeros(n_students),
        "s3": s3, "c1": c1, "c2": c2, "c3": c3,
    })
    for col in ("xc", "x1", "x2", "x3", "x4", "x5"):
        students[col] = frame[col].to_numpy()
    return students


def perturb_continuous(values: np.ndarray, noise_scale: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Add MVN noise with covariance ``noise_scale**2`` times the sample covariance.

    Columns with zero sample variance receive exactly zero noise.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("need a matrix with at least 2 rows to estimate a covariance")
    if not noise_scale > 0:
        raise ValueError("noise_scale must be > 0")
    out = values.copy()
    live = np.flatnonzero(values.var(axis=0) > 0)
    if live.size:
        cov = np.atleast_2d(np.cov(values[:, live], rowvar=False))
        noise = _mvn(np.zeros(live.size), noise_scale ** 2 * cov, values.shape[0], rng)
        out[:, live] += noise
    return out


def swap_categorical(values, swap_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Exchange values within ``floor(swap_rate * n / 2)`` disjoint random pairs."""
    if not 0 <= swap_rate < 1:
        raise ConfigError("swap_rate must lie in [0, 1)")
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("cannot swap an empty list")
    out = values.copy()
    n_pairs = int(np.floor(swap_rate * values.size / 2))
    if n_pairs:
        picked = rng.permutation(values.size)[: 2 * n_pairs]
        a, b = picked[:n_pairs], picked[n_pairs:]
        out[a], out[b] = values[b], values[a]
    return out
