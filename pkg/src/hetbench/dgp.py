"""Outcome model, step-function treatment effects and targeted selection.

Observed outcomes follow

    y = alpha_j + mu(w) + (tau(x1, x2, c1) + gamma_j) * z + eps

with school intercepts ``alpha_j``, school slopes ``gamma_j`` and errors
resampled from a residual pool.  Confounding is induced in two steps after a
Bernoulli assignment: treated units are dropped with probability
``1 - Phi(a + b * mu)``, then treated units whose hidden covariate lies above
an empirical percentile are dropped as well.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import special, stats

from .core import C1_LEVELS, S3_LEVELS, GroundTruth
from .covariates import ConfigError, CovariateSpec, sample_schools, sample_students

# Parametric part of mu: intercept, S3 and C1 level offsets (reference level 1),
# binary C2/C3 slopes and a numeric XC slope.
GAM_INTERCEPT = -0.279038
GAM_S3 = {2: -0.009130, 3: -0.017494, 4: 0.046260, 5: 0.252158, 6: 0.614424, 7: 0.964031}
GAM_C1 = {
    2: 0.011635, 3: -0.035327, 4: -0.107783, 5: 0.215135, 6: 0.001796,
    7: 0.034712, 8: -0.073001, 9: -0.138227, 10: -0.099958, 11: -0.084852,
    12: 0.049686, 13: -0.100919, 14: 0.064214, 15: -0.019233,
}
GAM_C2 = -0.155658
GAM_C3 = -0.093056
GAM_XC = 0.019555


@dataclass(frozen=True)
class GamCoefficients:
    intercept: float = GAM_INTERCEPT
    s3: dict[int, float] = field(default_factory=lambda: dict(GAM_S3))
    c1: dict[int, float] = field(default_factory=lambda: dict(GAM_C1))
    c2: float = GAM_C2
    c3: float = GAM_C3
    xc: float = GAM_XC

    def __post_init__(self):
        if sorted(self.s3) != list(S3_LEVELS[1:]):
            raise ConfigError("GAM table needs S3 offsets for levels 2..7")
        if sorted(self.c1) != list(C1_LEVELS[1:]):
            raise ConfigError("GAM table needs C1 offsets for levels 2..15")

    def n_entries(self) -> int:
        return 1 + len(self.s3) + len(self.c1) + 3


@dataclass(frozen=True)
class SmoothTerm:
    """Cubic spline in truncated-power form.

    ``f(x) = sum_p poly[p-1] * x**p + sum_k hinge[k] * max(x - knots[k], 0)**3``
    which is C2-continuous everywhere.
    """

    knots: tuple[float, ...] = ()
    poly: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hinge: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.hinge) != len(self.knots):
            raise ConfigError("smooth needs one hinge coefficient per knot")
        if len(self.poly) != 3:
            raise ConfigError("smooth polynomial part has exactly 3 coefficients")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.poly[0] * x + self.poly[1] * x ** 2 + self.poly[2] * x ** 3
        for k, b in zip(self.knots, self.hinge):
            out = out + b * np.clip(x - k, 0.0, None) ** 3
        return out

    @property
    def is_zero(self) -> bool:
        return not any(self.poly) and not any(self.hinge)

    @classmethod
    def natural(cls, knots, slope: float, bend: float) -> SmoothTerm:
        """Three-knot spline whose cubic and quadratic parts cancel past the last knot."""
        k1, k2, k3 = knots
        hinge = (bend * (k3 - k2), -bend * (k3 - k1), bend * (k2 - k1))
        return cls(tuple(knots), (slope, 0.0, 0.0), hinge)


# Stand-in shapes with modest amplitude; the published fit only exists as a plot.
DEFAULT_SMOOTHS = (
    SmoothTerm.natural((-1.0, 0.0, 1.0), 0.10, -0.033),     # X1: hump near 0
    SmoothTerm.natural((-1.2, -0.2, 0.8), -0.06, 0.03),     # X2: U shape
    SmoothTerm.natural((0.25, 0.45, 0.65), -0.6, 12.0),     # X3: declining, flat above 0.65
    SmoothTerm.natural((0.3, 0.45, 0.6), 0.45, -45.0),      # X4: bump
    SmoothTerm.natural((0.7, 1.0, 1.4), 0.25, -0.9),        # X5: saturating
)


@dataclass(frozen=True)
class MuModel:
    gam: GamCoefficients = field(default_factory=GamCoefficients)
    smooths: tuple[SmoothTerm, ...] = DEFAULT_SMOOTHS

    def __post_init__(self):
        if len(self.smooths) != 5:
            raise ConfigError("mu needs exactly five smooth terms (X1..X5)")


def mu(model: MuModel, w) -> np.ndarray:
    """Expected control outcome (without the school intercept).

    ``w`` is a frame (or mapping of arrays) with columns s3, c1, c2, c3, xc,
    x1..x5.
    """
    s3 = np.asarray(w["s3"]).astype(np.int64)
    c1 = np.asarray(w["c1"]).astype(np.int64)
    bad_s3 = set(np.unique(s3)) - set(S3_LEVELS)
    if bad_s3:
        raise ValueError(f"S3 level {min(bad_s3)} is not in the coefficient table")
    bad_c1 = set(np.unique(c1)) - set(C1_LEVELS)
    if bad_c1:
        raise ValueError(f"C1 level {min(bad_c1)} is not in the coefficient table")
    gam = model.gam
    s3_table = np.array([0.0] + [gam.s3[k] for k in S3_LEVELS[1:]])
    c1_table = np.array([0.0] + [gam.c1[k] for k in C1_LEVELS[1:]])
    out = (gam.intercept + s3_table[s3 - 1] + c1_table[c1 - 1]
           + gam.c2 * np.asarray(w["c2"], float) + gam.c3 * np.asarray(w["c3"], float)
           + gam.xc * np.asarray(w["xc"], float))
    for k, smooth in enumerate(model.smooths, start=1):
        if not smooth.is_zero:
            out = out + smooth(np.asarray(w[f"x{k}"], float))
    return out


@dataclass(frozen=True)
class ResidualPool:
    pool: tuple[float, ...]
    jitter_sd: float = 0.05
    target_sd: float = 0.5

    def __post_init__(self):
        if len(self.pool) == 0:
            raise ConfigError("residual pool must be non-empty")
        if self.jitter_sd < 0 or not self.target_sd > 0:
            raise ConfigError("jitter_sd must be >= 0 and target_sd > 0")

    @classmethod
    def centered(cls, values, jitter_sd: float = 0.05, target_sd: float = 0.5) -> ResidualPool:
        v = np.asarray(values, dtype=float)
        return cls(tuple((v - v.mean()).tolist()), jitter_sd, target_sd)

    @classmethod
    def skewed(cls, size: int = 2000, skew: float = -1.5, jitter_sd: float = 0.05,
               target_sd: float = 0.5) -> ResidualPool:
        """Deterministic pool: evenly spaced quantiles of a skew-normal law."""
        probs = (np.arange(size) + 0.5) / size
        return cls.centered(stats.skewnorm.ppf(probs, skew), jitter_sd, target_sd)


@dataclass(frozen=True)
class DgpConfig:
    tau_base: float = 0.228
    tau_x1_bonus: float = 0.05
    x1_cut: float = 0.07
    tau_x2_penalty: float = -0.05
    x2_cut: float = -0.69
    tau_c1_penalty: float = -0.08
    c1_penalty_set: frozenset[int] = frozenset({1, 13, 14})
    alpha_sd: float = 0.15
    gamma_sd: float = 0.105
    error_sd: float = 0.5
    error_jitter_sd: float = 0.05
    error_pool_size: int = 2000
    error_pool_skew: float = -1.5
    error_pool: tuple[float, ...] | None = None
    sel_intercept: float = -0.5
    sel_slope: float = 1.5
    hidden_pctile: float = 0.80
    hidden_loading: float = 2.0
    hidden_noise_sd: float = 1.0
    n_schools: int = 76
    n_students: int = 10000
    base_treat_prob: float = 0.5
    mu_model: MuModel = field(default_factory=MuModel)
    covariate_spec: CovariateSpec = field(default_factory=CovariateSpec)
    seed: int = 20180501

    def __post_init__(self):
        if not 0 < self.base_treat_prob < 1:
            raise ConfigError("base_treat_prob must lie in (0, 1)")
        if not 0 < self.hidden_pctile <= 1:
            raise ConfigError("hidden_pctile must lie in (0, 1]")
        for name in ("tau_base", "tau_x1_bonus", "x1_cut", "tau_x2_penalty", "x2_cut",
                     "tau_c1_penalty", "sel_intercept", "sel_slope"):
            if math.isnan(getattr(self, name)):
                raise ConfigError(f"{name} must not be NaN")
        for name in ("x1_cut", "x2_cut"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.alpha_sd < 0 or self.gamma_sd < 0 or self.hidden_noise_sd < 0:
            raise ConfigError("standard deviations must be >= 0")
        if not self.error_sd > 0:
            raise ConfigError("error_sd must be > 0")
        if not set(self.c1_penalty_set) <= set(C1_LEVELS):
            raise ConfigError("c1_penalty_set must hold C1 levels 1..15")
        if self.n_schools < 1 or self.n_students < self.n_schools:
            raise ConfigError("need n_students >= n_schools >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def residual_pool(self) -> ResidualPool:
        if self.error_pool is not None:
            return ResidualPool.centered(self.error_pool, self.error_jitter_sd, self.error_sd)
        return ResidualPool.skewed(self.error_pool_size, self.error_pool_skew,
                                   self.error_jitter_sd, self.error_sd)

    def with_(self, **changes) -> DgpConfig:
        return replace(self, **changes)


def tau(cfg: DgpConfig, x1, x2, c1) -> np.ndarray:
    """Covariate part of the unit-level effect (strict inequalities at the cuts)."""
    c1 = np.asarray(c1)
    if not np.isin(c1, C1_LEVELS).all():
        raise ValueError("C1 must be a level in 1..15")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return (cfg.tau_base
            + cfg.tau_x1_bonus * (x1 < cfg.x1_cut)
            + cfg.tau_x2_penalty * (x2 < cfg.x2_cut)
            + cfg.tau_c1_penalty * np.isin(c1, sorted(cfg.c1_penalty_set)))


def normal_cdf(x):
    """Standard normal CDF.

    Evaluated with ``scipy.special.ndtr`` (Cephes erf/erfc with the erfc branch
    in the tails), accurate to about 1e-16 absolute.
    """
    return special.ndtr(x)


def keep_probability(cfg: DgpConfig, mu_values):
    """Probability that a treated unit survives the first drop step."""
    return normal_cdf(cfg.sel_intercept + cfg.sel_slope * np.asarray(mu_values, float))


def sample_school_effects(cfg: DgpConfig, n_schools: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent school intercepts and slopes."""
    if n_schools < 1:
        raise ConfigError("n_schools must be >= 1")
    draws = rng.standard_normal((2, n_schools))
    return cfg.alpha_sd * draws[0], cfg.gamma_sd * draws[1]


def sample_errors(pool: ResidualPool, n: int, rng: np.random.Generator) -> np.ndarray:
    """Resample, jitter, then rescale the batch to mean 0 and sd ``target_sd``.

    The sd is the population (ddof=0) sd of the batch.  A batch with zero
    spread (e.g. a constant pool without jitter) comes back as zeros.
    """
    if n < 2:
        raise ValueError("need n >= 2 draws; the batch sd is undefined otherwise")
    values = np.asarray(pool.pool, dtype=float)
    draws = values[rng.integers(0, len(values), size=n)]
    if pool.jitter_sd > 0:
        draws = draws + pool.jitter_sd * rng.standard_normal(n)
    draws = draws - draws.mean()
    sd = draws.std()
    if sd == 0:
        return np.zeros(n)
    return draws * (pool.target_sd / sd)


def higher_quantile(values, p: float) -> float:
    """Smallest sample value whose empirical CDF is >= p."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(int(math.ceil(p * len(v) - 1e-9)), 1)
    return float(v[k - 1])


@dataclass(frozen=True)
class Assignment:
    z: np.ndarray
    retained: np.ndarray
    dropped_step1: np.ndarray
    dropped_step2: np.ndarray
    hidden_threshold: float


def assign_and_select(cfg: DgpConfig, mu_values, hidden, rng: np.random.Generator) -> Assignment:
    mu_values = np.asarray(mu_values, dtype=float)
    hidden = np.asarray(hidden, dtype=float)
    if mu_values.shape != hidden.shape:
        raise ValueError("mu_values and hidden must have the same length")
    n = len(mu_values)
    z = (rng.random(n) < cfg.base_treat_prob).astype(np.int64)
    keep1 = rng.random(n) < keep_probability(cfg, mu_values)
    dropped1 = (z == 1) & ~keep1
    threshold = higher_quantile(hidden, cfg.hidden_pctile)
    dropped2 = (z == 1) & ~dropped1 & (hidden > threshold)
    retained = ~(dropped1 | dropped2)
    return Assignment(z, retained, dropped1, dropped2, threshold)


def standardized_s3(s3) -> np.ndarray:
    return (np.asarray(s3, float) - 4.0) / 2.0


def sample_hidden(cfg: DgpConfig, s3, rng: np.random.Generator) -> np.ndarray:
    """Hidden selection covariate: a noisy increasing function of S3."""
    s3 = np.asarray(s3)
    return cfg.hidden_loading * standardized_s3(s3) + cfg.hidden_noise_sd * rng.standard_normal(len(s3))


def oracle_propensity(cfg: DgpConfig, mu_values, s3, hidden_threshold: float) -> np.ndarray:
    """P(z = 1 | w, retained) implied by the assignment and both drop steps."""
    mean_h = cfg.hidden_loading * standardized_s3(s3)
    if cfg.hidden_noise_sd > 0:
        pass2 = normal_cdf((hidden_threshold - mean_h) / cfg.hidden_noise_sd)
    else:
        pass2 = (mean_h <= hidden_threshold).astype(float)
    p = cfg.base_treat_prob
    kept = p * keep_probability(cfg, mu_values) * pass2
    return kept / (kept + (1.0 - p))


def stream_seeds(seed: int, n: int = 6) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


@dataclass(frozen=True)
class GeneratedData:
    data: pd.DataFrame
    truth: GroundTruth
    schools: pd.DataFrame
    manifest: dict[str, str]


def generate_dataset(cfg: DgpConfig, spec: CovariateSpec | None = None,
                     seed: int | None = None) -> GeneratedData:
    """Run the full generator; dropped units stay (flagged) in the truth table."""
    spec = cfg.covariate_spec if spec is None else spec
    seed = cfg.seed if seed is None else seed
    ss_schools, ss_students, ss_effects, ss_errors, ss_hidden, ss_assign = [
        np.random.default_rng(s) for s in stream_seeds(seed)]

    schools = sample_schools(spec, cfg.n_schools, ss_schools)
    students = sample_students(spec, schools, cfg.n_students, ss_students)
    mu_w = mu(cfg.mu_model, students)
    tau_w = tau(cfg, students["x1"], students["x2"], students["c1"])

    alpha_s, gamma_s = sample_school_effects(cfg, len(schools), ss_effects)
    sidx = students["school_id"].to_numpy() - 1
    alpha, gamma = alpha_s[sidx], gamma_s[sidx]
    eps = sample_errors(cfg.residual_pool(), len(students), ss_errors)
    hidden = sample_hidden(cfg, students["s3"], ss_hidden)
    assignment = assign_and_select(cfg, mu_w, hidden, ss_assign)

    y0 = alpha + mu_w + eps
    y1 = y0 + tau_w + gamma
    z = assignment.z
    students["z"] = z
    students["y"] = np.where(z == 1, y1, y0)

    truth = pd.DataFrame({
        "student_id": students["student_id"].to_numpy(),
        "school_id": students["school_id"].to_numpy(),
        "mu": mu_w, "tau_cov": tau_w, "alpha": alpha, "gamma": gamma,
        "epsilon": eps, "y0": y0, "y1": y1, "retained": assignment.retained,
        "z": z,
        "propensity": oracle_propensity(cfg, mu_w, students["s3"], assignment.hidden_threshold),
    })
    gt = GroundTruth(truth, assignment.hidden_threshold)
    data = students.loc[assignment.retained].reset_index(drop=True)
    data = data[["student_id", "school_id", "z", "y", "s3", "c1", "c2", "c3",
                 "xc", "x1", "x2", "x3", "x4", "x5"]]

    manifest = {
        "config_sha256": config_hash(cfg),
        "seed": str(seed),
        "n_schools": str(len(schools)),
        "n_generated": str(len(students)),
        "n_assigned_treated": str(int(z.sum())),
        "n_dropped_step1": str(int(assignment.dropped_step1.sum())),
        "n_dropped_step2": str(int(assignment.dropped_step2.sum())),
        "n_retained": str(len(data)),
        "n_treated": str(int(data["z"].sum())),
        "hidden_threshold": repr(assignment.hidden_threshold),
        "sate": repr(gt.sate),
        "satt": repr(gt.satt),
    }
    return GeneratedData(data, gt, schools, manifest)


def config_hash(cfg: DgpConfig) -> str:
    from .config import dump_config

    text = dump_config(cfg, with_seed=False)
    return hashlib.sha256(text.encode()).hexdigest()
