"""Average-effect estimators and unit-level effect learners.

Nuisance inputs (propensity, outcome models) may be given either as a
``FittedModel`` or directly as per-row arrays, which is how oracle values
from the generator are passed in.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.special import logit

from .core import EstimateReport
from .design import DesignBasis
from .models import FittedModel, kkt_residual, lasso_cd


class EstimationError(ValueError):
    pass


def _scores(model_or_values, data) -> np.ndarray:
    if model_or_values is None:
        return np.zeros(len(data))
    if isinstance(model_or_values, FittedModel):
        return model_or_values.predict(data)
    values = np.asarray(model_or_values, dtype=float)
    if values.shape != (len(data),):
        raise EstimationError(f"expected {len(data)} nuisance values, got shape {values.shape}")
    return values


def _arms(data):
    z = np.asarray(data["z"], dtype=int)
    y = np.asarray(data["y"], dtype=float)
    if not (np.any(z == 1) and np.any(z == 0)):
        raise EstimationError("both treatment arms must be non-empty")
    return z, y


def cluster_bootstrap_se(statistic, data: pd.DataFrame, n_boot: int = 200,
                         seed: int = 0, cluster: str = "school_id") -> float:
    """SD of ``statistic`` over resamples of whole clusters (with replacement)."""
    rng = np.random.default_rng(seed)
    ids = np.asarray(data[cluster])
    uniq, inverse = np.unique(ids, return_inverse=True)
    rows_of = [np.flatnonzero(inverse == k) for k in range(len(uniq))]
    values = []
    for _ in range(n_boot):
        picks = rng.integers(0, len(uniq), size=len(uniq))
        rows = np.concatenate([rows_of[k] for k in picks])
        try:
            values.append(statistic(data.iloc[rows]))
        except EstimationError:
            continue
    if len(values) < 2:
        raise EstimationError("cluster bootstrap produced fewer than 2 usable resamples")
    return float(np.std(values, ddof=1))


def _maybe_bootstrap(report: EstimateReport, statistic, frame, cluster_bootstrap: int,
                     seed: int) -> EstimateReport:
    if not cluster_bootstrap:
        return report
    se = cluster_bootstrap_se(statistic, frame, cluster_bootstrap, seed)
    meta = dict(report.metadata, se_kind=f"school cluster bootstrap ({cluster_bootstrap})")
    return EstimateReport.from_se(report.estimand, report.method, report.point, se,
                                  report.n_used, **meta)


# ---------------------------------------------------------------------------
# naive


def _naive_point(frame) -> float:
    z, y = _arms(frame)
    return float(y[z == 1].mean() - y[z == 0].mean())


def estimate_naive(data: pd.DataFrame, cluster_bootstrap: int = 0, seed: int = 0) -> EstimateReport:
    """Difference in arm means with a Welch standard error."""
    z, y = _arms(data)
    y1, y0 = y[z == 1], y[z == 0]
    v1 = y1.var(ddof=1) if len(y1) > 1 else 0.0
    v0 = y0.var(ddof=1) if len(y0) > 1 else 0.0
    se = float(np.sqrt(v1 / len(y1) + v0 / len(y0)))
    report = EstimateReport.from_se("ATE", "naive", y1.mean() - y0.mean(), se, len(y))
    return _maybe_bootstrap(report, _naive_point, data, cluster_bootstrap, seed)


# ---------------------------------------------------------------------------
# weighting


def _trimmed(data, e, trim):
    if not 0 <= trim < 0.5:
        raise EstimationError("trim must lie in [0, 0.5)")
    keep = (e >= trim) & (e <= 1 - trim) if trim > 0 else np.ones(len(e), bool)
    e = e[keep]
    if np.any((e <= 0) | (e >= 1)) or np.any(~np.isfinite(e)):
        raise EstimationError("propensities of exactly 0 or 1 remain; raise trim")
    return keep, e


def _ipw_parts(z, y, e, normalized):
    w1 = z / e
    w0 = (1 - z) / (1 - e)
    n = len(y)
    if normalized:
        mu1 = np.sum(w1 * y) / np.sum(w1)
        mu0 = np.sum(w0 * y) / np.sum(w0)
        # influence function of the ratio estimator, propensities held fixed
        psi = w1 * (y - mu1) / np.mean(w1) - w0 * (y - mu0) / np.mean(w0)
    else:
        mu1 = np.sum(w1 * y) / n
        mu0 = np.sum(w0 * y) / n
        psi = w1 * y - w0 * y - (mu1 - mu0)
    se = float(np.sqrt(np.sum(psi ** 2)) / n)
    return float(mu1 - mu0), se


def estimate_ipw(data: pd.DataFrame, propensity, trim: float = 0.0, normalized: bool = True,
                 cluster_bootstrap: int = 0, seed: int = 0) -> EstimateReport:
    """Inverse-propensity weighting; Hajek (normalized) weights by default."""
    z, y = _arms(data)
    keep, e = _trimmed(data, _scores(propensity, data), trim)
    z, y = z[keep], y[keep]
    if not (np.any(z == 1) and np.any(z == 0)):
        raise EstimationError("trimming emptied a treatment arm")
    point, se = _ipw_parts(z, y, e, normalized)
    method = "ipw" if normalized else "ipw_ht"
    report = EstimateReport.from_se("ATE", method, point, se, int(keep.sum()), trim=trim)
    frame = data.loc[keep].assign(_e=e)

    def stat(f):
        zz, yy = _arms(f)
        return _ipw_parts(zz, yy, f["_e"].to_numpy(), normalized)[0]

    return _maybe_bootstrap(report, stat, frame, cluster_bootstrap, seed)


def aipw_summand(z, y, e, m0, m1) -> np.ndarray:
    return m1 - m0 + z * (y - m1) / e - (1 - z) * (y - m0) / (1 - e)


def estimate_aipw(data: pd.DataFrame, propensity, outcome0=None, outcome1=None,
                  trim: float = 0.0, cluster_bootstrap: int = 0, seed: int = 0) -> EstimateReport:
    """Augmented IPW; missing outcome models count as identically zero."""
    z, y = _arms(data)
    keep, e = _trimmed(data, _scores(propensity, data), trim)
    m0 = _scores(outcome0, data)[keep]
    m1 = _scores(outcome1, data)[keep]
    z, y = z[keep], y[keep]
    phi = aipw_summand(z, y, e, m0, m1)
    n = len(phi)
    se = float(phi.std(ddof=0) / np.sqrt(n))
    report = EstimateReport.from_se("ATE", "aipw", phi.mean(), se, n, trim=trim)
    frame = data.loc[keep].assign(_phi=phi)
    return _maybe_bootstrap(report, lambda f: float(f["_phi"].mean()), frame,
                            cluster_bootstrap, seed)


# ---------------------------------------------------------------------------
# matching


def _nearest(sorted_vals: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index into ``sorted_vals`` of the nearest value (ties go to the left)."""
    right = np.searchsorted(sorted_vals, query, side="left")
    right = np.clip(right, 1, len(sorted_vals) - 1) if len(sorted_vals) > 1 else np.zeros_like(right)
    if len(sorted_vals) == 1:
        return right
    left = right - 1
    pick_left = np.abs(query - sorted_vals[left]) <= np.abs(sorted_vals[right] - query)
    return np.where(pick_left, left, right)


def estimate_matched_att(data: pd.DataFrame, propensity, caliper: float = 0.2,
                         cluster_bootstrap: int = 0, seed: int = 0) -> EstimateReport:
    """1:1 nearest-neighbour matching on the logit propensity, with replacement.

    Treated units without a control inside ``caliper`` (logit units) are
    dropped and counted in the metadata.  The standard error follows the
    Abadie-Imbens form for matching with replacement, with the conditional
    variance of each used control estimated from its nearest other control.
    """
    if not caliper > 0:
        raise EstimationError("caliper must be > 0")
    z, y = _arms(data)
    e = _scores(propensity, data)
    if np.any((e <= 0) | (e >= 1)):
        raise EstimationError("propensities must lie strictly inside (0, 1)")
    lp = logit(e)
    sid = np.asarray(data["student_id"]) if "student_id" in data else np.arange(len(data))

    controls = np.flatnonzero(z == 0)
    order = np.lexsort((sid[controls], lp[controls]))
    ctrl = controls[order]
    ctrl_lp = lp[ctrl]
    treated = np.flatnonzero(z == 1)
    nn = _nearest(ctrl_lp, lp[treated])
    dist = np.abs(lp[treated] - ctrl_lp[nn])
    ok = dist <= caliper
    if not ok.any():
        raise EstimationError("no treated unit has a control within the caliper")
    t_idx = treated[ok]
    c_pos = nn[ok]
    diffs = y[t_idx] - y[ctrl[c_pos]]
    att = float(diffs.mean())
    n1 = len(t_idx)

    counts = np.bincount(c_pos, minlength=len(ctrl)).astype(float)
    used = np.flatnonzero(counts > 0)
    if len(ctrl) > 1 and used.size:
        # nearest other control of each used control, in the same sorted order
        lo = np.clip(used - 1, 0, None)
        hi = np.clip(used + 1, None, len(ctrl) - 1)
        d_lo = np.where(used > 0, np.abs(ctrl_lp[used] - ctrl_lp[lo]), np.inf)
        d_hi = np.where(used < len(ctrl) - 1, np.abs(ctrl_lp[hi] - ctrl_lp[used]), np.inf)
        other = np.where(d_lo <= d_hi, lo, hi)
        sigma2 = 0.5 * (y[ctrl[used]] - y[ctrl[other]]) ** 2
    else:
        sigma2 = np.zeros(used.size)
    k = counts[used]
    var = (np.sum((diffs - att) ** 2) + np.sum((k ** 2 - k) * sigma2)) / n1 ** 2
    report = EstimateReport.from_se(
        "ATT", "matching", att, float(np.sqrt(var)), n1,
        caliper=caliper, unmatched_treated=int((~ok).sum()),
        max_distance=float(dist[ok].max()))
    frame = data.iloc[t_idx].assign(_d=diffs)
    return _maybe_bootstrap(report, lambda f: float(f["_d"].mean()), frame,
                            cluster_bootstrap, seed)


def match_distances(data: pd.DataFrame, propensity, caliper: float) -> np.ndarray:
    """Logit distances of the accepted matches (for diagnostics and tests)."""
    z, _ = _arms(data)
    lp = logit(_scores(propensity, data))
    sid = np.asarray(data["student_id"]) if "student_id" in data else np.arange(len(data))
    controls = np.flatnonzero(z == 0)
    ctrl_lp = lp[controls[np.lexsort((sid[controls], lp[controls]))]]
    dist = np.abs(lp[z == 1] - ctrl_lp[_nearest(ctrl_lp, lp[z == 1])])
    return dist[dist <= caliper]


# ---------------------------------------------------------------------------
# unit-level effects


def predict_ite_tlearner(data: pd.DataFrame, outcome0, outcome1) -> np.ndarray:
    return _scores(outcome1, data) - _scores(outcome0, data)


def fit_rlearner(data: pd.DataFrame, propensity, marginal_outcome, effect_basis: DesignBasis,
                 l1: float = 0.0) -> FittedModel:
    """Robinson-residual regression of the effect on ``effect_basis``.

    Minimizes ``1/2 mean((y~ - tau(w) z~)^2) + l1 * |b|_1`` with
    ``y~ = y - m(w)`` and ``z~ = z - e(w)``; the basis intercept is unpenalized.
    """
    z, y = _arms(data)
    y_res = y - _scores(marginal_outcome, data)
    z_res = z - _scores(propensity, data)
    if np.all(np.abs(z_res) < 1e-6):
        raise EstimationError("treatment residuals vanish; the effect is not identified")
    B = effect_basis.matrix(data)
    X = B * z_res[:, None]
    n = len(y)
    gram = X.T @ X / n
    rhs = X.T @ y_res / n
    penalized = np.ones(B.shape[1])
    if effect_basis.intercept:
        penalized[0] = 0.0
    beta, sweeps = lasso_cd(gram, rhs, l1, penalized)
    kkt = float(kkt_residual(gram, rhs, beta, l1, penalized).max(initial=0.0))
    return FittedModel("lasso", effect_basis, beta, float(l1), sweeps, kkt)


def predict_ite_rlearner(data: pd.DataFrame, propensity, marginal_outcome,
                         effect_basis: DesignBasis, l1: float = 0.0) -> np.ndarray:
    model = fit_rlearner(data, propensity, marginal_outcome, effect_basis, l1)
    return model.predict(data)


def cluster_mean_se(values, clusters, n_boot: int = 200, seed: int = 0) -> float:
    """Cluster-bootstrap SE of a plain mean, computed from per-cluster sums."""
    values = np.asarray(values, float)
    _, cidx = np.unique(np.asarray(clusters), return_inverse=True)
    k = cidx.max() + 1
    sums = np.bincount(cidx, weights=values, minlength=k)
    counts = np.bincount(cidx, minlength=k).astype(float)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, k, size=(n_boot, k))
    means = sums[draws].sum(axis=1) / counts[draws].sum(axis=1)
    return float(means.std(ddof=1))


def plugin_report(ite, data: pd.DataFrame, method: str, n_boot: int = 200,
                  seed: int = 0) -> EstimateReport:
    """ATE as the mean of unit-level effects; SE by school bootstrap with fits held fixed."""
    ite = np.asarray(ite, dtype=float)
    se = cluster_mean_se(ite, data["school_id"], n_boot, seed)
    return EstimateReport.from_se("ATE", method, ite.mean(), se, len(ite),
                                  se_kind=f"school cluster bootstrap ({n_boot}), nuisances fixed")
