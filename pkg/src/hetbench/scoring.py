"""Scoring estimates against ground truth and Monte-Carlo replication."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .core import EstimateReport, GroundTruth
from .design import effect_basis, generic_basis, outcome_basis
from .dgp import DgpConfig, GeneratedData, generate_dataset
from .estimators import (
    EstimationError,
    estimate_aipw,
    estimate_ipw,
    estimate_matched_att,
    estimate_naive,
    fit_rlearner,
    plugin_report,
    predict_ite_tlearner,
)
from .models import ConvergenceError, fit_logistic, fit_ridge

# Which covariates modify the effect in the generating model.
MODERATOR_TRUTH = {"x1": True, "x2": True, "c1": True, "xc": False, "s3": False}
AGGREGATE_COLUMNS = ["method", "estimand", "reps_ok", "mean_bias", "sd_bias",
                     "coverage", "mean_width", "mean_pehe"]
PROPENSITY_L2 = 1e-4
MATCH_CALIPER = 0.2


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreCard:
    method: str
    estimand: str
    truth: float
    ate_bias: float
    ate_abs_error: float
    ci_covered: bool
    interval_width: float
    pehe: float = math.nan
    subgroup_confusion: dict[str, tuple[bool, str]] = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"method": self.method, "estimand": self.estimand, "truth": self.truth,
                "bias": self.ate_bias, "abs_error": self.ate_abs_error,
                "covered": int(self.ci_covered), "width": self.interval_width,
                "pehe": self.pehe}


def pehe(ite, truth: GroundTruth) -> float:
    """Root mean squared error of unit-level effects over retained students."""
    cate = truth.cate
    if isinstance(ite, pd.Series):
        missing = cate.index.difference(ite.index)
        if len(missing):
            raise ScoringError(f"effect estimates missing for {len(missing)} students")
        est = ite.reindex(cate.index).to_numpy(float)
    else:
        est = np.asarray(ite, float)
        if est.shape != cate.shape:
            raise ScoringError(f"expected {len(cate)} effect estimates, got {est.shape}")
    return float(np.sqrt(np.mean((est - cate.to_numpy()) ** 2)))


def score(report: EstimateReport, truth: GroundTruth, ite=None, moderation=()) -> ScoreCard:
    if report.estimand == "ATE":
        target = truth.sate
    elif report.estimand == "ATT":
        target = truth.satt
    else:
        raise ScoringError(f"no ground-truth field for estimand {report.estimand!r}")
    bias = report.point - target
    confusion = {}
    for rep in moderation:
        key = rep.moderator.lower()
        if key in MODERATOR_TRUTH:
            confusion[key] = (MODERATOR_TRUTH[key], rep.verdict)
    return ScoreCard(
        method=report.method, estimand=report.estimand, truth=float(target),
        ate_bias=float(bias), ate_abs_error=float(abs(bias)),
        ci_covered=bool(report.ci_low <= target <= report.ci_high),
        interval_width=float(report.width),
        pehe=pehe(ite, truth) if ite is not None else math.nan,
        subgroup_confusion=confusion)


# ---------------------------------------------------------------------------
# method registry


@dataclass(frozen=True)
class MethodResult:
    report: EstimateReport
    ite: np.ndarray | None = None


def _bases(cfg: DgpConfig, truth_basis: bool):
    return outcome_basis(cfg) if truth_basis else generic_basis()


def _need_oracle(oracle):
    if oracle is None:
        raise EstimationError("this method needs oracle propensities from the generator")
    return oracle


def _arm_models(data, basis):
    return (fit_ridge(data[data["z"] == 0], basis, l2=0.0),
            fit_ridge(data[data["z"] == 1], basis, l2=0.0))


def _run_naive(data, cfg, truth_basis, oracle):
    return MethodResult(estimate_naive(data))


def _run_ipw(data, cfg, truth_basis, oracle):
    ps = fit_logistic(data, _bases(cfg, truth_basis), l2=PROPENSITY_L2)
    return MethodResult(estimate_ipw(data, ps))


def _run_ipw_oracle(data, cfg, truth_basis, oracle):
    return MethodResult(estimate_ipw(data, _need_oracle(oracle)))


def _run_aipw(data, cfg, truth_basis, oracle):
    basis = _bases(cfg, truth_basis)
    ps = fit_logistic(data, basis, l2=PROPENSITY_L2)
    m0, m1 = _arm_models(data, basis)
    return MethodResult(estimate_aipw(data, ps, m0, m1), predict_ite_tlearner(data, m0, m1))


def _run_matching(data, cfg, truth_basis, oracle):
    ps = fit_logistic(data, _bases(cfg, truth_basis), l2=PROPENSITY_L2)
    return MethodResult(estimate_matched_att(data, ps, MATCH_CALIPER))


def _run_matching_oracle(data, cfg, truth_basis, oracle):
    return MethodResult(estimate_matched_att(data, _need_oracle(oracle), MATCH_CALIPER))


def _run_tlearner(data, cfg, truth_basis, oracle):
    m0, m1 = _arm_models(data, _bases(cfg, truth_basis))
    ite = predict_ite_tlearner(data, m0, m1)
    return MethodResult(plugin_report(ite, data, "tlearner"), ite)


def _run_rlearner(data, cfg, truth_basis, oracle):
    basis = _bases(cfg, truth_basis)
    ps = fit_logistic(data, basis, l2=PROPENSITY_L2)
    marginal = fit_ridge(data, basis, l2=0.0)
    model = fit_rlearner(data, ps, marginal, effect_basis(cfg))
    ite = model.predict(data)
    return MethodResult(plugin_report(ite, data, "rlearner"), ite)


MethodFn = Callable[[pd.DataFrame, DgpConfig, bool, "np.ndarray | None"], MethodResult]
METHODS: dict[str, MethodFn] = {
    "naive": _run_naive,
    "ipw": _run_ipw,
    "ipw_oracle": _run_ipw_oracle,
    "aipw": _run_aipw,
    "matching": _run_matching,
    "matching_oracle": _run_matching_oracle,
    "tlearner": _run_tlearner,
    "rlearner": _run_rlearner,
}


def run_method(name: str, data: pd.DataFrame, cfg: DgpConfig, truth_basis: bool = True,
               oracle_propensity=None) -> MethodResult:
    try:
        fn = METHODS[name]
    except KeyError:
        raise ScoringError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None
    result = fn(data, cfg, truth_basis, oracle_propensity)
    if result.report.method != name:
        meta = dict(result.report.metadata, estimator=result.report.method)
        r = result.report
        result = MethodResult(EstimateReport(r.estimand, name, r.point, r.ci_low, r.ci_high,
                                             r.se, r.n_used, meta), result.ite)
    return result


def oracle_propensity(gen: GeneratedData) -> np.ndarray:
    return gen.truth.retained["propensity"].to_numpy(float)


# ---------------------------------------------------------------------------
# replication


def rep_seed(root_seed: int, rep: int) -> int:
    """Seed of replication ``rep``; depends only on (root_seed, rep)."""
    state = np.random.SeedSequence(root_seed, spawn_key=(rep,)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _one_rep(args) -> list[dict]:
    cfg, spec, methods, root_seed, rep, truth_basis = args
    seed = rep_seed(root_seed, rep)
    gen = generate_dataset(cfg, spec, seed=seed)
    oracle = oracle_propensity(gen)
    rows = []
    for name in methods:
        row = {"rep": rep, "seed": seed, "method": name}
        try:
            res = run_method(name, gen.data, cfg, truth_basis, oracle)
            card = score(res.report, gen.truth, res.ite)
        except (EstimationError, ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
            row.update(ok=False, reason=f"{type(exc).__name__}: {exc}")
        else:
            row.update(ok=True, reason="", **card.as_row())
        rows.append(row)
    return rows


@dataclass(frozen=True)
class Replication:
    per_rep: pd.DataFrame
    table: pd.DataFrame

    def to_csv(self, path_or_buf=None):
        return self.table.to_csv(path_or_buf, index=False, float_format="%.17g")


def aggregate(per_rep: pd.DataFrame, methods) -> pd.DataFrame:
    rows = []
    for name in methods:
        sub = per_rep[(per_rep["method"] == name) & per_rep["ok"].astype(bool)]
        if "estimand" in sub and len(sub):
            estimand = sub["estimand"].iloc[0]
        else:
            estimand = ""
        n = len(sub)
        bias = sub["bias"].to_numpy(float) if n else np.array([])
        rows.append({
            "method": name, "estimand": estimand, "reps_ok": n,
            "mean_bias": bias.mean() if n else math.nan,
            "sd_bias": bias.std(ddof=1) if n > 1 else math.nan,
            "coverage": sub["covered"].mean() if n else math.nan,
            "mean_width": sub["width"].mean() if n else math.nan,
            "mean_pehe": sub["pehe"].mean() if n and sub["pehe"].notna().all() else math.nan,
        })
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


def replicate(cfg: DgpConfig, spec=None, methods=("naive", "aipw"), reps: int = 10,
              root_seed: int | None = None, truth_basis: bool = True,
              workers: int = 1) -> Replication:
    """Generate ``reps`` datasets, run every method on each and aggregate.

    Failures are recorded per replication with their reason; aggregates use
    successful replications only.  Results do not depend on ``workers``.
    """
    if reps < 1:
        raise ScoringError("reps must be >= 1")
    for name in methods:
        if name not in METHODS:
            raise ScoringError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    root_seed = cfg.seed if root_seed is None else root_seed
    tasks = [(cfg, spec, tuple(methods), root_seed, rep, truth_basis) for rep in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_one_rep, tasks))
    else:
        chunks = [_one_rep(t) for t in tasks]
    per_rep = pd.DataFrame([row for chunk in chunks for row in chunk])
    return Replication(per_rep, aggregate(per_rep, methods))
