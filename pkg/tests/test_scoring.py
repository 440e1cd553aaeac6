from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from hetbench.core import EstimateReport
from hetbench.dgp import DgpConfig, generate_dataset
from hetbench.estimators import EstimationError
from hetbench.moderation import quintile_summary
from hetbench.scoring import (
    AGGREGATE_COLUMNS, METHODS, ScoringError, oracle_propensity, pehe, rep_seed, replicate,
    run_method, score,
)


def test_perfect_report(default_gen):
    t = default_gen.truth
    card = score(EstimateReport.from_se("ATE", "x", t.sate, 0.0, 10), t)
    assert card.ate_bias == 0 and card.ate_abs_error == 0 and card.ci_covered
    assert card.interval_width == 0


def test_att_scored_against_satt(default_gen):
    t = default_gen.truth
    card = score(EstimateReport.from_se("ATT", "x", t.satt + 0.1, 0.01, 10), t)
    assert card.ate_bias == pytest.approx(0.1) and not card.ci_covered


def test_unknown_estimand():
    with pytest.raises(ScoringError, match="estimand"):
        score(SimpleNamespace(estimand="CATE", point=0.0), None)


def test_pehe(default_gen):
    t = default_gen.truth
    assert pehe(t.cate, t) == 0.0
    const = np.full(len(t.cate), t.sate)
    assert pehe(const, t) == pytest.approx(t.cate.std(ddof=0), abs=1e-12)
    with pytest.raises(ScoringError):
        pehe(np.zeros(3), t)
    with pytest.raises(ScoringError, match="missing"):
        pehe(t.cate.iloc[1:], t)


def test_confusion_entries(default_gen):
    d = default_gen.data
    ite = default_gen.truth.cate.reindex(d.student_id).to_numpy()
    mod = quintile_summary(ite, d.x1, d.school_id, name="x1")
    card = score(EstimateReport.from_se("ATE", "x", 0.2, 0.01, 1), default_gen.truth,
                 moderation=[mod])
    assert card.subgroup_confusion == {"x1": (True, mod.verdict)}


def test_run_method_unknown():
    with pytest.raises(ScoringError, match="unknown method"):
        run_method("bart", None, None)


def test_oracle_methods_need_oracle(cfg, default_gen):
    with pytest.raises(EstimationError, match="oracle"):
        run_method("ipw_oracle", default_gen.data, cfg)


def test_all_methods_run(cfg, default_gen):
    e = oracle_propensity(default_gen)
    for name in METHODS:
        res = run_method(name, default_gen.data, cfg, True, e)
        assert res.report.method == name and np.isfinite(res.report.point)


def test_rep_seed_stable():
    assert rep_seed(1, 0) == rep_seed(1, 0) != rep_seed(1, 1)
    assert rep_seed(1, 5) != rep_seed(2, 5)


def test_single_rep_equals_scorecard(cfg):
    res = replicate(cfg, methods=["naive"], reps=1, root_seed=9)
    gen = generate_dataset(cfg, seed=rep_seed(9, 0))
    card = score(run_method("naive", gen.data, cfg).report, gen.truth)
    row = res.table.iloc[0]
    assert list(res.table.columns) == AGGREGATE_COLUMNS
    assert row["mean_bias"] == card.ate_bias and np.isnan(row["sd_bias"])
    assert row["reps_ok"] == 1 and row["coverage"] == float(card.ci_covered)


def test_replicate_deterministic_and_parallel_equal(cfg):
    kw = dict(methods=["naive", "ipw_oracle"], reps=3, root_seed=4)
    a = replicate(cfg, **kw)
    b = replicate(cfg, **kw)
    c = replicate(cfg, workers=2, **kw)
    pd.testing.assert_frame_equal(a.table, b.table)
    pd.testing.assert_frame_equal(a.table, c.table)
    pd.testing.assert_frame_equal(a.per_rep, c.per_rep)


def test_failures_recorded(cfg):
    res = replicate(cfg.with_(n_students=400, n_schools=6), methods=["matching_oracle", "naive"],
                    reps=2, root_seed=1)
    assert set(res.per_rep.columns) >= {"rep", "seed", "method", "ok", "reason"}
    assert res.table.set_index("method").loc["naive", "reps_ok"] == 2


def test_replicate_validates():
    with pytest.raises(ScoringError):
        replicate(DgpConfig(), methods=["nope"], reps=1)
    with pytest.raises(ScoringError):
        replicate(DgpConfig(), reps=0)


def test_naive_and_aipw_replication(cfg):
    res = replicate(cfg, methods=["naive", "aipw"], reps=50, root_seed=cfg.seed)
    t = res.table.set_index("method")
    assert 0.03 <= t.loc["naive", "mean_bias"] <= 0.09
    assert abs(t.loc["aipw", "mean_bias"]) < abs(t.loc["naive", "mean_bias"])
    assert t.loc["aipw", "coverage"] >= 0.88
    assert t.loc["aipw", "reps_ok"] == 50
