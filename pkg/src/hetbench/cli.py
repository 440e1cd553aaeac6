"""Command-line interface: ``hetbench <verb> [flags]``.

Exit status is 0 on success, 1 when an input fails to parse or validate and
2 on usage errors.  Diagnostics go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import core
from .config import load_config, read_config, write_config
from .core import DataError
from .covariates import ConfigError
from .diagnostics import PredicateError, balance, overlap_summary
from .dgp import DgpConfig, generate_dataset
from .estimators import EstimationError
from .moderation import (
    ModerationError,
    categorical_summary,
    linear_summary,
    moderation_verdict_table,
    quintile_summary,
    school_means,
    tree_summary,
    write_moderation,
)
from .models import ConvergenceError
from .scoring import METHODS, ScoringError, replicate, run_method, score

DEFAULT_SEED = DgpConfig().seed
EXPECTED_ERRORS = (DataError, ConfigError, EstimationError, ModerationError, PredicateError,
                   ScoringError, ConvergenceError, np.linalg.LinAlgError, OSError, ValueError)


def _config(path) -> DgpConfig:
    return read_config(path) if path else load_config("")


def _out(path):
    return sys.stdout if path in (None, "-") else path


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    gen = generate_dataset(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    core.write_dataset(gen.data, out / "dataset.csv")
    core.write_truth(gen.truth, out / "truth.csv")
    core.write_propensity(gen.data["student_id"], gen.truth.retained["propensity"],
                          out / "propensity.csv")
    cate = gen.truth.cate
    core.write_ite(cate.index, cate.to_numpy(), out / "oracle_ite.csv")
    write_config(cfg.with_(seed=args.seed), out / "config.txt")
    (out / "manifest.txt").write_text("".join(f"{k}: {v}\n" for k, v in gen.manifest.items()))
    print(f"wrote {len(gen.data)} students in {gen.manifest['n_schools']} schools to {out}",
          file=sys.stderr)
    return 0


def _load_data(path):
    data = core.read_dataset(path)
    check = core.validate_frame(data)
    if not check.ok:
        for v in check.violations[:20]:
            print(f"{path}: {v}", file=sys.stderr)
        raise DataError(f"{path}: {len(check.violations)} validation problem(s)")
    return data


def cmd_estimate(args) -> int:
    data = _load_data(args.data)
    cfg = _config(args.config)
    oracle = core.align(core.read_propensity(args.ps), data) if args.ps else None
    res = run_method(args.method, data, cfg, truth_basis=args.truth_basis,
                     oracle_propensity=oracle)
    core.write_reports([res.report], _out(args.out))
    if args.ite_out:
        if res.ite is None:
            print(f"method {args.method} produces no unit-level effects", file=sys.stderr)
            return 1
        core.write_ite(data["student_id"], res.ite, args.ite_out)
    return 0


def cmd_moderate(args) -> int:
    data = _load_data(args.data)
    ite = core.align(core.read_ite(args.ite), data)
    cols = [c.strip() for c in args.by.split(",") if c.strip()]
    for c in cols:
        if c not in data:
            raise DataError(f"unknown moderator column {c!r}")
    clusters = data["school_id"].to_numpy()
    frame = data
    if args.school_level:
        frame = school_means(ite, data, cols)
        ite = frame["ite"].to_numpy()
        clusters = frame["school_id"].to_numpy()
    kw = dict(clusters=clusters, n_boot=args.n_boot, seed=args.seed)
    if args.summary == "tree":
        reports = [tree_summary(ite, frame[cols], args.max_depth, args.min_leaf, args.cp, **kw)]
    else:
        fn = {"quintile": quintile_summary, "categorical": categorical_summary,
              "linear": linear_summary}[args.summary]
        reports = [fn(ite, frame[c], name=c, **kw) for c in cols]
    if args.out:
        write_moderation(reports, args.out)
    sys.stdout.write(moderation_verdict_table(reports))
    for r in reports:
        if r.tree is not None:
            sys.stdout.write("\n" + r.tree.outline() + "\n")
    return 0


def cmd_diagnose(args) -> int:
    data = _load_data(args.data)
    weights = None
    e = core.align(core.read_propensity(args.ps), data) if args.ps else None
    if args.weighted:
        if e is None:
            raise DataError("--weighted needs --ps")
        z = data["z"].to_numpy()
        weights = np.where(z == 1, 1.0 / e, 1.0 / (1.0 - e))
    table = balance(data, weights, args.subgroup)
    table.to_csv(_out(args.out))
    if e is not None:
        ov = overlap_summary(e, data["z"].to_numpy())
        if args.overlap_out:
            ov.to_csv(args.overlap_out)
        print(f"overlap: {ov.n_flags} flagged bin(s); treated range "
              f"[{ov.min_treated:.4g}, {ov.max_treated:.4g}], control range "
              f"[{ov.min_control:.4g}, {ov.max_control:.4g}]", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    truth = core.read_truth(args.truth)
    if args.data:
        truth = truth.with_treatment(core.read_dataset(args.data))
    ite = core.read_ite(args.ite) if args.ite else None
    rows = []
    for report in core.read_reports(args.report):
        if report.estimand == "ATT" and "z" not in truth.frame:
            raise DataError("scoring an ATT report needs --data to identify treated students")
        rows.append(score(report, truth, ite).as_row())
    pd.DataFrame(rows).to_csv(_out(args.out), index=False, float_format=core.FLOAT_FORMAT,
                              lineterminator="\n")
    return 0


def cmd_replicate(args) -> int:
    cfg = _config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    result = replicate(cfg, None, methods, args.reps, args.seed,
                       truth_basis=not args.generic_basis, workers=args.workers)
    result.to_csv(_out(args.out))
    if args.per_rep:
        result.per_rep.to_csv(args.per_rep, index=False, float_format=core.FLOAT_FORMAT)
    failed = result.per_rep[~result.per_rep["ok"].astype(bool)]
    for row in failed.itertuples(index=False):
        print(f"rep {row.rep} {row.method}: {row.reason}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetbench",
                                description="Synthetic multilevel treatment-effect benchmark.")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    g = sub.add_parser("generate", help="generate a dataset with ground truth")
    g.add_argument("--config", help="config file (default: built-in defaults)")
    g.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help=f"root seed (default {DEFAULT_SEED})")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("estimate", help="estimate an average effect")
    e.add_argument("--data", required=True)
    e.add_argument("--method", required=True, choices=sorted(METHODS))
    e.add_argument("--truth-basis", action="store_true",
                   help="use the correctly specified bases of the config")
    e.add_argument("--config", help="config whose knots define the bases")
    e.add_argument("--ps", help="oracle propensity CSV (student_id,propensity)")
    e.add_argument("--out", help="report CSV (default stdout)")
    e.add_argument("--ite-out", help="write unit-level effects (student_id,ite)")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("moderate", help="summarize unit-level effects by moderators")
    m.add_argument("--data", required=True)
    m.add_argument("--ite", required=True)
    m.add_argument("--by", required=True, help="moderator column(s), comma separated")
    m.add_argument("--summary", required=True, choices=["quintile", "categorical", "tree", "linear"])
    m.add_argument("--school-level", action="store_true", help="average within schools first")
    m.add_argument("--max-depth", type=int, default=2)
    m.add_argument("--min-leaf", type=int, default=50)
    m.add_argument("--cp", type=float, default=0.01)
    m.add_argument("--n-boot", type=int, default=200)
    m.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    m.add_argument("--out", help="group CSV (moderator,kind,group,mean,se,n)")
    m.set_defaults(func=cmd_moderate)

    d = sub.add_parser("diagnose", help="covariate balance and overlap")
    d.add_argument("--data", required=True)
    d.add_argument("--ps", help="propensity CSV; enables the overlap check")
    d.add_argument("--weighted", action="store_true", help="weight by inverse propensities")
    d.add_argument("--subgroup", help="predicate such as 'x1 < 0.07 and c1 in {1,13,14}'")
    d.add_argument("--out", help="balance CSV (default stdout)")
    d.add_argument("--overlap-out", help="overlap CSV")
    d.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("score", help="score reports against ground truth")
    s.add_argument("--report", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--ite")
    s.add_argument("--data", help="dataset, needed to score ATT reports")
    s.add_argument("--out", help="score CSV (default stdout)")
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("replicate", help="Monte-Carlo replication study")
    r.add_argument("--config")
    r.add_argument("--reps", type=int, required=True)
    r.add_argument("--seed", type=int, default=DEFAULT_SEED)
    r.add_argument("--methods", required=True, help=f"comma separated from: {', '.join(METHODS)}")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--generic-basis", action="store_true",
                   help="use main-effects bases instead of the correctly specified ones")
    r.add_argument("--out", help="aggregate CSV (default stdout)")
    r.add_argument("--per-rep", help="per-replication CSV including failure reasons")
    r.set_defaults(func=cmd_replicate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"hetbench {args.verb}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
