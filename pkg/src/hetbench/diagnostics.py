"""Covariate balance and propensity overlap checks.

Subgroups are written in a small predicate language::

    expr   := clause ("and" clause)*
    clause := column op value
    op     := "<" | "<=" | "==" | "in"
    value  := number | "{" number ("," number)* "}"

for example ``x1 < 0.07 and c1 in {1, 13, 14}``.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import C1_LEVELS, S3_LEVELS, XC_LEVELS

N_BINS = 20
FLAG_MIN_COUNT = 10
UNDEFINED = "undefined"

BALANCE_FEATURES = (
    [("s3", lvl) for lvl in S3_LEVELS]
    + [("c1", lvl) for lvl in C1_LEVELS]
    + [("xc", lvl) for lvl in XC_LEVELS]
    + [("c2", None), ("c3", None)]
    + [(f"x{k}", None) for k in range(1, 6)]
)


class PredicateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# subgroup predicates

_CLAUSE = re.compile(r"^\s*([A-Za-z_]\w*)\s*(<=|<|==|in\b)\s*(.+?)\s*$")
_OPS = {"<": operator.lt, "<=": operator.le, "==": operator.eq}


@dataclass(frozen=True)
class Clause:
    column: str
    op: str
    value: object

    def mask(self, data: pd.DataFrame) -> np.ndarray:
        if self.column not in data:
            raise PredicateError(f"unknown column {self.column!r}")
        col = np.asarray(data[self.column], dtype=float)
        if self.op == "in":
            return np.isin(col, np.asarray(self.value, float))
        return _OPS[self.op](col, self.value)

    def __str__(self) -> str:
        if self.op == "in":
            return f"{self.column} in {{{', '.join(f'{v:g}' for v in self.value)}}}"
        return f"{self.column} {self.op} {self.value:g}"


@dataclass(frozen=True)
class Predicate:
    clauses: tuple[Clause, ...]

    def mask(self, data: pd.DataFrame) -> np.ndarray:
        out = np.ones(len(data), dtype=bool)
        for clause in self.clauses:
            out &= clause.mask(data)
        return out

    def __str__(self) -> str:
        return " and ".join(str(c) for c in self.clauses)


def _number(text: str, expr: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PredicateError(f"expected a number, got {text!r} in {expr!r}") from None


def parse_predicate(expr: str) -> Predicate:
    parts = re.split(r"\s+and\s+", expr.strip())
    if not expr.strip():
        raise PredicateError("empty subgroup expression")
    clauses = []
    for part in parts:
        m = _CLAUSE.match(part)
        if not m:
            raise PredicateError(f"cannot parse clause {part!r}; expected 'column op value'")
        column, op, raw = m.groups()
        if op == "in":
            if not (raw.startswith("{") and raw.endswith("}")):
                raise PredicateError(f"'in' needs a braced list, got {raw!r}")
            items = [s.strip() for s in raw[1:-1].split(",") if s.strip()]
            if not items:
                raise PredicateError("'in' list is empty")
            value = tuple(_number(s, expr) for s in items)
        else:
            value = _number(raw, expr)
        clauses.append(Clause(column, op, value))
    return Predicate(tuple(clauses))


# ---------------------------------------------------------------------------
# balance


@dataclass(frozen=True)
class BalanceTable:
    frame: pd.DataFrame  # scope, feature, smd, variance_ratio

    def scope(self, name: str) -> pd.DataFrame:
        return self.frame[self.frame["scope"] == name]

    def smd(self, scope: str = "global") -> pd.Series:
        s = self.scope(scope)
        return pd.Series(s["smd"].to_numpy(), index=s["feature"].to_numpy(), name="smd")

    def max_abs_smd(self, scope: str = "global") -> float:
        return float(np.nanmax(np.abs(self.smd(scope).to_numpy())))

    def to_csv(self, path_or_buf=None):
        out = self.frame.copy()
        for col in ("smd", "variance_ratio"):
            out[col] = [UNDEFINED if not np.isfinite(v) else repr(float(v)) for v in out[col]]
        return out.to_csv(path_or_buf, index=False)


def feature_matrix(data: pd.DataFrame) -> tuple[list[str], np.ndarray]:
    names, cols = [], []
    for source, level in BALANCE_FEATURES:
        x = np.asarray(data[source], float)
        if level is None:
            names.append(source)
            cols.append(x)
        else:
            names.append(f"{source}=={level}")
            cols.append((x == level).astype(float))
    return names, np.column_stack(cols) if cols else np.empty((len(data), 0))


def _weighted_moments(X, w):
    tot = w.sum()
    mean = w @ X / tot
    var = w @ (X - mean) ** 2 / tot
    return mean, var


def _scope_rows(X, z, w):
    k = X.shape[1]
    t, c = z == 1, z == 0
    if not (t.any() and c.any()):
        return np.full(k, np.nan), np.full(k, np.nan)
    sd = X.std(axis=0)
    mt, vt = _weighted_moments(X[t], w[t])
    mc, vc = _weighted_moments(X[c], w[c])
    with np.errstate(invalid="ignore", divide="ignore"):
        smd = np.where(sd > 0, (mt - mc) / np.where(sd > 0, sd, 1.0), np.nan)
        ratio = np.where((vt > 0) & (vc > 0), vt / np.where(vc > 0, vc, 1.0), np.nan)
    return smd, ratio


def balance(data: pd.DataFrame, weights=None, subgroup=None) -> BalanceTable:
    """Standardized mean differences and variance ratios by arm.

    The denominator of each SMD is the unweighted sd of the feature over all
    rows of the scope, so weighted and unweighted SMDs are comparable.
    Features with zero spread, and every feature of a scope with an empty
    arm, are reported as undefined (NaN).
    """
    z = np.asarray(data["z"], dtype=int)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, float)
    if w.shape != z.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative and one per row")
    if not ((z == 1).any() and (z == 0).any()):
        raise ValueError("both treatment arms must be non-empty")
    names, X = feature_matrix(data)
    scopes = [("global", np.ones(len(z), dtype=bool))]
    if subgroup is not None:
        pred = parse_predicate(subgroup) if isinstance(subgroup, str) else subgroup
        mask = pred.mask(data) if hasattr(pred, "mask") else np.asarray(pred(data), dtype=bool)
        scopes.append((str(subgroup), mask))
    frames = []
    for label, mask in scopes:
        smd, ratio = _scope_rows(X[mask], z[mask], w[mask])
        frames.append(pd.DataFrame({"scope": label, "feature": names,
                                    "smd": smd, "variance_ratio": ratio}))
    return BalanceTable(pd.concat(frames, ignore_index=True))


# ---------------------------------------------------------------------------
# overlap


@dataclass(frozen=True)
class OverlapSummary:
    frame: pd.DataFrame  # bin_low, bin_high, n_treated, n_control, flag
    min_treated: float
    max_treated: float
    min_control: float
    max_control: float

    @property
    def n_flags(self) -> int:
        return int(self.frame["flag"].sum())

    def to_csv(self, path_or_buf=None):
        out = self.frame.assign(flag=self.frame["flag"].astype(int))
        return out.to_csv(path_or_buf, index=False, float_format="%.17g")


def overlap_summary(propensities, z, n_bins: int = N_BINS,
                    min_count: int = FLAG_MIN_COUNT) -> OverlapSummary:
    """Per-arm histogram of propensities on equal-width bins over (0, 1).

    A bin is flagged when one arm has at least ``min_count`` units there and
    the other arm has none.
    """
    e = np.asarray(propensities, float)
    z = np.asarray(z, dtype=int)
    if e.shape != z.shape:
        raise ValueError("propensities and z differ in length")
    if np.any(~np.isfinite(e)) or np.any((e <= 0) | (e >= 1)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, e, side="right") - 1, 0, n_bins - 1)
    nt = np.bincount(idx[z == 1], minlength=n_bins)
    nc = np.bincount(idx[z == 0], minlength=n_bins)
    flag = ((nt >= min_count) & (nc == 0)) | ((nc >= min_count) & (nt == 0))
    frame = pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:],
                          "n_treated": nt, "n_control": nc, "flag": flag})

    def ext(f, arm):
        vals = e[z == arm]
        return float(f(vals)) if vals.size else float("nan")

    return OverlapSummary(frame, ext(np.min, 1), ext(np.max, 1), ext(np.min, 0), ext(np.max, 0))
