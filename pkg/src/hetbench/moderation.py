"""Second-stage summaries of unit-level effect estimates.

Every summary takes a vector of effect estimates from any first stage and
never refits nuisance models.  Group standard errors come from a cluster
bootstrap over schools (rows when no clusters are given).

Verdict rule (a convention of this package): with ``a`` and ``b`` the groups
holding the largest and smallest mean, let ``d = mean_a - mean_b`` and
``s = sqrt(se_a^2 + se_b^2)``.  The verdict is ``detected`` when
``d > 2 s``, ``suggestive`` when ``s < d <= 2 s`` and ``none`` otherwise.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

VERDICTS = ("none", "suggestive", "detected")
VERDICT_LABELS = {"none": "No", "suggestive": "Suggestive", "detected": "Yes"}
N_BOOT = 200
N_QUANTILE_GROUPS = 5
_TIE = 1e-12


class ModerationError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSummary:
    label: str
    mean: float
    se: float
    n: int


@dataclass(frozen=True)
class Split:
    depth: int
    path: str
    feature: str
    threshold: float
    left_mean: float
    right_mean: float
    sse_reduction: float


@dataclass(frozen=True)
class ModerationReport:
    moderator: str
    kind: str
    groups: tuple[GroupSummary, ...]
    verdict: str
    direction: str = ""
    splits: tuple[Split, ...] = ()
    tree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("quintile", "categorical", "tree", "linear"):
            raise ValueError(f"unknown summary kind {self.kind!r}")
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    @property
    def n(self) -> int:
        return sum(g.n for g in self.groups)

    def group(self, label) -> GroupSummary:
        for g in self.groups:
            if g.label == str(label):
                return g
        raise KeyError(label)

    @property
    def means(self) -> np.ndarray:
        return np.array([g.mean for g in self.groups])


def verdict_rule(means, ses) -> str:
    means = np.asarray(means, float)
    ses = np.nan_to_num(np.asarray(ses, float))
    if means.size < 2:
        return "none"
    hi, lo = int(np.argmax(means)), int(np.argmin(means))
    gap = means[hi] - means[lo]
    if gap <= _TIE * max(1.0, float(np.max(np.abs(means)))):
        return "none"  # rounding noise of a constant effect
    s = float(np.hypot(ses[hi], ses[lo]))
    if gap > 2 * s:
        return "detected"
    if gap > s:
        return "suggestive"
    return "none"


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_group_se(ite, groups, n_groups: int, clusters=None, n_boot: int = N_BOOT,
                       seed: int = 0) -> np.ndarray:
    """Cluster-bootstrap SE of each group mean.

    Resamples whole clusters with replacement; resamples where a group is
    empty are skipped for that group.
    """
    ite = np.asarray(ite, float)
    groups = np.asarray(groups, dtype=np.int64)
    if clusters is None:
        clusters = np.arange(len(ite))
    _, cidx = np.unique(np.asarray(clusters), return_inverse=True)
    n_clusters = cidx.max() + 1 if len(cidx) else 0
    flat = cidx * n_groups + groups
    sums = np.bincount(flat, weights=ite, minlength=n_clusters * n_groups).reshape(n_clusters, n_groups)
    counts = np.bincount(flat, minlength=n_clusters * n_groups).reshape(n_clusters, n_groups)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n_clusters, size=(n_boot, n_clusters))
    weights = np.zeros((n_boot, n_clusters))
    np.add.at(weights, (np.repeat(np.arange(n_boot), n_clusters), draws.ravel()), 1.0)
    tot = weights @ sums
    cnt = weights @ counts
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(cnt > 0, tot / np.where(cnt > 0, cnt, 1), np.nan)
    out = np.full(n_groups, np.nan)
    for g in range(n_groups):
        col = means[:, g][~np.isnan(means[:, g])]
        if col.size >= 2:
            out[g] = col.std(ddof=1)
    return out


def _grouped(ite, codes, labels, clusters, n_boot, seed):
    ite = np.asarray(ite, float)
    k = len(labels)
    n = np.bincount(codes, minlength=k)
    means = np.bincount(codes, weights=ite, minlength=k) / np.maximum(n, 1)
    ses = bootstrap_group_se(ite, codes, k, clusters, n_boot, seed)
    return tuple(GroupSummary(str(lbl), float(m), float(s), int(c))
                 for lbl, m, s, c in zip(labels, means, ses, n))


def _check_lengths(ite, moderator, clusters):
    ite = np.asarray(ite, float)
    if len(moderator) != len(ite):
        raise ModerationError("effect estimates and moderator differ in length")
    if clusters is not None and len(clusters) != len(ite):
        raise ModerationError("clusters and effect estimates differ in length")
    if not np.all(np.isfinite(ite)):
        raise ModerationError("effect estimates must be finite")
    return ite


def _name(moderator, name):
    return name or getattr(moderator, "name", None) or "moderator"


# ---------------------------------------------------------------------------
# quintiles and categories


def quantile_cuts(values, k: int = N_QUANTILE_GROUPS) -> np.ndarray:
    """Higher-convention empirical quantiles at 1/k, ..., (k-1)/k."""
    v = np.sort(np.asarray(values, float))
    n = len(v)
    idx = [-(-j * n // k) - 1 for j in range(1, k)]  # ceil(j*n/k) - 1, in integers
    return v[idx]


def quintile_groups(values, k: int = N_QUANTILE_GROUPS) -> np.ndarray:
    """Group index 0..k-1; a value equal to a cut joins the lower group."""
    x = np.asarray(values, float)
    return np.searchsorted(quantile_cuts(x, k), x, side="left")


def quintile_summary(ite, moderator, clusters=None, n_boot: int = N_BOOT, seed: int = 0,
                     name: str | None = None) -> ModerationReport:
    ite = _check_lengths(ite, moderator, clusters)
    x = np.asarray(moderator, float)
    if len(np.unique(x)) < N_QUANTILE_GROUPS:
        raise ModerationError(
            f"{_name(moderator, name)} has fewer than 5 distinct values; use a categorical summary")
    codes = quintile_groups(x)
    labels = [f"Q{j + 1}" for j in range(N_QUANTILE_GROUPS)]
    groups = _grouped(ite, codes, labels, clusters, n_boot, seed)
    means = np.array([g.mean for g in groups])
    verdict = verdict_rule(means, [g.se for g in groups])
    direction = "increasing" if means[-1] > means[0] else "decreasing" if means[-1] < means[0] else "flat"
    return ModerationReport(_name(moderator, name), "quintile", groups, verdict, direction)


def categorical_summary(ite, moderator, clusters=None, n_boot: int = N_BOOT, seed: int = 0,
                        name: str | None = None) -> ModerationReport:
    ite = _check_lengths(ite, moderator, clusters)
    levels, codes = np.unique(np.asarray(moderator), return_inverse=True)
    if len(levels) < 2:
        raise ModerationError("categorical summary needs at least 2 levels")
    groups = _grouped(ite, codes, [str(v) for v in levels], clusters, n_boot, seed)
    means = np.array([g.mean for g in groups])
    verdict = verdict_rule(means, [g.se for g in groups])
    direction = f"lowest {groups[int(np.argmin(means))].label}, highest {groups[int(np.argmax(means))].label}"
    return ModerationReport(_name(moderator, name), "categorical", groups, verdict, direction)


def linear_summary(ite, moderator, clusters=None, n_boot: int = N_BOOT, seed: int = 0,
                   name: str | None = None) -> ModerationReport:
    """Least-squares slope of the effect estimates on one moderator."""
    ite = _check_lengths(ite, moderator, clusters)
    x = np.asarray(moderator, float)
    if np.ptp(x) == 0:
        raise ModerationError("moderator is constant")

    def slope(xx, yy):
        xc = xx - xx.mean()
        return float(xc @ (yy - yy.mean()) / (xc @ xc))

    b = slope(x, ite)
    _, cidx = np.unique(np.arange(len(x)) if clusters is None else np.asarray(clusters),
                        return_inverse=True)
    rows_of = [np.flatnonzero(cidx == c) for c in range(cidx.max() + 1)]
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_boot):
        rows = np.concatenate([rows_of[c] for c in rng.integers(0, len(rows_of), len(rows_of))])
        if np.ptp(x[rows]) > 0:
            draws.append(slope(x[rows], ite[rows]))
    se = float(np.std(draws, ddof=1)) if len(draws) > 1 else float("nan")
    verdict = "none"
    if np.isfinite(se):
        verdict = "detected" if abs(b) > 2 * se else "suggestive" if abs(b) > se else "none"
    elif b != 0:
        verdict = "detected"
    groups = (GroupSummary("slope", b, se, len(x)),)
    direction = "increasing" if b > 0 else "decreasing" if b < 0 else "flat"
    return ModerationReport(_name(moderator, name), "linear", groups, verdict, direction)


def school_means(ite, data: pd.DataFrame, columns, school: str = "school_id") -> pd.DataFrame:
    """Average effect estimates (and moderators) within each school."""
    frame = data[[school, *columns]].assign(ite=np.asarray(ite, float))
    return frame.groupby(school, sort=True).mean().reset_index()


# ---------------------------------------------------------------------------
# regression tree


@dataclass
class TreeNode:
    rows: np.ndarray
    mean: float
    sse: float
    depth: int
    feature: int | None = None
    threshold: float | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class RegressionTree:
    root: TreeNode
    feature_names: tuple[str, ...]

    def leaves(self) -> list[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack += [node.right, node.left]
        return out

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        out = np.empty(len(X))
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.mean
        return out

    def sse(self) -> float:
        return float(sum(leaf.sse for leaf in self.leaves()))

    def split_features(self) -> set[str]:
        used, stack = set(), [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                used.add(self.feature_names[node.feature])
                stack += [node.left, node.right]
        return used

    def outline(self) -> str:
        lines = []

        def walk(node, indent, label):
            pad = "  " * indent
            lines.append(f"{pad}{label}n={len(node.rows)} mean={node.mean:.6g}")
            if not node.is_leaf:
                name = self.feature_names[node.feature]
                walk(node.left, indent + 1, f"{name} <= {node.threshold:.6g}: ")
                walk(node.right, indent + 1, f"{name} > {node.threshold:.6g}: ")

        walk(self.root, 0, "")
        return "\n".join(lines)


def _node_stats(y):
    m = float(y.mean())
    return m, float(np.sum((y - m) ** 2))


def best_split(X: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best (reduction, feature, threshold) over all features, or None.

    Thresholds are midpoints between consecutive distinct values; ties go to
    the lowest feature index, then the lowest threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    total = float(np.sum((y - y.mean()) ** 2))
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        left_n = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
        if not valid.any():
            continue
        # centred values keep the cumulative sums well conditioned
        yc = ys - ys.mean()
        cs, cs2 = np.cumsum(yc)[:-1], np.cumsum(yc ** 2)[:-1]
        rs, rs2 = yc.sum() - cs, np.sum(yc ** 2) - cs2
        sse = (cs2 - cs ** 2 / left_n) + (rs2 - rs ** 2 / (n - left_n))
        red = np.where(valid, total - sse, -np.inf)
        top = red.max()
        tol = _TIE * max(total, 1e-300)
        k = int(np.flatnonzero(red >= top - tol)[0])
        if best is None or top > best[0] + tol:
            best = (float(red[k]), j, float((xs[k] + xs[k + 1]) / 2))
    return best


def fit_tree(X, y, max_depth: int = 2, min_leaf: int = 1, cp: float = 0.0,
             feature_names=None) -> RegressionTree:
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if X.ndim == 1:
        X = X[:, None]
    if max_depth < 0 or min_leaf < 1 or cp < 0:
        raise ModerationError("need max_depth >= 0, min_leaf >= 1 and cp >= 0")
    names = tuple(feature_names or [f"f{j}" for j in range(X.shape[1])])
    rows = np.arange(len(y))
    m, s = _node_stats(y)
    root = TreeNode(rows, m, s, 0)
    min_gain = cp * s
    stack = [root]
    while stack:
        node = stack.pop()
        if node.depth >= max_depth:
            continue
        found = best_split(X[node.rows], y[node.rows], min_leaf)
        if found is None:
            continue
        gain, j, thr = found
        if not gain > min_gain or gain <= 0:
            continue
        go_left = X[node.rows, j] <= thr
        kids = []
        for mask in (go_left, ~go_left):
            r = node.rows[mask]
            km, ks = _node_stats(y[r])
            kids.append(TreeNode(r, km, ks, node.depth + 1))
        node.feature, node.threshold = j, thr
        node.left, node.right = kids
        stack += [kids[1], kids[0]]
    return RegressionTree(root, names)


def _tree_splits(tree: RegressionTree) -> tuple[Split, ...]:
    out = []

    def walk(node, path):
        if node.is_leaf:
            return
        name = tree.feature_names[node.feature]
        out.append(Split(node.depth, path or "root", name, node.threshold,
                         node.left.mean, node.right.mean,
                         node.sse - node.left.sse - node.right.sse))
        walk(node.left, f"{path}L")
        walk(node.right, f"{path}R")

    walk(tree.root, "")
    return tuple(out)


def tree_summary(ite, features: pd.DataFrame, max_depth: int = 2, min_leaf: int = 1,
                 cp: float = 0.0, clusters=None, n_boot: int = N_BOOT,
                 seed: int = 0) -> ModerationReport:
    """Greedy regression tree on the effect estimates.

    Leaves become the groups; the verdict applies the standard rule to the
    leaf means and is ``none`` for a single leaf.
    """
    features = pd.DataFrame(features)
    ite = _check_lengths(ite, features.iloc[:, 0] if features.shape[1] else ite, clusters)
    tree = fit_tree(features.to_numpy(float), ite, max_depth, min_leaf, cp, list(features.columns))
    leaves = tree.leaves()
    codes = np.empty(len(ite), dtype=np.int64)
    for k, leaf in enumerate(leaves):
        codes[leaf.rows] = k
    labels = [f"leaf{k + 1}" for k in range(len(leaves))]
    groups = _grouped(ite, codes, labels, clusters, n_boot, seed)
    verdict = verdict_rule([g.mean for g in groups], [g.se for g in groups]) if len(leaves) > 1 else "none"
    splits = _tree_splits(tree)
    direction = ", ".join(sorted(tree.split_features()))
    return ModerationReport(",".join(features.columns), "tree", groups, verdict, direction,
                            splits, tree)


# ---------------------------------------------------------------------------
# output


def moderation_verdict_table(reports) -> str:
    rows = [("moderator", "summary", "verdict", "direction")]
    rows += [(r.moderator, r.kind, VERDICT_LABELS[r.verdict], r.direction) for r in reports]
    widths = [max(len(row[k]) for row in rows) for k in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def reports_frame(reports) -> pd.DataFrame:
    rows = [(r.moderator, r.kind, g.label, g.mean, g.se, g.n) for r in reports for g in r.groups]
    return pd.DataFrame(rows, columns=["moderator", "kind", "group", "mean", "se", "n"])


def write_moderation(reports, path_or_buf) -> None:
    reports_frame(reports).to_csv(path_or_buf, index=False, float_format="%.17g")


def moderation_csv(reports) -> str:
    buf = io.StringIO()
    write_moderation(reports, buf)
    return buf.getvalue()
