"""Design matrices built from named feature transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .core import C1_LEVELS, S3_LEVELS, XC_LEVELS

TRANSFORMS = ("identity", "onehot", "standardized", "interaction",
              "power", "hinge3", "below", "in_set")
CATEGORY_LEVELS = {"s3": S3_LEVELS, "c1": C1_LEVELS, "xc": XC_LEVELS,
                   "c2": (0, 1), "c3": (0, 1), "z": (0, 1)}


@dataclass(frozen=True)
class Feature:
    """One design column.

    ``arg`` depends on the transform: the level for ``onehot``, the exponent
    for ``power``, the knot for ``hinge3``, the cut for ``below`` (x < cut),
    a tuple of levels for ``in_set``, ``(center, scale)`` for
    ``standardized`` and the two parent features for ``interaction``.
    """

    source: str
    transform: str = "identity"
    arg: object = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "onehot":
            levels = CATEGORY_LEVELS.get(self.source)
            if levels is not None and self.arg not in levels:
                raise ValueError(f"{self.source} has no level {self.arg!r}")
        if self.transform == "interaction":
            a, b = self.arg
            if not (isinstance(a, Feature) and isinstance(b, Feature)):
                raise ValueError("interaction needs two Feature parents")
        if self.transform == "standardized":
            center, scale = self.arg
            if not scale > 0:
                raise ValueError("standardized feature needs a positive scale")

    @property
    def name(self) -> str:
        t, a = self.transform, self.arg
        if t == "identity":
            return self.source
        if t == "onehot":
            return f"{self.source}=={a}"
        if t == "power":
            return f"{self.source}^{a}"
        if t == "hinge3":
            return f"({self.source}-{a:g})^3+"
        if t == "below":
            return f"{self.source}<{a:g}"
        if t == "in_set":
            return f"{self.source} in {{{','.join(map(str, a))}}}"
        if t == "standardized":
            return f"std({self.source})"
        return f"{a[0].name}*{a[1].name}"

    def values(self, data) -> np.ndarray:
        t, a = self.transform, self.arg
        if t == "interaction":
            return a[0].values(data) * a[1].values(data)
        x = np.asarray(data[self.source], dtype=float)
        if t == "identity":
            return x
        if t == "onehot":
            return (x == a).astype(float)
        if t == "power":
            return x ** a
        if t == "hinge3":
            return np.clip(x - a, 0.0, None) ** 3
        if t == "below":
            return (x < a).astype(float)
        if t == "in_set":
            return np.isin(x, list(a)).astype(float)
        return (x - a[0]) / a[1]


@dataclass(frozen=True)
class DesignBasis:
    features: tuple[Feature, ...]
    intercept: bool = True

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate features: {dup}")

    @property
    def width(self) -> int:
        return len(self.features) + int(self.intercept)

    @property
    def names(self) -> list[str]:
        return (["(intercept)"] if self.intercept else []) + [f.name for f in self.features]

    def matrix(self, data) -> np.ndarray:
        n = len(data)
        cols = [np.ones(n)] if self.intercept else []
        cols += [f.values(data) for f in self.features]
        if not cols:
            return np.empty((n, 0))
        return np.column_stack(cols)


def onehot(source: str, levels) -> list[Feature]:
    return [Feature(source, "onehot", lvl) for lvl in levels]


def standardize(basis: DesignBasis, data: pd.DataFrame) -> DesignBasis:
    """Replace identity features by standardized versions fitted on ``data``."""
    feats = []
    for f in basis.features:
        if f.transform == "identity":
            x = np.asarray(data[f.source], float)
            sd = x.std()
            feats.append(Feature(f.source, "standardized", (float(x.mean()), float(sd or 1.0))))
        else:
            feats.append(f)
    return DesignBasis(tuple(feats), basis.intercept)


def _student_block() -> list[Feature]:
    return (onehot("s3", S3_LEVELS[1:]) + onehot("c1", C1_LEVELS[1:])
            + [Feature("c2"), Feature("c3"), Feature("xc")])


def generic_basis() -> DesignBasis:
    """Main effects only: one-hot S3/C1, binary C2/C3, numeric XC, linear X1..X5."""
    return DesignBasis(tuple(_student_block() + [Feature(f"x{k}") for k in range(1, 6)]))


def outcome_basis(cfg) -> DesignBasis:
    """Basis containing mu and the effect steps for ``cfg`` exactly.

    The smooth terms use the generator's knots; the two step indicators let the
    treated-arm model represent the effect function.
    """
    feats = _student_block()
    for k, smooth in enumerate(cfg.mu_model.smooths, start=1):
        src = f"x{k}"
        feats.append(Feature(src))
        for p in (2, 3):
            if smooth.poly[p - 1] != 0:
                feats.append(Feature(src, "power", p))
        feats += [Feature(src, "hinge3", float(knot)) for knot in smooth.knots]
    feats += [Feature("x1", "below", float(cfg.x1_cut)), Feature("x2", "below", float(cfg.x2_cut))]
    return DesignBasis(tuple(feats))


def effect_basis(cfg) -> DesignBasis:
    """Intercept plus the three indicators of the step-function effect."""
    return DesignBasis((
        Feature("x1", "below", float(cfg.x1_cut)),
        Feature("x2", "below", float(cfg.x2_cut)),
        Feature("c1", "in_set", tuple(sorted(cfg.c1_penalty_set))),
    ))
