"""Line-oriented ``key = value`` configuration files.

Keys are dotted (``tau.base = 0.228``), ``#`` starts a comment, vectors and
matrices are comma-separated (matrices row-major).  Unknown keys are an
error so typos do not silently fall back to defaults.
"""

from __future__ import annotations

from pathlib import Path

from .covariates import ConfigError, CovariateSpec
from .dgp import DgpConfig, GamCoefficients, MuModel, SmoothTerm

_SCALARS = {
    # key: (DgpConfig field, type)
    "seed": ("seed", int),
    "n_schools": ("n_schools", int),
    "n_students": ("n_students", int),
    "base_treat_prob": ("base_treat_prob", float),
    "tau.base": ("tau_base", float),
    "tau.x1_bonus": ("tau_x1_bonus", float),
    "tau.x1_cut": ("x1_cut", float),
    "tau.x2_penalty": ("tau_x2_penalty", float),
    "tau.x2_cut": ("x2_cut", float),
    "tau.c1_penalty": ("tau_c1_penalty", float),
    "effects.alpha_sd": ("alpha_sd", float),
    "effects.gamma_sd": ("gamma_sd", float),
    "error.sd": ("error_sd", float),
    "error.jitter_sd": ("error_jitter_sd", float),
    "error.pool_size": ("error_pool_size", int),
    "error.pool_skew": ("error_pool_skew", float),
    "selection.intercept": ("sel_intercept", float),
    "selection.slope": ("sel_slope", float),
    "selection.hidden_pctile": ("hidden_pctile", float),
    "hidden.loading": ("hidden_loading", float),
    "hidden.noise_sd": ("hidden_noise_sd", float),
}

_COV_SCALARS = {
    "cov.xc_coordinate": ("xc_coordinate", int),
    "cov.c1_shift": ("c1_shift", float),
    "cov.c2_prob": ("c2_prob", float),
    "cov.c3_prob": ("c3_prob", float),
    "cov.size_scale": ("size_scale", float),
    "cov.noise_scale": ("noise_scale", float),
    "cov.swap_rate": ("swap_rate", float),
}
_COV_VECTORS = {
    "cov.school_mean": ("school_mvn_mean", float),
    "cov.xc_cuts": ("xc_cuts", float),
    "cov.xc_labels": ("xc_labels", int),
    "cov.s3_probs": ("s3_probs", float),
    "cov.c1_probs": ("c1_probs", float),
    "cov.c1_shift_levels": ("c1_shift_levels", int),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _vec(values) -> str:
    return ", ".join(_fmt(v) for v in values)


def _parse_vec(raw: str, kind=float) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(kind(part) for part in raw.split(","))


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def dump_config(cfg: DgpConfig, with_seed: bool = True) -> str:
    lines = ["# hetbench data-generating configuration"]
    for key, (attr, _) in _SCALARS.items():
        if key == "seed" and not with_seed:
            continue
        lines.append(f"{key} = {_fmt(getattr(cfg, attr))}")
    lines.append(f"tau.c1_penalty_set = {_vec(sorted(cfg.c1_penalty_set))}")
    if cfg.error_pool is not None:
        lines.append(f"error.pool = {_vec(cfg.error_pool)}")

    gam = cfg.mu_model.gam
    lines.append(f"gam.intercept = {_fmt(gam.intercept)}")
    lines += [f"gam.s3.{k} = {_fmt(v)}" for k, v in sorted(gam.s3.items())]
    lines += [f"gam.c1.{k} = {_fmt(v)}" for k, v in sorted(gam.c1.items())]
    lines += [f"gam.c2 = {_fmt(gam.c2)}", f"gam.c3 = {_fmt(gam.c3)}", f"gam.xc = {_fmt(gam.xc)}"]
    for k, smooth in enumerate(cfg.mu_model.smooths, start=1):
        lines.append(f"smooth.x{k}.knots = {_vec(smooth.knots)}")
        lines.append(f"smooth.x{k}.poly = {_vec(smooth.poly)}")
        lines.append(f"smooth.x{k}.hinge = {_vec(smooth.hinge)}")

    spec = cfg.covariate_spec
    for key, (attr, _) in _COV_SCALARS.items():
        lines.append(f"{key} = {_fmt(getattr(spec, attr))}")
    for key, (attr, _) in _COV_VECTORS.items():
        lines.append(f"{key} = {_vec(getattr(spec, attr))}")
    lines.append(f"cov.school_cov = {_vec(v for row in spec.school_mvn_cov for v in row)}")
    return "\n".join(lines) + "\n"


def load_config(text: str, source: str = "<config>", base: DgpConfig | None = None) -> DgpConfig:
    """Parse config text; keys not given keep the values of ``base`` (defaults)."""
    base = DgpConfig() if base is None else base
    entries = parse_lines(text, source)
    changes: dict = {}
    cov_changes: dict = {}
    gam = base.mu_model.gam
    gam_changes: dict = {"s3": dict(gam.s3), "c1": dict(gam.c1)}
    smooth_parts = [dict(knots=s.knots, poly=s.poly, hinge=s.hinge)
                    for s in base.mu_model.smooths]

    for key, raw in entries.items():
        try:
            if key in _SCALARS:
                attr, kind = _SCALARS[key]
                changes[attr] = kind(raw)
            elif key == "tau.c1_penalty_set":
                changes["c1_penalty_set"] = frozenset(_parse_vec(raw, int))
            elif key == "error.pool":
                changes["error_pool"] = _parse_vec(raw, float)
            elif key in _COV_SCALARS:
                attr, kind = _COV_SCALARS[key]
                cov_changes[attr] = kind(raw)
            elif key in _COV_VECTORS:
                attr, kind = _COV_VECTORS[key]
                cov_changes[attr] = _parse_vec(raw, kind)
            elif key == "cov.school_cov":
                flat = _parse_vec(raw, float)
                if len(flat) != 25:
                    raise ConfigError("cov.school_cov needs 25 row-major entries")
                cov_changes["school_mvn_cov"] = tuple(tuple(flat[i:i + 5]) for i in range(0, 25, 5))
            elif key in ("gam.intercept", "gam.c2", "gam.c3", "gam.xc"):
                gam_changes[key.split(".")[1]] = float(raw)
            elif key.startswith(("gam.s3.", "gam.c1.")):
                _, table, level = key.split(".")
                if int(level) not in gam_changes[table]:
                    raise ConfigError(f"no {table.upper()} level {level} in the coefficient table")
                gam_changes[table][int(level)] = float(raw)
            elif key.startswith("smooth."):
                _, var, part = key.split(".")
                k = int(var.lstrip("x"))
                if not 1 <= k <= 5 or part not in ("knots", "poly", "hinge"):
                    raise ConfigError(f"unknown smooth key {key!r}")
                smooth_parts[k - 1][part] = _parse_vec(raw, float)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"{source}: {exc}") from None
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r}") from None

    spec = CovariateSpec(**{**_spec_fields(base.covariate_spec), **cov_changes})
    mu_model = MuModel(GamCoefficients(**{**_gam_fields(gam), **gam_changes}),
                       tuple(SmoothTerm(**parts) for parts in smooth_parts))
    return base.with_(covariate_spec=spec, mu_model=mu_model, **changes)


def _spec_fields(spec: CovariateSpec) -> dict:
    return {f: getattr(spec, f) for f in spec.__dataclass_fields__}


def _gam_fields(gam: GamCoefficients) -> dict:
    return {f: getattr(gam, f) for f in gam.__dataclass_fields__}


def read_config(path) -> DgpConfig:
    path = Path(path)
    return load_config(path.read_text(), str(path))


def write_config(cfg: DgpConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
