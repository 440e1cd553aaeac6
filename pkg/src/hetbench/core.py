"""Shared domain types, dataset validation and CSV round-tripping.

Datasets are handled columnar: one flat ``pandas.DataFrame`` per dataset with
the student rows and their school covariates merged in, using the column
names of the dataset CSV schema.  The per-row record classes exist for
callers who want typed rows and for validation of hand-built inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

DATASET_COLUMNS = [
    "student_id", "school_id", "z", "y",
    "s3", "c1", "c2", "c3",
    "xc", "x1", "x2", "x3", "x4", "x5",
]
TRUTH_COLUMNS = [
    "student_id", "school_id", "mu", "tau_cov", "alpha", "gamma",
    "epsilon", "y0", "y1", "retained",
]
REPORT_COLUMNS = ["method", "estimand", "point", "se", "ci_low", "ci_high", "n_used"]

SCHOOL_COLUMNS = ["school_id", "xc", "x1", "x2", "x3", "x4", "x5"]
STUDENT_COLUMNS = ["student_id", "school_id", "s3", "c1", "c2", "c3", "z", "y"]

INT_COLUMNS = {"student_id", "school_id", "z", "s3", "c1", "c2", "c3", "xc"}
FLOAT_FORMAT = "%.17g"

S3_LEVELS = tuple(range(1, 8))
C1_LEVELS = tuple(range(1, 16))
XC_LEVELS = tuple(range(0, 5))

# The source data never enumerates urbanicity labels; these are placeholders.
XC_LABELS = {0: "rural", 1: "town", 2: "suburban", 3: "city-fringe", 4: "urban"}

ESTIMANDS = ("ATE", "ATT", "SubgroupATE")
CI_MULTIPLIER = 1.96


class DataError(ValueError):
    """Raised when a file or frame cannot be parsed into a dataset."""


@dataclass(frozen=True)
class SchoolProfile:
    school_id: int
    xc: int
    x1: float
    x2: float
    x3: float
    x4: float
    x5: float


@dataclass(frozen=True)
class StudentRecord:
    student_id: int
    school_id: int
    s3: int
    c1: int
    c2: int
    c3: int
    z: int
    y: float


@dataclass(frozen=True)
class Violation:
    row: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"row {self.row}, field {self.field}: {self.message}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class EstimateReport:
    estimand: str
    method: str
    point: float
    ci_low: float
    ci_high: float
    se: float
    n_used: int
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.estimand not in ESTIMANDS:
            raise ValueError(f"unknown estimand {self.estimand!r}")
        if self.se < 0 or not math.isfinite(self.se):
            raise ValueError(f"se must be finite and >= 0, got {self.se}")
        if not self.ci_low <= self.point <= self.ci_high:
            raise ValueError("interval must bracket the point estimate")

    @classmethod
    def from_se(cls, estimand: str, method: str, point: float, se: float,
                n_used: int, **metadata: str) -> EstimateReport:
        half = CI_MULTIPLIER * se
        return cls(estimand, method, float(point), float(point - half),
                   float(point + half), float(se), int(n_used),
                   {k: str(v) for k, v in metadata.items()})

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low


@dataclass(frozen=True)
class GroundTruth:
    """Per-student truth for every generated unit, retained or not.

    ``frame`` carries the sidecar columns; frames built by the generator also
    hold ``z`` (assigned treatment) and ``propensity`` (the probability of
    being a treated unit among retained units with the same covariates).
    """

    frame: pd.DataFrame
    hidden_threshold: float = math.nan

    @property
    def retained(self) -> pd.DataFrame:
        return self.frame[self.frame["retained"].astype(bool)]

    @property
    def cate(self) -> pd.Series:
        """Unit-level effect ``tau_cov + gamma`` over retained students."""
        r = self.retained
        return pd.Series((r["tau_cov"] + r["gamma"]).to_numpy(),
                         index=r["student_id"].to_numpy(), name="cate")

    @property
    def sate(self) -> float:
        return float(self.cate.mean())

    @property
    def satt(self) -> float:
        if "z" not in self.frame:
            raise DataError("SATT needs treatment indicators; attach them with with_treatment()")
        r = self.retained
        treated = r["z"].to_numpy() == 1
        return float((r["tau_cov"] + r["gamma"]).to_numpy()[treated].mean())

    def with_treatment(self, data: pd.DataFrame) -> GroundTruth:
        """Attach ``z`` from an emitted dataset (dropped units were all treated)."""
        z = data.set_index("student_id")["z"]
        frame = self.frame.copy()
        frame["z"] = frame["student_id"].map(z).fillna(1).astype(int)
        return GroundTruth(frame, self.hidden_threshold)


def _frame_from(rows, columns: Sequence[str]) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows.reset_index(drop=True)
    rows = list(rows)
    if not rows:
        return pd.DataFrame({c: pd.Series(dtype=float) for c in columns})
    return pd.DataFrame([asdict(r) for r in rows], columns=list(columns))


def _check(df: pd.DataFrame, column: str, bad: np.ndarray, message: str,
           out: list[Violation]) -> None:
    for i in np.flatnonzero(bad):
        out.append(Violation(int(i), column, message))


def _integral(v: np.ndarray) -> np.ndarray:
    return np.isfinite(v) & (np.floor(v) == v)


def validate_dataset(schools, students) -> ValidationResult:
    """Check every record invariant plus school referential integrity.

    Both arguments may be sequences of records or frames with the matching
    columns.  Violations are returned, never raised.
    """
    sch = _frame_from(schools, SCHOOL_COLUMNS)
    stu = _frame_from(students, STUDENT_COLUMNS)
    out: list[Violation] = []

    for col in SCHOOL_COLUMNS:
        if col not in sch:
            out.append(Violation(-1, col, "missing school column"))
    for col in STUDENT_COLUMNS:
        if col not in stu:
            out.append(Violation(-1, col, "missing student column"))
    if out:
        return ValidationResult(tuple(out))

    def num(df, col):
        return pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)

    sid = num(sch, "school_id")
    _check(sch, "school_id", ~_integral(sid) | (sid < 1), "must be an integer >= 1", out)
    _check(sch, "school_id", pd.Series(sid).duplicated(keep="first").to_numpy(),
           "duplicate school_id", out)
    xc = num(sch, "xc")
    _check(sch, "xc", ~np.isin(xc, XC_LEVELS), "urbanicity code must be in 0..4", out)
    for col in ("x1", "x2", "x3", "x4", "x5"):
        _check(sch, col, ~np.isfinite(num(sch, col)), "must be finite", out)
    for col in ("x3", "x4"):
        v = num(sch, col)
        _check(sch, col, np.isfinite(v) & ((v < 0) | (v > 1)), "fraction must be in [0, 1]", out)
    x5 = num(sch, "x5")
    _check(sch, "x5", np.isfinite(x5) & (x5 < 0), "school size must be >= 0", out)

    _check(stu, "student_id", ~_integral(num(stu, "student_id")), "must be an integer", out)
    _check(stu, "s3", ~np.isin(num(stu, "s3"), S3_LEVELS), "must be in 1..7", out)
    _check(stu, "c1", ~np.isin(num(stu, "c1"), C1_LEVELS), "must be in 1..15", out)
    for col in ("c2", "c3", "z"):
        _check(stu, col, ~np.isin(num(stu, col), (0, 1)), "must be 0 or 1", out)
    _check(stu, "y", ~np.isfinite(num(stu, "y")), "must be finite", out)
    known = set(sid[np.isfinite(sid)].tolist())
    fk = num(stu, "school_id")
    _check(stu, "school_id", ~np.isin(fk, list(known)), "references an unknown school", out)

    out.sort(key=lambda v: (v.row, v.field))
    return ValidationResult(tuple(out))


def split_dataset(data: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Split a flat dataset frame into (schools, students) frames."""
    schools = (data[SCHOOL_COLUMNS].drop_duplicates("school_id")
               .sort_values("school_id").reset_index(drop=True))
    return schools, data[STUDENT_COLUMNS].reset_index(drop=True)


def validate_frame(data: pd.DataFrame) -> ValidationResult:
    missing = [c for c in DATASET_COLUMNS if c not in data]
    if missing:
        return ValidationResult(tuple(Violation(-1, c, "missing column") for c in missing))
    schools, students = split_dataset(data)
    result = validate_dataset(schools, students)
    # school covariates must be constant within a school
    per_school = data.groupby("school_id")[SCHOOL_COLUMNS[1:]].nunique()
    extra = [Violation(-1, col, f"school {sid} has inconsistent values")
             for sid, row in per_school.iterrows() for col, n in row.items() if n > 1]
    return ValidationResult(result.violations + tuple(extra))


def schools_to_records(frame: pd.DataFrame) -> list[SchoolProfile]:
    return [SchoolProfile(int(r.school_id), int(r.xc), float(r.x1), float(r.x2),
                          float(r.x3), float(r.x4), float(r.x5))
            for r in frame.itertuples(index=False)]


def students_to_records(frame: pd.DataFrame) -> list[StudentRecord]:
    return [StudentRecord(int(r.student_id), int(r.school_id), int(r.s3), int(r.c1),
                          int(r.c2), int(r.c3), int(r.z), float(r.y))
            for r in frame[STUDENT_COLUMNS].itertuples(index=False)]


# ---------------------------------------------------------------------------
# CSV I/O


def _write_csv(frame: pd.DataFrame, columns: list[str], path) -> None:
    out = frame[columns].copy()
    for col in columns:
        if col in INT_COLUMNS or col == "retained":
            out[col] = out[col].astype(np.int64)
    out.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _read_csv(path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if list(frame.columns) != columns:
        raise DataError(f"{path}: header must be {','.join(columns)}, "
                        f"got {','.join(map(str, frame.columns))}")
    parsed = {}
    for col in columns:
        values = frame[col].to_numpy(dtype=object)
        arr = np.empty(len(values), dtype=np.int64 if col in INT_COLUMNS else float)
        for i, raw in enumerate(values):
            try:
                if col in INT_COLUMNS:
                    arr[i] = int(raw)
                elif col == "retained":
                    arr[i] = {"1": 1.0, "0": 0.0, "true": 1.0, "false": 0.0}[raw.strip().lower()]
                else:
                    arr[i] = float(raw)
            except (KeyError, ValueError, TypeError):
                # +2: header line plus 1-based numbering
                raise DataError(f"{path}: line {i + 2}, column {col}: "
                                f"cannot parse {raw!r}") from None
        parsed[col] = arr
    out = pd.DataFrame(parsed)
    if "retained" in out:
        out["retained"] = out["retained"].astype(bool)
    return out


def write_dataset(data: pd.DataFrame, path) -> None:
    _write_csv(data, DATASET_COLUMNS, path)


def read_dataset(path) -> pd.DataFrame:
    return _read_csv(path, DATASET_COLUMNS)


def write_truth(truth: GroundTruth, path) -> None:
    _write_csv(truth.frame, TRUTH_COLUMNS, path)


def read_truth(path) -> GroundTruth:
    return GroundTruth(_read_csv(path, TRUTH_COLUMNS))


def report_row(report: EstimateReport) -> dict:
    return {"method": report.method, "estimand": report.estimand, "point": report.point,
            "se": report.se, "ci_low": report.ci_low, "ci_high": report.ci_high,
            "n_used": report.n_used}


def write_reports(reports: Iterable[EstimateReport], path_or_buf) -> None:
    frame = pd.DataFrame([report_row(r) for r in reports], columns=REPORT_COLUMNS)
    frame.to_csv(path_or_buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_reports(path) -> list[EstimateReport]:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != REPORT_COLUMNS:
        raise DataError(f"{path}: header must be {','.join(REPORT_COLUMNS)}")
    return [EstimateReport(str(r.estimand), str(r.method), float(r.point), float(r.ci_low),
                           float(r.ci_high), float(r.se), int(r.n_used))
            for r in frame.itertuples(index=False)]


def _write_keyed(student_id, values, name: str, path_or_buf) -> None:
    frame = pd.DataFrame({"student_id": np.asarray(student_id, dtype=np.int64),
                          name: np.asarray(values, dtype=float)})
    frame.to_csv(path_or_buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _read_keyed(path, name: str) -> pd.Series:
    frame = _read_csv(path, ["student_id", name])
    if frame["student_id"].duplicated().any():
        raise DataError(f"{path}: duplicate student_id values")
    return pd.Series(frame[name].to_numpy(float), index=frame["student_id"].to_numpy(), name=name)


def write_ite(student_id, ite, path_or_buf) -> None:
    _write_keyed(student_id, ite, "ite", path_or_buf)


def read_ite(path) -> pd.Series:
    return _read_keyed(path, "ite")


def write_propensity(student_id, propensity, path_or_buf) -> None:
    _write_keyed(student_id, propensity, "propensity", path_or_buf)


def read_propensity(path) -> pd.Series:
    return _read_keyed(path, "propensity")


def align(series: pd.Series, data: pd.DataFrame) -> np.ndarray:
    """Values of a student-keyed series in the row order of ``data``."""
    ids = data["student_id"].to_numpy()
    missing = np.setdiff1d(ids, series.index.to_numpy())
    if missing.size:
        raise DataError(f"{series.name}: no value for {missing.size} students "
                        f"(first student_id {missing[0]})")
    return series.reindex(ids).to_numpy(float)


def record_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
