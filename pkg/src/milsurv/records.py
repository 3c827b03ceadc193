"""Survival records, covariate design matrices and the cohort manifest format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from milsurv.errors import ValidationError

SPLITS = ("train", "tune", "val1", "val2")


@dataclass(frozen=True)
class SurvivalRecord:
    """One case's follow-up. ``event`` is True when death was observed."""

    case_id: str
    time_months: int
    event: bool
    covariates: Mapping[str, float] = field(default_factory=dict)
    split: str | None = None

    def __post_init__(self):
        if int(self.time_months) != self.time_months or self.time_months < 1:
            raise ValidationError(
                f"{self.case_id}: time_months must be an integer >= 1, got {self.time_months}"
            )
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"{self.case_id}: unknown split {self.split!r}")


def survival_arrays(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` as int64 / bool arrays, checking id uniqueness."""
    ids = [r.case_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate case_id in cohort")
    times = np.fromiter((r.time_months for r in records), dtype=np.int64, count=len(records))
    events = np.fromiter((bool(r.event) for r in records), dtype=bool, count=len(records))
    return times, events


def make_records(times, events, prefix: str = "c") -> list[SurvivalRecord]:
    """Build anonymous records from parallel arrays (handy in tests and oracles)."""
    return [
        SurvivalRecord(f"{prefix}{i}", int(t), bool(e))
        for i, (t, e) in enumerate(zip(times, events))
    ]


def by_split(records: Iterable[SurvivalRecord], split: str) -> list[SurvivalRecord]:
    return [r for r in records if r.split == split]


@dataclass(frozen=True)
class CovariateMatrix:
    """Named numeric design columns aligned to a record list.

    ``encoding`` holds one tag per column: ``"numeric"`` or
    ``"indicator(<reference level>)"``.
    """

    names: tuple[str, ...]
    values: np.ndarray
    encoding: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)
        if values.shape[1] != len(self.names) or len(self.encoding) != len(self.names):
            raise ValidationError("column names, encodings and values disagree")
        for j, tag in enumerate(self.encoding):
            if tag.startswith("indicator") and not np.isin(values[:, j], (0.0, 1.0)).all():
                raise ValidationError(f"indicator column {self.names[j]} is not 0/1")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @classmethod
    def numeric(cls, columns: Mapping[str, Sequence[float]]) -> "CovariateMatrix":
        names = tuple(columns)
        values = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
        return cls(names, values, ("numeric",) * len(names))

    def select(self, names: Sequence[str]) -> "CovariateMatrix":
        idx = [self.names.index(n) for n in names]
        return CovariateMatrix(
            tuple(self.names[i] for i in idx),
            self.values[:, idx],
            tuple(self.encoding[i] for i in idx),
        )

    def rows(self, index) -> "CovariateMatrix":
        return CovariateMatrix(self.names, self.values[index], self.encoding)

    def hstack(self, other: "CovariateMatrix") -> "CovariateMatrix":
        if other.n_rows != self.n_rows:
            raise ValidationError("row counts differ")
        return CovariateMatrix(
            self.names + other.names,
            np.hstack([self.values, other.values]),
            self.encoding + other.encoding,
        )

    def constant_columns(self) -> list[str]:
        if self.n_rows == 0:
            return list(self.names)
        spread = np.ptp(self.values, axis=0)
        return [n for n, s in zip(self.names, spread) if s == 0]


def standardize(values, mean: float | None = None, std: float | None = None) -> np.ndarray:
    """Zero-mean unit-variance rescaling, optionally with externally fixed stats."""
    values = np.asarray(values, dtype=float)
    mean = values.mean() if mean is None else mean
    std = values.std() if std is None else std
    if not std > 0:
        raise ValidationError("cannot standardize a constant vector")
    return (values - mean) / std


def design_matrix(
    covariates: Sequence[Mapping[str, float]],
    numeric: Sequence[str] = (),
    categorical: Sequence[str] = (),
    per_decade: Sequence[str] = (),
    allow_degenerate: bool = False,
) -> CovariateMatrix:
    """Encode raw covariate dicts the way the clinical tables are coded.

    Columns in ``per_decade`` are centred at their mean and divided by 10.
    Categorical columns become indicators against the first level in sorted
    order. A column that is constant over all rows raises ``constant column``
    unless ``allow_degenerate``.
    """
    names: list[str] = []
    cols: list[np.ndarray] = []
    tags: list[str] = []
    for name in numeric:
        x = np.array([row[name] for row in covariates], dtype=float)
        if name in per_decade:
            x = (x - x.mean()) / 10.0
        names.append(name)
        cols.append(x)
        tags.append("numeric")
    for name in categorical:
        raw = [row[name] for row in covariates]
        levels = sorted(set(raw))
        if len(levels) < 2 and not allow_degenerate:
            raise ValidationError(f"constant column: {name}")
        ref = levels[0]
        for level in levels[1:]:
            names.append(f"{name}={_level_str(level)}")
            cols.append(np.array([1.0 if v == level else 0.0 for v in raw]))
            tags.append(f"indicator({_level_str(ref)})")
    values = np.column_stack(cols) if cols else np.zeros((len(covariates), 0))
    out = CovariateMatrix(tuple(names), values, tuple(tags))
    if not allow_degenerate:
        const = out.constant_columns()
        if const:
            raise ValidationError(f"constant column: {', '.join(const)}")
    return out


def _level_str(level) -> str:
    if isinstance(level, float) and level.is_integer():
        return str(int(level))
    return str(level)


# cohort manifest ---------------------------------------------------------


def records_to_json(records: Sequence[SurvivalRecord]) -> list[dict]:
    return [
        {
            "case_id": r.case_id,
            "time_months": int(r.time_months),
            "event": bool(r.event),
            "covariates": {k: float(v) for k, v in r.covariates.items()},
            "split": r.split,
        }
        for r in records
    ]


def save_cohort(path: str | Path, records: Sequence[SurvivalRecord]) -> None:
    Path(path).write_text(json.dumps(records_to_json(records), indent=1, sort_keys=True) + "\n")


def load_cohort(path: str | Path) -> list[SurvivalRecord]:
    try:
        rows = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read cohort {path}: {exc}") from exc
    if not isinstance(rows, list):
        raise ValidationError("cohort manifest must be a JSON array")
    out = []
    for row in rows:
        try:
            out.append(
                SurvivalRecord(
                    case_id=str(row["case_id"]),
                    time_months=int(row["time_months"]),
                    event=bool(row["event"]),
                    covariates={k: float(v) for k, v in row.get("covariates", {}).items()},
                    split=row.get("split"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed cohort row {row!r}") from exc
    survival_arrays(out)
    return out
