"""Participant-level NMA datasets: in-memory container and CSV ingest."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, RmstNmaError

REQUIRED_COLUMNS = ("study_id", "treatment", "time", "event")


@dataclass(frozen=True)
class SurvivalRecord:
    study_id: object
    treatment: object
    time: float
    event: int
    covariates: tuple = ()

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time >= 0):
            raise RmstNmaError(f"time must be finite and nonnegative, got {self.time}")
        if self.event not in (0, 1):
            raise RmstNmaError(f"event must be 0 or 1, got {self.event}")


@dataclass(frozen=True)
class Dataset:
    """Columnar IPD. ``treatment`` holds integer codes into ``treatment_labels``."""

    study: np.ndarray
    treatment: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    treatment_labels: list[str]
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.study)
        cov = np.asarray(self.covariates, dtype=float).reshape(n, -1)
        object.__setattr__(self, "covariates", cov)
        if len(self.covariate_names) != cov.shape[1]:
            raise RmstNmaError("covariate_names must name every covariate column")
        for arr in (self.treatment, self.time, self.event):
            if len(arr) != n:
                raise RmstNmaError("all columns must have the same length")

    def __len__(self):
        return len(self.study)

    @property
    def n_treatments(self) -> int:
        return len(self.treatment_labels)

    @property
    def study_ids(self) -> list:
        return np.unique(self.study).tolist()

    def subset(self, rows) -> "Dataset":
        return Dataset(
            self.study[rows],
            self.treatment[rows],
            self.time[rows],
            self.event[rows],
            self.covariates[rows],
            self.treatment_labels,
            self.covariate_names,
        )

    def select_covariates(self, names: Sequence[str] | None) -> "Dataset":
        if names is None:
            return self
        missing = [c for c in names if c not in self.covariate_names]
        if missing:
            raise RmstNmaError(f"unknown covariates: {missing}")
        idx = [self.covariate_names.index(c) for c in names]
        return Dataset(
            self.study, self.treatment, self.time, self.event,
            self.covariates[:, idx], self.treatment_labels, list(names),
        )

    def records(self) -> list[SurvivalRecord]:
        return [
            SurvivalRecord(s, self.treatment_labels[t], float(u), int(e), tuple(x))
            for s, t, u, e, x in zip(self.study, self.treatment, self.time, self.event, self.covariates)
        ]

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord], covariate_names: Sequence[str] | None = None):
        records = list(records)
        if not records:
            raise RmstNmaError("empty sample")
        p = len(records[0].covariates)
        if any(len(r.covariates) != p for r in records):
            raise RmstNmaError("covariate vectors differ in length across records")
        labels = sorted({str(r.treatment) for r in records})
        code = {lab: i for i, lab in enumerate(labels)}
        names = list(covariate_names) if covariate_names is not None else [f"x{i + 1}" for i in range(p)]
        return cls(
            study=np.array([r.study_id for r in records]),
            treatment=np.array([code[str(r.treatment)] for r in records]),
            time=np.array([r.time for r in records], dtype=float),
            event=np.array([r.event for r in records], dtype=int),
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            treatment_labels=labels,
            covariate_names=names,
        )


def _parse_float(text, line, column):
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"column {column!r}: cannot parse {text!r} as a number", line) from None
    if not math.isfinite(value):
        raise DataFormatError(f"column {column!r}: value must be finite", line)
    return value


def read_csv(path, covariates: Sequence[str] | None = None) -> Dataset:
    """Read a dataset CSV (header required; LF or CRLF line endings).

    Columns other than the four required ones are covariates unless
    ``covariates`` names an explicit subset.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("file is empty", 1) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"missing required columns: {missing}", 1)
        extra = [h for h in header if h not in REQUIRED_COLUMNS]
        cov_names = list(extra) if covariates is None else list(covariates)
        absent = [c for c in cov_names if c not in header]
        if absent:
            raise DataFormatError(f"covariate columns not in header: {absent}", 1)
        col = {h: i for i, h in enumerate(header)}
        study, treat, time, event, cov = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", line)
            t = _parse_float(row[col["time"]], line, "time")
            if t < 0:
                raise DataFormatError(f"negative time {t:g}", line)
            e = row[col["event"]].strip()
            if e not in ("0", "1"):
                raise DataFormatError(f"event must be 0 or 1, found {e!r}", line)
            study.append(row[col["study_id"]].strip())
            treat.append(row[col["treatment"]].strip())
            time.append(t)
            event.append(int(e))
            cov.append([_parse_float(row[col[c]], line, c) for c in cov_names])
    if not study:
        raise DataFormatError("no data rows", 2)
    labels = sorted(set(treat))
    code = {lab: i for i, lab in enumerate(labels)}
    study_arr = np.array(study)
    if all(s.lstrip("-").isdigit() for s in study):
        study_arr = study_arr.astype(int)
    return Dataset(
        study=study_arr,
        treatment=np.array([code[t] for t in treat]),
        time=np.array(time),
        event=np.array(event),
        covariates=np.array(cov, dtype=float).reshape(len(study), len(cov_names)),
        treatment_labels=labels,
        covariate_names=cov_names,
    )


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` in the ingest schema (LF endings, round-trippable floats)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(REQUIRED_COLUMNS) + list(data.covariate_names))
        for s, t, u, e, x in zip(data.study, data.treatment, data.time, data.event, data.covariates):
            writer.writerow([s, data.treatment_labels[t], repr(float(u)), int(e)] + [repr(float(v)) for v in x])


def summarize(data: Dataset, t_star: float | None = None) -> dict:
    """Per-study counts plus warnings for single-arm studies and short follow-up."""
    studies = []
    notes = []
    for sid in data.study_ids:
        rows = data.study == sid
        arms = sorted(np.unique(data.treatment[rows]).tolist())
        if len(arms) < 2:
            notes.append(f"study {sid}: only one arm ({data.treatment_labels[arms[0]]})")
        arm_info = []
        for k in arms:
            r = rows & (data.treatment == k)
            max_fu = float(data.time[r].max())
            arm_info.append({
                "treatment": data.treatment_labels[k],
                "n": int(r.sum()),
                "events": int(data.event[r].sum()),
                "max_followup": max_fu,
            })
            if t_star is not None and max_fu < t_star:
                notes.append(
                    f"study {sid}, arm {data.treatment_labels[k]}: max follow-up {max_fu:g} < t_star "
                    f"{t_star:g}; censoring weights may be undefined (G=0)"
                )
        n = int(rows.sum())
        studies.append({
            "study_id": sid.item() if hasattr(sid, "item") else sid,
            "n": n,
            "events": int(data.event[rows].sum()),
            "censored_pct": 100.0 * (1 - data.event[rows].mean()),
            "arms": arm_info,
        })
    return {
        "n_studies": len(studies),
        "n_participants": len(data),
        "treatments": list(data.treatment_labels),
        "covariates": list(data.covariate_names),
        "studies": studies,
        "warnings": notes,
    }
