"""Longitudinal dataset container and its CSV serialization.

The on-disk schema is fixed: header ``subject_id,j,age,albumin,trig,platelet,y``,
UTF-8, ``.`` decimal separator.  Rows for a subject are contiguous and ordered
by encounter index ``j``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COVARIATE_NAMES = ("age", "albumin", "trig", "platelet")
CSV_HEADER = ("subject_id", "j") + COVARIATE_NAMES + ("y",)


class DataError(ValueError):
    """Dataset violates the schema or its ordering invariants."""


@dataclass
class LongitudinalDataset:
    subject_id: np.ndarray
    j: np.ndarray
    covariates: dict[str, np.ndarray]
    y: np.ndarray
    _subject_index: np.ndarray = field(init=False, repr=False, default=None)
    _subject_labels: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.subject_id = np.asarray(self.subject_id, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        self.y = np.asarray(self.y, dtype=float)
        self.validate()
        labels, index = np.unique(self.subject_id, return_inverse=True)
        # np.unique sorts; remap so subject ordinals follow order of appearance
        first_pos = {lab: pos for pos, lab in enumerate(self.subject_id[self._block_starts()])}
        remap = np.array([first_pos[lab] for lab in labels], dtype=np.int64)
        self._subject_index = remap[index]
        order = np.argsort(remap)
        self._subject_labels = labels[order]

    def _block_starts(self) -> np.ndarray:
        if len(self.subject_id) == 0:
            return np.empty(0, dtype=np.int64)
        changes = np.flatnonzero(np.diff(self.subject_id) != 0) + 1
        return np.concatenate([[0], changes])

    def validate(self) -> None:
        n = len(self.subject_id)
        lengths = {len(self.j), len(self.y)} | {len(v) for v in self.covariates.values()}
        if lengths and lengths != {n}:
            raise DataError("column lengths differ")
        if n == 0:
            return
        starts = self._block_starts()
        seen: set[int] = set()
        for s in self.subject_id[starts]:
            if int(s) in seen:
                raise DataError(f"rows for subject {s} are not contiguous")
            seen.add(int(s))
        ends = np.concatenate([starts[1:], [n]])
        for s, e in zip(starts, ends):
            jj = self.j[s:e]
            if np.any(np.diff(jj) <= 0):
                raise DataError(
                    f"encounters for subject {self.subject_id[s]} are not strictly ordered by j"
                )

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_subjects(self) -> int:
        return len(self._subject_labels)

    @property
    def subject_index(self) -> np.ndarray:
        """Row-aligned subject ordinal (0..n_subjects-1, in order of appearance)."""
        return self._subject_index

    @property
    def subject_labels(self) -> np.ndarray:
        return self._subject_labels

    def is_time_varying(self, covariate: str) -> bool:
        """True when the column varies within at least one subject."""
        col = self.covariates[covariate]
        starts = self._block_starts()
        ends = np.concatenate([starts[1:], [self.n_rows]])
        for s, e in zip(starts, ends):
            if e - s > 1 and np.ptp(col[s:e]) > 0:
                return True
        return False

    def encounter_counts(self) -> np.ndarray:
        return np.bincount(self._subject_index, minlength=self.n_subjects)

    # --- serialization -----------------------------------------------------

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        cols = [self.covariates[name] for name in COVARIATE_NAMES]
        for i in range(self.n_rows):
            writer.writerow(
                [int(self.subject_id[i]), int(self.j[i])]
                + [repr(float(c[i])) for c in cols]
                + [repr(float(self.y[i]))]
            )
        return buf.getvalue()

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")

    @classmethod
    def from_csv_text(cls, text: str) -> "LongitudinalDataset":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV") from None
        if tuple(header) != CSV_HEADER:
            raise DataError(
                f"line 1: bad header {header!r}, expected {','.join(CSV_HEADER)}"
            )
        subject, j, y = [], [], []
        covs: dict[str, list[float]] = {name: [] for name in COVARIATE_NAMES}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                subject.append(int(row[0]))
                j.append(int(row[1]))
                for k, name in enumerate(COVARIATE_NAMES):
                    covs[name].append(float(row[2 + k]))
                y.append(float(row[-1]))
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
        return cls(
            subject_id=np.array(subject, dtype=np.int64),
            j=np.array(j, dtype=np.int64),
            covariates={k: np.array(v) for k, v in covs.items()},
            y=np.array(y),
        )

    @classmethod
    def from_csv(cls, path: str | Path) -> "LongitudinalDataset":
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"))
