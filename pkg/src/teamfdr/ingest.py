"""Reading cohort tables and per-channel quantile normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "MarkerMatrix",
    "quantile_normalize",
    "read_matrix",
    "read_two_cohorts",
    "write_matrix",
]

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True, eq=False)
class MarkerMatrix:
    """Pooled expression table: ``values`` is N x p, ``cohort`` is 1 or 2 per row."""

    values: np.ndarray
    cohort: np.ndarray
    marker_names: tuple[str, ...]
    sample_id: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError("values must be a 2-d table")
        cohort = np.array(self.cohort, copy=True).astype(np.int8).ravel()
        if cohort.shape[0] != values.shape[0]:
            raise DataError("cohort labels must have one entry per row")
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite value at row {r + 1}, column {c + 1}")
        if not np.all((cohort == 1) | (cohort == 2)):
            raise DataError("cohort labels must be 1 or 2")
        names = tuple(str(m) for m in self.marker_names)
        if len(names) != values.shape[1]:
            raise DataError("need one marker name per column")
        sample = None
        if self.sample_id is not None:
            sample = np.asarray(self.sample_id).ravel().copy()
            if sample.shape[0] != values.shape[0]:
                raise DataError("sample_id must have one entry per row")
            sample.flags.writeable = False
        values.flags.writeable = False
        cohort.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cohort", cohort)
        object.__setattr__(self, "marker_names", names)
        object.__setattr__(self, "sample_id", sample)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_markers(self) -> int:
        return self.values.shape[1]

    @property
    def n1(self) -> int:
        return int(np.count_nonzero(self.cohort == 1))

    @property
    def n2(self) -> int:
        return int(np.count_nonzero(self.cohort == 2))

    def require_both_cohorts(self):
        if self.n1 == 0 or self.n2 == 0:
            raise DataError(f"both cohorts must be nonempty (N1={self.n1}, N2={self.n2})")

    def select(self, markers: Sequence[str]) -> "MarkerMatrix":
        """Column subset by marker name, in the given order."""
        missing = [m for m in markers if m not in self.marker_names]
        if missing:
            raise DataError(f"unknown marker(s): {', '.join(missing)}")
        idx = [self.marker_names.index(m) for m in markers]
        return MarkerMatrix(self.values[:, idx], self.cohort, tuple(markers), self.sample_id)

    def flipped(self) -> "MarkerMatrix":
        """Same data with cohort labels 1 and 2 swapped."""
        return MarkerMatrix(self.values, 3 - self.cohort, self.marker_names, self.sample_id)


def _read_table(path, delimiter):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    # keep everything as text so the numeric check can name the bad cell
    return pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)


def _numeric_block(frame, columns, row_offset=0):
    out = np.empty((len(frame), len(columns)), dtype=np.float64)
    for j, col in enumerate(columns):
        raw = frame[col].str.strip()
        try:
            # numpy's text conversion is correctly rounded; pandas' is not
            parsed = raw.to_numpy().astype(np.float64)
        except ValueError:
            parsed = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(parsed)
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-numeric value at row {r + 1 + row_offset}, column {col!r}: "
                            f"{frame[col].iloc[r]!r}")
        out[:, j] = parsed
    return out


def read_matrix(path, markers: Sequence[str] | None = None, cohort_col: str = "cohort",
                sample_col: str | None = None, delimiter: str | None = None) -> MarkerMatrix:
    """Read a single delimited file holding both cohorts.

    ``markers`` defaults to every column other than the cohort and sample
    columns.  Rows are kept in file order.
    """
    frame = _read_table(path, delimiter)
    if cohort_col not in frame.columns:
        raise DataError(f"cohort column {cohort_col!r} not found in {path}")
    if sample_col is not None and sample_col not in frame.columns:
        raise DataError(f"sample column {sample_col!r} not found in {path}")
    if markers is None:
        markers = [c for c in frame.columns if c not in (cohort_col, sample_col)]
    markers = list(markers)
    if not markers:
        raise DataError("at least one marker column is required")
    unknown = [m for m in markers if m not in frame.columns]
    if unknown:
        raise DataError(f"marker column(s) not found: {', '.join(unknown)}")

    labels = frame[cohort_col].str.strip()
    bad = ~labels.isin(["1", "2"])
    if bad.any():
        r = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"unknown cohort value {labels.iloc[r]!r} at row {r + 1}")
    cohort = labels.astype(int).to_numpy()
    values = _numeric_block(frame, markers)
    sample = frame[sample_col].to_numpy() if sample_col else None
    matrix = MarkerMatrix(values, cohort, tuple(markers), sample)
    matrix.require_both_cohorts()
    return matrix


def read_two_cohorts(path1, path2, markers: Sequence[str] | None = None,
                     sample_col: str | None = None,
                     delimiter: str | None = None) -> MarkerMatrix:
    """Read cohort 1 and cohort 2 from separate files (cohort 1 rows first)."""
    f1 = _read_table(path1, delimiter)
    f2 = _read_table(path2, delimiter)
    if markers is None:
        markers = [c for c in f1.columns if c != sample_col]
    markers = list(markers)
    for frame, path in ((f1, path1), (f2, path2)):
        unknown = [m for m in markers if m not in frame.columns]
        if unknown:
            raise DataError(f"marker column(s) not found in {path}: {', '.join(unknown)}")
        if len(frame) == 0:
            raise DataError(f"{path} has no rows")
    v1 = _numeric_block(f1, markers)
    v2 = _numeric_block(f2, markers)
    cohort = np.concatenate([np.ones(len(v1), int), np.full(len(v2), 2)])
    sample = None
    if sample_col is not None:
        sample = np.concatenate([f1[sample_col].to_numpy(), f2[sample_col].to_numpy()])
    return MarkerMatrix(np.vstack([v1, v2]), cohort, tuple(markers), sample)


def write_matrix(matrix: MarkerMatrix, path, cohort_col: str = "cohort",
                 sample_col: str = "sample", delimiter: str = ",") -> None:
    """Write a table that :func:`read_matrix` reads back exactly."""
    frame = pd.DataFrame({name: matrix.values[:, j]
                          for j, name in enumerate(matrix.marker_names)})
    frame[cohort_col] = matrix.cohort.astype(int)
    if matrix.sample_id is not None:
        frame[sample_col] = matrix.sample_id
    # repr-style round-trip formatting keeps values bit-exact
    frame.to_csv(path, sep=delimiter, index=False, float_format="%.17g")


def _tied_average(sorted_vals, reference):
    """Reference value per sorted position, averaged across runs of ties."""
    out = reference.copy()
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], sorted_vals.size]
    for s, e in zip(starts, ends):
        if e - s > 1:
            out[s:e] = reference[s:e].mean()
    return out


def _reference_at(sorted_block, size):
    """A sample's order statistics resampled to ``size`` fractional ranks."""
    n = sorted_block.size
    if n == size:
        return sorted_block
    pos = np.linspace(0.0, n - 1.0, size)
    return np.interp(pos, np.arange(n), sorted_block)


def quantile_normalize(matrix: MarkerMatrix) -> MarkerMatrix:
    """Per-channel quantile normalization across ``sample_id`` groups.

    For every channel, each sample's values are replaced rank-wise by the mean
    of the samples' order statistics.  Unequal sample sizes are handled by
    linear interpolation at fractional ranks; ties share the mean reference
    value over their rank span.  A channel that is constant within some sample
    is left unchanged (with a warning).
    """
    if matrix.sample_id is None:
        raise DataError("quantile normalization needs sample identifiers")
    samples, inverse = np.unique(matrix.sample_id, return_inverse=True)
    out = matrix.values.copy()
    if samples.size < 2:
        return MarkerMatrix(out, matrix.cohort, matrix.marker_names, matrix.sample_id)
    groups = [np.flatnonzero(inverse == g) for g in range(samples.size)]
    grid_size = max(g.size for g in groups)

    for j, name in enumerate(matrix.marker_names):
        col = matrix.values[:, j]
        blocks = [np.sort(col[g]) for g in groups]
        if any(np.unique(b).size < 2 for b in blocks):
            log.warning("channel %r is constant within a sample; left unnormalized", name)
            continue
        resampled = [_reference_at(b, grid_size) for b in blocks]
        if all(np.array_equal(resampled[0], r) for r in resampled[1:]):
            # already normalized; np.mean of equal rows is not always exact
            reference = resampled[0]
        else:
            reference = np.mean(resampled, axis=0)
        for g, block in zip(groups, blocks):
            order = np.argsort(col[g], kind="stable")
            ref = _reference_at(reference, g.size)
            out[g[order], j] = _tied_average(block, ref)
    return MarkerMatrix(out, matrix.cohort, matrix.marker_names, matrix.sample_id)
