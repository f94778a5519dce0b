"""Paired response/covariate samples, the vectorization convention and CSV I/O.

A :class:`Dataset` holds ``n`` paired observations ``(y_i, u_i)`` with
``y_i`` a length-``p`` response vector and ``u_i`` a length-``d``
conditioning-covariate vector.  Datasets are immutable after construction and
safe to share across concurrent tree builders.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np


class CsvFormatError(ValueError):
    """An input CSV violates the declared layout."""


@dataclass(frozen=True)
class Sample:
    """One paired observation (response vector y, covariate vector u)."""

    y: np.ndarray
    u: np.ndarray


class VecIndex:
    """Column-stacking convention for p x p matrices.

    Entry (j, r) of a matrix maps to flat position k = j + (r - 1) * p, with
    j, r and k all 1-based.  This is a bijection between [p^2] and
    [p] x [p]; for symmetric matrices k(j, r) and k(r, j) carry equal values.
    """

    def __init__(self, p: int):
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}")
        self.p = p

    def to_flat(self, j: int, r: int) -> int:
        """Flat 1-based index of 1-based entry (j, r)."""
        p = self.p
        if not (1 <= j <= p and 1 <= r <= p):
            raise IndexError(f"entry ({j}, {r}) out of range for p={p}")
        return j + (r - 1) * p

    def to_pair(self, k: int) -> tuple[int, int]:
        """1-based entry (j, r) of flat 1-based index k."""
        p = self.p
        if not (1 <= k <= p * p):
            raise IndexError(f"flat index {k} out of range for p={p}")
        r, j = divmod(k - 1, p)
        return j + 1, r + 1

    def unvec(self, v: np.ndarray) -> np.ndarray:
        """Reshape a length-p^2 vector back into the p x p matrix."""
        return np.asarray(v, dtype=float).reshape(self.p, self.p, order="F")


def vec_outer(y: np.ndarray) -> np.ndarray:
    """Stack the outer product y y^T into a length-p^2 vector (VecIndex order)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("vec_outer expects a 1-d vector")
    if not np.all(np.isfinite(y)):
        raise ValueError("vec_outer requires finite input")
    return np.outer(y, y).ravel(order="F")


@dataclass(frozen=True)
class Dataset:
    """n paired observations with shared dimensions p and d."""

    y: np.ndarray  # (n, p)
    u: np.ndarray  # (n, d)
    dates: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float))
        u = np.ascontiguousarray(np.asarray(self.u, dtype=float))
        if y.ndim != 2 or u.ndim != 2:
            raise ValueError("y and u must be 2-d arrays")
        if y.shape[0] != u.shape[0]:
            raise ValueError(
                f"row mismatch: {y.shape[0]} responses vs {u.shape[0]} covariates"
            )
        if y.shape[0] < 1 or y.shape[1] < 1 or u.shape[1] < 1:
            raise ValueError("need n >= 1, p >= 1 and d >= 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(u))):
            raise ValueError("all entries must be finite")
        if self.dates is not None and len(self.dates) != y.shape[0]:
            raise ValueError("dates must align with rows")
        y.flags.writeable = False
        u.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def d(self) -> int:
        return self.u.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.y[i], self.u[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        dates = tuple(self.dates[i] for i in idx) if self.dates is not None else None
        return Dataset(self.y[idx].copy(), self.u[idx].copy(), dates)

    def fingerprint(self) -> str:
        """Content hash used to guard against mixed-dataset misuse."""
        h = hashlib.sha256()
        h.update(np.int64([self.n, self.p, self.d]).tobytes())
        h.update(self.y.tobytes())
        h.update(self.u.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CsvLayout:
    """Which CSV columns are responses vs covariates, plus an optional lag.

    With ``lag = L`` the covariate vector from file row t is paired with the
    response vector from file row t + L (day-t factor returns conditioning
    day-(t+L) asset returns).
    """

    response_cols: tuple[str, ...]
    covariate_cols: tuple[str, ...]
    date_col: str | None = None
    lag: int = 0

    def __post_init__(self):
        if len(self.response_cols) == 0:
            raise ValueError("layout declares no response columns (p = 0)")
        if len(self.covariate_cols) == 0:
            raise ValueError("layout declares no covariate columns (d = 0)")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        raw_rows = [row for row in reader if row]
    return header, raw_rows


def load_returns_csv(path, layout: CsvLayout) -> Dataset:
    """Load a Dataset from a headered CSV per the layout descriptor.

    Rows keep file order.  Errors name the offending (row, column) with
    1-based data-row and file-column positions.
    """
    header, raw_rows = _read_table(path)
    ncols = len(header)

    def col_pos(name: str) -> int:
        try:
            return header.index(name)
        except ValueError:
            raise CsvFormatError(f"{path}: column {name!r} not in header") from None

    y_pos = [col_pos(c) for c in layout.response_cols]
    u_pos = [col_pos(c) for c in layout.covariate_cols]
    d_pos = col_pos(layout.date_col) if layout.date_col is not None else None

    rows = []
    for t, raw in enumerate(raw_rows, start=1):
        if len(raw) != ncols:
            raise CsvFormatError(
                f"{path}: row {t} has {len(raw)} cells, header has {ncols}"
            )
        parsed = []
        for c, cell in enumerate(raw, start=1):
            if d_pos is not None and c - 1 == d_pos:
                parsed.append(cell.strip())
                continue
            try:
                parsed.append(float(cell))
            except ValueError:
                raise CsvFormatError(
                    f"{path}: non-numeric cell at row {t}, column {c} ({cell!r})"
                ) from None
        rows.append(parsed)

    lag = layout.lag
    if len(rows) <= lag:
        raise CsvFormatError(
            f"{path}: {len(rows)} data rows cannot support lag={lag}"
        )
    n = len(rows) - lag
    y = np.array([[rows[t + lag][c] for c in y_pos] for t in range(n)], dtype=float)
    u = np.array([[rows[t][c] for c in u_pos] for t in range(n)], dtype=float)
    dates = None
    if d_pos is not None:
        # Date of the response row labels the paired observation.
        dates = tuple(str(rows[t + lag][d_pos]) for t in range(n))
    return Dataset(y, u, dates)


def write_returns_csv(path, dataset: Dataset, layout: CsvLayout) -> None:
    """Write a Dataset back to CSV (lag must be 0; exact float round trip)."""
    if layout.lag != 0:
        raise ValueError("write_returns_csv only supports lag=0 layouts")
    if len(layout.response_cols) != dataset.p or len(layout.covariate_cols) != dataset.d:
        raise ValueError("layout does not match dataset dimensions")
    cols = list(layout.response_cols) + list(layout.covariate_cols)
    if layout.date_col is not None:
        cols = [layout.date_col] + cols
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.y[i]] + [repr(float(v)) for v in dataset.u[i]]
            if layout.date_col is not None:
                row = [dataset.dates[i] if dataset.dates else str(i)] + row
            writer.writerow(row)


@dataclass(frozen=True)
class UnitCubeMap:
    """Per-coordinate affine map sending observed covariate ranges to [0, 1].

    Constant coordinates (max == min) are collapsed to 0.5 and flagged.
    Query points must be transformed with the same stored map.
    """

    lo: np.ndarray
    hi: np.ndarray
    constant: np.ndarray  # bool mask of degenerate coordinates

    def transform(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        uu = np.atleast_2d(u)
        span = self.hi - self.lo
        safe = np.where(self.constant, 1.0, span)
        out = (uu - self.lo) / safe
        out[:, self.constant] = 0.5
        return out[0] if single else out


def map_to_unit_cube(dataset: Dataset) -> tuple[Dataset, UnitCubeMap]:
    """Rescale each covariate coordinate into [0, 1]; responses untouched."""
    if dataset.n < 2:
        raise ValueError("map_to_unit_cube needs n >= 2")
    lo = dataset.u.min(axis=0)
    hi = dataset.u.max(axis=0)
    constant = hi == lo
    if constant.any():
        warnings.warn(
            f"constant covariate column(s) {np.flatnonzero(constant).tolist()} "
            "mapped to 0.5",
            stacklevel=2,
        )
    cmap = UnitCubeMap(lo=lo, hi=hi, constant=constant)
    u_new = np.atleast_2d(cmap.transform(dataset.u))
    return Dataset(dataset.y.copy(), u_new, dataset.dates), cmap
