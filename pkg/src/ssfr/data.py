"""Ingestion and alignment of monthly futures and yield-curve panels.

Both panels are read from plain CSV files whose first column holds a month
stamp (``YYYY-MM`` or ``YYYY-MM-DD``, the day is discarded) and whose other
columns are named ``m<k>`` for a tenor of ``k`` months.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MONTHLY_DT = 1.0 / 12.0

_TENOR_RE = re.compile(r"^m(\d+)$")
_DATE_RE = re.compile(r"^(\d{4})-(\d{2})(?:-(\d{2}))?$")


class DataError(ValueError):
    """Raised for malformed or inconsistent input panels."""


@dataclass(frozen=True, order=True)
class Tenor:
    months: int

    def __post_init__(self) -> None:
        if int(self.months) != self.months or self.months < 1:
            raise DataError(f"tenor must be a positive whole number of months, got {self.months!r}")

    @property
    def years(self) -> float:
        return self.months / 12.0

    @property
    def label(self) -> str:
        return f"m{self.months}"

    @classmethod
    def parse(cls, label: str) -> "Tenor":
        m = _TENOR_RE.match(label.strip())
        if m is None:
            raise DataError(f"bad tenor column {label!r}, expected 'm<months>'")
        return cls(int(m.group(1)))


def tenor_years(tenors: Sequence[Tenor] | np.ndarray) -> np.ndarray:
    """Tenors as year fractions; plain numbers are taken to be years already."""
    return np.array([t.years if isinstance(t, Tenor) else float(t) for t in tenors], dtype=float)


def parse_month(text: str) -> np.datetime64:
    m = _DATE_RE.match(text.strip())
    if m is None:
        raise DataError(f"unparseable date {text!r}")
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        raise DataError(f"unparseable date {text!r}")
    if m.group(3) is not None and not 1 <= int(m.group(3)) <= 31:
        raise DataError(f"unparseable date {text!r}")
    return np.datetime64(f"{year:04d}-{month:02d}", "M")


def format_month(d: np.datetime64) -> str:
    return str(np.datetime64(d, "M"))


def _as_months(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[M]")


def _check_dates(dates: np.ndarray) -> None:
    if dates.ndim != 1:
        raise DataError("dates must be one-dimensional")
    steps = np.diff(dates.astype(np.int64))
    if np.any(steps == 0):
        raise DataError("duplicate date")
    if np.any(steps < 0):
        raise DataError("dates must be strictly increasing")


def _check_tenors(tenors: tuple[Tenor, ...]) -> None:
    months = [t.months for t in tenors]
    if len(months) == 0:
        raise DataError("at least one tenor column is required")
    if any(b <= a for a, b in zip(months, months[1:])):
        raise DataError("tenors must be strictly increasing")


@dataclass(frozen=True)
class FuturesPanel:
    """Log futures prices, one row per month and one column per tenor.

    Cells may be NaN straight after loading; :func:`align_panels` drops
    those rows.
    """

    dates: np.ndarray
    tenors: tuple[Tenor, ...]
    log_prices: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "dates", _as_months(self.dates))
        object.__setattr__(self, "tenors", tuple(self.tenors))
        lp = np.array(self.log_prices, dtype=float, ndmin=2)
        object.__setattr__(self, "log_prices", lp)
        _check_dates(self.dates)
        _check_tenors(self.tenors)
        if lp.shape != (len(self.dates), len(self.tenors)):
            raise DataError(f"log_prices shape {lp.shape} does not match {len(self.dates)} dates x {len(self.tenors)} tenors")
        if np.any(np.isinf(lp)):
            raise DataError("log prices must be finite")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_tenors(self) -> int:
        return len(self.tenors)


@dataclass(frozen=True)
class YieldPanel:
    """Yields as decimal fractions; row ``i`` is the time series at ``tenors[i]``."""

    dates: np.ndarray
    tenors: tuple[Tenor, ...]
    yields: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "dates", _as_months(self.dates))
        object.__setattr__(self, "tenors", tuple(self.tenors))
        z = np.array(self.yields, dtype=float, ndmin=2)
        object.__setattr__(self, "yields", z)
        _check_dates(self.dates)
        _check_tenors(self.tenors)
        if z.shape != (len(self.tenors), len(self.dates)):
            raise DataError(f"yields shape {z.shape} does not match {len(self.tenors)} tenors x {len(self.dates)} dates")
        if np.any(np.isinf(z)):
            raise DataError("yields must be finite")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_tenors(self) -> int:
        return len(self.tenors)


@dataclass(frozen=True)
class AlignedDataset:
    futures: FuturesPanel
    yields: YieldPanel
    dt: float = MONTHLY_DT

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise DataError("dt must be positive")
        if not np.array_equal(self.futures.dates, self.yields.dates):
            raise DataError("futures and yield dates differ")
        if not (np.all(np.isfinite(self.futures.log_prices)) and np.all(np.isfinite(self.yields.yields))):
            raise DataError("aligned panels must not contain missing values")

    @property
    def dates(self) -> np.ndarray:
        return self.futures.dates

    @property
    def y(self) -> np.ndarray:
        return self.futures.log_prices


@dataclass(frozen=True)
class IngestConfig:
    """How to read a panel file.

    ``tenors`` restricts (and orders) the columns that are read; ``None``
    keeps every ``m<k>`` column in the file.
    """

    date_column: str = "date"
    tenors: tuple[int, ...] | None = None
    percent: bool = False


DEFAULT_YIELD_TENORS = (1, 3, 6, 9, 12)


def _read_table(path: str | Path, config: IngestConfig) -> tuple[np.ndarray, tuple[Tenor, ...], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[0] != config.date_column:
        raise DataError(f"{path}: first column must be {config.date_column!r}, got {header[0]!r}")
    available = {Tenor.parse(h): j for j, h in enumerate(header[1:], start=1)}
    if config.tenors is None:
        tenors = tuple(sorted(available))
    else:
        tenors = tuple(Tenor(m) for m in config.tenors)
        missing = [t.label for t in tenors if t not in available]
        if missing:
            raise DataError(f"{path}: missing tenor column(s) {', '.join(missing)}")
    cols = [available[t] for t in tenors]

    dates = []
    values = np.empty((len(rows) - 1, len(tenors)))
    for n, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: ragged row {n + 2}: expected {len(header)} fields, got {len(row)}")
        dates.append(parse_month(row[0]))
        for k, j in enumerate(cols):
            cell = row[j].strip()
            if cell == "":
                values[n, k] = math.nan
                continue
            try:
                values[n, k] = float(cell)
            except ValueError:
                raise DataError(f"{path}: unparseable value {cell!r} in row {n + 2}") from None
            if not math.isfinite(values[n, k]):
                raise DataError(f"{path}: unparseable value {cell!r} in row {n + 2}")
    return _as_months(dates), tenors, values


def load_futures_csv(path: str | Path, config: IngestConfig | None = None) -> FuturesPanel:
    """Read raw USD futures prices and return their natural logs."""
    config = config or IngestConfig()
    dates, tenors, prices = _read_table(path, config)
    if np.any(prices[~np.isnan(prices)] <= 0):
        raise DataError(f"{path}: non-positive price")
    return FuturesPanel(dates, tenors, np.log(prices))


def load_yields_csv(path: str | Path, config: IngestConfig | None = None) -> YieldPanel:
    config = config or IngestConfig(tenors=DEFAULT_YIELD_TENORS)
    dates, tenors, values = _read_table(path, config)
    if config.percent:
        values = values / 100.0
    return YieldPanel(dates, tenors, values.T)


def align_panels(futures: FuturesPanel, yields: YieldPanel, dt: float = MONTHLY_DT) -> AlignedDataset:
    """Restrict both panels to common dates with no missing cells."""
    if futures.n_dates == 0 or yields.n_dates == 0:
        raise DataError("empty panel")
    common, fi, yi = np.intersect1d(futures.dates, yields.dates, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise DataError("no overlapping dates")
    lp = futures.log_prices[fi]
    z = yields.yields[:, yi]
    keep = np.all(np.isfinite(lp), axis=1) & np.all(np.isfinite(z), axis=0)
    if not np.any(keep):
        raise DataError("no overlapping dates without missing values")
    return AlignedDataset(
        FuturesPanel(common[keep], futures.tenors, lp[keep]),
        YieldPanel(common[keep], yields.tenors, z[:, keep]),
        dt,
    )


def _write_table(path: str | Path, dates: np.ndarray, tenors: Sequence[Tenor], values: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *(t.label for t in tenors)])
        for d, row in zip(dates, values):
            w.writerow([format_month(d), *("" if math.isnan(v) else f"{v:.12g}" for v in row)])


def write_futures_csv(path: str | Path, panel: FuturesPanel) -> None:
    """Write raw prices (``exp`` of the stored logs), 12 significant digits."""
    _write_table(path, panel.dates, panel.tenors, np.exp(panel.log_prices))


def write_yields_csv(path: str | Path, panel: YieldPanel, percent: bool = False) -> None:
    scale = 100.0 if percent else 1.0
    _write_table(path, panel.dates, panel.tenors, panel.yields.T * scale)


def month_range(start: str | np.datetime64, n: int) -> np.ndarray:
    first = parse_month(start) if isinstance(start, str) else np.datetime64(start, "M")
    return first + np.arange(n)
