"""CSV ingestion, calendar alignment, normalization, and training windows.

Weeks use the ISO calendar with week 53 dropped at load time, so every
year has exactly 52 weeks and a week maps to a single integer index
(year * 52 + week - 1). Seasonal phase is that index modulo 52.
"""

from __future__ import annotations

import csv
import datetime
import os
import re
import warnings
from dataclasses import dataclass

import numpy as np

WEEKS_PER_YEAR = 52

_WEEK_RE = re.compile(r"^(\d{4})-W(\d{2})$")


class DataError(ValueError):
    pass


class MissingWeekError(DataError):
    pass


class AlignmentError(DataError):
    pass


def parse_week(text: str) -> int:
    """Parse 'YYYY-Www' to a week index; returns -1 for dropped week 53."""
    m = _WEEK_RE.match(text.strip())
    if not m:
        raise DataError(f"malformed iso_week {text!r}, expected YYYY-Www")
    year, week = int(m.group(1)), int(m.group(2))
    if week < 1 or week > 53:
        raise DataError(f"iso_week {text!r} out of range 01..53")
    if week == 53:
        try:
            datetime.date.fromisocalendar(year, 53, 1)
        except ValueError:
            raise DataError(f"iso_week {text!r}: year {year} has no week 53")
        return -1
    return year * WEEKS_PER_YEAR + week - 1


def week_index(year: int, week: int) -> int:
    return year * WEEKS_PER_YEAR + week - 1


def format_week(index: int) -> str:
    year, w = divmod(index, WEEKS_PER_YEAR)
    return f"{year}-W{w + 1:02d}"


def week_phase(index: int) -> int:
    return index % WEEKS_PER_YEAR


@dataclass(frozen=True)
class WeeklySeries:
    """One country's weekly ILI rates on consecutive week indices."""

    country: str
    start: int  # week index of the first value
    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0):
            raise DataError(f"{self.country}: negative ILI rate")

    def __len__(self):
        return len(self.values)

    @property
    def end(self) -> int:
        return self.start + len(self.values) - 1

    def weeks(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.values))

    def pos(self, week: int) -> int:
        if not self.start <= week <= self.end:
            raise AlignmentError(
                f"{self.country}: week {format_week(week)} outside "
                f"{format_week(self.start)}..{format_week(self.end)}")
        return week - self.start


@dataclass
class QueryPanel:
    """Weekly frequencies of L queries aligned to a WeeklySeries."""

    country: str
    queries: list
    start: int
    matrix: np.ndarray  # weeks x L

    @property
    def n_queries(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class WindowSample:
    """One supervised window: N input weeks, S target weeks."""

    country: str
    last_week: int  # week index of the final input week (time t)
    x_raw: np.ndarray  # N raw ILI values
    x_des: np.ndarray  # N deseasonalized values
    q: np.ndarray  # N x L normalized query values
    y_raw: np.ndarray  # S raw targets
    o: np.ndarray  # S deseasonalized targets, o = y_raw - x_seas
    x_seas: np.ndarray  # S seasonal values for the target weeks


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint, ordered train/validation/test week-index ranges."""

    train: tuple  # (first week, last week), inclusive
    val: tuple
    test: tuple

    def __post_init__(self):
        if not (self.train[1] < self.val[0] <= self.val[1] < self.test[0]):
            raise DataError(f"split ranges must be ordered: {self}")


def load_ili(path: str) -> dict:
    """Read ili.csv (iso_week,country,ili_rate) into per-country series."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"iso_week", "country", "ili_rate"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                idx = parse_week(row["iso_week"])
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if idx < 0:
                continue  # week 53 dropped
            rate = float(row["ili_rate"])
            if rate < 0:
                raise DataError(f"{path}:{lineno}: negative ili_rate {rate}")
            rows.setdefault(row["country"], {})[idx] = rate
    out = {}
    for country, by_week in rows.items():
        weeks = sorted(by_week)
        missing = [format_week(w) for w in range(weeks[0], weeks[-1] + 1)
                   if w not in by_week]
        if missing:
            raise MissingWeekError(
                f"{country}: missing weeks {', '.join(missing)}")
        out[country] = WeeklySeries(
            country=country, start=weeks[0],
            values=np.array([by_week[w] for w in weeks]))
    return out


def write_ili(path: str, series_by_country: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iso_week", "country", "ili_rate"])
        for country in sorted(series_by_country):
            s = series_by_country[country]
            for week, v in zip(s.weeks(), s.values):
                w.writerow([format_week(week), country, repr(float(v))])


def query_slug(query: str) -> str:
    s = query.lower().replace(" ", "_")
    return re.sub(r"[^0-9a-z_-￿]", "", s)


def load_trends(trends_dir: str, country: str, queries,
                series: WeeklySeries) -> QueryPanel:
    """Load one CSV per query, aligned to the series weeks.

    Missing interior weeks are forward-filled; leading gaps are zero.
    """
    queries = list(queries)
    slugs = [query_slug(q) for q in queries]
    if len(set(slugs)) != len(slugs):
        raise DataError(f"{country}: query slug collision in {slugs}")
    missing = [q for q, s in zip(queries, slugs) if not os.path.exists(
        os.path.join(trends_dir, country, s + ".csv"))]
    if missing:
        raise DataError(f"{country}: missing trends files for {missing}")
    n = len(series)
    matrix = np.zeros((n, len(queries)))
    for j, slug in enumerate(slugs):
        path = os.path.join(trends_dir, country, slug + ".csv")
        by_week = {}
        with open(path, newline="", encoding="utf-8") as f:
            for lineno, row in enumerate(csv.DictReader(f), start=2):
                idx = parse_week(row["iso_week"])
                if idx >= 0:
                    by_week[idx] = float(row["value"])
        last = 0.0
        for i, week in enumerate(series.weeks()):
            if week in by_week:
                last = by_week[week]
            matrix[i, j] = last
    return QueryPanel(country=country, queries=queries, start=series.start,
                      matrix=matrix)


def minmax_fit_apply(panel: QueryPanel, training_range) -> tuple:
    """Min-max normalize on the training range; apply everywhere.

    Returns (normalized panel, list of (query, min, max)). Queries that
    are constant on the training range are dropped with a warning.
    """
    lo, hi = training_range
    a = lo - panel.start
    b = hi - panel.start + 1
    if not (0 <= a < b <= panel.matrix.shape[0]):
        raise AlignmentError(f"training range {training_range} outside panel")
    keep, stats = [], []
    for j, q in enumerate(panel.queries):
        col = panel.matrix[a:b, j]
        mn, mx = col.min(), col.max()
        if mx <= mn:
            warnings.warn(f"{panel.country}: query {q!r} constant on "
                          f"training range, dropped")
            continue
        keep.append(j)
        stats.append((q, float(mn), float(mx)))
    mat = np.empty((panel.matrix.shape[0], len(keep)))
    for out_j, j in enumerate(keep):
        _, mn, mx = stats[out_j]
        mat[:, out_j] = (panel.matrix[:, j] - mn) / (mx - mn)
    norm = QueryPanel(country=panel.country,
                      queries=[panel.queries[j] for j in keep],
                      start=panel.start, matrix=mat)
    return norm, stats


def make_windows(series: WeeklySeries, panel, seasonal: np.ndarray,
                 n_in: int, n_out: int, week_range) -> list:
    """All stride-1 windows whose N inputs and S targets fit in the range.

    `seasonal` is the full-length seasonal array aligned to the series
    (STL fit over training, periodic extension past it).
    """
    lo, hi = week_range
    if hi - lo + 1 < n_in + n_out:
        raise DataError(f"range {format_week(lo)}..{format_week(hi)} shorter "
                        f"than N+S = {n_in + n_out}")
    if len(seasonal) != len(series):
        raise AlignmentError("seasonal array length mismatch")
    if panel is not None and (panel.start != series.start
                              or panel.matrix.shape[0] != len(series)):
        raise AlignmentError("query panel not aligned to series")
    des = series.values - seasonal
    samples = []
    for t in range(series.pos(lo) + n_in - 1, series.pos(hi) - n_out + 1):
        sl_in = slice(t - n_in + 1, t + 1)
        sl_out = slice(t + 1, t + 1 + n_out)
        q = (panel.matrix[sl_in] if panel is not None
             else np.zeros((n_in, 0)))
        samples.append(WindowSample(
            country=series.country,
            last_week=series.start + t,
            x_raw=series.values[sl_in].copy(),
            x_des=des[sl_in].copy(),
            q=q.copy(),
            y_raw=series.values[sl_out].copy(),
            o=(series.values[sl_out] - seasonal[sl_out]).copy(),
            x_seas=seasonal[sl_out].copy()))
    return samples


def make_target_windows(series: WeeklySeries, panel, seasonal: np.ndarray,
                        n_in: int, n_out: int, target_range) -> list:
    """Windows whose S targets all lie in target_range; inputs may reach
    back into earlier weeks (validation/test usage)."""
    lo, hi = target_range
    if hi - lo + 1 < n_out or lo - n_in < series.start:
        raise DataError(
            f"target range {format_week(lo)}..{format_week(hi)} unusable "
            f"for N={n_in}, S={n_out}")
    return make_windows(series, panel, seasonal, n_in, n_out,
                        (lo - n_in, hi))


def split_plan(series: WeeklySeries, test_start: int, test_len: int,
               val_len: int = 52, min_train: int = 156) -> SplitPlan:
    """Validation is the 52 weeks before test; training is everything prior."""
    test_end = test_start + test_len - 1
    val_start = test_start - val_len
    train_weeks = val_start - series.start
    if train_weeks < min_train or test_end > series.end:
        raise DataError(
            f"{series.country}: need >= {min_train} training + {val_len} "
            f"validation + {test_len} test weeks; have {len(series)} from "
            f"{format_week(series.start)} with test start "
            f"{format_week(test_start)}")
    return SplitPlan(train=(series.start, val_start - 1),
                     val=(val_start, test_start - 1),
                     test=(test_start, test_end))
