"""Daily forcing ingestion, spin-up construction, subset splitting and flow groups."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

DEFAULT_COLUMNS = {"date": "date", "precip": "precip_mm", "pet": "pet_mm", "q_obs": "q_mm"}
MISSING_TOKENS = {"", "na", "nan", "null", "m", "-9999", "-999"}


class ForcingError(ValueError):
    """Base class for forcing-data problems."""


class MalformedRow(ForcingError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class NonConsecutiveDates(ForcingError):
    pass


class NegativeForcing(ForcingError):
    pass


class IncompleteFirstYear(ForcingError):
    pass


class TooFewYears(ForcingError):
    pass


class MissingObservations(ForcingError):
    pass


class Subset(enum.IntEnum):
    SPINUP = 0
    TRAIN = 1
    SELECT = 2
    TEST = 3


def water_year(date: dt.date) -> int:
    """Water year tag of a date (Oct 1 - Sep 30, named by the ending year)."""
    return date.year + 1 if date.month >= 10 else date.year


@dataclass(frozen=True)
class ForcingRecord:
    date: dt.date
    precip: float
    pet: float
    q_obs: float  # nan when missing


@dataclass(frozen=True, eq=False)
class ForcingSeries:
    """Gap-free daily forcing with water-year tags.

    The first ``spinup_len`` entries are synthetic spin-up copies; everything
    after that is the native record.
    """

    dates: np.ndarray  # datetime64[D]
    precip: np.ndarray
    pet: np.ndarray
    q_obs: np.ndarray
    water_year: np.ndarray
    spinup_len: int = 0

    def __post_init__(self):
        n = len(self.dates)
        for name in ("precip", "pet", "q_obs", "water_year"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        for arr in (self.dates, self.precip, self.pet, self.q_obs, self.water_year):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def native_len(self) -> int:
        return len(self) - self.spinup_len

    @property
    def q_missing(self) -> np.ndarray:
        return np.isnan(self.q_obs)

    @property
    def native_slice(self) -> slice:
        return slice(self.spinup_len, len(self))

    def record(self, i: int) -> ForcingRecord:
        return ForcingRecord(
            self.dates[i].astype(dt.date),
            float(self.precip[i]),
            float(self.pet[i]),
            float(self.q_obs[i]),
        )

    @property
    def records(self) -> list[ForcingRecord]:
        return [self.record(i) for i in range(len(self))]

    def native(self) -> ForcingSeries:
        """The series without its spin-up prefix."""
        s = self.native_slice
        return ForcingSeries(
            self.dates[s].copy(),
            self.precip[s].copy(),
            self.pet[s].copy(),
            self.q_obs[s].copy(),
            self.water_year[s].copy(),
            0,
        )

    def native_years(self) -> np.ndarray:
        return np.unique(self.water_year[self.native_slice])


def from_arrays(dates, precip, pet, q_obs=None) -> ForcingSeries:
    """Build a validated series from in-memory arrays."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    precip = np.asarray(precip, dtype=float)
    pet = np.asarray(pet, dtype=float)
    q = np.full(len(dates), np.nan) if q_obs is None else np.asarray(q_obs, dtype=float)
    if len(dates) == 0:
        raise ForcingError("empty forcing series")
    steps = np.diff(dates).astype(int)
    if np.any(steps != 1):
        i = int(np.argmax(steps != 1))
        raise NonConsecutiveDates(f"gap between {dates[i]} and {dates[i + 1]}")
    for name, arr in (("precip", precip), ("pet", pet)):
        if not np.all(np.isfinite(arr)):
            raise ForcingError(f"{name} contains missing or non-finite values")
        if np.any(arr < 0):
            i = int(np.argmax(arr < 0))
            raise NegativeForcing(f"{name} is negative on {dates[i]}")
    if np.any(q[~np.isnan(q)] < 0):
        raise NegativeForcing("observed streamflow is negative")
    wy = np.array([water_year(d) for d in dates.astype(dt.date)], dtype=np.int64)
    return ForcingSeries(dates, precip, pet, q, wy, 0)


def _parse_value(token: str, line: int, column: str, allow_missing: bool) -> float:
    if token.strip().lower() in MISSING_TOKENS:
        if allow_missing:
            return math.nan
        raise MalformedRow(line, f"missing value in column {column!r}")
    try:
        value = float(token)
    except ValueError:
        raise MalformedRow(line, f"cannot parse {token!r} in column {column!r}") from None
    if not allow_missing and not math.isfinite(value):
        raise MalformedRow(line, f"non-finite value in column {column!r}")
    return value


def load_forcing(path, column_map: dict | None = None, delimiter: str | None = None) -> ForcingSeries:
    """Read a delimited daily forcing file.

    Parameters
    ----------
    path : path-like
        Text file with a header row and one row per day. Leading lines
        starting with ``#`` are skipped.
    column_map : dict, optional
        Maps the logical names ``date``, ``precip``, ``pet``, ``q_obs`` to
        header names. Defaults to ``date, precip_mm, pet_mm, q_mm``.
    delimiter : str, optional
        Sniffed from the header when omitted.

    Returns
    -------
    ForcingSeries
        Missing streamflow values are kept as NaN; missing precipitation or
        PET raise :class:`MalformedRow`.
    """
    cols = {**DEFAULT_COLUMNS, **(column_map or {})}
    path = Path(path)
    with path.open(newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    lines = lines[skip:]
    if not lines:
        raise MalformedRow(skip + 1, "file is empty")
    if delimiter is None:
        header = lines[0]
        delimiter = next((d for d in (",", "\t", ";") if d in header), None)
    if delimiter is None:
        rows = [ln.split() for ln in lines]
    else:
        rows = list(csv.reader(lines, delimiter=delimiter))
    header = [h.strip() for h in rows[0]]
    index = {}
    for key, name in cols.items():
        if name not in header:
            raise MalformedRow(skip + 1, f"header lacks column {name!r}")
        index[key] = header.index(name)

    dates, precip, pet, q = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=skip + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(row)}")
        try:
            dates.append(dt.date.fromisoformat(row[index["date"]].strip()))
        except ValueError:
            raise MalformedRow(lineno, f"bad date {row[index['date']]!r}") from None
        precip.append(_parse_value(row[index["precip"]], lineno, cols["precip"], False))
        pet.append(_parse_value(row[index["pet"]], lineno, cols["pet"], False))
        q.append(_parse_value(row[index["q_obs"]], lineno, cols["q_obs"], True))
    if not dates:
        raise MalformedRow(skip + 2, "no data rows")
    return from_arrays(dates, precip, pet, q)


def build_spinup(series: ForcingSeries, repeats: int = 3) -> ForcingSeries:
    """Prepend ``repeats`` copies of the first water year.

    Spin-up dates are back-dated one day at a time from the first native date
    and tagged with the water years preceding the first one.
    """
    if repeats < 0:
        raise ValueError("repeats must be >= 0")
    base = series.native() if series.spinup_len else series
    if repeats == 0:
        return base
    first = base.dates[0].astype(dt.date)
    wy0 = base.water_year[0]
    n1 = int(np.sum(base.water_year == wy0))
    last = base.dates[n1 - 1].astype(dt.date)
    if (first.month, first.day) != (10, 1) or (last.month, last.day) != (9, 30):
        raise IncompleteFirstYear(f"water year {wy0} does not span Oct 1 - Sep 30 in the record")
    k = repeats * n1
    spin_dates = base.dates[0] - np.arange(k, 0, -1).astype("timedelta64[D]")
    spin_wy = np.repeat(np.arange(wy0 - repeats, wy0), n1)
    tile = lambda a: np.concatenate([np.tile(a[:n1], repeats), a])
    return ForcingSeries(
        np.concatenate([spin_dates, base.dates]),
        tile(base.precip),
        tile(base.pet),
        tile(base.q_obs),
        np.concatenate([spin_wy, base.water_year]),
        k,
    )


@dataclass(frozen=True, eq=False)
class SubsetMask:
    labels: np.ndarray  # Subset codes per timestep, spin-up included
    year_labels: dict = field(default_factory=dict)  # water year -> Subset

    @property
    def counts(self) -> dict[Subset, int]:
        return {s: int(np.sum(self.labels == s)) for s in Subset}

    def mask(self, subset: Subset) -> np.ndarray:
        return self.labels == subset

    @property
    def evaluation(self) -> np.ndarray:
        return self.labels != Subset.SPINUP


def _ks_matrix(cdfs: np.ndarray) -> np.ndarray:
    return np.abs(cdfs[:, None, :] - cdfs[None, :, :]).max(axis=-1)


@njit(cache=True)
def _swap_scores(sa, sb, sc, na, nb, nc, da, db):
    # KS triple for every swap of row i of da (leaving a) with row j of db (leaving b)
    n_i, n_j, n_g = da.shape[0], db.shape[0], sa.shape[0]
    mx = np.empty((n_i, n_j))
    tot = np.empty((n_i, n_j))
    for i in range(n_i):
        for j in range(n_j):
            ab = 0.0
            ac = 0.0
            bc = 0.0
            for k in range(n_g):
                d = db[j, k] - da[i, k]
                fa = (sa[k] + d) / na
                fb = (sb[k] - d) / nb
                fc = sc[k] / nc
                x = abs(fa - fb)
                if x > ab:
                    ab = x
                x = abs(fa - fc)
                if x > ac:
                    ac = x
                x = abs(fb - fc)
                if x > bc:
                    bc = x
            mx[i, j] = max(ab, ac, bc)
            tot[i, j] = ab + ac + bc
    return mx, tot


def _objective(sums: np.ndarray, sizes: np.ndarray) -> tuple[float, float]:
    ks = _ks_matrix(sums / sizes[:, None])
    iu = np.triu_indices(len(sizes), 1)
    return float(ks[iu].max()), float(ks[iu].sum())


def _better(cand, ref, tol=1e-12) -> bool:
    if cand[0] < ref[0] - tol:
        return True
    return abs(cand[0] - ref[0]) <= tol and cand[1] < ref[1] - tol


def split_quotas(n_years: int, ratio=(2, 1, 1)) -> tuple[int, int, int]:
    total = sum(ratio)
    n_sel = int(n_years * ratio[1] // total)
    n_test = int(n_years * ratio[2] // total)
    return n_years - n_sel - n_test, n_sel, n_test


def _stratum_quotas(strata: dict[int, list], quotas: tuple[int, int, int]) -> dict[int, list[int]]:
    # minority strata (leap years) take proportional floors, the largest absorbs the rest
    out = {}
    order = sorted(strata, key=lambda k: len(strata[k]))
    remaining = list(quotas)
    n_total = sum(quotas)
    for key in order[:-1]:
        k = len(strata[key])
        q_sel = k * quotas[1] // n_total
        q_test = k * quotas[2] // n_total
        q = [k - q_sel - q_test, q_sel, q_test]
        out[key] = q
        remaining = [r - x for r, x in zip(remaining, q)]
    out[order[-1]] = remaining
    return out


def _enumerate(strata, squotas):
    per_stratum = []
    for key, years in strata.items():
        q = squotas[key]
        options = []
        for sel in itertools.combinations(years, q[1]):
            rest = [y for y in years if y not in sel]
            for test in itertools.combinations(rest, q[2]):
                train = [y for y in rest if y not in test]
                options.append((train, list(sel), list(test)))
        per_stratum.append(options)
    for combo in itertools.product(*per_stratum):
        yield tuple(sum((c[i] for c in combo), []) for i in range(3))


def _n_assignments(strata, squotas) -> int:
    n = 1
    for key, years in strata.items():
        q = squotas[key]
        n *= math.comb(len(years), q[1]) * math.comb(len(years) - q[1], q[2])
    return n


def assign_years(
    year_flows: dict[int, np.ndarray], ratio=(2, 1, 1), seed: int = 0, exhaustive_limit: int = 5000
) -> dict[int, Subset]:
    """Assign whole water years to Train/Select/Test.

    Minimises the largest pairwise two-sample KS distance between the subset
    flow distributions (sum of distances breaks ties). Years are stratified by
    length so subset day counts stay proportional. Small problems are solved
    by enumeration, larger ones by seeded steepest-descent year swaps.
    """
    years = sorted(year_flows)
    quotas = split_quotas(len(years), ratio)
    if len(years) < 4 or min(quotas) < 1:
        raise TooFewYears(f"need at least 4 complete water years, got {len(years)}")

    grid = np.unique(np.concatenate([year_flows[y] for y in years]))
    cum = np.stack([np.searchsorted(np.sort(year_flows[y]), grid, side="right") for y in years]).astype(float)
    row = {y: i for i, y in enumerate(years)}
    lengths = {y: len(year_flows[y]) for y in years}
    strata: dict[int, list] = {}
    for y in years:
        strata.setdefault(lengths[y], []).append(y)
    squotas = _stratum_quotas(strata, quotas)

    def score(groups):
        sums = np.stack([cum[[row[y] for y in g]].sum(axis=0) for g in groups])
        sizes = np.array([sum(lengths[y] for y in g) for g in groups], dtype=float)
        return _objective(sums, sizes)

    if _n_assignments(strata, squotas) <= exhaustive_limit:
        best, best_score = None, (math.inf, math.inf)
        for groups in _enumerate(strata, squotas):
            s = score(groups)
            if s < best_score:
                best, best_score = groups, s
        return {y: Subset(i + 1) for i, g in enumerate(best) for y in g}

    rng = np.random.default_rng(seed)
    groups = [[], [], []]
    for key in sorted(strata):
        ys = list(rng.permutation(strata[key]))
        q = squotas[key]
        groups[0] += ys[: q[0]]
        groups[1] += ys[q[0] : q[0] + q[1]]
        groups[2] += ys[q[0] + q[1] :]
    groups = [[int(y) for y in g] for g in groups]
    sums = np.stack([cum[[row[y] for y in g]].sum(axis=0) for g in groups])
    sizes = np.array([sum(lengths[y] for y in g) for g in groups], dtype=float)
    current = _objective(sums, sizes)

    for _ in range(200):
        best_move, best_score = None, current
        for a, b in ((0, 1), (0, 2), (1, 2)):
            c = 3 - a - b
            for length in strata:
                ia = [y for y in groups[a] if lengths[y] == length]
                ib = [y for y in groups[b] if lengths[y] == length]
                if not ia or not ib:
                    continue
                da = cum[[row[y] for y in ia]]
                db = cum[[row[y] for y in ib]]
                mx, tot = _swap_scores(sums[a], sums[b], sums[c], sizes[a], sizes[b], sizes[c], da, db)
                flat = np.lexsort((tot.ravel(), mx.ravel()))[0]
                i, j = np.unravel_index(flat, mx.shape)
                cand = (float(mx[i, j]), float(tot[i, j]))
                if _better(cand, best_score):
                    best_move, best_score = (a, b, ia[i], ib[j], db[j] - da[i]), cand
        if best_move is None:
            break
        a, b, ya, yb, d = best_move
        groups[a][groups[a].index(ya)] = yb
        groups[b][groups[b].index(yb)] = ya
        sums[a] += d
        sums[b] -= d
        current = best_score
    return {y: Subset(i + 1) for i, g in enumerate(groups) for y in g}


def split_timesteps(series: ForcingSeries, ratio=(2, 1, 1), seed: int = 0) -> SubsetMask:
    """Year-block Train/Select/Test labels for every timestep (spin-up included)."""
    native = series.native_slice
    wy = series.water_year[native]
    q = series.q_obs[native]
    if np.any(np.isnan(q)):
        raise MissingObservations("splitting requires fully observed streamflow")
    dates = series.dates[native].astype(dt.date)
    if (dates[0].month, dates[0].day) != (10, 1) or (dates[-1].month, dates[-1].day) != (9, 30):
        raise ForcingError("splitting requires complete water years (Oct 1 - Sep 30)")
    year_flows = {int(y): q[wy == y] for y in np.unique(wy)}
    if len(year_flows) < 4:
        raise TooFewYears(f"need at least 4 complete water years, got {len(year_flows)}")
    year_labels = assign_years(year_flows, ratio, seed)
    labels = np.zeros(len(series), dtype=np.int8)
    lab_native = np.array([year_labels[int(y)] for y in wy], dtype=np.int8)
    labels[native] = lab_native
    labels.flags.writeable = False
    return SubsetMask(labels, year_labels)


@dataclass(frozen=True, eq=False)
class FlowGroupMask:
    group: np.ndarray  # 0 on spin-up, 1..n_groups elsewhere
    thresholds: np.ndarray  # upper bound of groups 1..n-1
    ranges: np.ndarray  # (n_groups, 2) min/max observed flow per group

    @property
    def n_groups(self) -> int:
        return len(self.ranges)

    def mask(self, k: int) -> np.ndarray:
        return self.group == k


def flow_groups(series: ForcingSeries, mask: SubsetMask | None = None, n_groups: int = 5) -> FlowGroupMask:
    """Equal-count flow-magnitude groups from the flow-duration curve.

    Ties in observed flow are broken by time index.
    """
    evaluate = np.arange(len(series)) >= series.spinup_len
    if mask is not None:
        evaluate &= mask.evaluation
    idx = np.flatnonzero(evaluate)
    q = series.q_obs[idx]
    if np.any(np.isnan(q)):
        raise MissingObservations("flow groups require observed streamflow on every evaluated step")
    order = idx[np.argsort(q, kind="stable")]
    group = np.zeros(len(series), dtype=np.int8)
    ranges = np.empty((n_groups, 2))
    for k, members in enumerate(np.array_split(order, n_groups), start=1):
        group[members] = k
        ranges[k - 1] = series.q_obs[members].min(), series.q_obs[members].max()
    group.flags.writeable = False
    return FlowGroupMask(group, ranges[:-1, 1].copy(), ranges)


def write_labels(path, labels, spinup_len: int = 0) -> None:
    """One label per input row; spin-up rows are not written."""
    names = {int(s): s.name.capitalize() for s in Subset}
    vals = np.asarray(labels)[spinup_len:]
    Path(path).write_text("".join(f"{names.get(int(v), str(int(v)))}\n" for v in vals))


def read_labels(path) -> np.ndarray:
    lookup = {s.name.capitalize(): int(s) for s in Subset}
    out = []
    for token in Path(path).read_text().split():
        out.append(lookup[token] if token in lookup else int(token))
    return np.array(out, dtype=np.int8)
