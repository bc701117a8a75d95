"""Multi-environment trial data: loading, filtering, imputation, features and folds.

Records are stored column-wise (one numpy array per field) because every
downstream consumer works on whole columns. Marker matrices are ``int8`` with
:data:`MISSING` as the missing-value sentinel.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

MISSING = np.int8(-128)
N_DAYS = 140
FIRST_DAY = -7
TRIALS_HEADER = ["genotype_id", "environment_id", "year", "replicate", "yield_mg_ha"]


class DataError(ValueError):
    """Raised for invalid or unusable input data."""


class ParseError(DataError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TrialRecord:
    genotype_id: str
    environment_id: str
    year: int
    replicate_index: int
    yield_: float


@dataclass
class GenotypeTable:
    ids: list[str]
    markers: np.ndarray  # (n_g, d_g) int8, MISSING where absent
    marker_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.markers = np.asarray(self.markers, dtype=np.int8)
        if not self.marker_names:
            self.marker_names = [f"m{k + 1}" for k in range(self.markers.shape[1])]
        if self.markers.shape != (len(self.ids), len(self.marker_names)):
            raise DataError("marker matrix shape does not match ids/marker names")

    @property
    def index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.ids)}

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        """Marker rows for ``ids`` as float64, in the given order."""
        idx = self.index
        try:
            take = [idx[g] for g in ids]
        except KeyError as exc:
            raise DataError(f"genotype {exc.args[0]!r} has no marker row") from None
        out = self.markers[take].astype(np.float64)
        if (self.markers[take] == MISSING).any():
            raise DataError("markers contain missing values; impute first")
        return out

    def subset(self, ids: Sequence[str]) -> "GenotypeTable":
        idx = self.index
        take = [idx[g] for g in ids]
        return GenotypeTable(list(ids), self.markers[take], list(self.marker_names))


@dataclass
class EnvironmentTable:
    """Per-environment features.

    ``weather`` is (n_e, 140, n_weather) with NaN for missing days, ``soil``
    (n_e, n_soil), ``management`` (n_e, n_mgmt) and ``coords`` (n_e, 2) as
    (lat, lon). ``env_vector`` is filled by :func:`build_env_vectors`.
    """

    ids: list[str]
    weather: np.ndarray
    soil: np.ndarray
    management: np.ndarray
    coords: np.ndarray
    env_vector: np.ndarray | None = None

    @property
    def index(self) -> dict[str, int]:
        return {e: j for j, e in enumerate(self.ids)}

    @property
    def d_e(self) -> int:
        return self.weather.shape[2] + self.soil.shape[1] + self.management.shape[1]

    def has_weather(self) -> np.ndarray:
        return ~np.isnan(self.weather).all(axis=(1, 2))

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        if self.env_vector is None:
            raise DataError("environment vectors not built; call build_env_vectors")
        idx = self.index
        try:
            take = [idx[e] for e in ids]
        except KeyError as exc:
            raise DataError(f"environment {exc.args[0]!r} has no feature row") from None
        return self.env_vector[take]

    def subset(self, ids: Sequence[str]) -> "EnvironmentTable":
        idx = self.index
        take = [idx[e] for e in ids]
        vec = None if self.env_vector is None else self.env_vector[take]
        return EnvironmentTable(
            list(ids),
            self.weather[take],
            self.soil[take],
            self.management[take],
            self.coords[take],
            vec,
        )


@dataclass
class Dataset:
    genotype_id: np.ndarray  # (n_s,) object
    environment_id: np.ndarray
    year: np.ndarray  # int64
    replicate: np.ndarray  # int64
    y: np.ndarray  # float64, NaN = missing
    genotypes: GenotypeTable
    environments: EnvironmentTable

    def __post_init__(self):
        self.genotype_id = np.asarray(self.genotype_id, dtype=object)
        self.environment_id = np.asarray(self.environment_id, dtype=object)
        self.year = np.asarray(self.year, dtype=np.int64)
        self.replicate = np.asarray(self.replicate, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)

    @property
    def n_s(self) -> int:
        return len(self.y)

    def records(self) -> Iterator[TrialRecord]:
        for g, e, yr, k, y in zip(
            self.genotype_id, self.environment_id, self.year, self.replicate, self.y
        ):
            yield TrialRecord(g, e, int(yr), int(k), float(y))

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask)
        return replace(
            self,
            genotype_id=self.genotype_id[mask],
            environment_id=self.environment_id[mask],
            year=self.year[mask],
            replicate=self.replicate[mask],
            y=self.y[mask],
        )

    def genotype_order(self) -> list[str]:
        """Genotypes present in the records, in genotype-table order."""
        present = set(self.genotype_id)
        known = [g for g in self.genotypes.ids if g in present]
        extra = sorted(present.difference(known))
        return known + extra

    def environment_order(self) -> list[str]:
        present = set(self.environment_id)
        known = [e for e in self.environments.ids if e in present]
        extra = sorted(present.difference(known))
        return known + extra

    def cell_stats(self, genotypes: Sequence[str] | None = None, environments: Sequence[str] | None = None):
        """Per-cell replicate count, sum and sum of squares on a dense grid."""
        gs = list(genotypes) if genotypes is not None else self.genotype_order()
        es = list(environments) if environments is not None else self.environment_order()
        gi = _codes(self.genotype_id, gs)
        ej = _codes(self.environment_id, es)
        shape = (len(gs), len(es))
        cnt = np.zeros(shape)
        s1 = np.zeros(shape)
        s2 = np.zeros(shape)
        np.add.at(cnt, (gi, ej), 1.0)
        np.add.at(s1, (gi, ej), self.y)
        np.add.at(s2, (gi, ej), self.y**2)
        return gs, es, cnt, s1, s2


def _codes(values: np.ndarray, order: Sequence[str]) -> np.ndarray:
    lookup = {v: i for i, v in enumerate(order)}
    try:
        return np.fromiter((lookup[v] for v in values), dtype=np.int64, count=len(values))
    except KeyError as exc:
        raise DataError(f"identifier {exc.args[0]!r} not in the given order") from None


# ---------------------------------------------------------------- loading


def _read_rows(path: Path, expected: list[str] | None, prefix: str | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if expected is not None and header != expected:
            raise ParseError(path, 1, f"malformed header {header!r}, expected {expected!r}")
        if prefix is not None and (not header or header[0] != prefix):
            raise ParseError(path, 1, f"malformed header, first column must be {prefix!r}")
        rows = [(reader.line_num, row) for row in reader if row]
    return header, rows


def _num(path, line, text, what, integer=False):
    if text == "":
        return math.nan
    try:
        return int(text) if integer else float(text)
    except ValueError:
        raise ParseError(path, line, f"non-numeric {what} {text!r}") from None


def load_trials(path) -> tuple[np.ndarray, ...]:
    path = Path(path)
    _, rows = _read_rows(path, TRIALS_HEADER)
    seen: dict[tuple, int] = {}
    cols: tuple[list, ...] = ([], [], [], [], [])
    for line, row in rows:
        if len(row) != 5:
            raise ParseError(path, line, f"expected 5 fields, got {len(row)}")
        g, e, yr, k, y = row
        if not g or not e:
            raise ParseError(path, line, "empty identifier")
        yr_v = _num(path, line, yr, "year", integer=True)
        k_v = _num(path, line, k, "replicate", integer=True)
        y_v = _num(path, line, y, "yield")
        if isinstance(yr_v, float) or isinstance(k_v, float):
            raise ParseError(path, line, "missing year or replicate")
        if k_v < 1:
            raise ParseError(path, line, f"replicate index must be >= 1, got {k_v}")
        if not math.isnan(y_v) and (not math.isfinite(y_v) or y_v < 0):
            raise ParseError(path, line, f"yield must be finite and non-negative, got {y}")
        key = (g, e, k_v)
        if key in seen:
            raise ParseError(path, line, f"duplicate key {key} (first on line {seen[key]})")
        seen[key] = line
        for c, v in zip(cols, (g, e, yr_v, k_v, y_v)):
            c.append(v)
    return tuple(np.array(c, dtype=t) for c, t in zip(cols, (object, object, np.int64, np.int64, np.float64)))


def load_markers(path) -> GenotypeTable:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    if not header or header[0] != "genotype_id" or len(header) < 2:
        raise ParseError(path, 1, "malformed header, expected genotype_id,m1,...")
    frame = pd.read_csv(
        path, dtype={"genotype_id": str}, keep_default_na=False, na_values=[""], low_memory=False
    )
    vals = frame.iloc[:, 1:]
    bad = vals.apply(lambda c: pd.to_numeric(c, errors="coerce")).isna() & vals.notna()
    if bad.to_numpy().any():
        r = int(np.argwhere(bad.to_numpy().any(axis=1))[0, 0])
        raise ParseError(path, r + 2, "non-numeric marker value")
    arr = vals.apply(pd.to_numeric).to_numpy(dtype=np.float64)
    ok = np.isnan(arr) | np.isin(arr, (-1.0, 0.0, 1.0))
    if not ok.all():
        r = int(np.argwhere(~ok.all(axis=1))[0, 0])
        raise ParseError(path, r + 2, "marker values must be -1, 0, 1 or empty")
    ids = frame["genotype_id"].tolist()
    if len(set(ids)) != len(ids):
        raise ParseError(path, None, "duplicate genotype_id in markers")
    markers = np.where(np.isnan(arr), MISSING, np.nan_to_num(arr)).astype(np.int8)
    return GenotypeTable(ids, markers, header[1:])


def load_environments(weather_path, soil_path, management_path) -> EnvironmentTable:
    weather_path, soil_path, management_path = map(Path, (weather_path, soil_path, management_path))
    wh, wrows = _read_rows(weather_path, None, prefix="environment_id")
    if len(wh) < 3 or wh[1] != "day_index":
        raise ParseError(weather_path, 1, "malformed header, expected environment_id,day_index,f1,...")
    sh, srows = _read_rows(soil_path, None, prefix="environment_id")
    if sh[1:3] != ["lat", "lon"]:
        raise ParseError(soil_path, 1, "malformed header, expected environment_id,lat,lon,s1,...")
    mh, mrows = _read_rows(management_path, None, prefix="environment_id")

    ids: list[str] = []
    for rows in (srows, mrows, wrows):
        for _, row in rows:
            if row[0] not in ids:
                ids.append(row[0])
    idx = {e: j for j, e in enumerate(ids)}
    n_e, n_w = len(ids), len(wh) - 2
    weather = np.full((n_e, N_DAYS, n_w), np.nan)
    soil = np.full((n_e, len(sh) - 3), np.nan)
    coords = np.full((n_e, 2), np.nan)
    mgmt = np.full((n_e, len(mh) - 1), np.nan)

    for line, row in wrows:
        if len(row) != len(wh):
            raise ParseError(weather_path, line, f"expected {len(wh)} fields, got {len(row)}")
        day = _num(weather_path, line, row[1], "day_index", integer=True)
        if isinstance(day, float) or not FIRST_DAY <= day < FIRST_DAY + N_DAYS:
            raise ParseError(weather_path, line, f"day_index out of range: {row[1]!r}")
        weather[idx[row[0]], day - FIRST_DAY] = [_num(weather_path, line, t, "weather value") for t in row[2:]]
    for line, row in srows:
        if len(row) != len(sh):
            raise ParseError(soil_path, line, f"expected {len(sh)} fields, got {len(row)}")
        vals = [_num(soil_path, line, t, "soil value") for t in row[1:]]
        coords[idx[row[0]]] = vals[:2]
        soil[idx[row[0]]] = vals[2:]
    for line, row in mrows:
        if len(row) != len(mh):
            raise ParseError(management_path, line, f"expected {len(mh)} fields, got {len(row)}")
        mgmt[idx[row[0]]] = [_num(management_path, line, t, "management value") for t in row[1:]]
    return EnvironmentTable(ids, weather, soil, mgmt, coords)


def load_dataset(trials_path, markers_path, weather_path, soil_path, management_path) -> Dataset:
    """Read the five interchange CSVs into a raw (unfiltered) Dataset."""
    g, e, yr, k, y = load_trials(trials_path)
    return Dataset(g, e, yr, k, y, load_markers(markers_path),
                   load_environments(weather_path, soil_path, management_path))


# ---------------------------------------------------------------- writing


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_trials(path, d: Dataset) -> Path:
    return write_csv(path, TRIALS_HEADER, zip(d.genotype_id, d.environment_id, d.year, d.replicate, d.y))


def write_markers(path, g: GenotypeTable) -> Path:
    rows = (
        [gid] + ["" if v == MISSING else int(v) for v in row]
        for gid, row in zip(g.ids, g.markers)
    )
    return write_csv(path, ["genotype_id"] + list(g.marker_names), rows)


def write_environments(directory, e: EnvironmentTable) -> list[Path]:
    directory = Path(directory)
    n_w, n_s, n_m = e.weather.shape[2], e.soil.shape[1], e.management.shape[1]
    wrows = (
        [eid, t + FIRST_DAY] + list(e.weather[j, t])
        for j, eid in enumerate(e.ids)
        for t in range(N_DAYS)
        if not np.isnan(e.weather[j, t]).all()
    )
    return [
        write_csv(directory / "weather.csv", ["environment_id", "day_index"] + [f"f{k + 1}" for k in range(n_w)], wrows),
        write_csv(
            directory / "soil.csv",
            ["environment_id", "lat", "lon"] + [f"s{k + 1}" for k in range(n_s)],
            ([eid] + list(e.coords[j]) + list(e.soil[j]) for j, eid in enumerate(e.ids)),
        ),
        write_csv(
            directory / "management.csv",
            ["environment_id"] + [f"g{k + 1}" for k in range(n_m)],
            ([eid] + list(e.management[j]) for j, eid in enumerate(e.ids)),
        ),
    ]


def write_dataset(directory, d: Dataset, trials_name: str = "trials.csv") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_trials(directory / trials_name, d), write_markers(directory / "markers.csv", d.genotypes)] + write_environments(
        directory, d.environments
    )


# ---------------------------------------------------------------- filtering


def filter_dataset(d: Dataset) -> tuple[Dataset, dict[str, int]]:
    """Drop records with missing yield, unknown genotypes, or weatherless environments.

    Environments without weather are also removed from the environment table.
    Returns the filtered dataset and removal counts by cause.
    """
    has_y = ~np.isnan(d.y)
    known_g = set(d.genotypes.ids)
    has_g = np.fromiter((g in known_g for g in d.genotype_id), bool, count=d.n_s)
    weathered = {e for e, ok in zip(d.environments.ids, d.environments.has_weather()) if ok}
    has_w = np.fromiter((e in weathered for e in d.environment_id), bool, count=d.n_s)
    report = {
        "missing_yield": int((~has_y).sum()),
        "missing_markers": int((has_y & ~has_g).sum()),
        "missing_weather": int((has_y & has_g & ~has_w).sum()),
    }
    keep = has_y & has_g & has_w
    if not keep.any():
        raise DataError("no samples survive filtering")
    env = d.environments.subset([e for e in d.environments.ids if e in weathered])
    out = replace(d.subset(keep), environments=env)
    report["records_kept"] = out.n_s
    return out, report


def filter_markers(
    g: GenotypeTable,
    maf_min: float = 0.01,
    max_missing: float = 0.10,
    target_count: int = 20000,
    seed: int = 0,
) -> GenotypeTable:
    """Drop rare or sparse markers, then downsample to ``target_count`` columns.

    Minor allele frequency counts -1 as two copies of one allele, 1 as two of
    the other, 0 as one of each.
    """
    m = g.markers
    miss = m == MISSING
    frac_missing = miss.mean(axis=0)
    obs = (~miss).sum(axis=0)
    alt = np.where(miss, 0, m.astype(np.int64) + 1).sum(axis=0)  # copies of the "1" allele
    with np.errstate(invalid="ignore", divide="ignore"):
        p = alt / (2.0 * obs)
    maf = np.minimum(p, 1.0 - p)
    keep = (obs > 0) & (frac_missing <= min(max_missing, 0.30)) & (maf >= maf_min)
    cols = np.flatnonzero(keep)
    if cols.size == 0:
        raise DataError("no markers survive filtering")
    if cols.size > target_count:
        rng = np.random.default_rng(seed)
        cols = np.sort(rng.choice(cols, size=target_count, replace=False))
    return GenotypeTable(list(g.ids), m[:, cols], [g.marker_names[c] for c in cols])


def _column_mode(values: np.ndarray) -> float:
    uniq, counts = np.unique(values, return_counts=True)
    return uniq[np.argmax(counts)]  # unique() sorts, argmax takes the first max: smallest value wins ties


def impute_markers(g: GenotypeTable) -> GenotypeTable:
    """Fill missing markers with the column mode (ties go to the smaller value)."""
    m = g.markers.copy()
    miss = m == MISSING
    for c in np.flatnonzero(miss.any(axis=0)):
        col = m[:, c]
        present = col[~miss[:, c]]
        if present.size == 0:
            raise DataError(f"marker column {g.marker_names[c]!r} is entirely missing")
        col[miss[:, c]] = _column_mode(present)
    return GenotypeTable(list(g.ids), m, list(g.marker_names))


def interpolate_series(v: np.ndarray) -> np.ndarray:
    """Linear fill of interior gaps, nearest-value fill at the ends."""
    v = np.asarray(v, dtype=np.float64)
    ok = ~np.isnan(v)
    if ok.all() or not ok.any():
        return v.copy()
    t = np.arange(v.size)
    # np.interp clamps outside the observed range, which is the nearest-value fill.
    return np.interp(t, t[ok], v[ok])


def impute_environment(e: EnvironmentTable, donors: Sequence[str] | None = None) -> EnvironmentTable:
    """Impute weather gaps, soil (nearest donor in space) and management (mode).

    Environments with no weather at all are removed. ``donors`` restricts the
    soil donor pool (e.g. to training environments); default is every
    environment with a complete soil row.
    """
    keep = e.has_weather()
    dropped = [eid for eid, k in zip(e.ids, keep) if not k]
    if dropped:
        log.info("removing %d environments without weather: %s", len(dropped), dropped)
    e = e.subset([eid for eid, k in zip(e.ids, keep) if k])

    weather = e.weather.copy()
    for j in range(weather.shape[0]):
        for f in range(weather.shape[2]):
            weather[j, :, f] = interpolate_series(weather[j, :, f])
    hole = np.isnan(weather)
    if hole.any():
        fill = np.nanmean(weather, axis=0)
        weather = np.where(hole, fill[None], weather)

    soil = e.soil.copy()
    missing_rows = np.isnan(soil).any(axis=1)
    if missing_rows.any():
        pool = set(donors) if donors is not None else set(e.ids)
        donor_idx = [j for j, eid in enumerate(e.ids) if eid in pool and not np.isnan(e.soil[j]).all()
                     and not np.isnan(e.coords[j]).any()]
        if not donor_idx:
            raise DataError("soil imputation has no donor environments")
        for j in np.flatnonzero(missing_rows):
            if np.isnan(e.coords[j]).any():
                raise DataError(f"environment {e.ids[j]!r} has missing soil and no coordinates")
            for c in np.flatnonzero(np.isnan(soil[j])):
                cands = [k for k in donor_idx if k != j and not np.isnan(e.soil[k, c])]
                if not cands:
                    raise DataError("soil imputation has no donor environments")
                dist = [float(np.hypot(*(e.coords[k] - e.coords[j]))) for k in cands]
                best = min(zip(dist, [e.ids[k] for k in cands], cands))[2]
                soil[j, c] = e.soil[best, c]

    mgmt = e.management.copy()
    for c in range(mgmt.shape[1]):
        col = mgmt[:, c]
        miss = np.isnan(col)
        if miss.any():
            if miss.all():
                raise DataError(f"management column {c + 1} is entirely missing")
            col[miss] = _column_mode(col[~miss])
    return EnvironmentTable(list(e.ids), weather, soil, mgmt, e.coords.copy())


@dataclass(frozen=True)
class EnvStats:
    mean: np.ndarray
    sd: np.ndarray


def raw_env_features(e: EnvironmentTable) -> np.ndarray:
    """Season-mean weather, then soil, then management: (n_e, d_e)."""
    if np.isnan(e.weather).any() or np.isnan(e.soil).any() or np.isnan(e.management).any():
        raise DataError("environment features contain missing values; impute first")
    return np.hstack([e.weather.mean(axis=1), e.soil, e.management])


def build_env_vectors(e: EnvironmentTable, stats: EnvStats | None = None) -> tuple[EnvironmentTable, EnvStats]:
    """Standardized environment vectors; pass training ``stats`` for test environments."""
    raw = raw_env_features(e)
    if stats is None:
        mean = raw.mean(axis=0)
        sd = raw.std(axis=0)
        if (sd == 0).any():
            log.warning("zero-variance environment features %s mapped to 0", np.flatnonzero(sd == 0).tolist())
        stats = EnvStats(mean, sd)
    safe = np.where(stats.sd > 0, stats.sd, 1.0)
    vec = np.where(stats.sd > 0, (raw - stats.mean) / safe, 0.0)
    return replace(e, env_vector=vec), stats


# ---------------------------------------------------------------- folds and scenarios


@dataclass(frozen=True)
class FoldSpec:
    folds: list[tuple[int, frozenset]]
    tuning_fold_index: int

    def __len__(self) -> int:
        return len(self.folds)

    def train_mask(self, d: Dataset, k: int) -> np.ndarray:
        """Records used to fit fold ``k``: neither holdout year nor holdout genotype."""
        year, geno = self.folds[k]
        in_g = np.fromiter((g in geno for g in d.genotype_id), bool, count=d.n_s)
        return (d.year != year) & ~in_g

    def eval_mask(self, d: Dataset, k: int, target: str) -> np.ndarray:
        """Validation records for a target: y_g, y_e, or y_ge/yield (intersection)."""
        year, geno = self.folds[k]
        in_g = np.fromiter((g in geno for g in d.genotype_id), bool, count=d.n_s)
        in_y = d.year == year
        if target == "y_g":
            return in_g & ~in_y
        if target == "y_e":
            return in_y & ~in_g
        if target in ("y_ge", "yield"):
            return in_y & in_g
        raise ValueError(f"unknown target {target!r}")


def make_cv_folds(d: Dataset, seed: int, n_folds: int = 8, tuning_year: int = 2021) -> FoldSpec:
    """One fold per training year plus a disjoint 1/n_folds slice of genotypes each."""
    years = sorted(set(int(y) for y in d.year))
    if len(years) < n_folds:
        raise DataError(f"need {n_folds} distinct years for cross-validation, found {len(years)}")
    years = years[-n_folds:]
    genos = sorted(set(d.genotype_id))
    rng = np.random.default_rng(seed)
    perm = [genos[i] for i in rng.permutation(len(genos))]
    groups = np.array_split(np.arange(len(perm)), n_folds)
    folds = [(yr, frozenset(perm[i] for i in grp)) for yr, grp in zip(years, groups)]
    tune = years.index(tuning_year) if tuning_year in years else n_folds - 1
    return FoldSpec(folds, tune)


@dataclass(frozen=True)
class ScenarioPartition:
    nE: np.ndarray
    nGE: np.ndarray


def split_test_scenarios(train: Dataset, test: Dataset) -> ScenarioPartition:
    train_envs = set(train.environment_id)
    clash = [e for e in set(test.environment_id) if e in train_envs]
    if clash:
        raise DataError(f"test environments also occur in training: {sorted(clash)[:5]}")
    known = set(train.genotype_id)
    is_known = np.fromiter((g in known for g in test.genotype_id), bool, count=test.n_s)
    return ScenarioPartition(np.flatnonzero(is_known), np.flatnonzero(~is_known))


def split_by_year(d: Dataset, test_year: int) -> tuple[Dataset, Dataset]:
    test = d.year == test_year
    return d.subset(~test), d.subset(test)


def prepare(d: Dataset, *, maf_min=0.01, max_missing=0.10, target_count=20000, seed=0) -> tuple[Dataset, dict]:
    """filter -> marker QC/imputation -> environment imputation. Env vectors are built separately."""
    d, report = filter_dataset(d)
    g = impute_markers(filter_markers(d.genotypes, maf_min, max_missing, target_count, seed))
    e = impute_environment(d.environments)
    return replace(d, genotypes=g, environments=e), report
