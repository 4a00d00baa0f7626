"""Heart-failure clinical records: CSV I/O, validation, binning and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

# CSV header names in canonical order; the label column is upper-case in the
# public distribution of the dataset.
COLUMNS = (
    "age", "anaemia", "creatinine_phosphokinase", "diabetes", "ejection_fraction",
    "high_blood_pressure", "platelets", "serum_creatinine", "serum_sodium", "sex",
    "smoking", "time", "DEATH_EVENT",
)
BINARY = ("anaemia", "diabetes", "high_blood_pressure", "sex", "smoking", "death_event")
SERIES_FEATURES = ("age", "serum_creatinine", "ejection_fraction")
DEFAULT_BIN_WIDTHS = {"age": 1.0, "serum_creatinine": 0.1, "ejection_fraction": 1.0}


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    age: float
    anaemia: int
    creatinine_phosphokinase: float
    diabetes: int
    ejection_fraction: float
    high_blood_pressure: int
    platelets: float
    serum_creatinine: float
    serum_sodium: float
    sex: int
    smoking: int
    time: float
    death_event: int

    def __post_init__(self):
        for name in BINARY:
            if getattr(self, name) not in (0, 1):
                raise DataError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise DataError(f"{f.name} is not finite: {v!r}")
        if not self.age > 0:
            raise DataError(f"age must be positive, got {self.age}")
        if not 0 < self.ejection_fraction <= 100:
            raise DataError(f"ejection_fraction must lie in (0, 100], got {self.ejection_fraction}")
        if not self.serum_creatinine > 0:
            raise DataError(f"serum_creatinine must be positive, got {self.serum_creatinine}")

    def as_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(PatientRecord))


def _field_for_column(col: str) -> str:
    return col.strip().lower()


def _parse(value: str, name: str, row: int):
    text = value.strip()
    if text == "":
        raise DataError(f"row {row}: empty cell in column {name!r}")
    try:
        num = float(text)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {text!r} in column {name!r}") from None
    if name in BINARY:
        if num not in (0.0, 1.0):
            raise DataError(f"row {row}: {name} must be 0 or 1, got {text!r}")
        return int(num)
    return num


def load_csv(path: Union[str, Path]) -> list[PatientRecord]:
    """Read and validate records; columns are matched by header name."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file has no header row") from None
        names = [_field_for_column(h) for h in header]
        missing = [f for f in FIELD_NAMES if f not in names]
        extra = [h for h, n in zip(header, names) if n not in FIELD_NAMES]
        if missing:
            raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
        if extra:
            raise SchemaError(f"{path}: unexpected column(s): {', '.join(extra)}")
        if len(set(names)) != len(names):
            raise SchemaError(f"{path}: duplicate column names")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise DataError(f"row {lineno}: expected {len(names)} cells, got {len(row)}")
            values = {n: _parse(v, n, lineno) for n, v in zip(names, row)}
            try:
                records.append(PatientRecord(**values))
            except DataError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
    if not records:
        raise EmptyDatasetError(f"{path}: no data rows")
    return records


def _fmt(v) -> str:
    if isinstance(v, int) or float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_csv(records: Sequence[PatientRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in FIELD_NAMES])
    return path


# ---------------------------------------------------------------- z-scores


@dataclass(frozen=True)
class ZScoreStats:
    mean: dict
    std: dict


def _get(rec, name):
    return rec[name] if isinstance(rec, Mapping) else getattr(rec, name)


def _rows(records) -> list[dict]:
    return [dict(r) if isinstance(r, Mapping) else asdict(r) for r in records]


def fit_zscore(records, features: Sequence[str]) -> ZScoreStats:
    """Population mean/std per non-binary feature."""
    if not records:
        raise EmptyDatasetError("cannot fit statistics on no records")
    mean, std = {}, {}
    for f in features:
        if f in BINARY:
            continue
        vals = np.array([_get(r, f) for r in records], dtype=np.float64)
        sd = float(vals.std())
        if sd == 0.0:
            raise DataError(f"feature {f!r} has zero variance")
        mean[f], std[f] = float(vals.mean()), sd
    return ZScoreStats(mean, std)


def apply_zscore(records, stats: ZScoreStats) -> list[dict]:
    out = _rows(records)
    for row in out:
        for f, mu in stats.mean.items():
            row[f] = (row[f] - mu) / stats.std[f]
    return out


def inverse_zscore(rows, stats: ZScoreStats) -> list[dict]:
    out = _rows(rows)
    for row in out:
        for f, mu in stats.mean.items():
            row[f] = row[f] * stats.std[f] + mu
    return out


def zscore_normalize(records, features: Sequence[str]) -> tuple[list[dict], ZScoreStats]:
    stats = fit_zscore(records, features)
    return apply_zscore(records, stats), stats


# ------------------------------------------------------------------ binning


@dataclass(frozen=True)
class FeatureSeries:
    feature: str
    bin_edges: tuple
    counts: tuple
    normalized: bool = False

    def __post_init__(self):
        if len(self.counts) != len(self.bin_edges) - 1:
            raise DataError("need exactly one count per bin")
        if any(c < 0 for c in self.counts):
            raise DataError("counts must be non-negative")

    @property
    def values(self) -> tuple:
        """Left edge of each bin, used as the x coordinate in plots."""
        return self.bin_edges[:-1]

    def __len__(self) -> int:
        return len(self.counts)


def aggregate_death_counts(records, feature: str, bin_width: Optional[float] = None,
                           start: Optional[float] = None, n_bins: Optional[int] = None) -> FeatureSeries:
    """Death events per fixed-width bin of ``feature``.

    Bins run from ``start`` (default: the feature minimum) upward until the
    maximum is covered, or for exactly ``n_bins`` bins when given.  All bins
    are half-open except the last, which is closed.  Values outside the bin
    range are not counted.
    """
    if not records:
        raise EmptyDatasetError("cannot aggregate an empty record list")
    if bin_width is None:
        bin_width = DEFAULT_BIN_WIDTHS.get(feature, 1.0)
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    vals = np.array([_get(r, feature) for r in records], dtype=np.float64)
    deaths = np.array([_get(r, "death_event") for r in records], dtype=np.int64)
    lo = float(vals.min()) if start is None else float(start)
    if n_bins is None:
        hi = float(vals.max())
        if lo > hi:
            raise ValueError(f"start {lo} lies above the feature maximum {hi}")
        # tolerance keeps decimal widths such as 0.1 from spawning an extra bin
        n_bins = max(1, int(math.ceil((hi - lo) / bin_width - 1e-9)))
    elif n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = tuple(round(lo + i * bin_width, 10) for i in range(n_bins + 1))
    pos = (vals - lo) / bin_width
    inside = (pos > -1e-9) & (pos < n_bins + 1e-9)
    idx = np.clip(np.floor(pos + 1e-9).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx[inside], weights=deaths[inside], minlength=n_bins).astype(np.int64)
    return FeatureSeries(feature, edges, tuple(int(c) for c in counts))


# ---------------------------------------------------------------- windowing


@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @property
    def span(self) -> float:
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / self.span

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.span + self.lo


@dataclass
class SupervisedWindows:
    lookback: int
    inputs: np.ndarray
    targets: np.ndarray
    scaler: MinMaxScaler
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "SupervisedWindows":
        idx = np.asarray(idx, dtype=np.int64)
        return SupervisedWindows(self.lookback, self.inputs[idx], self.targets[idx], self.scaler, self.index[idx])


def windowize(series: Union[FeatureSeries, Sequence[float]], lookback: int = 5,
              scaler: Optional[MinMaxScaler] = None) -> SupervisedWindows:
    """Sliding windows over min-max scaled counts with next-value targets.

    The scaler is fitted on the whole series unless one is supplied.
    ``index[j]`` is the series position that window ``j`` predicts.
    """
    counts = np.asarray(series.counts if isinstance(series, FeatureSeries) else series, dtype=np.float64)
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    n = len(counts)
    if n <= lookback:
        raise DataError(f"series of length {n} is too short for lookback {lookback}")
    if scaler is None:
        scaler = MinMaxScaler(float(counts.min()), float(counts.max()))
    z = scaler.transform(counts)
    k = n - lookback
    inputs = np.stack([z[j:j + lookback] for j in range(k)])[:, :, None]
    targets = z[lookback:].reshape(k, 1)
    return SupervisedWindows(lookback, inputs, targets, scaler, np.arange(lookback, n))


def train_test_split(items, test_fraction: float = 0.2, seed: int = 42):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    items = list(items)
    n = len(items)
    if n < 2:
        raise DataError(f"need at least 2 items to split, got {n}")
    n_test = int(math.floor(n * test_fraction + 0.5))
    n_test = min(max(n_test, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [x for i, x in enumerate(items) if i not in test_idx]
    test = [x for i, x in enumerate(items) if i in test_idx]
    return train, test


def split_indices(n: int, test_fraction: float = 0.2, seed: int = 42) -> tuple[np.ndarray, np.ndarray]:
    train, test = train_test_split(range(n), test_fraction, seed)
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


# ---------------------------------------------------------------- synthetic


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def generate_synthetic(n: int = 299, seed: int = 0) -> list[PatientRecord]:
    """Records with realistic marginals; death risk rises with serum
    creatinine and age and falls with ejection fraction."""
    if n < 10:
        raise ValueError("synthetic dataset needs n >= 10")
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.normal(61, 12, n)), 40, 95)
    ef = np.clip(np.round(rng.normal(38, 12, n)), 14, 80)
    sc = np.clip(np.round(rng.lognormal(np.log(1.2), 0.45, n), 1), 0.5, 9.4)
    cpk = np.clip(np.round(rng.lognormal(np.log(250), 1.0, n)), 23, 7861)
    platelets = np.clip(np.round(rng.normal(263000, 97000, n), 2), 25100, 850000)
    sodium = np.clip(np.round(rng.normal(136.6, 4.4, n)), 113, 148)
    follow = np.clip(np.round(rng.uniform(4, 285, n)), 4, 285)
    anaemia = (rng.random(n) < 0.43).astype(int)
    diabetes = (rng.random(n) < 0.42).astype(int)
    hbp = (rng.random(n) < 0.35).astype(int)
    sex = (rng.random(n) < 0.65).astype(int)
    smoking = (rng.random(n) < 0.32).astype(int)
    risk = -0.9 + 1.4 * (sc - 1.4) - 0.07 * (ef - 38) + 0.04 * (age - 61)
    death = (rng.random(n) < _logistic(risk)).astype(int)
    return [
        PatientRecord(
            age=float(age[i]), anaemia=int(anaemia[i]), creatinine_phosphokinase=float(cpk[i]),
            diabetes=int(diabetes[i]), ejection_fraction=float(ef[i]), high_blood_pressure=int(hbp[i]),
            platelets=float(platelets[i]), serum_creatinine=float(sc[i]), serum_sodium=float(sodium[i]),
            sex=int(sex[i]), smoking=int(smoking[i]), time=float(follow[i]), death_event=int(death[i]),
        )
        for i in range(n)
    ]
