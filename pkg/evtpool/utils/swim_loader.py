"""Swim results ingest, threshold selection and time standardization.

Swim times are negated on the way in (``x = -time_s``) so that a larger value
is a faster swim; every model downstream works on that scale.
"""
import calendar
import math
import re
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DegenerateCovariateError,
    InsufficientDataError,
    MissingInputError,
    ParseError,
    ValidationError,
)
from .logger import get_logger, log_event

logger = get_logger('data')

CSV_COLUMNS = ['swimmer_id', 'event_id', 'time_s', 'date']
OPTIONAL_COLUMNS = ['nation']
TIME_PATTERN = re.compile(r'^\d+(\.\d{1,2})?$')
DEFAULT_CENSOR_S = 0.01
DEFAULT_N_EXCEED = 200


@dataclass(frozen=True)
class SwimRecord:
    """One observed swim"""
    swimmer_id: str
    event_id: str
    time_s: float
    date: date
    nation: str | None = None

    @property
    def x(self):
        return -self.time_s


@dataclass(frozen=True)
class SuitEpochs:
    """Half-open date intervals in which full-body suits were legal"""
    epoch1: tuple = (date(2008, 1, 1), date(2009, 1, 1))
    epoch2: tuple = (date(2009, 1, 1), date(2010, 1, 1))

    def __post_init__(self):
        (s1, e1), (s2, e2) = self.epoch1, self.epoch2
        if not (s1 < e1 <= s2 < e2):
            raise ValidationError("Suit epochs must be ordered and disjoint")

    @classmethod
    def from_config(cls, cfg):
        epoch1, epoch2 = cfg.epoch_dates()
        return cls(epoch1=epoch1, epoch2=epoch2)

    def edges_decimal(self):
        """[[start1, end1], [start2, end2]] in decimal years"""
        return np.array([[decimal_year(d) for d in self.epoch1],
                         [decimal_year(d) for d in self.epoch2]])

    def to_dict(self):
        return {'epoch1': [d.isoformat() for d in self.epoch1],
                'epoch2': [d.isoformat() for d in self.epoch2]}

    @classmethod
    def from_dict(cls, data):
        return cls(epoch1=tuple(date.fromisoformat(d) for d in data['epoch1']),
                   epoch2=tuple(date.fromisoformat(d) for d in data['epoch2']))


@dataclass(frozen=True)
class TimeScaler:
    """Affine map decimal year -> standardized time"""
    mean: float
    sd: float
    year_boundaries: tuple

    def __post_init__(self):
        if not self.sd > 0:
            raise DegenerateCovariateError("Time scaler needs a positive standard deviation")
        if any(b <= a for a, b in zip(self.year_boundaries, self.year_boundaries[1:])):
            raise ValidationError("Year boundaries must be strictly increasing")

    def standardize(self, years):
        return (np.asarray(years, dtype=float) - self.mean) / self.sd

    def to_decimal(self, t_std):
        return np.asarray(t_std, dtype=float) * self.sd + self.mean

    def date_to_std(self, d):
        return float(self.standardize(decimal_year(d)))

    @property
    def boundaries_std(self):
        return self.standardize(self.year_boundaries)

    @property
    def window_std(self):
        b = self.boundaries_std
        return float(b[0]), float(b[-1])

    def year_window_std(self, year):
        """Standardized [start, end) of a calendar year"""
        return float(self.standardize(year)), float(self.standardize(year + 1))

    def epochs_std(self, epochs):
        return self.standardize(epochs.edges_decimal())

    def to_dict(self):
        return {'mean': self.mean, 'sd': self.sd, 'year_boundaries': list(self.year_boundaries)}

    @classmethod
    def from_dict(cls, data):
        return cls(mean=float(data['mean']), sd=float(data['sd']),
                   year_boundaries=tuple(float(y) for y in data['year_boundaries']))


@dataclass(frozen=True)
class EventDataset:
    """Negated exceedances of one event above its threshold.

    ``t_std``, ``window`` and ``scaler`` are filled in by
    :func:`standardize_datasets`.
    """
    event_id: str
    threshold_u: float
    raw_threshold_u_prime: float
    u_L: float
    x: np.ndarray
    decimal_years: np.ndarray
    dates: tuple
    swimmer_ids: tuple
    nations: tuple = ()
    censor_s: float = DEFAULT_CENSOR_S
    n_exceed: int = DEFAULT_N_EXCEED
    t_std: np.ndarray | None = field(default=None, repr=False)
    window: tuple | None = None
    scaler: TimeScaler | None = None

    def __len__(self):
        return len(self.x)

    @property
    def points(self):
        t = self.t_std if self.t_std is not None else [None] * len(self.x)
        return list(zip(self.x.tolist(), list(t), self.dates))

    @property
    def record_index(self):
        """Index of the fastest swim; earliest date wins a tie"""
        order = sorted(range(len(self.x)), key=lambda i: (-self.x[i], self.dates[i], self.swimmer_ids[i]))
        return order[0]

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        return replace(
            self,
            x=self.x[idx],
            decimal_years=self.decimal_years[idx],
            dates=tuple(self.dates[i] for i in idx),
            swimmer_ids=tuple(self.swimmer_ids[i] for i in idx),
            nations=tuple(self.nations[i] for i in idx) if self.nations else (),
            t_std=None if self.t_std is None else self.t_std[idx],
        )


def decimal_year(d):
    """year + (day_of_year - 1) / days_in_year"""
    days = 366 if calendar.isleap(d.year) else 365
    return d.year + (d.timetuple().tm_yday - 1) / days


def date_from_decimal_year(y):
    year = int(math.floor(y))
    days = 366 if calendar.isleap(year) else 365
    offset = min(int(math.floor((y - year) * days + 1e-6)), days - 1)
    return date(year, 1, 1) + timedelta(days=offset)


def suit_indicator(d, epochs):
    """(in_epoch1, in_epoch2) for a calendar date"""
    in1 = epochs.epoch1[0] <= d < epochs.epoch1[1]
    in2 = epochs.epoch2[0] <= d < epochs.epoch2[1]
    return in1, in2


def suit_flags(t_std, edges_std):
    """Vectorized suit indicators on the standardized time axis"""
    t = np.asarray(t_std, dtype=float)
    f1 = (t >= edges_std[0][0]) & (t < edges_std[0][1])
    f2 = (t >= edges_std[1][0]) & (t < edges_std[1][1])
    return f1.astype(float), f2.astype(float)


def ingest_csv(path, event_ids=None):
    """Read a results CSV into deduplicated SwimRecords.

    Only the fastest swim per (swimmer_id, event_id) survives; output follows
    the order in which each key first appears.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty; a header row is required", line=1) from None
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise ParseError(f"Malformed row in {path}: {str(e)}",
                         line=int(match.group(1)) if match else None) from e

    columns = list(frame.columns)
    if columns[:4] != CSV_COLUMNS or any(c not in OPTIONAL_COLUMNS for c in columns[4:]):
        raise ParseError(f"Header must be {','.join(CSV_COLUMNS)}[,nation], got {','.join(columns)}", line=1)
    has_nation = 'nation' in columns
    known = set(event_ids) if event_ids is not None else None

    best = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        swimmer_id, event_id, time_text, date_text = (
            _cell(row.swimmer_id), _cell(row.event_id), _cell(row.time_s), _cell(row.date))
        if not swimmer_id or not event_id or not time_text or not date_text:
            raise ParseError(f"Missing field on line {line}", line=line)
        if not TIME_PATTERN.match(time_text):
            raise ParseError(f"time_s must be seconds with at most 2 decimals, got {time_text!r}", line=line)
        time_s = round(float(time_text), 2)
        if time_s <= 0:
            raise ValidationError(f"Non-positive time on line {line}", line=line)
        try:
            swim_date = date.fromisoformat(date_text)
        except ValueError:
            raise ParseError(f"Bad ISO date {date_text!r}", line=line) from None
        if known is not None and event_id not in known:
            raise ValidationError(f"Unknown event_id {event_id!r} on line {line}", line=line)
        nation = _cell(row.nation) or None if has_nation else None

        record = SwimRecord(swimmer_id, event_id, time_s, swim_date, nation)
        key = (swimmer_id, event_id)
        current = best.get(key)
        if current is None or (record.time_s, record.date) < (current.time_s, current.date):
            best[key] = record

    records = list(best.values())
    log_event(logger, 'ingest_csv', path=str(path), rows=len(frame), records=len(records))
    return records


def _cell(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ''
    return str(value).strip()


def build_event_dataset(records, event_id, n_exceed=DEFAULT_N_EXCEED, s=DEFAULT_CENSOR_S):
    """Keep the n_exceed fastest swims of one event and set its threshold"""
    swims = [r for r in records if r.event_id == event_id]
    if len(swims) < n_exceed:
        raise InsufficientDataError(
            f"{event_id} has {len(swims)} records, {n_exceed} required",
            event_id=event_id, available=len(swims), required=n_exceed,
        )
    # fastest first; ties by earlier date then swimmer_id
    swims.sort(key=lambda r: (r.time_s, r.date, r.swimmer_id))
    kept = swims[:n_exceed]
    u_prime = -kept[-1].time_s
    u = u_prime - s / 2
    return EventDataset(
        event_id=event_id,
        threshold_u=u,
        raw_threshold_u_prime=u_prime,
        u_L=math.log(-u),
        x=np.array([-r.time_s for r in kept]),
        decimal_years=np.array([decimal_year(r.date) for r in kept]),
        dates=tuple(r.date for r in kept),
        swimmer_ids=tuple(r.swimmer_id for r in kept),
        nations=tuple(r.nation for r in kept),
        censor_s=s,
        n_exceed=n_exceed,
    )


def build_datasets(records, event_ids, n_exceed=DEFAULT_N_EXCEED, s=DEFAULT_CENSOR_S):
    """One dataset per event present in the records, sorted by event_id"""
    present = {r.event_id for r in records}
    return [build_event_dataset(records, e, n_exceed, s) for e in sorted(event_ids) if e in present]


def fit_time_scaler(datasets, window=None):
    """Global scaler over all exceedance dates (population sd).

    ``window`` is an optional (start, end) pair of decimal years that fixes the
    year boundaries instead of deriving them from the data.
    """
    years = np.concatenate([d.decimal_years for d in datasets]) if datasets else np.array([])
    if years.size == 0:
        raise InsufficientDataError("No exceedance dates to standardize")
    sd = float(np.std(years))
    if sd == 0.0:
        raise DegenerateCovariateError("All exceedance dates are equal; time covariate is degenerate")
    return TimeScaler(mean=float(np.mean(years)), sd=sd, year_boundaries=_year_boundaries(years, window))


def _year_boundaries(years, window=None):
    if window is not None:
        lo, hi = window
    else:
        lo, hi = math.floor(float(np.min(years))), math.floor(float(np.max(years))) + 1
    return tuple(float(y) for y in range(int(math.floor(lo)), int(math.ceil(hi)) + 1))


def standardize_datasets(datasets, mode='global', window=None, scalers=None):
    """Attach standardized times to every dataset.

    ``mode='per_event'`` gives each event its own mean and sd but keeps the
    pooled year boundaries. Pre-fitted ``scalers`` (event_id -> TimeScaler) are
    reused as-is, which is how a saved model re-reads its data.
    """
    if scalers is None:
        pooled = fit_time_scaler(datasets, window)
        if mode == 'global':
            scalers = {d.event_id: pooled for d in datasets}
        elif mode == 'per_event':
            scalers = {}
            for d in datasets:
                sd = float(np.std(d.decimal_years))
                if sd == 0.0:
                    raise DegenerateCovariateError(f"{d.event_id}: all exceedance dates are equal")
                scalers[d.event_id] = TimeScaler(float(np.mean(d.decimal_years)), sd, pooled.year_boundaries)
        else:
            raise ValidationError(f"Unknown standardization mode {mode!r}")
    out = []
    for d in datasets:
        scaler = scalers[d.event_id]
        out.append(replace(d, t_std=scaler.standardize(d.decimal_years),
                           window=scaler.window_std, scaler=scaler))
    return out, scalers
