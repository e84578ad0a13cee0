"""Trip CSV parsing, station registry and half-hour traffic aggregation.

Timestamps in the public trip files carry no zone.  They are read as a
uniform clock and stored as integer seconds since 1970-01-01 without any
shift; only bin membership matters downstream.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import zipfile
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO, overload

import numpy as np

from . import kernels
from .errors import ConsistencyError, IngestError, ParameterError

BIN_SECONDS = 1800

REQUIRED_COLUMNS = (
    "started_at",
    "ended_at",
    "start_station_id",
    "end_station_id",
    "start_lat",
    "start_lng",
    "end_lat",
    "end_lng",
)
TRIP_COLUMNS = (
    "ride_id",
    "rideable_type",
    "started_at",
    "ended_at",
    "start_station_name",
    "start_station_id",
    "end_station_name",
    "end_station_id",
    "start_lat",
    "start_lng",
    "end_lat",
    "end_lng",
    "member_casual",
)


def to_unix(value: int | str | dt.datetime) -> int:
    """Seconds since the epoch for an int, ``datetime`` or ISO-like string.

    Naive datetimes and zone-less strings are taken at face value.
    """
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        value = dt.datetime.fromisoformat(value.strip())
    if isinstance(value, dt.datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=dt.timezone.utc)
        return int(value.timestamp())
    raise TypeError(f"cannot interpret {value!r} as a timestamp")


def format_unix(seconds: int) -> str:
    return dt.datetime.fromtimestamp(int(seconds), dt.timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


@dataclass(frozen=True, slots=True)
class TripRecord:
    started_at: int
    ended_at: int
    start_station_id: str
    end_station_id: str
    start_lat: float
    start_lng: float
    end_lat: float
    end_lng: float
    start_station_name: str = ""
    end_station_name: str = ""


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped_malformed: int = 0
    rows_dropped_missing_station: int = 0
    rows_dropped_negative_duration: int = 0

    @property
    def rows_dropped(self) -> int:
        return (
            self.rows_dropped_malformed
            + self.rows_dropped_missing_station
            + self.rows_dropped_negative_duration
        )

    def is_balanced(self) -> bool:
        return self.rows_read == self.rows_kept + self.rows_dropped

    def as_dict(self) -> dict[str, int]:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "rows_dropped_malformed": self.rows_dropped_malformed,
            "rows_dropped_missing_station": self.rows_dropped_missing_station,
            "rows_dropped_negative_duration": self.rows_dropped_negative_duration,
        }


class TripTable(Sequence[TripRecord]):
    """Column-oriented, read-only sequence of :class:`TripRecord`.

    Millions of rides are held as numpy columns; indexing materialises a
    record on demand.
    """

    def __init__(
        self,
        started_at: np.ndarray,
        ended_at: np.ndarray,
        start_station_id: Sequence[str],
        end_station_id: Sequence[str],
        start_lat: np.ndarray,
        start_lng: np.ndarray,
        end_lat: np.ndarray,
        end_lng: np.ndarray,
        start_station_name: Sequence[str] | None = None,
        end_station_name: Sequence[str] | None = None,
    ) -> None:
        n = len(started_at)
        self.started_at = np.asarray(started_at, dtype=np.int64)
        self.ended_at = np.asarray(ended_at, dtype=np.int64)
        self.start_station_id = list(start_station_id)
        self.end_station_id = list(end_station_id)
        self.start_lat = np.asarray(start_lat, dtype=np.float64)
        self.start_lng = np.asarray(start_lng, dtype=np.float64)
        self.end_lat = np.asarray(end_lat, dtype=np.float64)
        self.end_lng = np.asarray(end_lng, dtype=np.float64)
        self.start_station_name = list(start_station_name) if start_station_name is not None else [""] * n
        self.end_station_name = list(end_station_name) if end_station_name is not None else [""] * n
        for col in (self.ended_at, self.start_station_id, self.end_station_id, self.start_lat,
                    self.start_lng, self.end_lat, self.end_lng, self.start_station_name,
                    self.end_station_name):
            if len(col) != n:
                raise ValueError("trip columns have unequal lengths")
        for arr in (self.started_at, self.ended_at, self.start_lat, self.start_lng,
                    self.end_lat, self.end_lng):
            arr.flags.writeable = False

    @classmethod
    def from_records(cls, records: Iterable[TripRecord]) -> TripTable:
        if isinstance(records, TripTable):
            return records
        recs = list(records)
        return cls(
            np.array([r.started_at for r in recs], dtype=np.int64),
            np.array([r.ended_at for r in recs], dtype=np.int64),
            [r.start_station_id for r in recs],
            [r.end_station_id for r in recs],
            np.array([r.start_lat for r in recs], dtype=np.float64),
            np.array([r.start_lng for r in recs], dtype=np.float64),
            np.array([r.end_lat for r in recs], dtype=np.float64),
            np.array([r.end_lng for r in recs], dtype=np.float64),
            [r.start_station_name for r in recs],
            [r.end_station_name for r in recs],
        )

    def __len__(self) -> int:
        return len(self.started_at)

    @overload
    def __getitem__(self, i: int) -> TripRecord: ...
    @overload
    def __getitem__(self, i: slice) -> TripTable: ...

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TripTable(
                self.started_at[i], self.ended_at[i], self.start_station_id[i],
                self.end_station_id[i], self.start_lat[i], self.start_lng[i],
                self.end_lat[i], self.end_lng[i], self.start_station_name[i],
                self.end_station_name[i],
            )
        return TripRecord(
            int(self.started_at[i]), int(self.ended_at[i]),
            self.start_station_id[i], self.end_station_id[i],
            float(self.start_lat[i]), float(self.start_lng[i]),
            float(self.end_lat[i]), float(self.end_lng[i]),
            self.start_station_name[i], self.end_station_name[i],
        )

    def __iter__(self) -> Iterator[TripRecord]:
        for i in range(len(self)):
            yield self[i]


def _parse_floats(values: list[str]) -> np.ndarray:
    try:
        return np.asarray(values, dtype=np.float64)
    except ValueError:
        out = np.empty(len(values), dtype=np.float64)
        for k, v in enumerate(values):
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = np.nan
        return out


def parse_trips(csv_stream: TextIO | Iterable[str], report: IngestReport | None = None) -> TripTable:
    """Read trip rows, dropping invalid ones and counting each drop by cause.

    Rules are applied in order: wrong field count (malformed), empty station
    id (missing station), unparsable timestamp or coordinate (malformed),
    ``ended_at < started_at`` (negative duration).  Zero-duration rides are
    kept.
    """
    if report is None:
        report = IngestReport()
    try:
        reader = csv.reader(csv_stream)
        try:
            header = [h.strip().lstrip("﻿") for h in next(reader)]
        except StopIteration:
            raise IngestError("trip stream is empty: missing header row") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"trip header lacks required columns: {', '.join(missing)}")
        col = {name: header.index(name) for name in header}
        width = len(header)
        i_s, i_e = col["started_at"], col["ended_at"]
        i_sid, i_eid = col["start_station_id"], col["end_station_id"]
        i_sla, i_slo, i_ela, i_elo = col["start_lat"], col["start_lng"], col["end_lat"], col["end_lng"]
        i_sn = col.get("start_station_name")
        i_en = col.get("end_station_name")

        s_ts: list[str] = []
        e_ts: list[str] = []
        sids: list[str] = []
        eids: list[str] = []
        snames: list[str] = []
        enames: list[str] = []
        coords: tuple[list[str], ...] = ([], [], [], [])
        rows_read = 0
        malformed = 0
        missing_station = 0
        for row in reader:
            rows_read += 1
            if len(row) != width:
                malformed += 1
                continue
            sid = row[i_sid].strip()
            eid = row[i_eid].strip()
            if not sid or not eid:
                missing_station += 1
                continue
            s_ts.append(row[i_s])
            e_ts.append(row[i_e])
            sids.append(sid)
            eids.append(eid)
            snames.append(row[i_sn] if i_sn is not None else "")
            enames.append(row[i_en] if i_en is not None else "")
            coords[0].append(row[i_sla])
            coords[1].append(row[i_slo])
            coords[2].append(row[i_ela])
            coords[3].append(row[i_elo])
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise IngestError(f"unreadable trip stream: {exc}") from exc

    started = kernels.parse_timestamps(s_ts)
    ended = kernels.parse_timestamps(e_ts)
    slat, slng, elat, elng = (_parse_floats(c) for c in coords)

    ok = (started != kernels.MALFORMED) & (ended != kernels.MALFORMED)
    for lat in (slat, elat):
        ok &= np.isfinite(lat) & (lat >= -90.0) & (lat <= 90.0)
    for lng in (slng, elng):
        ok &= np.isfinite(lng) & (lng >= -180.0) & (lng <= 180.0)
    malformed += int((~ok).sum())
    negative = ok & (ended < started)
    keep = ok & ~negative
    idx = np.flatnonzero(keep)

    report.rows_read += rows_read
    report.rows_dropped_malformed += malformed
    report.rows_dropped_missing_station += missing_station
    report.rows_dropped_negative_duration += int(negative.sum())
    report.rows_kept += len(idx)

    take = idx.tolist()
    return TripTable(
        started[idx], ended[idx],
        [sids[k] for k in take], [eids[k] for k in take],
        slat[idx], slng[idx], elat[idx], elng[idx],
        [snames[k] for k in take], [enames[k] for k in take],
    )


def read_trips(path, report: IngestReport | None = None) -> TripTable:
    """Open ``path`` (``.csv`` or a ``.zip`` holding one CSV) and parse it."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".zip":
            with zipfile.ZipFile(path) as zf:
                names = [n for n in zf.namelist()
                         if n.lower().endswith(".csv") and not n.startswith("__MACOSX")]
                if len(names) != 1:
                    raise IngestError(f"{path} must contain exactly one CSV, found {len(names)}")
                with zf.open(names[0]) as raw:
                    return parse_trips(io.TextIOWrapper(raw, encoding="utf-8", newline=""), report)
        with open(path, encoding="utf-8", newline="") as fh:
            return parse_trips(fh, report)
    except (OSError, zipfile.BadZipFile) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


@dataclass(frozen=True, slots=True)
class Station:
    id: str
    name: str
    latitude: float
    longitude: float
    index: int


@dataclass(frozen=True)
class StationRegistry:
    stations: tuple[Station, ...]
    _lookup: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        lookup = {s.id: s.index for s in self.stations}
        if [s.index for s in self.stations] != list(range(len(self.stations))):
            raise ValueError("station indices must be 0..N-1 in order")
        ids = [s.id for s in self.stations]
        if ids != sorted(ids) or len(lookup) != len(ids):
            raise ValueError("station ids must be unique and lexicographically ordered")
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self) -> int:
        return len(self.stations)

    def __getitem__(self, i: int) -> Station:
        return self.stations[i]

    def __iter__(self) -> Iterator[Station]:
        return iter(self.stations)

    def __contains__(self, station_id: object) -> bool:
        return station_id in self._lookup

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def latitudes(self) -> np.ndarray:
        return np.array([s.latitude for s in self.stations], dtype=np.float64)

    @property
    def longitudes(self) -> np.ndarray:
        return np.array([s.longitude for s in self.stations], dtype=np.float64)

    def index_of(self, station_id: str) -> int:
        try:
            return self._lookup[station_id]
        except KeyError:
            raise ConsistencyError(f"station {station_id!r} is not in the registry") from None

    def fingerprint(self) -> str:
        """SHA-256 over the ordered id list; binds checkpoints to node order."""
        h = hashlib.sha256()
        for sid in self.ids:
            h.update(sid.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def subset(self, station_ids: Iterable[str]) -> StationRegistry:
        keep = sorted(set(station_ids))
        return StationRegistry(tuple(
            Station(sid, self.stations[self.index_of(sid)].name,
                    self.stations[self.index_of(sid)].latitude,
                    self.stations[self.index_of(sid)].longitude, k)
            for k, sid in enumerate(keep)
        ))


def build_station_registry(trips: Sequence[TripRecord]) -> StationRegistry:
    """One station per distinct id, located at the mean of all its sightings.

    The display name is the first non-empty name met in file order.
    """
    table = TripTable.from_records(trips)
    if len(table) == 0:
        raise ParameterError("no stations")
    n = len(table)
    ids = np.empty(2 * n, dtype=object)
    ids[0::2] = table.start_station_id
    ids[1::2] = table.end_station_id
    unique, inverse = np.unique(ids, return_inverse=True)
    lat = np.empty(2 * n)
    lng = np.empty(2 * n)
    lat[0::2], lat[1::2] = table.start_lat, table.end_lat
    lng[0::2], lng[1::2] = table.start_lng, table.end_lng
    counts = np.bincount(inverse, minlength=len(unique))
    mean_lat = np.bincount(inverse, weights=lat, minlength=len(unique)) / counts
    mean_lng = np.bincount(inverse, weights=lng, minlength=len(unique)) / counts

    names: dict[str, str] = {}
    for sid, sname, eid, ename in zip(table.start_station_id, table.start_station_name,
                                      table.end_station_id, table.end_station_name):
        if sname and sid not in names:
            names[sid] = sname
        if ename and eid not in names:
            names[eid] = ename
    return StationRegistry(tuple(
        Station(str(sid), names.get(sid, ""), float(mean_lat[k]), float(mean_lng[k]), k)
        for k, sid in enumerate(unique)
    ))


@dataclass(frozen=True)
class TrafficTensor:
    """Arrivals plus departures per half-hour bin (rows) and station (columns)."""

    values: np.ndarray
    origin: int
    station_ids: tuple[str, ...]
    bin_seconds: int = BIN_SECONDS

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != len(self.station_ids):
            raise ValueError(f"values shape {values.shape} does not match {len(self.station_ids)} stations")
        if values.size and values.min() < 0:
            raise ValueError("traffic counts must be non-negative")
        if self.origin % self.bin_seconds:
            raise ValueError("origin must sit on a bin edge")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> int:
        return self.origin + self.n_bins * self.bin_seconds

    def timestamps(self) -> np.ndarray:
        return self.origin + self.bin_seconds * np.arange(self.n_bins, dtype=np.int64)

    def select_stations(self, station_ids: Iterable[str]) -> TrafficTensor:
        pos = {sid: k for k, sid in enumerate(self.station_ids)}
        keep = sorted(set(station_ids))
        cols = [pos[s] for s in keep]
        return TrafficTensor(self.values[:, cols], self.origin, tuple(keep), self.bin_seconds)

    def busiest(self, k: int) -> list[str]:
        """Ids of the ``k`` stations with the largest total traffic (ties by id)."""
        totals = self.values.sum(axis=0)
        order = sorted(range(self.n_stations), key=lambda j: (-int(totals[j]), self.station_ids[j]))
        return [self.station_ids[j] for j in order[:k]]


def infer_range(trips: TripTable) -> tuple[int, int]:
    """Whole days covering every ride start: [midnight of first, midnight after last)."""
    if len(trips) == 0:
        raise ParameterError("cannot infer a date range from zero trips")
    lo = int(trips.started_at.min())
    hi = int(trips.started_at.max())
    return lo - lo % 86400, hi - hi % 86400 + 86400


def aggregate_traffic(trips: Sequence[TripRecord], registry: StationRegistry,
                      range_start, range_end, bin_seconds: int = BIN_SECONDS) -> TrafficTensor:
    """Count departures (by start time) and arrivals (by end time) per bin.

    Bins are half-open, so an event exactly on an edge lands in the later
    bin.  Endpoints outside ``[range_start, range_end)`` are dropped one by
    one; the in-range end of a straddling trip still counts.
    """
    start, end = to_unix(range_start), to_unix(range_end)
    if end <= start:
        raise ParameterError("range_end must be after range_start")
    if start % bin_seconds or end % bin_seconds:
        raise ParameterError(f"range boundaries must be aligned to {bin_seconds}-second edges")
    table = TripTable.from_records(trips)
    lookup = {s.id: s.index for s in registry}
    try:
        s_idx = np.fromiter((lookup[s] for s in table.start_station_id), dtype=np.int64, count=len(table))
        e_idx = np.fromiter((lookup[s] for s in table.end_station_id), dtype=np.int64, count=len(table))
    except KeyError as exc:
        raise ConsistencyError(f"trip references station {exc.args[0]!r} absent from the registry") from None
    counts = np.zeros(((end - start) // bin_seconds, len(registry)), dtype=np.int64)
    kernels.bin_events(np.ascontiguousarray(table.started_at), s_idx, start, bin_seconds, counts)
    kernels.bin_events(np.ascontiguousarray(table.ended_at), e_idx, start, bin_seconds, counts)
    return TrafficTensor(counts, start, tuple(registry.ids), bin_seconds)


@dataclass(frozen=True)
class StatsBundle:
    timestamps: np.ndarray
    per_step_mean: np.ndarray
    station_ids: tuple[str, ...]
    per_station_mean: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def histogram(values: np.ndarray, bin_width: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-width histogram anchored at zero that covers every value."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    n_bins = max(1, int(np.floor(top / bin_width)) + 1)
    edges = bin_width * np.arange(n_bins + 1, dtype=np.float64)
    counts = np.bincount(np.minimum((values / bin_width).astype(np.int64), n_bins - 1),
                         minlength=n_bins)
    return counts, edges


def traffic_stats(traffic: TrafficTensor, bin_width: float = 0.25) -> StatsBundle:
    if traffic.n_bins < 1:
        raise ParameterError("traffic tensor has no time steps")
    values = traffic.values.astype(np.float64)
    per_station = values.mean(axis=0)
    counts, edges = histogram(per_station, bin_width)
    return StatsBundle(traffic.timestamps(), values.mean(axis=1), traffic.station_ids,
                       per_station, counts, edges)


def histogram_modes(counts: np.ndarray, edges: np.ndarray) -> tuple[int, list[float]]:
    """Index of the tallest bin and the centres of the other local maxima.

    A local maximum is a run of equal bins higher than both neighbours.
    Secondary modes are listed tallest first (ties by position).
    """
    counts = np.asarray(counts)
    peak = int(np.argmax(counts))
    centres = 0.5 * (edges[:-1] + edges[1:])
    secondary = []
    i = 0
    n = len(counts)
    while i < n:
        j = i
        while j + 1 < n and counts[j + 1] == counts[i]:
            j += 1
        left = counts[i - 1] if i > 0 else -1
        right = counts[j + 1] if j + 1 < n else -1
        if counts[i] > left and counts[i] > right and counts[i] > 0 and not (i <= peak <= j):
            secondary.append((-int(counts[i]), i, float(centres[(i + j) // 2])))
        i = j + 1
    return peak, [c for _, _, c in sorted(secondary)]
