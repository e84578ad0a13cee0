"""Synthetic trip files in the public June 2021 CSV layout.

Used for tests, benchmarks and dry runs when the real archive is not at
hand.  Demand follows a weekday/weekend daily profile scaled by a per-day
factor (weather-like), starts are drawn by station popularity, and ends
by a gravity model over distance.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .ingest import TRIP_COLUMNS, format_unix, to_unix

_MANHATTAN = (40.70, 40.80, -74.02, -73.93)


@dataclass(frozen=True)
class SyntheticCity:
    n_stations: int = 200
    trips_per_day: float = 20000.0
    start: str = "2021-06-01"
    days: int = 30
    day_factor_sigma: float = 0.3
    popularity_sigma: float = 1.0
    gravity_km: float = 1.5
    seed: int = 0


def _daily_profile(weekend: bool) -> np.ndarray:
    hours = (np.arange(48) + 0.5) / 2.0
    if weekend:
        shape = 0.15 + np.exp(-0.5 * ((hours - 14.0) / 3.5) ** 2)
    else:
        shape = (0.1 + 1.2 * np.exp(-0.5 * ((hours - 8.5) / 1.2) ** 2)
                 + 1.4 * np.exp(-0.5 * ((hours - 17.8) / 1.6) ** 2)
                 + 0.4 * np.exp(-0.5 * ((hours - 12.5) / 2.0) ** 2))
    return shape / shape.sum()


def generate_trips(city: SyntheticCity = SyntheticCity()) -> dict[str, np.ndarray | list]:
    """Column arrays of clean trips (unix seconds for timestamps)."""
    rng = np.random.default_rng(city.seed)
    n = city.n_stations
    lat_lo, lat_hi, lng_lo, lng_hi = _MANHATTAN
    lat = rng.uniform(lat_lo, lat_hi, n)
    lng = rng.uniform(lng_lo, lng_hi, n)
    numbers = rng.choice(np.arange(3000, 9000), size=n, replace=False)
    suffix = rng.integers(0, 100, size=n)
    ids = np.array([f"{a}.{b:02d}" for a, b in zip(numbers, suffix)], dtype=object)
    popularity = rng.lognormal(0.0, city.popularity_sigma, n)
    popularity /= popularity.sum()

    dlat = (lat[:, None] - lat[None, :]) * 111.2
    dlng = (lng[:, None] - lng[None, :]) * 111.2 * np.cos(np.radians(40.75))
    dist = np.hypot(dlat, dlng)
    gravity = popularity[None, :] * np.exp(-dist / city.gravity_km)
    np.fill_diagonal(gravity, gravity.diagonal() * 0.1)
    gravity_cdf = np.cumsum(gravity / gravity.sum(axis=1, keepdims=True), axis=1)

    origin = to_unix(city.start)
    weekday0 = dt.date.fromisoformat(city.start).weekday()
    log_factor = 0.0
    starts, s_idx = [], []
    for day in range(city.days):
        log_factor = 0.6 * log_factor + rng.normal(0.0, city.day_factor_sigma)
        weekend = (weekday0 + day) % 7 >= 5
        rates = city.trips_per_day * np.exp(log_factor) * _daily_profile(weekend)
        counts = rng.poisson(rates)
        for slot, c in enumerate(counts):
            if c == 0:
                continue
            t0 = origin + day * 86400 + slot * 1800
            starts.append(t0 + rng.integers(0, 1800, size=c))
            s_idx.append(rng.choice(n, size=c, p=popularity))
    started = np.concatenate(starts)
    s_idx = np.concatenate(s_idx)
    order = np.argsort(started, kind="stable")
    started, s_idx = started[order], s_idx[order]
    u = rng.random(len(s_idx))
    e_idx = np.minimum((gravity_cdf[s_idx] < u[:, None]).sum(axis=1), n - 1)
    ride_km = dist[s_idx, e_idx] * 1.3 + 0.2
    minutes = ride_km / 12.0 * 60.0 * rng.lognormal(0.0, 0.3, len(s_idx)) + 1.0
    ended = started + np.round(minutes * 60.0).astype(np.int64)
    jitter = rng.normal(0.0, 2e-5, (4, len(s_idx)))
    return {
        "started_at": started,
        "ended_at": ended,
        "start_station_id": ids[s_idx].tolist(),
        "end_station_id": ids[e_idx].tolist(),
        "start_lat": lat[s_idx] + jitter[0],
        "start_lng": lng[s_idx] + jitter[1],
        "end_lat": lat[e_idx] + jitter[2],
        "end_lng": lng[e_idx] + jitter[3],
        "member": rng.random(len(s_idx)) < 0.7,
    }


def write_trip_csv(path, columns: dict, dirty_fraction: float = 0.0, seed: int = 0) -> dict[str, int]:
    """Write trips in the public schema, optionally corrupting some rows.

    Returns how many rows of each corruption kind were written.
    """
    rng = np.random.default_rng(seed)
    n = len(columns["started_at"])
    kind = np.zeros(n, dtype=np.int64)
    if dirty_fraction > 0:
        dirty = rng.random(n) < dirty_fraction
        kind[dirty] = rng.integers(1, 4, size=int(dirty.sum()))
    tally = {"clean": int((kind == 0).sum()), "missing_station": int((kind == 1).sum()),
             "negative_duration": int((kind == 2).sum()), "malformed": int((kind == 3).sum())}
    ride_hex = rng.integers(0, 2**63, size=n)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRIP_COLUMNS) + "\n")
        for i in range(n):
            s, e = int(columns["started_at"][i]), int(columns["ended_at"][i])
            sid, eid = columns["start_station_id"][i], columns["end_station_id"][i]
            s_txt, e_txt = format_unix(s), format_unix(e)
            k = kind[i]
            if k == 1:
                eid = ""
            elif k == 2:
                e_txt = format_unix(s - 60)
            elif k == 3:
                s_txt = s_txt.replace(" ", "?")
            fh.write(
                f"{ride_hex[i]:016X},classic_bike,{s_txt},{e_txt},Station {sid},{sid},"
                f"Station {eid},{eid},{columns['start_lat'][i]:.6f},{columns['start_lng'][i]:.6f},"
                f"{columns['end_lat'][i]:.6f},{columns['end_lng'][i]:.6f},"
                f"{'member' if columns['member'][i] else 'casual'}\n"
            )
    return tally
