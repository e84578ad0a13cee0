"""Pure-numpy twins of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import datetime as _dt

import numpy as np

MALFORMED = np.iinfo(np.int64).min
_EPOCH_ORDINAL = _dt.date(1970, 1, 1).toordinal()


def _parse_one(s: object) -> int:
    if type(s) is not str:
        return MALFORMED
    n = len(s)
    if n < 19 or not s.isascii():
        return MALFORMED
    if n > 19 and (n == 20 or s[19] != "." or not s[20:].isdigit()):
        return MALFORMED
    if s[4] != "-" or s[7] != "-" or s[10] not in " T" or s[13] != ":" or s[16] != ":":
        return MALFORMED
    digits = s[0:4] + s[5:7] + s[8:10] + s[11:13] + s[14:16] + s[17:19]
    if not digits.isdigit():
        return MALFORMED
    hour, minute, second = int(s[11:13]), int(s[14:16]), int(s[17:19])
    if hour > 23 or minute > 59 or second > 59:
        return MALFORMED
    try:
        ordinal = _dt.date(int(s[0:4]), int(s[5:7]), int(s[8:10])).toordinal()
    except ValueError:
        return MALFORMED
    return (ordinal - _EPOCH_ORDINAL) * 86400 + hour * 3600 + minute * 60 + second


def parse_timestamps(values: list) -> np.ndarray:
    return np.fromiter((_parse_one(v) for v in values), dtype=np.int64, count=len(values))


def bin_events(times, stations, origin: int, bin_seconds: int, counts: np.ndarray) -> int:
    times = np.asarray(times, dtype=np.int64)
    stations = np.asarray(stations, dtype=np.int64)
    n_bins, n_nodes = counts.shape
    offset = times - origin
    t = np.floor_divide(offset, bin_seconds)
    keep = (offset >= 0) & (t < n_bins)
    s = stations[keep]
    if s.size and (s.min() < 0 or s.max() >= n_nodes):
        bad = s[(s < 0) | (s >= n_nodes)][0]
        raise IndexError(f"station index {bad} outside [0, {n_nodes})")
    flat = t[keep] * n_nodes + s
    counts += np.bincount(flat, minlength=n_bins * n_nodes).reshape(n_bins, n_nodes)
    return int(keep.sum())


def haversine_matrix(lat, lng, radius: float) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lng = np.asarray(lng, dtype=np.float64)
    deg = 0.017453292519943295
    cos_lat = np.cos(lat * deg)
    s_lat = np.sin((lat[None, :] - lat[:, None]) * deg * 0.5)
    s_lng = np.sin((lng[None, :] - lng[:, None]) * deg * 0.5)
    a = s_lat * s_lat + cos_lat[:, None] * cos_lat[None, :] * s_lng * s_lng
    np.minimum(a, 1.0, out=a)
    d = 2.0 * radius * np.arcsin(np.sqrt(a))
    # exact symmetry and zero diagonal, as the compiled fill guarantees
    upper = np.triu(d, 1)
    return upper + upper.T


def glu_forward(x: np.ndarray, out: np.ndarray, gate: np.ndarray) -> None:
    c = out.shape[1]
    with np.errstate(over="ignore", under="ignore"):
        np.exp(-x[:, c:], out=gate)
    gate += 1.0
    np.reciprocal(gate, out=gate)
    np.multiply(x[:, :c], gate, out=out)


def glu_backward(g: np.ndarray, x: np.ndarray, gate: np.ndarray, gx: np.ndarray) -> None:
    c = g.shape[1]
    np.multiply(g, gate, out=gx[:, :c])
    np.multiply(gx[:, :c], x[:, :c], out=gx[:, c:])
    gx[:, c:] *= 1 - gate
