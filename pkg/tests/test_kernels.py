"""The compiled kernels and their numpy twins must agree."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stflow import _pykernels, kernels

try:
    from stflow import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")
MALFORMED = kernels.MALFORMED


@pytest.mark.parametrize("backend", [_pykernels, pytest.param(_ckernels, marks=needs_ext)])
@pytest.mark.parametrize("text, expected", [
    ("1970-01-01 00:00:00", 0),
    ("2021-06-01 13:45:12", 1622555112),
    ("2021-06-01T00:00:00", 1622505600),
    ("2021-06-01 00:00:00.123456", 1622505600),
    ("2020-02-29 23:59:59", 1583020799),
    ("2000-03-01 00:00:00", 951868800),
    ("2021-02-29 00:00:00", MALFORMED),
    ("2021-06-01 24:00:00", MALFORMED),
    ("2021-06-01 12:60:00", MALFORMED),
    ("2021-13-01 00:00:00", MALFORMED),
    ("2021-06-01", MALFORMED),
    ("2021-06-01 00:00:00.", MALFORMED),
    ("2021/06/01 00:00:00", MALFORMED),
    ("", MALFORMED),
    ("0000-01-01 00:00:00", MALFORMED),
])
def test_parse_timestamps_cases(backend, text, expected):
    assert backend.parse_timestamps([text])[0] == expected


def test_parse_rejects_non_strings():
    assert _pykernels.parse_timestamps([None])[0] == MALFORMED


@needs_ext
@settings(max_examples=300, deadline=None)
@given(st.lists(st.one_of(
    st.text(alphabet="0123456789-: T.x", min_size=17, max_size=24),
    st.datetimes().map(lambda d: d.strftime("%Y-%m-%d %H:%M:%S")),
    st.text(max_size=25),
), max_size=20))
def test_timestamp_backends_agree(values):
    np.testing.assert_array_equal(_ckernels.parse_timestamps(values), _pykernels.parse_timestamps(values))


@needs_ext
def test_timestamps_match_numpy_datetime(rng):
    secs = rng.integers(0, 4_000_000_000, size=500)
    text = [str(np.datetime64(int(s), "s")).replace("T", " ") for s in secs]
    np.testing.assert_array_equal(_ckernels.parse_timestamps(text), secs)


@needs_ext
def test_bin_events_backends_agree(rng):
    times = rng.integers(-5000, 40000, size=2000).astype(np.int64)
    stations = rng.integers(0, 7, size=2000).astype(np.int64)
    a = np.zeros((20, 7), dtype=np.int64)
    b = np.zeros((20, 7), dtype=np.int64)
    ka = _ckernels.bin_events(times, stations, 0, 1800, a)
    kb = _pykernels.bin_events(times, stations, 0, 1800, b)
    assert ka == kb
    np.testing.assert_array_equal(a, b)
    # brute-force recount
    brute = np.zeros_like(a)
    for t, s in zip(times, stations):
        if 0 <= t < 20 * 1800:
            brute[t // 1800, s] += 1
    np.testing.assert_array_equal(a, brute)


@pytest.mark.parametrize("backend", [_pykernels, pytest.param(_ckernels, marks=needs_ext)])
def test_bin_events_rejects_bad_station(backend):
    with pytest.raises(IndexError):
        backend.bin_events(np.array([0], dtype=np.int64), np.array([3], dtype=np.int64), 0, 1800,
                           np.zeros((1, 2), dtype=np.int64))


@needs_ext
def test_haversine_backends_agree(rng):
    lat = rng.uniform(-89, 89, 40)
    lng = rng.uniform(-180, 180, 40)
    a = _ckernels.haversine_matrix(lat, lng, 6371.0088)
    b = _pykernels.haversine_matrix(lat, lng, 6371.0088)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)
    for m in (a, b):
        np.testing.assert_array_equal(m, m.T)
        assert np.all(np.diag(m) == 0)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_glu_backends_agree(rng, dtype):
    x = (rng.standard_normal((50, 8)) * 5).astype(dtype)
    x[0, 5] = -1000  # saturating gate
    g = rng.standard_normal((50, 4)).astype(dtype)
    res = []
    for k in (_ckernels, _pykernels):
        out = np.empty((50, 4), dtype=dtype)
        gate = np.empty_like(out)
        gx = np.empty_like(x)
        k.glu_forward(x, out, gate)
        k.glu_backward(g, x, gate, gx)
        res.append((out, gate, gx))
    tol = 1e-12 if dtype == np.float64 else 1e-5
    for a, b in zip(*res):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    assert res[0][1][0, 1] == 0.0


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
