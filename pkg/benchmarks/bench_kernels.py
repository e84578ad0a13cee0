"""Compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Prints the best-of-N wall time for each kernel on both backends and the
speedup.  Inputs are sized like one month of a ~1500-station network.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from stflow import _pykernels

try:
    from stflow import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(scale: float, rng: np.random.Generator):
    n_ts = int(200_000 * scale)
    base = np.datetime64("2021-06-01T00:00:00") + rng.integers(0, 30 * 86400, n_ts).astype("timedelta64[s]")
    stamps = [str(t).replace("T", " ") for t in base]

    n_events = int(5_000_000 * scale)
    origin = 1_622_505_600
    times = origin + rng.integers(0, 30 * 86400, n_events).astype(np.int64)
    stations = rng.integers(0, 1500, n_events).astype(np.int64)

    n_nodes = max(2, int(1500 * np.sqrt(scale)))
    lat = rng.uniform(40.6, 40.9, n_nodes)
    lng = rng.uniform(-74.1, -73.8, n_nodes)

    rows = int(32 * 10 * 1500 * scale)
    x = rng.standard_normal((rows, 64))
    out = np.empty((rows, 32))
    gate = np.empty((rows, 32))
    g = rng.standard_normal((rows, 32))
    gx = np.empty_like(x)

    def run_bin(k):
        counts = np.zeros((1440, 1500), dtype=np.int64)
        k.bin_events(times, stations, origin, 1800, counts)

    return {
        f"parse_timestamps ({n_ts:,} strings)": lambda k: k.parse_timestamps(stamps),
        f"bin_events ({n_events:,} events)": run_bin,
        f"haversine_matrix ({n_nodes}x{n_nodes})": lambda k: k.haversine_matrix(lat, lng, 6371.0088),
        f"glu_forward ({rows:,}x64)": lambda k: k.glu_forward(x, out, gate),
        f"glu_backward ({rows:,}x32)": lambda k: k.glu_backward(g, x, gate, gx),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0, help="multiply input sizes")
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s}")
    for name, fn in cases(args.scale, rng).items():
        fn(_ckernels)  # warm-up, also fills the GLU gate for the backward case
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        t_p = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        print(f"{name:42s} {t_c:10.4f} {t_p:10.4f} {t_p / t_c:7.1f}x")


if __name__ == "__main__":
    main()
