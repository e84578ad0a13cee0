"""On-disk formats.

Binary containers start with one ASCII header line and carry little-endian
payloads, so any language can read them::

    STFLOW-TRAFFIC v1 T=<T> N=<N> origin=<unix-seconds> bin=1800\\n  + T*N uint32
    STFLOW-MATRIX v1 N=<N>\\n                                        + N*N float64
    STFLOW-CKPT v1\\n + <one-line JSON metadata>\\n                   + float64 parameters

Every writer goes through :func:`atomic_write` (temp file, fsync, rename).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactVersionError, DataError, FingerprintMismatchError
from .ingest import IngestReport, Station, StationRegistry, StatsBundle, TrafficTensor, format_unix
from .pipeline import EpochRecord, MetricsReport, Normalizer, PredictionExport
from .stgcn import STGCN, STGCNConfig, param_shapes

TRAFFIC_MAGIC = "STFLOW-TRAFFIC"
MATRIX_MAGIC = "STFLOW-MATRIX"
CKPT_MAGIC = "STFLOW-CKPT"
FORMAT_VERSION = 1


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt(x) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(x))


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_header(blob: bytes, magic: str) -> tuple[dict[str, str], bytes]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ArtifactVersionError(f"missing {magic} header line")
    parts = blob[:nl].decode("ascii", errors="replace").split()
    if not parts or parts[0] != magic:
        raise ArtifactVersionError(f"expected a {magic} file, found header {parts[:1]}")
    if len(parts) < 2 or parts[1] != f"v{FORMAT_VERSION}":
        raise ArtifactVersionError(f"unsupported {magic} version {parts[1:2]}; this build reads v{FORMAT_VERSION}")
    fields = {}
    for token in parts[2:]:
        key, _, value = token.partition("=")
        fields[key] = value
    return fields, blob[nl + 1:]


# -- registry -------------------------------------------------------------

def registry_csv(registry: StationRegistry) -> str:
    return csv_text(["station_id", "name", "latitude", "longitude", "index"],
                    ([s.id, s.name, fmt(s.latitude), fmt(s.longitude), s.index] for s in registry))


def write_registry(path, registry: StationRegistry) -> Path:
    return atomic_write(path, registry_csv(registry))


def read_registry(path) -> StationRegistry:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        stations = tuple(Station(r["station_id"], r["name"], float(r["latitude"]),
                                 float(r["longitude"]), int(r["index"])) for r in rows)
        return StationRegistry(stations)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed registry file {path}: {exc}") from exc


# -- traffic --------------------------------------------------------------

def traffic_bytes(traffic: TrafficTensor) -> bytes:
    if traffic.values.size and traffic.values.max() > np.iinfo(np.uint32).max:
        raise DataError("traffic counts exceed the uint32 container")
    header = (f"{TRAFFIC_MAGIC} v{FORMAT_VERSION} T={traffic.n_bins} N={traffic.n_stations} "
              f"origin={traffic.origin} bin={traffic.bin_seconds}\n")
    return header.encode("ascii") + traffic.values.astype("<u4").tobytes()


def write_traffic(path, traffic: TrafficTensor) -> Path:
    return atomic_write(path, traffic_bytes(traffic))


def read_traffic(path, station_ids) -> TrafficTensor:
    """Read the binary container; station ids come from the matching registry."""
    fields, payload = _read_header(Path(path).read_bytes(), TRAFFIC_MAGIC)
    t, n = int(fields["T"]), int(fields["N"])
    if len(payload) != 4 * t * n:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header promises {4 * t * n}")
    if len(station_ids) != n:
        raise DataError(f"{path}: {n} stations in tensor, {len(station_ids)} in registry")
    values = np.frombuffer(payload, dtype="<u4").reshape(t, n).astype(np.int64)
    return TrafficTensor(values, int(fields["origin"]), tuple(station_ids), int(fields["bin"]))


def traffic_csv(traffic: TrafficTensor) -> str:
    ts = traffic.timestamps()
    return csv_text(["bin_start_unix", *traffic.station_ids],
                    ([int(ts[i]), *traffic.values[i].tolist()] for i in range(traffic.n_bins)))


def read_traffic_csv(path, bin_seconds: int = 1800) -> TrafficTensor:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[int(v) for v in r] for r in reader]
    if not rows:
        raise DataError(f"{path}: no time steps")
    arr = np.array(rows, dtype=np.int64)
    return TrafficTensor(arr[:, 1:], int(arr[0, 0]), tuple(header[1:]), bin_seconds)


# -- matrices -------------------------------------------------------------

def matrix_bytes(m: np.ndarray) -> bytes:
    n = m.shape[0]
    if m.shape != (n, n):
        raise ValueError(f"matrix must be square, got {m.shape}")
    return f"{MATRIX_MAGIC} v{FORMAT_VERSION} N={n}\n".encode("ascii") + np.ascontiguousarray(m, dtype="<f8").tobytes()


def write_matrix(path, m: np.ndarray) -> Path:
    return atomic_write(path, matrix_bytes(m))


def read_matrix(path) -> np.ndarray:
    fields, payload = _read_header(Path(path).read_bytes(), MATRIX_MAGIC)
    n = int(fields["N"])
    if len(payload) != 8 * n * n:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header promises {8 * n * n}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(np.float64)


def matrix_csv(m: np.ndarray, labels) -> str:
    return csv_text(["station_id", *labels],
                    ([labels[i], *(fmt(v) for v in m[i])] for i in range(m.shape[0])))


# -- reports and plot data ------------------------------------------------

def key_value_text(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def ingest_report_text(report: IngestReport) -> str:
    return key_value_text(report.as_dict())


def step_mean_csv(stats: StatsBundle) -> str:
    return csv_text(["bin_timestamp", "mean_traffic"],
                    ([format_unix(t), fmt(v)] for t, v in zip(stats.timestamps, stats.per_step_mean)))


def station_mean_csv(stats: StatsBundle) -> str:
    return csv_text(["station_id", "mean_traffic"],
                    ([s, fmt(v)] for s, v in zip(stats.station_ids, stats.per_station_mean)))


def histogram_csv(edges, *count_columns, names=("count",)) -> str:
    return csv_text(["bin_lo", "bin_hi", *names],
                    ([fmt(edges[i]), fmt(edges[i + 1]), *(int(c[i]) for c in count_columns)]
                     for i in range(len(edges) - 1)))


def read_histogram_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """(counts, edges) as numpy.histogram returns them.

    Counts are ``[bins]`` for a single count column, else ``[bins, columns]``.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    edges = np.array([float(rows[0][0])] + [float(r[1]) for r in rows])
    counts = np.array([[int(v) for v in r[2:]] for r in rows], dtype=np.int64)
    return (counts[:, 0] if len(header) == 3 else counts), edges


def history_csv(history: list[EpochRecord]) -> str:
    return csv_text(["epoch", "train_loss", "val_loss", "is_best"],
                    ([r.epoch, fmt(r.train_loss), fmt(r.val_loss), int(r.is_best)] for r in history))


def metrics_text(reports: dict[str, MetricsReport]) -> str:
    lines = []
    for name, rep in reports.items():
        for k, v in rep.as_dict().items():
            lines.append(f"{name}.{k} = {v}\n")
    return "".join(lines)


def metrics_csv(reports: dict[str, MetricsReport]) -> str:
    return csv_text(["model", "mae", "rmse", "mape_masked"],
                    ([name, fmt(r.mae), fmt(r.rmse), fmt(r.mape_masked)] for name, r in reports.items()))


def predictions_csv(export: PredictionExport) -> str:
    s, h, n = export.y_true.shape
    header = ["bin_timestamp", "station_id", "y_true", "y_pred"]
    if h > 1:
        header.insert(1, "horizon_step")
    rows = []
    for i in range(s):
        for k in range(h):
            ts = format_unix(export.bin_times[i, k])
            for j in range(n):
                row = [ts, export.station_ids[j], fmt(export.y_true[i, k, j]), fmt(export.y_pred[i, k, j])]
                if h > 1:
                    row.insert(1, k + 1)
                rows.append(row)
    return csv_text(header, rows)


def prediction_step_csv(export: PredictionExport) -> str:
    ts, truth, pred = export.step_means()
    return csv_text(["bin_timestamp", "mean_true", "mean_pred"],
                    ([format_unix(t), fmt(a), fmt(b)] for t, a, b in zip(ts, truth, pred)))


def prediction_station_csv(export: PredictionExport) -> str:
    truth, pred = export.station_means()
    return csv_text(["station_id", "mean_true", "mean_pred"],
                    ([s, fmt(a), fmt(b)] for s, a, b in zip(export.station_ids, truth, pred)))


def prediction_histogram_csv(export: PredictionExport, bin_width: float = 0.25) -> str:
    edges, ct, cp = export.station_histograms(bin_width)
    return histogram_csv(edges, ct, cp, names=("count_true", "count_pred"))


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    config: STGCNConfig
    normalizer: Normalizer
    fingerprint: str
    payload: np.ndarray
    precision: str = "float64"

    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.as_dict(),
            "normalizer": {"mean": self.normalizer.mean, "std": self.normalizer.std},
            "station_fingerprint": self.fingerprint,
            "precision": self.precision,
            "param_order": [[k, list(s)] for k, s in param_shapes(self.config).items()],
            "n_values": int(self.payload.size),
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":"))
        head = f"{CKPT_MAGIC} v{FORMAT_VERSION}\n{meta}\n".encode("utf-8")
        return head + np.ascontiguousarray(self.payload, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        _, rest = _read_header(blob, CKPT_MAGIC)
        nl = rest.find(b"\n")
        if nl < 0:
            raise ArtifactVersionError("checkpoint lacks its metadata line")
        try:
            meta = json.loads(rest[:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArtifactVersionError(f"checkpoint metadata is not valid JSON: {exc}") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise ArtifactVersionError(f"checkpoint format version {meta.get('format_version')} unsupported")
        cfg = meta["config"]
        config = STGCNConfig(**{**cfg, "channels": tuple(cfg["channels"])})
        payload = np.frombuffer(rest[nl + 1:], dtype="<f8").astype(np.float64)
        if payload.size != meta["n_values"]:
            raise DataError(f"checkpoint payload has {payload.size} values, metadata says {meta['n_values']}")
        expected = [[k, list(s)] for k, s in param_shapes(config).items()]
        if meta["param_order"] != expected:
            raise ArtifactVersionError("checkpoint parameter order differs from this build")
        norm = Normalizer(float(meta["normalizer"]["mean"]), float(meta["normalizer"]["std"]))
        return cls(config, norm, meta["station_fingerprint"], payload, meta.get("precision", "float64"))

    @classmethod
    def from_model(cls, model: STGCN, normalizer: Normalizer, registry: StationRegistry,
                   precision: str = "float64") -> Checkpoint:
        return cls(model.config, normalizer, registry.fingerprint(), model.to_vector(), precision)

    def check_registry(self, registry: StationRegistry) -> None:
        if registry.fingerprint() != self.fingerprint:
            raise FingerprintMismatchError(
                "checkpoint was trained on a different station order "
                f"({self.fingerprint[:12]} vs {registry.fingerprint()[:12]})")

    def build_model(self, registry: StationRegistry | None = None) -> STGCN:
        if registry is not None:
            self.check_registry(registry)
        dtype = np.float32 if self.precision == "float32" else np.float64
        model = STGCN(self.config, dtype=dtype)
        model.load_vector(self.payload)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def write_manifest(path, command: str, config_hash: str, seed: int, inputs: dict[str, str],
                   outputs: list[str]) -> Path:
    """Run record without wall-clock fields, so identical runs write identical bytes."""
    body = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": dict(sorted(inputs.items())),
        "outputs": sorted(outputs),
    }
    return atomic_write(path, json.dumps(body, indent=2, sort_keys=True) + "\n")
