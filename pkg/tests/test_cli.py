import csv

import numpy as np
import pytest

from stflow import artifacts as art
from stflow.cli import main
from stflow.ingest import Station, StationRegistry, TrafficTensor, to_unix
from stflow.pipeline import Normalizer
from stflow.stgcn import STGCNConfig, param_count
from stflow.synthetic import SyntheticCity, generate_trips, write_trip_csv

TINY = ["--set", "history_steps=4", "--set", "temporal_kernel=2", "--set", "channels=1,4,4,4",
        "--set", "max_epochs=2", "--set", "test_days=1", "--set", "val_days=1"]


@pytest.fixture(scope="module")
def trips_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("raw") / "trips.csv"
    city = SyntheticCity(n_stations=6, trips_per_day=300, days=5, seed=3)
    tally = write_trip_csv(path, generate_trips(city), dirty_fraction=0.05, seed=1)
    return path, tally


def run(*argv):
    return main([str(a) for a in argv])


def test_full_pipeline(trips_csv, tmp_path, capsys):
    path, tally = trips_csv
    out = tmp_path / "run"
    assert run("ingest", path, "--out", out) == 0
    report = dict(line.split(" = ") for line in (out / "ingest_report.txt").read_text().splitlines())
    assert int(report["rows_read"]) == int(report["rows_kept"]) + int(report["rows_dropped"])
    assert int(report["rows_dropped_missing_station"]) == tally["missing_station"]
    assert int(report["rows_dropped_negative_duration"]) == tally["negative_duration"]
    assert int(report["rows_dropped_malformed"]) == tally["malformed"]
    assert int(report["n_bins"]) == 5 * 48

    assert run("build-graph", "--out", out) == 0
    assert run("train", "--out", out, *TINY) == 0
    assert (out / "history.csv").read_text().startswith("epoch,train_loss,val_loss,is_best\n1,")
    assert run("evaluate", "--out", out, *TINY) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["model"] for r in rows] == ["stgcn", "persistence", "historical_average"]
    assert "stgcn" in capsys.readouterr().out
    assert run("predict", "--out", out, "--at", "2021-06-05 12:00:00", *TINY) == 0
    forecast = list(csv.DictReader(open(out / "forecast.csv")))
    assert len(forecast) == 6 and all(float(r["y_pred"]) >= 0 for r in forecast)
    assert run("export-plots", "--out", out, *TINY) == 0
    for name in ("fig1_step_mean", "fig2_station_mean", "fig2_histogram", "fig4_distance",
                 "fig5_predictions", "fig5_step_mean", "fig6_station_mean", "fig6_histogram"):
        assert (out / f"{name}.csv").exists(), name
    for cmd in ("ingest", "build_graph", "train", "evaluate", "predict", "export_plots"):
        assert (out / f"manifest_{cmd}.json").exists()


def test_commands_are_idempotent(trips_csv, tmp_path):
    path, _ = trips_csv
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("ingest", path, "--out", out) == 0
        assert run("build-graph", "--out", out) == 0
        assert run("train", "--out", out, "--seed", 7, *TINY) == 0
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0].keys() == blobs[1].keys()
    for key in blobs[0]:
        assert blobs[0][key] == blobs[1][key], key


def test_top_stations(trips_csv, tmp_path):
    path, _ = trips_csv
    out = tmp_path / "top"
    assert run("ingest", path, "--out", out, "--set", "top_stations=3") == 0
    reg = art.read_registry(out / "registry.csv")
    traffic = art.read_traffic(out / "traffic.bin", reg.ids)
    assert len(reg) == 3 and traffic.values.shape[1] == 3


def _golden_run(tmp_path):
    """Two stations with constant traffic 3 and 1; a model that always says 2."""
    out = tmp_path / "golden"
    reg = StationRegistry((Station("a", "A", 40.70, -74.0, 0), Station("b", "B", 40.71, -74.0, 1)))
    values = np.tile([3, 1], (3 * 48, 1))
    art.write_registry(out / "registry.csv", reg)
    art.write_traffic(out / "traffic.bin", TrafficTensor(values, to_unix("2021-06-01"), ("a", "b")))
    config = STGCNConfig(n_nodes=2)
    payload = np.zeros(param_count(config))
    payload[-1] = 2.0
    art.save_checkpoint(out / "model.ckpt",
                        art.Checkpoint(config, Normalizer(0.0, 1.0), reg.fingerprint(), payload))
    return out


def test_evaluate_golden_fixture(tmp_path):
    out = _golden_run(tmp_path)
    split = ["--set", "test_days=1", "--set", "val_days=1"]
    assert run("build-graph", "--out", out) == 0
    assert run("evaluate", "--out", out, *split) == 0
    rows = {r["model"]: r for r in csv.DictReader(open(out / "metrics.csv"))}
    assert float(rows["stgcn"]["mae"]) == 1.0
    assert float(rows["stgcn"]["rmse"]) == 1.0
    assert float(rows["stgcn"]["mape_masked"]) == pytest.approx(100 * (1 / 3 + 1) / 2, abs=1e-12)
    assert float(rows["persistence"]["mae"]) == 0.0
    assert float(rows["historical_average"]["mae"]) == 0.0


# -- exit codes -----------------------------------------------------------

def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["predict"])
    assert exc.value.code == 1


def test_config_errors_exit_1(tmp_path, capsys):
    assert run("train", "--out", tmp_path, "--set", "nonsense=1") == 1
    assert "ConfigError" in capsys.readouterr().err
    assert run("train", "--config", tmp_path / "none.cfg") == 1
    (tmp_path / "bad.cfg").write_text("lr = 1\nlr = 2\n")
    assert run("train", "--config", tmp_path / "bad.cfg") == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert run("ingest", tmp_path / "absent.csv", "--out", tmp_path) == 2
    assert run("build-graph", "--out", tmp_path) == 2
    (tmp_path / "empty.csv").write_text("")
    assert run("ingest", tmp_path / "empty.csv", "--out", tmp_path) == 2


def test_version_mismatch_exit_2(tmp_path, capsys):
    out = _golden_run(tmp_path)
    assert run("build-graph", "--out", out) == 0
    blob = (out / "propagation.bin").read_bytes().replace(b"v1", b"v2", 1)
    (out / "propagation.bin").write_bytes(blob)
    assert run("evaluate", "--out", out) == 2
    assert "ArtifactVersionError" in capsys.readouterr().err


def test_fingerprint_mismatch_exit_2(tmp_path, capsys):
    out = _golden_run(tmp_path)
    assert run("build-graph", "--out", out) == 0
    reg = StationRegistry((Station("a", "A", 40.70, -74.0, 0), Station("c", "C", 40.71, -74.0, 1)))
    art.write_registry(out / "registry.csv", reg)
    assert run("evaluate", "--out", out, "--set", "test_days=1", "--set", "val_days=1") == 2
    assert "FingerprintMismatchError" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_3(trips_csv, tmp_path, capsys):
    path, _ = trips_csv
    out = tmp_path / "nan"
    assert run("ingest", path, "--out", out) == 0
    assert run("build-graph", "--out", out) == 0
    assert run("train", "--out", out, *TINY, "--set", "lr=1e300") == 3
    assert "NumericalError" in capsys.readouterr().err


def test_predict_off_grid(trips_csv, tmp_path):
    out = _golden_run(tmp_path)
    assert run("build-graph", "--out", out) == 0
    assert run("predict", "--out", out, "--at", "2021-06-02 12:10:00") == 1
    assert run("predict", "--out", out, "--at", "2021-06-01 01:00:00") == 2
