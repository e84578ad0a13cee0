"""``stflow`` command line.

Stages share one output directory::

    stflow ingest trips.csv --out run/        registry.csv, traffic.bin, traffic.csv, ingest_report.txt
    stflow build-graph --out run/             distance.bin, distance.csv, adjacency.bin, propagation.bin
    stflow train --out run/                   model.ckpt, history.csv
    stflow evaluate --out run/                metrics.txt, metrics.csv
    stflow predict --at "2021-06-30 12:00:00" forecast.csv
    stflow export-plots --out run/            fig*_*.csv

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import graph as gr
from .config import RunConfig, load_config, parse_assignments
from .errors import ConfigError, DataError, StflowError
from .ingest import (
    IngestReport,
    aggregate_traffic,
    build_station_registry,
    format_unix,
    infer_range,
    read_trips,
    to_unix,
    traffic_stats,
)
from .pipeline import (
    baseline_historical_average,
    baseline_persistence,
    evaluate,
    export_predictions,
    fit_normalizer,
    make_windows,
    split_by_time,
    train,
)
from .stgcn import STGCN

log = logging.getLogger("stflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _paths(out: Path) -> dict[str, Path]:
    names = {
        "registry": "registry.csv", "traffic": "traffic.bin", "traffic_csv": "traffic.csv",
        "ingest_report": "ingest_report.txt", "distance": "distance.bin",
        "distance_csv": "distance.csv", "adjacency": "adjacency.bin",
        "propagation": "propagation.bin", "graph_params": "graph_params.txt",
        "checkpoint": "model.ckpt", "history": "history.csv", "metrics": "metrics.txt",
        "metrics_csv": "metrics.csv", "forecast": "forecast.csv",
    }
    return {k: out / v for k, v in names.items()}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path], outputs: list[Path]) -> None:
    art.write_manifest(out / f"manifest_{command.replace('-', '_')}.json", command, cfg.digest(), cfg.seed,
                       {k: art.sha256_file(v) for k, v in inputs.items()},
                       [p.name for p in outputs])


def _load_stage_inputs(cfg: RunConfig):
    p = _paths(cfg.out_path)
    registry = art.read_registry(_require(p["registry"], "station registry"))
    traffic = art.read_traffic(_require(p["traffic"], "traffic tensor"), registry.ids)
    return p, registry, traffic


def _load_propagation(p: dict[str, Path], n: int) -> gr.PropagationOperator:
    mat = art.read_matrix(_require(p["propagation"], "propagation operator"))
    if mat.shape[0] != n:
        raise DataError(f"propagation operator is {mat.shape[0]}x{mat.shape[0]} but registry has {n} stations")
    return gr.PropagationOperator(mat)


def cmd_ingest(cfg: RunConfig, raw_csv: str | None = None) -> int:
    src = Path(raw_csv or cfg.trips_csv)
    if not str(src) or not src.exists():
        raise DataError(f"trip file not found: {src}")
    out = cfg.out_path
    p = _paths(out)
    report = IngestReport()
    trips = read_trips(src, report)
    registry = build_station_registry(trips)
    lo, hi = infer_range(trips)
    start = to_unix(cfg.date_start) if cfg.date_start else lo
    end = to_unix(cfg.date_end) if cfg.date_end else hi
    traffic = aggregate_traffic(trips, registry, start, end)
    if cfg.top_stations:
        keep = traffic.busiest(cfg.top_stations)
        registry = registry.subset(keep)
        traffic = traffic.select_stations(keep)
    art.write_registry(p["registry"], registry)
    art.write_traffic(p["traffic"], traffic)
    art.atomic_write(p["traffic_csv"], art.traffic_csv(traffic))
    lines = art.ingest_report_text(report)
    lines += art.key_value_text({
        "n_stations": len(registry), "n_bins": traffic.n_bins,
        "range_start": format_unix(traffic.origin), "range_end": format_unix(traffic.end),
        "total_traffic": int(traffic.values.sum()),
    })
    art.atomic_write(p["ingest_report"], lines)
    _manifest(out, "ingest", cfg, {"trips": src},
              [p["registry"], p["traffic"], p["traffic_csv"], p["ingest_report"]])
    log.info("ingested %d trips into %d stations x %d bins", report.rows_kept, len(registry), traffic.n_bins)
    return 0


def cmd_build_graph(cfg: RunConfig) -> int:
    p = _paths(cfg.out_path)
    registry = art.read_registry(_require(p["registry"], "station registry"))
    d, adj, prop = gr.build_graph(registry, cfg.sigma_sq_value, cfg.epsilon)
    art.write_matrix(p["distance"], d.d)
    art.atomic_write(p["distance_csv"], art.matrix_csv(d.d, registry.ids))
    art.write_matrix(p["adjacency"], adj.w)
    art.write_matrix(p["propagation"], prop.p)
    n_edges = int(np.count_nonzero(adj.w)) // 2
    art.atomic_write(p["graph_params"], art.key_value_text(
        {"sigma_sq": repr(adj.sigma_sq), "epsilon": repr(adj.epsilon), "n_edges": n_edges}))
    _manifest(cfg.out_path, "build-graph", cfg, {"registry": p["registry"]},
              [p["distance"], p["distance_csv"], p["adjacency"], p["propagation"], p["graph_params"]])
    return 0


def _prepare(cfg: RunConfig):
    p, registry, traffic = _load_stage_inputs(cfg)
    prop = _load_propagation(p, len(registry))
    splits = split_by_time(make_windows(traffic, cfg.history_steps, cfg.horizon_steps), cfg.split_spec())
    return p, registry, traffic, prop, splits


def cmd_train(cfg: RunConfig) -> int:
    p, registry, _, prop, splits = _prepare(cfg)
    norm = fit_normalizer(splits.train)
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    model = STGCN(cfg.model_config(len(registry)), seed=cfg.seed, dtype=dtype)
    result = train(model, prop, splits, norm, cfg.train_config())
    ckpt = art.Checkpoint.from_model(model, norm, registry, cfg.precision)
    art.save_checkpoint(p["checkpoint"], ckpt)
    art.atomic_write(p["history"], art.history_csv(result.history))
    _manifest(cfg.out_path, "train", cfg,
              {"registry": p["registry"], "traffic": p["traffic"], "propagation": p["propagation"]},
              [p["checkpoint"], p["history"]])
    best = result.best
    log.info("best epoch %d val %.6f (final val %.6f)", best.epoch, best.val_loss, result.final.val_loss)
    return 0


def _checkpoint_path(cfg: RunConfig, explicit: str | None) -> Path:
    return Path(explicit) if explicit else _paths(cfg.out_path)["checkpoint"]


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None) -> int:
    p, registry, _, prop, splits = _prepare(cfg)
    ckpt_path = _require(_checkpoint_path(cfg, checkpoint), "checkpoint")
    ckpt = art.load_checkpoint(ckpt_path)
    model = ckpt.build_model(registry)
    reports = {
        "stgcn": evaluate(model, prop, splits.test, ckpt.normalizer),
        "persistence": baseline_persistence(splits.test),
        "historical_average": baseline_historical_average(splits.train, splits.test),
    }
    art.atomic_write(p["metrics"], art.metrics_text(reports))
    art.atomic_write(p["metrics_csv"], art.metrics_csv(reports))
    _manifest(cfg.out_path, "evaluate", cfg,
              {"checkpoint": ckpt_path, "traffic": p["traffic"], "propagation": p["propagation"]},
              [p["metrics"], p["metrics_csv"]])
    for name, rep in reports.items():
        print(f"{name:20s} mae={rep.mae:.4f} rmse={rep.rmse:.4f} mape_masked={rep.mape_masked:.2f}%")
    return 0


def cmd_predict(cfg: RunConfig, at: str, checkpoint: str | None = None) -> int:
    p, registry, traffic = _load_stage_inputs(cfg)
    prop = _load_propagation(p, len(registry))
    ckpt_path = _require(_checkpoint_path(cfg, checkpoint), "checkpoint")
    ckpt = art.load_checkpoint(ckpt_path)
    model = ckpt.build_model(registry)
    t0 = to_unix(at)
    m, h = ckpt.config.history_steps, ckpt.config.horizon_steps
    if (t0 - traffic.origin) % traffic.bin_seconds:
        raise ConfigError(f"--at {at} is not on a {traffic.bin_seconds}-second bin edge")
    k = (t0 - traffic.origin) // traffic.bin_seconds
    if k < m or k > traffic.n_bins:
        raise DataError(f"--at {at} needs {m} bins of history inside the traffic tensor")
    x = ckpt.normalizer.apply(traffic.values[k - m:k].astype(np.float64))[None, :, :, None]
    pred = np.maximum(ckpt.normalizer.invert(model.predict(x, prop))[0], 0.0)
    rows = [[format_unix(t0 + s * traffic.bin_seconds), sid, art.fmt(pred[s, j])]
            for s in range(h) for j, sid in enumerate(registry.ids)]
    art.atomic_write(p["forecast"], art.csv_text(["bin_timestamp", "station_id", "y_pred"], rows))
    _manifest(cfg.out_path, "predict", cfg, {"checkpoint": ckpt_path, "traffic": p["traffic"]},
              [p["forecast"]])
    return 0


def cmd_export_plots(cfg: RunConfig, checkpoint: str | None = None) -> int:
    out = cfg.out_path
    p, registry, traffic = _load_stage_inputs(cfg)
    stats = traffic_stats(traffic, cfg.hist_bin_width)
    files = {
        "fig1_step_mean.csv": art.step_mean_csv(stats),
        "fig2_station_mean.csv": art.station_mean_csv(stats),
        "fig2_histogram.csv": art.histogram_csv(stats.hist_edges, stats.hist_counts),
    }
    inputs = {"registry": p["registry"], "traffic": p["traffic"]}
    if p["distance"].exists():
        files["fig4_distance.csv"] = art.matrix_csv(art.read_matrix(p["distance"]), registry.ids)
        inputs["distance"] = p["distance"]
    ckpt_path = _checkpoint_path(cfg, checkpoint)
    if ckpt_path.exists():
        prop = _load_propagation(p, len(registry))
        ckpt = art.load_checkpoint(ckpt_path)
        model = ckpt.build_model(registry)
        splits = split_by_time(make_windows(traffic, ckpt.config.history_steps, ckpt.config.horizon_steps),
                               cfg.split_spec())
        export = export_predictions(model, prop, splits.test, ckpt.normalizer)
        files["fig5_predictions.csv"] = art.predictions_csv(export)
        files["fig5_step_mean.csv"] = art.prediction_step_csv(export)
        files["fig6_station_mean.csv"] = art.prediction_station_csv(export)
        files["fig6_histogram.csv"] = art.prediction_histogram_csv(export, cfg.hist_bin_width)
        inputs["checkpoint"] = ckpt_path
    written = [art.atomic_write(out / name, text) for name, text in files.items()]
    _manifest(out, "export-plots", cfg, inputs, written)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="artifact directory (overrides out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stflow", description="Bike-share station traffic forecasting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    ing = sub.add_parser("ingest", parents=[common], help="parse trips into registry and traffic tensor")
    ing.add_argument("raw_csv", nargs="?", help="trip CSV or zip (defaults to trips_csv)")
    sub.add_parser("build-graph", parents=[common], help="distance matrix and propagation operator")
    sub.add_parser("train", parents=[common], help="train the STGCN")
    ev = sub.add_parser("evaluate", parents=[common], help="test-split metrics and baselines")
    ev.add_argument("--checkpoint")
    pr = sub.add_parser("predict", parents=[common], help="forecast the bins starting at a timestamp")
    pr.add_argument("--at", required=True, help="first forecast bin, 'YYYY-MM-DD HH:MM:SS'")
    pr.add_argument("--checkpoint")
    ex = sub.add_parser("export-plots", parents=[common], help="data behind the figures")
    ex.add_argument("--checkpoint")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return parse_assignments(overrides, cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg, args.raw_csv)
        if args.command == "build-graph":
            return cmd_build_graph(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if args.command == "predict":
            return cmd_predict(cfg, args.at, args.checkpoint)
        return cmd_export_plots(cfg, args.checkpoint)
    except StflowError as exc:
        print(f"stflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"stflow: DataError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
