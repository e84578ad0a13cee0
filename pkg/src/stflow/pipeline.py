"""Windowing, chronological splits, training, evaluation and baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ParameterError
from .graph import PropagationOperator
from .ingest import TrafficTensor, histogram
from .stgcn import STGCN, ModelParams

log = logging.getLogger(__name__)

DAY = 86400


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised windows over a ``[T, N]`` series, addressed by start bin.

    Sample ``k`` reads history bins ``[k, k+M)`` and targets ``[k+M, k+M+H)``.
    Windows are materialised on demand so overlapping samples share memory.
    """

    series: np.ndarray
    starts: np.ndarray
    history: int
    horizon: int
    origin: int
    station_ids: tuple[str, ...]
    bin_seconds: int = 1800

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_nodes(self) -> int:
        return self.series.shape[1]

    @property
    def target_times(self) -> np.ndarray:
        return self.origin + (self.starts + self.history) * self.bin_seconds

    def subset(self, idx) -> WindowedDataset:
        return WindowedDataset(self.series, self.starts[idx], self.history, self.horizon,
                               self.origin, self.station_ids, self.bin_seconds)

    def inputs(self, idx=None) -> np.ndarray:
        """``[S, M, N, 1]`` histories in raw counts."""
        starts = self.starts if idx is None else self.starts[idx]
        rows = starts[:, None] + np.arange(self.history)
        return self.series[rows][..., None]

    def targets(self, idx=None) -> np.ndarray:
        """``[S, H, N]`` targets in raw counts."""
        starts = self.starts if idx is None else self.starts[idx]
        rows = starts[:, None] + self.history + np.arange(self.horizon)
        return self.series[rows]


def make_windows(traffic: TrafficTensor, history: int, horizon: int) -> WindowedDataset:
    t = traffic.n_bins
    if history < 1 or horizon < 1:
        raise ParameterError("history and horizon must be >= 1")
    if t < history + horizon:
        raise ParameterError(f"series too short: {t} bins < {history} + {horizon}")
    series = traffic.values.astype(np.float64)
    series.flags.writeable = False
    return WindowedDataset(series, np.arange(t - history - horizon + 1, dtype=np.int64),
                           history, horizon, traffic.origin, traffic.station_ids,
                           traffic.bin_seconds)


@dataclass(frozen=True)
class SplitSpec:
    test_days: int = 3
    val_days: int = 3

    def boundaries(self, last_bin_time: int) -> tuple[int, int]:
        """(val_start, test_start), counted back from the midnight after ``last_bin_time``."""
        day_end = last_bin_time - last_bin_time % DAY + DAY
        test_start = day_end - self.test_days * DAY
        return test_start - self.val_days * DAY, test_start


@dataclass(frozen=True)
class Splits:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    val_start: int
    test_start: int


def split_by_time(dataset: WindowedDataset, spec: SplitSpec = SplitSpec()) -> Splits:
    """Assign each sample to the split holding its first target bin."""
    last = dataset.origin + (len(dataset.series) - 1) * dataset.bin_seconds
    val_start, test_start = spec.boundaries(last)
    tt = dataset.target_times
    test_idx = np.flatnonzero(tt >= test_start)
    val_idx = np.flatnonzero((tt >= val_start) & (tt < test_start))
    train_idx = np.flatnonzero(tt < val_start)
    for name, idx in (("train", train_idx), ("validation", val_idx), ("test", test_idx)):
        if idx.size == 0:
            raise ParameterError(f"{name} split is empty; the series spans too few days")
    return Splits(dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx),
                  val_start, test_start)


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_normalizer(train: WindowedDataset) -> Normalizer:
    """Z-score statistics over every history value of the training windows.

    Overlapping windows count a bin once per window that reads it, exactly as
    if the windows were materialised.
    """
    if len(train) == 0:
        raise ParameterError("cannot fit a normalizer on an empty split")
    cover = np.zeros(len(train.series) + 1, dtype=np.int64)
    np.add.at(cover, train.starts, 1)
    np.add.at(cover, train.starts + train.history, -1)
    weight = np.cumsum(cover)[:-1].astype(np.float64)
    rows = train.series
    total = weight.sum() * rows.shape[1]
    mean = float((weight * rows.sum(axis=1)).sum() / total)
    var = float((weight * ((rows - mean) ** 2).sum(axis=1)).sum() / total)
    std = math.sqrt(var)
    return Normalizer(mean, std if std > 0 else 1.0)


# -- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mape_masked: float
    mape_raw: float
    n_cells: int
    n_masked_cells: int
    # raw MAPE divides by near-zero truths on sparse station data
    mape_raw_unreliable: bool = True

    def as_dict(self) -> dict[str, float | int | bool]:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape_masked": self.mape_masked,
            "mape_raw": self.mape_raw,
            "n_cells": self.n_cells,
            "n_masked_cells": self.n_masked_cells,
            "mape_raw_unreliable": self.mape_raw_unreliable,
        }


MAPE_MASK_THRESHOLD = 1.0


def compute_metrics(pred, truth) -> MetricsReport:
    """MAE, RMSE and percentage errors over every cell.

    Masked MAPE uses only cells with ``truth >= 1``.  Raw MAPE divides by
    ``max(|truth|, machine eps)`` and is kept for comparison only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"prediction shape {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise ParameterError("cannot score an empty prediction set")
    err = np.abs(pred - truth)
    mae = float(err.mean())
    rmse = float(np.sqrt((err * err).mean()))
    assert rmse >= mae * (1 - 1e-12), (rmse, mae)
    mask = truth >= MAPE_MASK_THRESHOLD
    masked = float(100.0 * (err[mask] / np.abs(truth[mask])).mean()) if mask.any() else float("nan")
    raw = float(100.0 * (err / np.maximum(np.abs(truth), np.finfo(np.float64).eps)).mean())
    return MetricsReport(mae, rmse, masked, raw, int(pred.size), int(mask.sum()))


# -- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    is_best: bool


@dataclass
class TrainResult:
    best_params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def best(self) -> EpochRecord:
        return min((r for r in self.history if r.is_best), key=lambda r: r.val_loss)

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def _normalized_batch(ds: WindowedDataset, idx, norm: Normalizer, dtype):
    x = norm.apply(ds.inputs(idx)).astype(dtype, copy=False)
    y = norm.apply(ds.targets(idx)).astype(dtype, copy=False)
    return x, y


def dataset_loss(model: STGCN, p: PropagationOperator, ds: WindowedDataset, norm: Normalizer,
                 batch_size: int = 64) -> float:
    """MSE in normalised units over a whole split."""
    dtype = model.params["output.fc.bias"].dtype
    total = 0.0
    count = 0
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        x, y = _normalized_batch(ds, idx, norm, dtype)
        diff = model.predict(x, p) - y
        total += float((diff.astype(np.float64) ** 2).sum())
        count += diff.size
    return total / count


def train(model: STGCN, p: PropagationOperator, splits: Splits, norm: Normalizer,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch MSE training with Adam and early stopping on validation loss.

    The model ends holding the best-validation parameters, which are also
    returned.  A zero learning rate leaves parameters untouched and only
    records losses.
    """
    if config.lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {config.lr}")
    params = model.parameters()
    optimizer = None
    if config.lr > 0:
        optimizer = ad.Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                            eps=config.eps)
    rng = np.random.default_rng(config.seed)
    dtype = model.params["output.fc.bias"].dtype
    train_ds = splits.train
    best_val = math.inf
    best = model.snapshot()
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        seen = 0
        running = 0.0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[lo:lo + config.batch_size])
            x, y = _normalized_batch(train_ds, idx, norm, dtype)
            ad.zero_grad(params)
            loss = ad.mse_loss(model(x, p), y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            if optimizer is not None:
                ad.backward(loss)
                optimizer.step()
            running += value * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = dataset_loss(model, p, splits.val, norm, max(64, config.batch_size))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss {val_loss} at epoch {epoch}")
        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
        history.append(EpochRecord(epoch, train_loss, val_loss, improved))
        log.info("epoch %d train %.6f val %.6f%s", epoch, train_loss, val_loss, " *" if improved else "")
        if stale >= config.patience:
            break
    ad.zero_grad(params)
    model.restore(best)
    return TrainResult(best, history)


def predict_split(model: STGCN, p: PropagationOperator, ds: WindowedDataset, norm: Normalizer,
                  batch_size: int = 64) -> np.ndarray:
    """Raw (unclipped) forecasts in count units, ``[S, H, N]``."""
    dtype = model.params["output.fc.bias"].dtype
    out = np.empty((len(ds), ds.horizon, ds.n_nodes), dtype=np.float64)
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        x = norm.apply(ds.inputs(idx)).astype(dtype, copy=False)
        out[idx] = norm.invert(model.predict(x, p))
    return out


def evaluate(model: STGCN, p: PropagationOperator, test: WindowedDataset,
             norm: Normalizer) -> MetricsReport:
    if len(test) == 0:
        raise ParameterError("test split is empty")
    pred = np.maximum(predict_split(model, p, test, norm), 0.0)
    return compute_metrics(pred, test.targets())


# -- baselines ------------------------------------------------------------

def persistence_forecast(ds: WindowedDataset) -> np.ndarray:
    last = ds.series[ds.starts + ds.history - 1]  # [S, N]
    return np.repeat(last[:, None, :], ds.horizon, axis=1)


def baseline_persistence(test: WindowedDataset) -> MetricsReport:
    return compute_metrics(persistence_forecast(test), test.targets())


def _slot_of(times: np.ndarray, bin_seconds: int) -> np.ndarray:
    return (times % DAY) // bin_seconds


def historical_average_forecast(train: WindowedDataset, test: WindowedDataset) -> np.ndarray:
    """Per-(station, time-of-day) mean of the training targets."""
    slots_per_day = DAY // train.bin_seconds
    n = train.n_nodes
    sums = np.zeros((slots_per_day, n))
    counts = np.zeros(slots_per_day)
    y = train.targets()
    for h in range(train.horizon):
        slot = _slot_of(train.target_times + h * train.bin_seconds, train.bin_seconds)
        np.add.at(sums, slot, y[:, h, :])
        np.add.at(counts, slot, 1)
    station_mean = y.mean(axis=(0, 1))
    table = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], station_mean)
    out = np.empty((len(test), test.horizon, n))
    for h in range(test.horizon):
        out[:, h, :] = table[_slot_of(test.target_times + h * test.bin_seconds, test.bin_seconds)]
    return out


def baseline_historical_average(train: WindowedDataset, test: WindowedDataset) -> MetricsReport:
    return compute_metrics(historical_average_forecast(train, test), test.targets())


# -- prediction export ----------------------------------------------------

@dataclass(frozen=True)
class PredictionExport:
    """Detail rows plus the network-wide aggregates over a test window.

    ``y_pred`` is clipped at zero; aggregates are computed from the same
    arrays written to the detail table.
    """

    bin_times: np.ndarray      # [S, H]
    station_ids: tuple[str, ...]
    y_true: np.ndarray         # [S, H, N]
    y_pred: np.ndarray         # [S, H, N], clipped

    def step_means(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(timestamps, mean truth over stations, mean prediction over stations), first horizon step."""
        return self.bin_times[:, 0], self.y_true[:, 0, :].mean(axis=1), self.y_pred[:, 0, :].mean(axis=1)

    def station_means(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean truth, mean prediction) per station over the window, first horizon step."""
        return self.y_true[:, 0, :].mean(axis=0), self.y_pred[:, 0, :].mean(axis=0)

    def station_histograms(self, bin_width: float = 0.25):
        truth, pred = self.station_means()
        top = max(float(truth.max()), float(pred.max()))
        _, edges = histogram(np.array([top]), bin_width)
        n_bins = len(edges) - 1
        idx_t = np.minimum((truth / bin_width).astype(np.int64), n_bins - 1)
        idx_p = np.minimum((pred / bin_width).astype(np.int64), n_bins - 1)
        return (edges, np.bincount(idx_t, minlength=n_bins), np.bincount(idx_p, minlength=n_bins))


def export_predictions(model: STGCN | None, p: PropagationOperator | None, test: WindowedDataset,
                       norm: Normalizer | None, raw_pred: np.ndarray | None = None) -> PredictionExport:
    """Collect clipped forecasts against truth; ``raw_pred`` bypasses the model."""
    if raw_pred is None:
        raw_pred = predict_split(model, p, test, norm)
    times = test.target_times[:, None] + test.bin_seconds * np.arange(test.horizon)
    return PredictionExport(times, test.station_ids, test.targets(), np.maximum(raw_pred, 0.0))
