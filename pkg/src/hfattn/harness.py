"""Optimizer x learning-rate x feature x model sweep: training, evaluation,
plot-data emission and ranking.

Every cell derives its own seed from the master seed and its coordinates,
so a cell's outputs do not depend on which other cells run or in what order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .attention import ModelConfig, init_parameters
from .data import (DEFAULT_BIN_WIDTHS, SERIES_FEATURES, FeatureSeries, MinMaxScaler, SupervisedWindows,
                   aggregate_death_counts, generate_synthetic, load_csv, split_indices,
                   train_test_split, windowize)
from .lstm import LstmConfig, init_lstm
from .optim import KINDS, DEFAULT_LRS, Optimizer, OptimizerSpec

log = logging.getLogger(__name__)

MODELS = ("attention", "lstm")
SEED_ENV = "HFATTN_SEED"
REPORT_NAME = "report.json"
RANKING_NAME = "rankings.csv"

# cells singled out in the ranking report: (feature, model, optimizer, lr)
NOTABLE_CELLS = (
    ("serum_creatinine", "attention", "rmsprop", 0.001),
    ("ejection_fraction", "attention", "sgd", 0.01),
)


class ConfigError(ValueError):
    pass


class DivergedError(ArithmeticError):
    pass


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "42"))


def lr_label(lr: float) -> str:
    return repr(float(lr))


@dataclass
class SweepConfig:
    data_path: Optional[str] = None
    synthetic: bool = False
    n_records: int = 299
    data_seed: int = 0
    features: list = field(default_factory=lambda: ["serum_creatinine", "ejection_fraction"])
    models: list = field(default_factory=lambda: ["attention"])
    optimizers: list = field(default_factory=lambda: list(KINDS))
    learning_rates: list = field(default_factory=lambda: list(DEFAULT_LRS))
    epochs: int = 300
    lookback: int = 5
    bin_widths: dict = field(default_factory=lambda: dict(DEFAULT_BIN_WIDTHS))
    test_fraction: float = 0.2
    seed: int = field(default_factory=default_seed)
    output_dir: str = "runs/sweep"
    workers: int = 1
    model: dict = field(default_factory=dict)
    lstm: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("features", "models", "optimizers", "learning_rates"):
            vals = getattr(self, name)
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"{name} must be a non-empty list")
            if len(set(vals)) != len(vals):
                raise ConfigError(f"{name} contains duplicates")
        _subset("features", self.features, SERIES_FEATURES)
        _subset("models", self.models, MODELS)
        _subset("optimizers", self.optimizers, KINDS)
        if any(not (isinstance(lr, (int, float)) and lr > 0) for lr in self.learning_rates):
            raise ConfigError("learning rates must be positive numbers")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.synthetic and not self.data_path:
            raise ConfigError("give a data_path or set synthetic")
        for f, w in self.bin_widths.items():
            if not w > 0:
                raise ConfigError(f"bin width for {f} must be positive")
        self.model_config()
        LstmConfig(**self.lstm)

    def model_config(self) -> ModelConfig:
        kw = {"max_len": max(64, self.lookback)}
        kw.update(self.model)
        try:
            return ModelConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None

    def bin_width(self, feature: str) -> float:
        return float(self.bin_widths.get(feature, DEFAULT_BIN_WIDTHS[feature]))

    def cells(self) -> list["Cell"]:
        return [Cell(feature, model, opt, float(lr))
                for feature in self.features for model in self.models
                for opt in self.optimizers for lr in self.learning_rates]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SweepConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def _subset(name, vals, allowed):
    bad = [v for v in vals if v not in allowed]
    if bad:
        raise ConfigError(f"{name}: unknown value(s) {bad}; allowed {list(allowed)}")


@dataclass(frozen=True)
class Cell:
    feature: str
    model: str
    optimizer: str
    lr: float

    @property
    def id(self) -> str:
        return f"{self.feature}__{self.model}__{self.optimizer}__lr{lr_label(self.lr)}"


def derive_seed(master: int, *coords) -> int:
    payload = json.dumps([int(master), *[lr_label(c) if isinstance(c, float) else c for c in coords]])
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:8], "big") >> 1


# ------------------------------------------------------------ train / eval


def build_model(kind: str, config: SweepConfig, seed: int):
    if kind == "attention":
        return init_parameters(config.model_config(), seed)
    if kind == "lstm":
        return init_lstm(LstmConfig(**config.lstm), seed)
    raise ConfigError(f"unknown model {kind!r}")


def train(model, windows: SupervisedWindows, spec: OptimizerSpec, epochs: int, seed: int,
          cell: str = "") -> tuple[object, list[float]]:
    """Full-batch training on MSE; returns the model and per-epoch loss.

    ``history[e]`` is the loss evaluated before the update of epoch ``e``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(windows) == 0:
        raise ValueError("no training windows")
    rng = np.random.default_rng(seed)
    opt = Optimizer(spec)
    x = T.Tensor(windows.inputs)
    y = T.Tensor(windows.targets)
    history = []
    # overflow in a diverging run surfaces as DivergedError, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            _epoch(model, x, y, opt, rng, history, epoch, cell)
    return model, history


def _epoch(model, x, y, opt, rng, history, epoch, cell):
    tape = T.Tape()
    P = model.bind(tape)
    try:
        loss = T.mse_loss(model.predict_windows(x, training=True, rng=rng, params=P), y)
    except T.NonFiniteError as exc:
        raise DivergedError(f"{cell or 'run'} diverged at epoch {epoch}: {exc}") from None
    history.append(loss.item())
    T.backward(tape, loss)
    opt.apply(model.params, {k: tape.grad(t).data for k, t in P.items()})
    if not all(np.isfinite(v).all() for v in model.params.values()):
        raise DivergedError(f"{cell or 'run'} diverged at epoch {epoch}: non-finite parameters")


def predict(model, inputs: np.ndarray) -> np.ndarray:
    return model.predict_windows(T.Tensor(inputs)).data.reshape(-1)


def metrics(pred, actual) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    err = pred - actual
    mse = float(np.mean(err * err))
    return {"mse": mse, "mae": float(np.mean(np.abs(err))), "rmse": math.sqrt(mse)}


def evaluate(model, windows: SupervisedWindows, scaler=None) -> tuple[dict, np.ndarray]:
    """Metrics in count units plus the inverse-scaled predictions."""
    scaler = scaler or windows.scaler
    pred = scaler.inverse(predict(model, windows.inputs))
    actual = scaler.inverse(windows.targets.reshape(-1))
    return metrics(pred, actual), pred


# ------------------------------------------------------------------- sweep


@dataclass
class FeatureData:
    series: FeatureSeries
    train_series: FeatureSeries
    windows: SupervisedWindows
    train_idx: np.ndarray
    test_idx: np.ndarray


def load_records(config: SweepConfig):
    if config.synthetic:
        return generate_synthetic(config.n_records, config.data_seed)
    return load_csv(config.data_path)


def prepare_feature(records, feature: str, config: SweepConfig) -> FeatureData:
    width = config.bin_width(feature)
    series = aggregate_death_counts(records, feature, width)
    rec_train, _ = train_test_split(records, config.test_fraction, derive_seed(config.seed, "records"))
    train_series = aggregate_death_counts(rec_train, feature, width, start=series.bin_edges[0],
                                          n_bins=len(series))
    lookback = config.lookback
    train_idx, test_idx = split_indices(len(series) - lookback, config.test_fraction,
                                        derive_seed(config.seed, "windows", feature))
    # scaler sees only the bins that training windows touch
    seen = sorted({p for j in train_idx.tolist() for p in range(j, j + lookback + 1)})
    counts = np.asarray(series.counts, dtype=np.float64)[seen]
    windows = windowize(series, lookback, MinMaxScaler(float(counts.min()), float(counts.max())))
    return FeatureData(series, train_series, windows, train_idx, test_idx)


def _plot_rows(series: FeatureSeries, index: np.ndarray, pred: Optional[np.ndarray]) -> list:
    predicted: list = [None] * len(series)
    if pred is not None:
        for pos, v in zip(index.tolist(), pred.tolist()):
            predicted[pos] = v
    return [(x, c, p) for x, c, p in zip(series.values, series.counts, predicted)]


def _cell_file(out: Path, cell: Cell) -> Path:
    return out / "cells" / f"{cell.id}.csv"


def run_cell(config: SweepConfig, cell: Cell, fd: FeatureData) -> dict:
    seed = derive_seed(config.seed, cell.model, cell.optimizer, cell.lr, cell.feature)
    t0 = time.perf_counter()
    result = {"id": cell.id, "feature": cell.feature, "model": cell.model, "optimizer": cell.optimizer,
              "lr": cell.lr, "seed": seed, "status": "succeeded", "error": None}
    spec = OptimizerSpec.make(cell.optimizer, cell.lr)
    model = build_model(cell.model, config, seed)
    train_w = fd.windows.subset(fd.train_idx)
    test_w = fd.windows.subset(fd.test_idx)
    pred = None
    try:
        model, history = train(model, train_w, spec, config.epochs, seed, cell.id)
        train_m, _ = evaluate(model, train_w)
        test_m, _ = evaluate(model, test_w)
        pred = fd.windows.scaler.inverse(predict(model, fd.windows.inputs))
        if not all(math.isfinite(v) for v in (*train_m.values(), *test_m.values())):
            raise DivergedError(f"{cell.id}: non-finite metrics")
        result.update(train_mse=train_m["mse"], train_mae=train_m["mae"], train_rmse=train_m["rmse"],
                      test_mse=test_m["mse"], test_mae=test_m["mae"], test_rmse=test_m["rmse"],
                      initial_loss=history[0], final_loss=history[-1], loss_history=history)
    except (DivergedError, T.NonFiniteError) as exc:
        pred = None
        result.update(status="diverged", error=str(exc), train_mse=None, train_mae=None, train_rmse=None,
                      test_mse=None, test_mae=None, test_rmse=None, initial_loss=None, final_loss=None,
                      loss_history=None)
    out = Path(config.output_dir)
    path = emit_plot_data(fd.series, _plot_rows(fd.series, fd.windows.index, pred), _cell_file(out, cell))
    result["artifact"] = path.relative_to(out).as_posix()
    result["predicted"] = [r[2] for r in _plot_rows(fd.series, fd.windows.index, pred)]
    result["_wall_time"] = time.perf_counter() - t0
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def emit_plot_data(actual: FeatureSeries, rows, path: Union[str, Path]) -> Path:
    """Per-cell CSV: feature_value, actual_count, predicted_count.

    ``rows`` is either ``(value, count, predicted)`` triples or a plain
    sequence of predicted counts aligned with the bins.  Bins with no
    prediction (the first ``lookback`` bins) are left empty.
    """
    rows = list(rows)
    if len(rows) != len(actual):
        raise ValueError(f"predicted series has {len(rows)} entries, actual has {len(actual)}")
    if rows and not isinstance(rows[0], (tuple, list)):
        rows = list(zip(actual.values, actual.counts, rows))
    try:
        return _write_csv(Path(path), ("feature_value", "actual_count", "predicted_count"), rows)
    except OSError as exc:
        raise OSError(f"cannot write plot data to {path}: {exc}") from exc


def read_plot_csv(path: Union[str, Path]) -> tuple[list[str], list[list[Optional[float]]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) if v != "" else None for v in row] for row in reader]
    return header, rows


def _emit_overlays(config: SweepConfig, results: list[dict], data: dict) -> list[str]:
    out = Path(config.output_dir)
    by_id = {r["id"]: r for r in results}
    paths = []
    for feature in config.features:
        series = data[feature].series
        for model in config.models:
            for opt in config.optimizers:
                cols = [by_id[Cell(feature, model, opt, float(lr)).id]["predicted"] for lr in config.learning_rates]
                header = ["feature_value", "actual_count"] + [f"predicted_lr_{lr_label(lr)}" for lr in config.learning_rates]
                rows = [(x, c, *vals) for x, c, *vals in zip(series.values, series.counts, *cols)]
                p = _write_csv(out / "overlays" / f"{feature}__{model}__{opt}.csv", header, rows)
                paths.append(p.relative_to(out).as_posix())
        if len(config.models) > 1:
            for opt in config.optimizers:
                for lr in config.learning_rates:
                    cols = [by_id[Cell(feature, m, opt, float(lr)).id]["predicted"] for m in config.models]
                    header = ["feature_value", "actual_count"] + [f"predicted_{m}" for m in config.models]
                    rows = [(x, c, *vals) for x, c, *vals in zip(series.values, series.counts, *cols)]
                    name = f"{feature}__{opt}__lr{lr_label(lr)}.csv"
                    p = _write_csv(out / "comparisons" / name, header, rows)
                    paths.append(p.relative_to(out).as_posix())
    return paths


def _rank_key(cell: dict):
    mse = cell.get("test_mse")
    bad = cell.get("status") != "succeeded" or mse is None
    return (bad, math.inf if bad else mse, cell["lr"], cell["optimizer"], cell["model"])


def rank_configs(report: Union["RunReport", dict], feature: str) -> list[dict]:
    """Cells for ``feature`` ordered by test MSE, then lower lr, then name.

    Diverged cells sort after every succeeded cell.
    """
    cells = report.cells if isinstance(report, RunReport) else report["cells"]
    chosen = [c for c in cells if c["feature"] == feature]
    if not chosen:
        raise KeyError(f"report has no cells for feature {feature!r}")
    return sorted(chosen, key=_rank_key)


@dataclass
class RunReport:
    config: dict
    cells: list
    series: dict
    artifacts: list
    wall_times: dict = field(default_factory=dict)

    @property
    def features(self) -> list[str]:
        return list(dict.fromkeys(c["feature"] for c in self.cells))

    @property
    def diverged(self) -> list[str]:
        return [c["id"] for c in self.cells if c["status"] != "succeeded"]

    def rankings(self) -> dict:
        return {f: [c["id"] for c in rank_configs(self, f)] for f in self.features}

    def notable(self) -> list[dict]:
        ranks = self.rankings()
        rows = []
        for feature, model, opt, lr in NOTABLE_CELLS:
            cid = Cell(feature, model, opt, lr).id
            if feature in ranks and cid in ranks[feature]:
                rows.append({"id": cid, "rank": ranks[feature].index(cid) + 1, "of": len(ranks[feature])})
        return rows

    def model_comparison(self) -> list[dict]:
        """Attention vs LSTM under identical optimizer, lr and feature."""
        by_id = {c["id"]: c for c in self.cells}
        rows = []
        for c in self.cells:
            if c["model"] != "attention":
                continue
            other = by_id.get(Cell(c["feature"], "lstm", c["optimizer"], c["lr"]).id)
            if other is None:
                continue
            a, b = c.get("test_mse"), other.get("test_mse")
            better = None
            if a is not None and b is not None:
                better = "attention" if a < b else "lstm" if b < a else "tie"
            rows.append({"feature": c["feature"], "optimizer": c["optimizer"], "lr": c["lr"],
                         "attention_test_mse": a, "lstm_test_mse": b, "lower_test_mse": better})
        return rows

    def to_dict(self) -> dict:
        return {"config": self.config, "cells": self.cells, "series": self.series,
                "rankings": self.rankings(), "notable": self.notable(),
                "model_comparison": self.model_comparison(), "artifacts": self.artifacts}

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / REPORT_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        write_rankings(self, out / RANKING_NAME)
        return path

    @classmethod
    def load(cls, out_dir: Union[str, Path]) -> "RunReport":
        path = Path(out_dir) / REPORT_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no report at {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        return cls(d["config"], d["cells"], d["series"], d["artifacts"])


def write_rankings(report: RunReport, path: Path) -> Path:
    rows = []
    for f in report.features:
        for rank, c in enumerate(rank_configs(report, f), start=1):
            rows.append((f, rank, c["model"], c["optimizer"], c["lr"], c.get("test_mse"), c["status"]))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("feature", "rank", "model", "optimizer", "lr", "test_mse", "status"))
        for row in rows:
            w.writerow([row[0], row[1], row[2], row[3], lr_label(row[4]), _fmt(row[5]), row[6]])
    return Path(path)


def format_rankings(report: RunReport) -> str:
    lines = []
    for f in report.features:
        lines.append(f"== {f}")
        for rank, c in enumerate(rank_configs(report, f), start=1):
            mse = "diverged" if c["status"] != "succeeded" else f"{c['test_mse']:.6g}"
            lines.append(f"{rank:3d}  {c['model']:9s} {c['optimizer']:8s} lr={lr_label(c['lr']):8s} test_mse={mse}")
    for n in report.notable():
        lines.append(f"notable: {n['id']} ranked {n['rank']}/{n['of']}")
    for m in report.model_comparison():
        lines.append(f"attention vs lstm [{m['feature']}, {m['optimizer']}, lr={lr_label(m['lr'])}]: "
                     f"lower test MSE -> {m['lower_test_mse']}")
    return "\n".join(lines)


def _run_cell_job(args):
    return run_cell(*args)


def run_sweep(config: SweepConfig) -> RunReport:
    config.validate()
    records = load_records(config)
    data = {f: prepare_feature(records, f, config) for f in config.features}
    cells = config.cells()
    jobs = [(config, c, data[c.feature]) for c in cells]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(j) for j in jobs]
    wall = {r["id"]: r.pop("_wall_time") for r in results}
    for r in results:
        log.info("%s: %s (%.1fs)", r["id"], r["status"], wall[r["id"]])
    artifacts = [r["artifact"] for r in results] + _emit_overlays(config, results, data)
    series = {f: {"feature_value": list(d.series.values), "count_all_records": list(d.series.counts),
                  "count_train_records": list(d.train_series.counts)} for f, d in data.items()}
    cfg = config.to_dict()
    cfg.pop("workers")
    report = RunReport(cfg, results, series, artifacts, wall)
    report.write(config.output_dir)
    return report
