"""Physical-unit metrics, the seeded multi-run protocol, and comparison reports."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import PreparedData, invert_target
from .errors import NumericError, ShapeError, ValidationError
from .layers import Module
from .model import FUSER, LinearRegression, ModelConfig, ablation_variants, build
from .training import TrainConfig, TrainHistory, predict, train

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3, 4, 5)
# ablation rows come first and the full model last
ABLATION_ROW_ORDER = ("w/o Temporal GATv2", "w/o Spatial GATv2", "w/o Both GATv2", FUSER)
REPORT_COLUMNS = ("method", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "num_runs", "seeds")


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"metric: length mismatch {pred.size} vs {target.size}")
    if pred.size == 0:
        raise ShapeError("metric: empty input")
    return pred, target


def rmse(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return math.sqrt(float(np.mean((pred - target) ** 2)))


def mae(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


@dataclass
class RunResult:
    method: str
    seed: int
    rmse: float
    mae: float
    test_mse_scaled: float
    best_epoch: int = 0
    epochs_run: int = 0
    stop_reason: str = "closed_form"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_model(model: Module, data: PreparedData) -> dict:
    """Test-split metrics: scaled-space MSE plus RMSE/MAE in µg/m³."""
    pred = predict(model, data.test.windows)
    return {
        "test_mse_scaled": float(np.mean((pred - data.test.targets) ** 2)),
        "rmse": rmse(invert_target(pred, data.scaler), invert_target(data.test.targets, data.scaler)),
        "mae": mae(invert_target(pred, data.scaler), invert_target(data.test.targets, data.scaler)),
    }


def fit_model(model: Module, data: PreparedData, train_cfg: TrainConfig) -> tuple[Module, TrainHistory | None]:
    if isinstance(model, LinearRegression):
        return model.fit(data.train.windows, data.train.targets), None
    return train(model, data.train, data.val, train_cfg)


def run_one(method: str, model: Module, data: PreparedData, train_cfg: TrainConfig,
            seed: int) -> tuple[Module, RunResult, TrainHistory | None]:
    model, history = fit_model(model, data, dataclasses.replace(train_cfg, seed=seed))
    metrics = evaluate_model(model, data)
    result = RunResult(method, seed, metrics["rmse"], metrics["mae"], metrics["test_mse_scaled"])
    if history is not None:
        result.best_epoch = history.best_epoch
        result.epochs_run = len(history)
        result.stop_reason = history.stop_reason
    return model, result, history


@dataclass
class ReportRow:
    method: str
    rmse_mean: float
    rmse_std: float | None
    mae_mean: float
    mae_std: float | None
    num_runs: int
    seeds: tuple[int, ...]

    def __post_init__(self):
        if (self.rmse_std is None) != (self.num_runs == 1) or (self.mae_std is None) != (self.num_runs == 1):
            raise ValidationError(f"report row {self.method}: std must be absent iff num_runs == 1")

    def formatted(self, column: str) -> str:
        mean = getattr(self, f"{column}_mean")
        std = getattr(self, f"{column}_std")
        return f"{mean:.3f}" if std is None else f"{mean:.3f} ± {std:.2f}"


def aggregate(method: str, results: list[RunResult]) -> ReportRow:
    """Mean and population standard deviation over runs; single runs carry no std."""
    if not results:
        raise ValidationError(f"aggregate {method}: no runs")
    rm = [r.rmse for r in results]
    ma = [r.mae for r in results]
    single = len(results) == 1
    return ReportRow(
        method,
        statistics.fmean(rm), None if single else statistics.pstdev(rm),
        statistics.fmean(ma), None if single else statistics.pstdev(ma),
        len(results), tuple(r.seed for r in results),
    )


def method_slug(method: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", method).strip("_").lower()


def run_dir(out_dir, method: str, seed: int) -> Path:
    return Path(out_dir) / method_slug(method) / f"seed_{seed}"


def save_run(result: RunResult, history: TrainHistory | None, out_dir) -> Path:
    d = run_dir(out_dir, result.method, result.seed)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    if history is not None:
        (d / "history.csv").write_text(history.to_csv())
    return d


def load_runs(out_dir, method: str, seeds) -> list[RunResult]:
    return [RunResult(**json.loads((run_dir(out_dir, method, s) / "metrics.json").read_text())) for s in seeds]


def _reraise_with_seed(exc: Exception, seed: int, method: str):
    msg = f"{method} run with seed {seed} failed: {exc}"
    if isinstance(exc, NumericError):
        raise NumericError(msg) from exc
    if isinstance(exc, ValidationError):
        raise ValidationError(msg) from exc
    raise RuntimeError(msg) from exc


def multi_run(builder: Callable[[int], Module], data: PreparedData, train_cfg: TrainConfig,
              seeds=DEFAULT_SEEDS, method: str = FUSER, out_dir=None) -> ReportRow:
    """Train one model per seed and aggregate test metrics.

    ``builder(seed)`` returns a fresh model.  With ``out_dir`` each run's
    metrics are persisted and the row is computed from the files on disk.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValidationError("multi_run: at least one seed required")
    if len(set(seeds)) != len(seeds):
        log.warning("multi_run %s: repeated seeds %s; runs will be identical", method, seeds)
    results = []
    for seed in seeds:
        try:
            _, result, history = run_one(method, builder(seed), data, train_cfg, seed)
        except Exception as exc:  # noqa: BLE001 - re-raised with the seed attached
            _reraise_with_seed(exc, seed, method)
        log.info("%s seed %d: rmse %.4f mae %.4f (%s)", method, seed, result.rmse, result.mae, result.stop_reason)
        results.append(result)
        if out_dir is not None:
            save_run(result, history, out_dir)
    if out_dir is not None:
        results = load_runs(out_dir, method, seeds)
    return aggregate(method, results)


def config_builder(kind: str, model_cfg: ModelConfig) -> Callable[[int], Module]:
    def builder(seed: int) -> Module:
        return build(kind, dataclasses.replace(model_cfg, seed=seed))
    return builder


@dataclass
class EvalReport:
    title: str
    rows: list[ReportRow] = field(default_factory=list)
    note: str = "mean ± population std over seeded runs; single-run rows carry no std; units µg/m³"

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            cells = [r.method, repr(r.rmse_mean), "" if r.rmse_std is None else repr(r.rmse_std),
                     repr(r.mae_mean), "" if r.mae_std is None else repr(r.mae_std),
                     str(r.num_runs), ";".join(str(s) for s in r.seeds)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ("Methods", "RMSE (µg/m³)", "MAE (µg/m³)")
        body = [(r.method, r.formatted("rmse"), r.formatted("mae")) for r in self.rows]
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(3)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        rule = "-" * (sum(widths) + 4)
        lines = [self.title, f"({self.note})", rule, fmt.format(*head), rule]
        lines += [fmt.format(*row) for row in body]
        lines.append(rule)
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        txt_path = out_dir / f"{stem}.txt"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        txt_path.write_text(self.to_text(), encoding="utf-8")
        return csv_path, txt_path


def run_ablation(data: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 seeds=DEFAULT_SEEDS, out_dir=None) -> EvalReport:
    variants = dict(ablation_variants(model_cfg))
    report = EvalReport("Ablation study (STGAT-Fuser)")
    for name in ABLATION_ROW_ORDER:
        report.rows.append(multi_run(config_builder(FUSER, variants[name]), data, train_cfg,
                                     seeds, method=name, out_dir=out_dir))
    return report


def run_baselines(kinds, data: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  seeds=DEFAULT_SEEDS, out_dir=None) -> EvalReport:
    """Baseline comparison; MLR is deterministic and reported as one run."""
    report = EvalReport("Comparison of RMSE and MAE")
    for kind in kinds:
        kind_seeds = tuple(seeds)[:1] if kind == "MLR" else seeds
        report.rows.append(multi_run(config_builder(kind, model_cfg), data, train_cfg,
                                     kind_seeds, method=kind, out_dir=out_dir))
    return report
