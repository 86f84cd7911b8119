import csv
import io
import json
import logging
import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgat_fuser.errors import NumericError, ShapeError, ValidationError
from stgat_fuser.evaluation import (ABLATION_ROW_ORDER, REPORT_COLUMNS, EvalReport, ReportRow, RunResult, aggregate,
                                    config_builder, evaluate_model, mae, multi_run, rmse, run_ablation, run_baselines,
                                    run_dir)
from stgat_fuser.model import FUSER
from stgat_fuser.training import TrainConfig

QUICK = TrainConfig(max_epochs=2)


def test_metric_examples():
    assert rmse([1, 2], [1, 2]) == 0 and mae([1, 2], [1, 2]) == 0
    assert rmse([3, 4], [0, 0]) == pytest.approx(3.5355339059327378, abs=1e-12)
    assert mae([3, 4], [0, 0]) == 3.5


def test_metric_errors():
    with pytest.raises(ShapeError):
        rmse([1, 2], [1])
    with pytest.raises(ShapeError):
        mae([], [])


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_rmse_at_least_mae(p, t):
    n = min(len(p), len(t))
    assert rmse(p[:n], t[:n]) >= mae(p[:n], t[:n]) - 1e-9


def test_row_format():
    row = ReportRow("STGAT-Fuser", 5.197, 0.28, 3.1, 0.123, 5, (1, 2, 3, 4, 5))
    assert row.formatted("rmse") == "5.197 ± 0.28"
    single = ReportRow("MLR", 7.0, None, 5.0, None, 1, (1,))
    assert single.formatted("mae") == "5.000"


def test_row_std_iff_multiple_runs():
    with pytest.raises(ValidationError):
        ReportRow("x", 1.0, None, 1.0, None, 5, (1, 2, 3, 4, 5))
    with pytest.raises(ValidationError):
        ReportRow("x", 1.0, 0.1, 1.0, 0.1, 1, (1,))


def test_aggregate_population_std():
    runs = [RunResult("m", s, r, r / 2, 0.0) for s, r in zip((1, 2, 3), (1.0, 2.0, 4.0))]
    row = aggregate("m", runs)
    assert row.rmse_mean == statistics.fmean([1, 2, 4])
    assert row.rmse_std == statistics.pstdev([1, 2, 4])
    assert row.num_runs == 3 and row.seeds == (1, 2, 3)


def test_evaluate_model_in_physical_units(tiny_cfg, small_data):
    from stgat_fuser.data import invert_target
    from stgat_fuser.model import build_model
    from stgat_fuser.training import predict
    model = build_model(tiny_cfg)
    m = evaluate_model(model, small_data)
    pred = predict(model, small_data.test.windows)
    truth = invert_target(small_data.test.targets, small_data.scaler)
    assert m["rmse"] == rmse(invert_target(pred, small_data.scaler), truth)
    span = small_data.scaler.target_max - small_data.scaler.target_min
    assert m["rmse"] == pytest.approx(math.sqrt(m["test_mse_scaled"]) * span, rel=1e-12)
    assert m["rmse"] >= m["mae"]


def test_multi_run_recomputed_from_files(tiny_cfg, small_data, tmp_path):
    row = multi_run(config_builder(FUSER, tiny_cfg), small_data, QUICK, seeds=(1, 2, 3), out_dir=tmp_path)
    stored = [json.loads((run_dir(tmp_path, FUSER, s) / "metrics.json").read_text()) for s in (1, 2, 3)]
    rm = [m["rmse"] for m in stored]
    ma = [m["mae"] for m in stored]
    assert row.rmse_mean == statistics.fmean(rm) and row.rmse_std == statistics.pstdev(rm)
    assert row.mae_mean == statistics.fmean(ma) and row.mae_std == statistics.pstdev(ma)
    assert (run_dir(tmp_path, FUSER, 1) / "history.csv").exists()


def test_repeated_seeds_warn_and_zero_std(tiny_cfg, small_data, caplog):
    with caplog.at_level(logging.WARNING):
        row = multi_run(config_builder(FUSER, tiny_cfg), small_data, QUICK, seeds=(4, 4))
    assert "repeated seeds" in caplog.text
    assert row.rmse_std == 0 and row.mae_std == 0


def test_failure_names_seed(small_data):
    def builder(seed):
        if seed == 3:
            raise NumericError("boom")
        from stgat_fuser.model import ModelConfig, build_baseline
        return build_baseline("MLR", ModelConfig())
    with pytest.raises(NumericError, match="seed 3"):
        multi_run(builder, small_data, QUICK, seeds=(1, 3), method="MLR")


def test_ablation_report(tiny_cfg, small_data, tmp_path):
    report = run_ablation(small_data, tiny_cfg, QUICK, seeds=(1, 2), out_dir=tmp_path / "a")
    assert [r.method for r in report.rows] == list(ABLATION_ROW_ORDER)
    assert set(ABLATION_ROW_ORDER) == {FUSER, "w/o Temporal GATv2", "w/o Spatial GATv2", "w/o Both GATv2"}
    assert all(r.num_runs == 2 for r in report.rows)
    again = run_ablation(small_data, tiny_cfg, QUICK, seeds=(1, 2), out_dir=tmp_path / "b")
    assert report.to_csv() == again.to_csv() and report.to_text() == again.to_text()


def test_baseline_report_mlr_single(tiny_cfg, small_data):
    report = run_baselines(["MLR", "MLP"], small_data, tiny_cfg, QUICK, seeds=(1, 2))
    mlr, mlp = report.rows
    assert mlr.num_runs == 1 and mlr.rmse_std is None and "±" not in mlr.formatted("rmse")
    assert mlp.num_runs == 2 and "±" in mlp.formatted("rmse")


def test_report_csv_and_text(tmp_path):
    report = EvalReport("T", [ReportRow("MLR", 7.0, None, 5.0, None, 1, (1,)),
                              ReportRow(FUSER, 5.197, 0.28, 3.5, 0.1, 5, (1, 2, 3, 4, 5))])
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert rows[1][2] == "" and rows[2][6] == "1;2;3;4;5"
    text = report.to_text()
    assert "5.197 ± 0.28" in text and "population std" in text
    csv_path, txt_path = report.write(tmp_path)
    assert csv_path.read_text() == report.to_csv() and txt_path.read_text() == text
    assert report.row("MLR").num_runs == 1
