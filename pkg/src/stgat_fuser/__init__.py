"""Spatial-temporal GATv2 fusion for low-cost ozone sensor calibration, on a numpy autodiff core."""
from .data import (CHANNELS, PreparedData, RawSeries, ScalerParams, WindowedDataset, chrono_split, fit_scaler,
                   load_csv, make_windows, prepare, synthesize, write_csv)
from .errors import (ChecksumError, ConfigConflictError, GraphConsumedError, NonFiniteError, NumericError,
                     SchemaError, ShapeError, ValidationError)
from .evaluation import EvalReport, mae, multi_run, rmse, run_ablation, run_baselines
from .gat import Gatv2Layer, Graph, build_complete_graph
from .model import (FusionModel, ModelConfig, ablation_variants, build_baseline, build_model, load_model,
                    save_model)
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"
