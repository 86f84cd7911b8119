"""Finite-difference verification of every layer type and the full model loss."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .gat import Gatv2Layer, build_complete_graph, gatv2_aggregate, gatv2_attention, gatv2_scores
from .layers import LSTM, Conv1d, LayerNorm, Linear
from .model import ModelConfig, build_model
from .tensor import Tensor, finite_diff_check
from .training import mse_loss

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _sample(size: int, limit: int | None, rng: np.random.Generator):
    if limit is None or size <= limit:
        return None
    return rng.choice(size, size=limit, replace=False)


def check_tensors(loss_fn, tensors, eps: float = EPS, limit: int | None = None,
                  rng: np.random.Generator | None = None) -> float:
    """Max relative error of ``loss_fn()`` w.r.t. each tensor (optionally sampled elements)."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        worst = max(worst, finite_diff_check(lambda _: loss_fn(), t, eps, _sample(t.size, limit, rng)))
    return worst


def _projection(rng, shape):
    return Tensor(rng.normal(size=shape))


def check_linear(rng) -> float:
    layer = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    w = _projection(rng, (4, 3))
    return check_tensors(lambda: (layer(x) * w).sum(), [layer.weight, layer.bias, x])


def check_conv1d(rng) -> float:
    layer = Conv1d(3, 4, 3, rng, padding=1)
    x = Tensor(rng.normal(size=(2, 3, 5)))
    w = _projection(rng, (2, 4, 5))
    return check_tensors(lambda: (layer(x) * w).sum(), [layer.kernel, layer.bias, x])


def check_layer_norm(rng) -> float:
    layer = LayerNorm(6)
    layer.gain.data[:] = rng.uniform(0.5, 1.5, 6)
    layer.offset.data[:] = rng.normal(size=6)
    x = Tensor(rng.normal(size=(3, 4, 6)))
    w = _projection(rng, (3, 4, 6))
    return check_tensors(lambda: (layer(x) * w).sum(), [layer.gain, layer.offset, x])


def check_lstm(rng) -> float:
    layer = LSTM(4, 5, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    h0 = Tensor(rng.normal(scale=0.5, size=(2, 5)))
    c0 = Tensor(rng.normal(scale=0.5, size=(2, 5)))
    w_out = _projection(rng, (2, 3, 5))
    w_c = _projection(rng, (2, 5))

    def loss():
        out, (_, c) = layer(x, h0, c0)
        return (out * w_out).sum() + (c * w_c).sum()

    return check_tensors(loss, [layer.weight_ih, layer.weight_hh, layer.bias, x, h0, c0])


def check_gatv2(rng) -> float:
    graph = build_complete_graph(5, self_loops=True)
    layer = Gatv2Layer(3, 6, 4, rng)
    H = Tensor(rng.normal(size=(2, 5, 3)))
    w = _projection(rng, (2, 5, 4))

    def loss():
        alpha = gatv2_attention(gatv2_scores(layer, H, graph), graph)
        return (gatv2_aggregate(layer, H, graph, alpha) * w).sum()

    return check_tensors(loss, [*layer.parameters().values(), H])


def check_model(model_cfg: ModelConfig, rng, batch: int = 3, limit: int | None = 6) -> float:
    model = build_model(model_cfg)
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch, model_cfg.window_len, model_cfg.num_channels)))
    y = Tensor(rng.uniform(0.0, 1.0, size=batch))
    return check_tensors(lambda: mse_loss(model(x), y), list(model.parameters().values()), limit=limit, rng=rng)


LAYER_CHECKS = {
    "linear": check_linear,
    "conv1d": check_conv1d,
    "layer_norm": check_layer_norm,
    "lstm": check_lstm,
    "gatv2": check_gatv2,
}


def run_gradcheck(model_cfg: ModelConfig | None = None, seed: int = 0,
                  model_limit: int | None = 6) -> list[CheckResult]:
    """Run every layer check plus the full-model MSE loss check."""
    model_cfg = dataclasses.replace(model_cfg or ModelConfig(), seed=seed)
    results = []
    for name, fn in LAYER_CHECKS.items():
        results.append(CheckResult(name, fn(np.random.default_rng([seed, len(results)]))))
    rng = np.random.default_rng([seed, len(results)])
    results.append(CheckResult("stgat_fuser_loss", check_model(model_cfg, rng, limit=model_limit)))
    return results
