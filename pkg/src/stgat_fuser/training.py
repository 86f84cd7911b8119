"""MSE loss, Adam, and the early-stopped training loop."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset
from .errors import NonFiniteError, ShapeError, ValidationError
from .layers import Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 40
    min_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"train config: learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError(f"train config: betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0:
            raise ValidationError("train config: adam_eps must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("train config: batch_size, max_epochs and patience must be >= 1")
        if self.min_delta < 0:
            raise ValidationError("train config: min_delta must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"train config: unknown keys {sorted(unknown)}")
        return cls(**d)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.ndim != 1 or target.ndim != 1:
        raise ShapeError(f"mse_loss: expected 1-D prediction and target, got {pred.shape} and {target.shape}")
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: length mismatch {pred.shape[0]} vs {target.shape[0]}")
    if pred.shape[0] == 0:
        raise ShapeError("mse_loss: empty batch")
    diff = pred - target
    return (diff * diff).mean()


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient entry (e.g. an unused branch) are left alone.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"adam: gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam: non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
    return state


def predict(model: Module, windows: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Scaled-space predictions without recording a graph."""
    out = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            out.append(model(Tensor(windows[start:start + batch_size])).data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_mse(model: Module, ds: WindowedDataset) -> float:
    pred = predict(model, ds.windows)
    return float(np.mean((pred - ds.targets) ** 2))


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    stop_reason: str = ""

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{r.epoch},{r.train_mse!r},{r.val_mse!r}" for r in self.epochs]
        return "\n".join(lines) + "\n"


def train(model: Module, train_ds: WindowedDataset, val_ds: WindowedDataset,
          cfg: TrainConfig) -> tuple[Module, TrainHistory]:
    """Mini-batch Adam on MSE with validation early stopping.

    Epochs are 1-based.  An epoch improves when its validation MSE is lower
    than the best so far by more than ``min_delta``; training stops after
    ``patience`` consecutive non-improving epochs or at ``max_epochs``.  The
    model is restored to its best-validation parameters before returning.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValidationError("train: training and validation sets must be non-empty")
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = TrainHistory()
    best_params = {name: p.data.copy() for name, p in params.items()}
    stale = 0
    n = len(train_ds)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            try:
                loss = mse_loss(model(Tensor(train_ds.windows[idx])), train_ds.targets[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteError(f"train: non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, cfg)
            total += loss.item() * len(idx)
        train_mse = total / n
        val_mse = evaluate_mse(model, val_ds)
        if not np.isfinite(val_mse):
            raise NonFiniteError(f"train: non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochRecord(epoch, train_mse, val_mse))
        if val_mse < history.best_val - cfg.min_delta:
            history.best_val = val_mse
            history.best_epoch = epoch
            best_params = {name: p.data.copy() for name, p in params.items()}
            stale = 0
        else:
            stale += 1
        log.debug("epoch %d train %.6g val %.6g", epoch, train_mse, val_mse)
        if stale >= cfg.patience:
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"
    for name, p in params.items():
        p.data[...] = best_params[name]
    model.zero_grad()
    return model, history
