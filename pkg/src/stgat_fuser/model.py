"""STGAT-Fuser assembly, ablation variants, trainable/closed-form baselines, model files."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigConflictError, FormatVersionError, ShapeError, ValidationError
from .gat import Gatv2Layer, build_complete_graph
from .layers import LSTM, Conv1d, LayerNorm, Linear, MLPHead, Module, layer_rng
from .tensor import Tensor, concat, leaky_relu, parameter

FUSER = "STGAT-Fuser"
BASELINE_KINDS = ("MLR", "MLP", "CNN", "LSTM")
FORMAT_VERSION = 1
MAGIC = b"STGF"


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 4
    num_channels: int = 7
    conv_out_channels: int = 32
    conv_kernel_size: int = 3
    gat_out_dim: int = 32
    gat_heads: int = 1
    lstm_hidden: int = 64
    fc_hidden_dims: tuple[int, ...] = (32, 1)
    use_temporal_gat: bool = True
    use_spatial_gat: bool = True
    leaky_slope: float = 0.2
    ln_eps: float = 1e-5
    mlp_hidden_dims: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fc_hidden_dims", tuple(int(d) for d in self.fc_hidden_dims))
        object.__setattr__(self, "mlp_hidden_dims", tuple(int(d) for d in self.mlp_hidden_dims))
        for name in ("window_len", "num_channels", "conv_out_channels", "conv_kernel_size",
                     "gat_out_dim", "gat_heads", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"model config: {name} must be >= 1, got {getattr(self, name)}")
        if not self.fc_hidden_dims or any(d < 1 for d in self.fc_hidden_dims):
            raise ValidationError(f"model config: fc_hidden_dims must be positive, got {self.fc_hidden_dims}")
        if self.fc_hidden_dims[-1] != 1:
            raise ValidationError("model config: fc_hidden_dims must end with the scalar output width 1")
        if any(d < 1 for d in self.mlp_hidden_dims):
            raise ValidationError(f"model config: mlp_hidden_dims must be positive, got {self.mlp_hidden_dims}")
        if self.conv_kernel_size % 2 == 0:
            raise ValidationError("model config: conv_kernel_size must be odd for same-length padding")
        if self.ln_eps <= 0:
            raise ValidationError("model config: ln_eps must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fc_hidden_dims"] = list(self.fc_hidden_dims)
        d["mlp_hidden_dims"] = list(self.mlp_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"model config: unknown keys {sorted(unknown)}")
        return cls(**d)


class FusionModel(Module):
    """conv -> [temporal GATv2, spatial GATv2] -> concat -> LSTM -> LN -> LSTM -> FC."""

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config

        def rng(name):
            return layer_rng(cfg.seed, name)

        self.conv = Conv1d(cfg.num_channels, cfg.conv_out_channels, cfg.conv_kernel_size,
                           rng("conv"), padding=(cfg.conv_kernel_size - 1) // 2)
        width = cfg.conv_out_channels
        self.temporal_graph = None
        self.temporal_gat = None
        if cfg.use_temporal_gat:
            self.temporal_graph = build_complete_graph(cfg.window_len, self_loops=True)
            self.temporal_gat = Gatv2Layer(cfg.conv_out_channels, cfg.gat_out_dim, cfg.gat_out_dim,
                                           rng("temporal_gat"), cfg.leaky_slope, cfg.gat_heads)
            width += cfg.gat_out_dim
        self.spatial_graph = None
        self.spatial_gat = None
        self.spatial_proj = None
        if cfg.use_spatial_gat:
            self.spatial_graph = build_complete_graph(cfg.num_channels, self_loops=True)
            # node j carries sensor j's series; its output is a re-weighted series of the same length
            self.spatial_gat = Gatv2Layer(cfg.window_len, cfg.gat_out_dim, cfg.window_len,
                                          rng("spatial_gat"), cfg.leaky_slope, cfg.gat_heads)
            self.spatial_proj = Linear(cfg.num_channels, cfg.gat_out_dim, rng("spatial_proj"))
            width += cfg.gat_out_dim
        self.fused_width = width
        self.lstm1 = LSTM(width, cfg.lstm_hidden, rng("lstm1"))
        self.ln = LayerNorm(cfg.lstm_hidden, cfg.ln_eps)
        self.lstm2 = LSTM(cfg.lstm_hidden, cfg.lstm_hidden, rng("lstm2"))
        self.head = MLPHead(cfg.lstm_hidden, cfg.fc_hidden_dims, rng, cfg.leaky_slope)

    def fused_features(self, x: Tensor) -> Tensor:
        cfg = self.config
        _check_input(x, cfg)
        series = x.transpose(0, 2, 1)                                   # (B, C, T)
        conv = leaky_relu(self.conv(series), cfg.leaky_slope)           # (B, F, T)
        steps = conv.transpose(0, 2, 1)                                 # (B, T, F)
        parts = [steps]
        if self.temporal_gat is not None:
            parts.append(self.temporal_gat(steps, self.temporal_graph))  # (B, T, G)
        if self.spatial_gat is not None:
            spatial = self.spatial_gat(series, self.spatial_graph)      # (B, C, T)
            parts.append(self.spatial_proj(spatial.transpose(0, 2, 1)))  # (B, T, G)
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        z = self.fused_features(x)
        out, _ = self.lstm1(z)
        out = self.ln(out)
        _, (h, _) = self.lstm2(out)
        return self.head(h).reshape(x.shape[0])


def _check_input(x: Tensor, cfg: ModelConfig):
    if x.ndim != 3 or x.shape[1] != cfg.window_len or x.shape[2] != cfg.num_channels:
        raise ShapeError(f"model: expected input (batch, {cfg.window_len}, {cfg.num_channels}), got {x.shape}")


def build_model(config: ModelConfig) -> FusionModel:
    return FusionModel(config)


def ablation_variants(base: ModelConfig | None = None) -> list[tuple[str, ModelConfig]]:
    base = base or ModelConfig()
    return [
        (FUSER, dataclasses.replace(base, use_temporal_gat=True, use_spatial_gat=True)),
        ("w/o Temporal GATv2", dataclasses.replace(base, use_temporal_gat=False, use_spatial_gat=True)),
        ("w/o Spatial GATv2", dataclasses.replace(base, use_temporal_gat=True, use_spatial_gat=False)),
        ("w/o Both GATv2", dataclasses.replace(base, use_temporal_gat=False, use_spatial_gat=False)),
    ]


# --------------------------------------------------------------------------
# baselines


class MLPBaseline(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        dims = tuple(config.mlp_hidden_dims) + (1,)
        self.head = MLPHead(config.window_len * config.num_channels, dims,
                            lambda name: layer_rng(config.seed, name), config.leaky_slope, prefix="mlp")

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.config)
        flat = x.reshape(x.shape[0], self.config.window_len * self.config.num_channels)
        return self.head(flat).reshape(x.shape[0])


class CNNBaseline(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        pad = (cfg.conv_kernel_size - 1) // 2
        self.conv1 = Conv1d(cfg.num_channels, cfg.conv_out_channels, cfg.conv_kernel_size,
                            layer_rng(cfg.seed, "cnn.conv1"), padding=pad)
        self.conv2 = Conv1d(cfg.conv_out_channels, cfg.conv_out_channels, cfg.conv_kernel_size,
                            layer_rng(cfg.seed, "cnn.conv2"), padding=pad)
        self.head = MLPHead(cfg.conv_out_channels * cfg.window_len, cfg.fc_hidden_dims,
                            lambda name: layer_rng(cfg.seed, name), cfg.leaky_slope, prefix="cnn.fc")

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        _check_input(x, cfg)
        h = leaky_relu(self.conv1(x.transpose(0, 2, 1)), cfg.leaky_slope)
        h = leaky_relu(self.conv2(h), cfg.leaky_slope)
        flat = h.reshape(x.shape[0], cfg.conv_out_channels * cfg.window_len)
        return self.head(flat).reshape(x.shape[0])


class LSTMBaseline(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        self.lstm1 = LSTM(cfg.num_channels, cfg.lstm_hidden, layer_rng(cfg.seed, "lstm.lstm1"))
        self.lstm2 = LSTM(cfg.lstm_hidden, cfg.lstm_hidden, layer_rng(cfg.seed, "lstm.lstm2"))
        self.head = MLPHead(cfg.lstm_hidden, cfg.fc_hidden_dims,
                            lambda name: layer_rng(cfg.seed, name), cfg.leaky_slope, prefix="lstm.fc")

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.config)
        out, _ = self.lstm1(x)
        _, (h, _) = self.lstm2(out)
        return self.head(h).reshape(x.shape[0])


class LinearRegression(Module):
    """Multiple linear regression on flattened windows, solved in closed form."""

    ridge = 1e-8

    def __init__(self, config: ModelConfig):
        self.config = config
        n_features = config.window_len * config.num_channels
        self.coef = parameter(np.zeros(n_features))
        self.intercept = parameter(np.zeros(1))

    def fit(self, windows: np.ndarray, targets: np.ndarray) -> LinearRegression:
        X = np.asarray(windows, dtype=np.float64).reshape(len(windows), -1)
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        if X.shape[1] != self.coef.size:
            raise ShapeError(f"MLR: expected {self.coef.size} features, got {X.shape[1]}")
        A = np.hstack([X, np.ones((len(X), 1))])
        gram = A.T @ A + self.ridge * np.eye(A.shape[1])
        w = np.linalg.solve(gram, A.T @ y)
        self.coef.data[:] = w[:-1]
        self.intercept.data[:] = w[-1:]
        return self

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.config)
        flat = x.reshape(x.shape[0], self.coef.size)
        return (flat @ self.coef.reshape(self.coef.size, 1)).reshape(x.shape[0]) + self.intercept


_BASELINES = {"MLR": LinearRegression, "MLP": MLPBaseline, "CNN": CNNBaseline, "LSTM": LSTMBaseline}


def build_baseline(kind: str, config: ModelConfig) -> Module:
    try:
        cls = _BASELINES[kind]
    except KeyError:
        raise ValidationError(f"unknown baseline kind {kind!r}; valid kinds: {', '.join(BASELINE_KINDS)}") from None
    return cls(config)


def build(kind: str, config: ModelConfig) -> Module:
    """Any model by kind name: a baseline or the fusion model."""
    return build_model(config) if kind == FUSER else build_baseline(kind, config)


def model_kind(model: Module) -> str:
    if isinstance(model, FusionModel):
        return FUSER
    for kind, cls in _BASELINES.items():
        if isinstance(model, cls):
            return kind
    raise ValidationError(f"unrecognised model type {type(model).__name__}")


# --------------------------------------------------------------------------
# model files
#
# layout: MAGIC | u32 header_len | header JSON | parameter blobs | sha256(all preceding)
# blobs are row-major little-endian float64 in header order.


@dataclass
class ModelFile:
    model: Module
    kind: str
    config: ModelConfig
    scaler: dict | None = None
    extra: dict = field(default_factory=dict)


def model_bytes(model: Module, scaler: dict | None = None, extra: dict | None = None) -> bytes:
    params = model.parameters()
    entries = []
    blobs = []
    offset = 0
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model_kind(model),
        "config": model.config.to_dict(),
        "params": entries,
        "scaler": scaler,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_model(model: Module, path, scaler: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = model_bytes(model, scaler, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return path


def read_model_file(path, expect: dict | None = None) -> ModelFile:
    """Parse and verify a model file.

    ``expect`` maps ModelConfig field names to values the caller requires,
    e.g. ``{"num_channels": 7}``; a mismatch raises ConfigConflictError.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32:
        raise ChecksumError(f"model file {path}: truncated ({len(raw)} bytes)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"model file {path}: checksum mismatch (corrupt or truncated)")
    if body[:4] != MAGIC:
        raise ValidationError(f"model file {path}: bad magic bytes")
    (header_len,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8:8 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"model file {path}: format version {header.get('format_version')}, "
                                 f"expected {FORMAT_VERSION}")
    config = ModelConfig.from_dict(header["config"])
    for key, value in (expect or {}).items():
        if getattr(config, key) != value:
            raise ConfigConflictError(f"model file {path}: {key}={getattr(config, key)} in file "
                                      f"conflicts with expected {key}={value}")
    model = build(header["kind"], config)
    params = model.parameters()
    blob_start = 8 + header_len
    names = [e["name"] for e in header["params"]]
    if names != list(params):
        raise ValidationError(f"model file {path}: parameter set does not match a {header['kind']} model")
    for entry in header["params"]:
        p = params[entry["name"]]
        start = blob_start + entry["offset"]
        arr = np.frombuffer(body[start:start + entry["nbytes"]], dtype="<f8")
        if tuple(entry["shape"]) != p.shape or arr.size != p.size:
            raise ValidationError(f"model file {path}: shape mismatch for {entry['name']}")
        p.data[...] = arr.reshape(p.shape)
    return ModelFile(model, header["kind"], config, header.get("scaler"), header.get("extra") or {})


def load_model(path, expect: dict | None = None) -> Module:
    return read_model_file(path, expect).model
