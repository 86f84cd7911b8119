"""Neural building blocks: 1-D convolution, LSTM, layer norm, fully connected."""
from __future__ import annotations

import zlib

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, concat, leaky_relu, parameter, sigmoid, sqrt, tanh


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, layer name).

    Keying on the name keeps a layer's initial weights independent of which
    other layers exist, so ablated models share initialisation with the full one.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            _collect(name, value, params)
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(prefix, value, out):
    if isinstance(value, Tensor):
        if value.requires_grad:
            out[prefix] = value
    elif isinstance(value, Module):
        for name, p in value.parameters().items():
            out[f"{prefix}.{name}"] = p
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect(f"{prefix}.{i}", item, out)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        if in_features < 1 or out_features < 1:
            raise ValidationError(f"linear: dims must be >= 1, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init_uniform(rng, (out_features, in_features), in_features)
        self.bias = init_uniform(rng, (out_features,), in_features)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: expected last dim {self.in_features}, got shape {x.shape}")
        if x.ndim == 1:
            y = x.reshape(1, self.in_features) @ self.weight.swap_last()
            return y.reshape(self.out_features) + self.bias
        return x @ self.weight.swap_last() + self.bias


class Conv1d(Module):
    """Cross-correlation over the last axis of ``(batch, in_channels, length)``."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, padding: int = 0):
        if kernel_size < 1:
            raise ValidationError(f"conv1d: kernel_size must be >= 1, got {kernel_size}")
        if padding < 0:
            raise ValidationError(f"conv1d: padding must be >= 0, got {padding}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.kernel = init_uniform(rng, (out_channels, in_channels, kernel_size), fan_in)
        self.bias = init_uniform(rng, (out_channels,), fan_in)

    def output_length(self, length: int) -> int:
        return length + 2 * self.padding - self.kernel_size + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d: expected (batch, {self.in_channels}, length), got {x.shape}")
        batch, _, length = x.shape
        out_len = self.output_length(length)
        if out_len < 1:
            raise ShapeError(f"conv1d: input length {length} too short for kernel {self.kernel_size}"
                             f" with padding {self.padding}")
        if self.padding:
            pad = Tensor(np.zeros((batch, self.in_channels, self.padding)))
            x = concat([pad, x, pad], axis=2)
        k = self.kernel_size
        # im2col: column (c * k + offset) holds x[:, c, offset:offset + out_len]
        taps = [x[:, :, j:j + out_len].reshape(batch, self.in_channels, 1, out_len) for j in range(k)]
        cols = taps[0] if k == 1 else concat(taps, axis=2)
        cols = cols.reshape(batch, self.in_channels * k, out_len)
        w = self.kernel.reshape(self.out_channels, self.in_channels * k)
        return w @ cols + self.bias.reshape(self.out_channels, 1)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValidationError(f"layer_norm: eps must be positive, got {eps}")
        self.features = features
        self.eps = eps
        self.gain = parameter(np.ones(features))
        self.offset = parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.features:
            raise ShapeError(f"layer_norm: expected last dim {self.features}, got shape {x.shape}")
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / sqrt(var + self.eps) * self.gain + self.offset


class LSTM(Module):
    """Single-layer unidirectional LSTM, gate order (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        if input_size < 1 or hidden_size < 1:
            raise ValidationError(f"lstm: dims must be >= 1, got {input_size}, {hidden_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.weight_ih = init_uniform(rng, (4 * h, input_size), input_size)
        self.weight_hh = init_uniform(rng, (4 * h, h), h)
        bias = rng.uniform(-np.sqrt(1.0 / h), np.sqrt(1.0 / h), size=4 * h)
        bias[h:2 * h] = 1.0
        self.bias = parameter(bias)

    def cell(self, x_proj: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One step given the precomputed input projection ``x W_ih^T + b``."""
        H = self.hidden_size
        gates = x_proj + h @ self.weight_hh.swap_last()
        i = sigmoid(gates[:, 0:H])
        f = sigmoid(gates[:, H:2 * H])
        g = tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * tanh(c)
        return h, c

    def forward(self, x: Tensor, h0: Tensor | None = None, c0: Tensor | None = None):
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(f"lstm: expected (batch, time, {self.input_size}), got {x.shape}")
        batch, steps, _ = x.shape
        H = self.hidden_size
        h = Tensor(np.zeros((batch, H))) if h0 is None else h0
        c = Tensor(np.zeros((batch, H))) if c0 is None else c0
        for name, state in (("h0", h), ("c0", c)):
            if state.shape != (batch, H):
                raise ShapeError(f"lstm: {name} must have shape {(batch, H)}, got {state.shape}")
        proj = x @ self.weight_ih.swap_last() + self.bias
        outputs = []
        for t in range(steps):
            h, c = self.cell(proj[:, t, :], h, c)
            outputs.append(h.reshape(batch, 1, H))
        out = outputs[0] if steps == 1 else concat(outputs, axis=1)
        return out, (h, c)


class MLPHead(Module):
    """Stack of Linear layers with LeakyReLU between them (none after the last)."""

    def __init__(self, in_features: int, dims, rng_for, slope: float = 0.2, prefix: str = "fc"):
        self.slope = slope
        self.layers = []
        width = in_features
        for i, d in enumerate(dims):
            self.layers.append(Linear(width, d, rng_for(f"{prefix}.{i}")))
            width = d

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, self.slope)
        return x
