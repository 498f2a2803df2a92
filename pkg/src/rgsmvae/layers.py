"""Parameterized layers built from tensor ops.

Weight matrices are stored ``(out, in)`` so that column ``j`` holds every
weight reading input feature ``j``; that column is the unit the structured
regularizer prunes.  Parameter names follow ``block.index.role``.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


class ModelParams(Mapping):
    """Ordered registry of named parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def tensors(self):
        return list(self._params.values())

    def arrays(self) -> dict:
        return {name: t.data for name, t in self._params.items()}

    def copy_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: Mapping) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter names differ: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return int(sum(t.size for t in self._params.values()))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    hidden: int = 0
    num_layers: int = 1
    kernel: int = 0
    padding: int = 0
    stride: int = 1
    heads: int = 0
    head_dim: int = 0
    model_width: int = 0

    KINDS = ("fc", "conv1d-stack", "lstm", "bilstm", "mhsa", "postnet")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind == "mhsa":
            if self.heads * self.head_dim != self.model_width:
                raise DimensionError(
                    f"mhsa: heads x head_dim = {self.heads} x {self.head_dim} != model width {self.model_width}"
                )
        for field in ("in_features", "out_features", "hidden", "kernel", "heads", "head_dim", "model_width"):
            if getattr(self, field) < 0:
                raise ContractError(f"{field} must be positive")

    @property
    def width(self) -> int:
        """Width used by the regularization rule: output width, or hidden width per direction."""
        if self.kind in ("lstm", "bilstm"):
            return self.hidden
        if self.kind == "mhsa":
            return self.model_width
        return self.out_features


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _fan_in_uniform(rng, shape, fan_in, gain):
    # variance gain**2 / fan_in
    return _uniform(rng, shape, gain * math.sqrt(3.0 / fan_in))


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(np.float32)


class Linear:
    """``y = x W^T + b``; ``gain`` scales the fan-in init (sqrt(2) before a ReLU)."""

    def __init__(self, params: ModelParams, name: str, in_features: int, out_features: int, rng, gain=1.0):
        if in_features <= 0 or out_features <= 0:
            raise ContractError("fc widths must be positive")
        self.name = name
        self.spec = LayerSpec("fc", in_features=in_features, out_features=out_features)
        self.weight = params.add(f"{name}.weight",
                                 _fan_in_uniform(rng, (out_features, in_features), in_features, gain))
        self.bias = params.add(f"{name}.bias", np.zeros(out_features, dtype=np.float32))

    def weight_matrices(self):
        return [self.weight]

    def __call__(self, x: Tensor) -> Tensor:
        in_features = self.spec.in_features
        if x.ndim != 2 or x.shape[1] != in_features:
            raise DimensionError(f"fc {self.name}: expected input (batch, {in_features}), got {x.shape}")
        return T.add(T.matmul(x, T.transpose(self.weight)), self.bias)


class Conv1d:
    def __init__(self, params, name, in_channels, out_channels, kernel, padding, stride, rng, gain=1.0):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel, self.padding, self.stride = kernel, padding, stride
        self.weight = params.add(f"{name}.weight", _fan_in_uniform(
            rng, (out_channels, in_channels, kernel), in_channels * kernel, gain))
        self.bias = params.add(f"{name}.bias", np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv1d {self.name}: expected (batch, {self.in_channels}, T), got {x.shape}")
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "none": None}


class Conv1dStack:
    """Conv1d layers over (batch, channels, T), each followed by ``activation``."""

    def __init__(self, params, name, channels, rng, kernel=5, padding=2, stride=1, activation="relu",
                 last_activation=True):
        self.name = name
        self.spec = LayerSpec("conv1d-stack", in_features=channels[0], out_features=channels[-1],
                              num_layers=len(channels) - 1, kernel=kernel, padding=padding, stride=stride)
        gain = math.sqrt(2.0) if activation == "relu" else 1.0
        n = len(channels) - 1
        self.layers = [
            Conv1d(params, f"{name}.{i}", channels[i], channels[i + 1], kernel, padding, stride, rng,
                   gain=gain if (i < n - 1 or last_activation) else 1.0)
            for i in range(n)
        ]
        self.activation = _ACTIVATIONS[activation]
        self.last_activation = last_activation

    def weight_matrices(self):
        return [layer.weight for layer in self.layers]

    def __call__(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.activation is not None and (i < n - 1 or self.last_activation):
                x = self.activation(x)
        return x


class LSTM:
    """Multi-layer (optionally bidirectional) LSTM over (T, batch, features).

    Each direction stores ``weight_ih`` (4H, in), ``weight_hh`` (4H, H) and a
    single bias (4H); gate blocks are stacked input, forget, output, cell.
    Recurrent blocks start orthogonal and the forget bias starts at 1.
    """

    def __init__(self, params, name, input_size, hidden, num_layers, rng, bidirectional=False):
        if hidden <= 0 or input_size <= 0 or num_layers <= 0:
            raise ContractError("lstm sizes must be positive")
        self.name = name
        self.input_size = input_size
        self.hidden = hidden
        self.num_layers = num_layers
        self.bidirectional = bidirectional
        self.spec = LayerSpec("bilstm" if bidirectional else "lstm", in_features=input_size,
                              hidden=hidden, num_layers=num_layers)
        dirs = ("fwd", "bwd") if bidirectional else ("fwd",)
        self.cells = []
        for layer in range(num_layers):
            in_size = input_size if layer == 0 else hidden * len(dirs)
            row = []
            for d in dirs:
                prefix = f"{name}.l{layer}.{d}"
                w_ih = params.add(f"{prefix}.weight_ih", _fan_in_uniform(rng, (4 * hidden, in_size), in_size, 1.0))
                w_hh = params.add(f"{prefix}.weight_hh",
                                  np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=0))
                bias = np.zeros(4 * hidden, dtype=np.float32)
                bias[hidden:2 * hidden] = 1.0
                b = params.add(f"{prefix}.bias", bias)
                row.append((w_ih, w_hh, b))
            self.cells.append(row)

    def weight_matrices(self):
        return [w for row in self.cells for (w_ih, w_hh, _) in row for w in (w_ih, w_hh)]

    def _direction(self, x, w_ih, w_hh, bias, reverse):
        steps, batch, in_size = x.shape
        H = self.hidden
        xw = T.add(T.matmul(T.reshape(x, (steps * batch, in_size)), T.transpose(w_ih)), bias)
        xw = T.reshape(xw, (steps, batch, 4 * H))
        w_hh_t = T.transpose(w_hh)
        h = c = None
        outs = [None] * steps
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            g = T.reshape(T.slice_axis(xw, 0, t, t + 1), (batch, 4 * H))
            if h is not None:
                g = T.add(g, T.matmul(h, w_hh_t))
            ifo = T.sigmoid(T.slice_axis(g, 1, 0, 3 * H))
            cand = T.tanh(T.slice_axis(g, 1, 3 * H, 4 * H))
            i = T.slice_axis(ifo, 1, 0, H)
            o = T.slice_axis(ifo, 1, 2 * H, 3 * H)
            if c is None:
                c = T.mul(i, cand)
            else:
                f = T.slice_axis(ifo, 1, H, 2 * H)
                c = T.add(T.mul(f, c), T.mul(i, cand))
            h = T.mul(o, T.tanh(c))
            outs[t] = T.reshape(h, (1, batch, H))
        return T.concat(outs, axis=0), (h, c)

    def __call__(self, x):
        """Return ``(outputs, final_states)``; final states are (h, c) per layer and direction."""
        if x.ndim != 3:
            raise DimensionError(f"lstm {self.name}: expected (T, batch, features), got {x.shape}")
        if x.shape[0] == 0:
            raise ContractError(f"lstm {self.name}: empty sequence")
        if x.shape[2] != self.input_size:
            raise DimensionError(f"lstm {self.name}: expected {self.input_size} features, got {x.shape[2]}")
        finals = []
        for row in self.cells:
            outs = []
            for d, (w_ih, w_hh, b) in enumerate(row):
                out, state = self._direction(x, w_ih, w_hh, b, reverse=(d == 1))
                outs.append(out)
                finals.append(state)
            x = outs[0] if len(outs) == 1 else T.concat(outs, axis=2)
        return x, finals


class MultiHeadSelfAttention:
    """Unmasked scaled dot-product self-attention over the time axis of (T, batch, D)."""

    def __init__(self, params, name, heads, head_dim, rng, residual=True):
        self.name = name
        self.heads = heads
        self.head_dim = head_dim
        width = heads * head_dim
        self.spec = LayerSpec("mhsa", heads=heads, head_dim=head_dim, model_width=width)
        self.residual = residual
        self.q = Linear(params, f"{name}.q", width, width, rng)
        self.k = Linear(params, f"{name}.k", width, width, rng)
        self.v = Linear(params, f"{name}.v", width, width, rng)
        self.out = Linear(params, f"{name}.out", width, width, rng)

    def weight_matrices(self):
        return [self.q.weight, self.k.weight, self.v.weight, self.out.weight]

    def __call__(self, x, return_weights=False):
        width = self.heads * self.head_dim
        if x.ndim != 3 or x.shape[2] != width:
            raise DimensionError(f"mhsa {self.name}: expected (T, batch, {width}), got {x.shape}")
        steps, batch, _ = x.shape
        flat = T.reshape(T.transpose(x, (1, 0, 2)), (batch * steps, width))

        def heads(proj):
            y = T.reshape(proj(flat), (batch, steps, self.heads, self.head_dim))
            return T.transpose(y, (0, 2, 1, 3))

        q, k, v = heads(self.q), heads(self.k), heads(self.v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores)
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        y = self.out(T.reshape(ctx, (batch * steps, width)))
        y = T.transpose(T.reshape(y, (batch, steps, width)), (1, 0, 2))
        if self.residual:
            y = T.add(x, y)
        if return_weights:
            return y, attn
        return y


class PostNet:
    """Convolutional refiner returning a residual with the input's shape (batch, mel, T)."""

    def __init__(self, params, name, mel_bins, channels, rng, depth=5, kernel=5):
        if depth < 2:
            raise ContractError("postnet depth must be at least 2")
        self.mel_bins = mel_bins
        self.spec = LayerSpec("postnet", in_features=mel_bins, out_features=mel_bins, hidden=channels,
                              num_layers=depth, kernel=kernel, padding=kernel // 2)
        widths = [mel_bins] + [channels] * (depth - 1) + [mel_bins]
        self.stack = Conv1dStack(params, name, widths, rng, kernel=kernel, padding=kernel // 2,
                                 activation="tanh", last_activation=False)

    def weight_matrices(self):
        return self.stack.weight_matrices()

    def __call__(self, xhat):
        if xhat.ndim != 3 or xhat.shape[1] != self.mel_bins:
            raise DimensionError(f"postnet: expected (batch, {self.mel_bins}, T), got {xhat.shape}")
        return self.stack(xhat)
