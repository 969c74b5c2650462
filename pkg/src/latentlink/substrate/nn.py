"""Layers built on the tensor engine.

Initialization: weights are truncated-normal (two standard deviations)
scaled by ``1/sqrt(fan_in)``; biases start at zero.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    # variance of a N(0,1) truncated at +-2
    return out * (std / 0.8796)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Module:
    """Minimal container: parameters and submodules are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name == "buffers" and isinstance(value, dict):
                for k, v in value.items():
                    yield prefix + k, v
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    @property
    def params(self) -> ParameterSet:
        cached = self.__dict__.get("_param_set")
        if cached is None:
            cached = ParameterSet(OrderedDict(self.named_parameters()))
            self.__dict__["_param_set"] = cached
        return cached

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """All parameter and buffer arrays, keyed by dotted name."""
        out = OrderedDict((k, t.data) for k, t in self.named_parameters())
        out.update((k, v) for k, v in self.named_buffers())
        return out

    def load_state(self, values: dict) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for prefix, mod in _buffer_owners(self):
            for k in mod.buffers:
                buffers[prefix + k] = (mod, k)
        expected = set(params) | set(buffers)
        if set(values) != expected:
            missing = sorted(expected - set(values))
            extra = sorted(set(values) - expected)
            raise ValueError(f"state mismatch: missing={missing[:5]} extra={extra[:5]}")
        for k, v in values.items():
            if k in params:
                t = params[k]
                if t.shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k}: expected {t.shape}, got {np.shape(v)}")
                t.data = np.array(v, dtype=t.data.dtype)
            else:
                mod, name = buffers[k]
                if mod.buffers[name].shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k}")
                mod.buffers[name] = np.array(v, dtype=mod.buffers[name].dtype)
        self.params.bump()


def _buffer_owners(module: Module, prefix: str = ""):
    if isinstance(vars(module).get("buffers"), dict):
        yield prefix, module
    for name, value in vars(module).items():
        if isinstance(value, Module):
            yield from _buffer_owners(value, f"{prefix}{name}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _buffer_owners(item, f"{prefix}{name}.{i}.")


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = parameter(truncated_normal(rng, (n_in, n_out), 1.0 / np.sqrt(n_in)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Batch normalization over axis 0 of a (batch, features) input.

    Training mode normalizes with the batch statistics and updates the
    running estimates; eval mode uses the running estimates only.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.momentum = momentum
        self.eps = eps
        self.buffers = {
            "running_mean": np.zeros(dim, dtype=T.get_default_dtype()),
            "running_var": np.ones(dim, dtype=T.get_default_dtype()),
        }

    def __call__(self, x):
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs a batch of at least 2 in training mode")
            mu = T.mean(x, axis=0, keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=0, keepdims=True)
            xhat = xc / T.power(var + self.eps, 0.5)
            n = x.shape[0]
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - m) * rm + m * mu.data[0]).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - m) * rv + m * var.data[0] * n / (n - 1)).astype(rv.dtype)
        else:
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            xhat = (x - rm) * (1.0 / np.sqrt(rv + self.eps))
        return xhat * self.gamma + self.beta


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(truncated_normal(rng, (c_out, c_in, kernel, kernel), 1.0 / np.sqrt(fan_in)))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride)


class GRUCell(Module):
    """Gated recurrent unit: reset/update gates and a candidate state."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.w_input = parameter(truncated_normal(rng, (n_in, 3 * n_hidden), 1.0 / np.sqrt(n_in)))
        self.w_hidden = parameter(truncated_normal(rng, (n_hidden, 3 * n_hidden), 1.0 / np.sqrt(n_hidden)))
        self.b_input = parameter(np.zeros(3 * n_hidden))
        self.b_hidden = parameter(np.zeros(3 * n_hidden))

    def __call__(self, x, h):
        n = self.n_hidden
        gi = T.matmul(x, self.w_input) + self.b_input
        gh = T.matmul(h, self.w_hidden) + self.b_hidden
        reset = T.sigmoid(gi[:, :n] + gh[:, :n])
        update = T.sigmoid(gi[:, n:2 * n] + gh[:, n:2 * n])
        cand = T.tanh(gi[:, 2 * n:] + reset * gh[:, 2 * n:])
        return cand + update * (h - cand)


_ACTIVATIONS = {"elu": T.elu, "relu": T.relu, "none": lambda x: x}


class MLP(Module):
    """Stack of dense layers, each followed by an optional norm and an activation,
    then an unnormalized linear output layer (omitted when ``n_out`` is None)."""

    def __init__(self, n_in: int, hidden, n_out, rng: np.random.Generator,
                 norm: str = "layer", act: str = "elu"):
        self.layers = []
        self.norms = []
        self.act = act
        width = n_in
        for h in hidden:
            self.layers.append(Dense(width, h, rng))
            if norm == "layer":
                self.norms.append(LayerNorm(h))
            elif norm == "batch":
                self.norms.append(BatchNorm(h))
            elif norm != "none":
                raise ValueError(f"unknown norm {norm!r}")
            width = h
        self.out = Dense(width, n_out, rng) if n_out is not None else None
        self.out_dim = n_out if n_out is not None else width

    def __call__(self, x):
        act = _ACTIVATIONS[self.act]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.norms:
                x = self.norms[i](x)
            x = act(x)
        return self.out(x) if self.out is not None else x
