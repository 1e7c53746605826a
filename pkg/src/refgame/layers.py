"""Trainable layers (linear, batch norm, embedding, GRU cell), Adam, and checkpoints."""

from __future__ import annotations

import os
from collections import OrderedDict
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


class Module:
    """Container that discovers parameters and buffers from its attributes.

    Attributes holding a trainable :class:`Tensor` are parameters, attributes
    holding a :class:`Module` are submodules, and names listed in
    ``_buffers`` are non-trainable arrays that still belong in checkpoints.
    """

    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + key + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value.data.copy()
            elif isinstance(value, Module):
                out.update(value.state_dict(prefix + key + "."))
            elif key in self._buffers:
                out[prefix + key] = np.array(value, dtype=np.float64)
        return out

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for key, value in vars(self).items():
            name = prefix + key
            if isinstance(value, Tensor) and value.requires_grad:
                if state[name].shape != value.shape:
                    raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {value.shape}")
                value.data = np.array(state[name], dtype=np.float64)
            elif isinstance(value, Module):
                value.load_state_dict(state, name + ".")
            elif key in self._buffers:
                setattr(self, key, np.array(state[name], dtype=np.float64))


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = ad.parameter(_uniform(rng, 1.0 / np.sqrt(in_features), (out_features, in_features)))
        self.bias = ad.parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ad.ShapeError(
                f"linear: input shape {x.shape} does not match weight shape {self.weight.shape}")
        return x @ self.weight.T + self.bias


class BatchNorm(Module):
    """Batch normalization over the feature axis of a [batch x features] input.

    Train mode normalizes with the biased batch variance and folds the
    unbiased estimate into ``running_var``; eval mode reads the running
    statistics as constants.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = ad.parameter(np.ones(num_features))
        self.beta = ad.parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ad.ShapeError(f"batchnorm: input shape {x.shape} vs {self.num_features} features")
        if not self.training:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * scale
            return xhat * self.gamma + self.beta
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm: train mode needs a batch of at least 2 rows")
        centred = x - x.mean(axis=0, keepdims=True)
        var = (centred * centred).mean(axis=0, keepdims=True)
        xhat = centred / ad.sqrt(var + self.eps)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
        self.running_var = (1 - m) * self.running_var + m * var.data[0] * n / (n - 1)
        return xhat * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.num_embeddings = num_embeddings
        self.dim = dim
        self.table = ad.parameter(_uniform(rng, 0.1, (num_embeddings, dim)))

    def __call__(self, ids) -> Tensor:
        return ad.gather_rows(self.table, ids)


class GRUCell(Module):
    """Single GRU cell: h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        wb, ub = 1.0 / np.sqrt(input_size), 1.0 / np.sqrt(hidden_size)
        for gate in "zrh":
            setattr(self, f"W_{gate}", ad.parameter(_uniform(rng, wb, (hidden_size, input_size))))
            setattr(self, f"U_{gate}", ad.parameter(_uniform(rng, ub, (hidden_size, hidden_size))))
            setattr(self, f"b_{gate}", ad.parameter(np.zeros(hidden_size)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ad.ShapeError(f"gru: input shape {x.shape} vs W shape {self.W_z.shape}")
        if h.shape != (x.shape[0], self.hidden_size):
            raise ad.ShapeError(f"gru: hidden shape {h.shape} vs U shape {self.U_z.shape}")
        z = ad.sigmoid(x @ self.W_z.T + h @ self.U_z.T + self.b_z)
        r = ad.sigmoid(x @ self.W_r.T + h @ self.U_r.T + self.b_r)
        candidate = ad.tanh(x @ self.W_h.T + (r * h) @ self.U_h.T + self.b_h)
        return h + z * (candidate - h)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"adam: parameter {p.name or p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


def save_checkpoint(path: str | os.PathLike, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """Write named float64 arrays, in order, behind a format-version entry."""
    payload = OrderedDict(__version__=np.array([CHECKPOINT_VERSION], dtype=np.float64))
    for name, arr in arrays.items():
        if name.startswith("__"):
            raise ValueError(f"reserved checkpoint name {name!r}")
        payload[name] = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    with np.load(path) as npz:
        if "__version__" not in npz.files:
            raise ValueError(f"{path}: not a checkpoint (missing version header)")
        version = int(npz["__version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return OrderedDict((k, npz[k]) for k in npz.files if k != "__version__")
