# ccanlab/layers.py
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ccanlab.tensor import (
    Parameter, Tensor, add, dropout, embedding, get_default_dtype, layer_norm, matmul, mul, relu,
)


class Module:
    """Parameter container. Parameters and sub-modules are discovered from attributes in definition order."""

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                params[full] = child
            else:
                params.update(child.named_parameters(prefix=f"{full}."))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator], init: str = "xavier",
                 scale: float = 1.0):
        if init == "xavier":
            limit = scale * np.sqrt(6.0 / (d_in + d_out))
            weight = rng.uniform(-limit, limit, size=(d_in, d_out))
        elif init == "normal":
            weight = rng.normal(0.0, scale, size=(d_in, d_out))
        elif init == "zeros":
            weight = np.zeros((d_in, d_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, rate: float = 0.0):
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)
        self.rate = rate

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        hidden = dropout(relu(self.inner(x)), self.rate, rng, self.training)
        return self.outer(hidden)


class Embedding(Module):
    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, d_model ** -0.5, size=(vocab_size, d_model)))
        self.scale = float(np.sqrt(d_model))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return mul(embedding(self.weight, ids), self.scale)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape [max_len, d_model]."""
    positions = np.arange(max_len)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table.astype(get_default_dtype())
