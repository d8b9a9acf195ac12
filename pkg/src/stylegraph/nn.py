"""Shared neural building blocks: parameter init, the residual FFN, registries."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, parameter, relu


def init_matrix(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix."""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

def init_bias(shape, dtype=np.float64) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype))

def init_embedding(rng: np.random.Generator, shape, dtype=np.float64) -> Tensor:
    """N(0, 0.01) embedding table (variance 0.01, std 0.1)."""
    return parameter((rng.standard_normal(shape) * 0.1).astype(dtype))


@dataclass
class FFNParams:
    """Position-wise feed-forward block: d -> ratio*d -> d."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, ratio: int = 4, dtype=np.float64) -> "FFNParams":
        h = ratio * d
        return FFNParams(
            w1=init_matrix(rng, d, (d, h), dtype),
            b1=init_bias(h, dtype),
            w2=init_matrix(rng, h, (h, d), dtype),
            b2=init_bias(d, dtype),
        )


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    """Residual position-wise feed-forward: x + relu(x W1 + b1) W2 + b2."""
    d = x.shape[-1]
    if p.w1.shape[0] != d or p.w2.shape[1] != d:
        raise ShapeError(f"ffn params sized for d={p.w1.shape[0]}, input has d={d}")
    hidden = relu(matmul(x, p.w1) + p.b1)
    return x + matmul(hidden, p.w2) + p.b2


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts and yield (dotted name, Tensor) pairs.

    Iteration order is the declaration order, so the flattened view of a
    model is stable across runs -- checkpoints and optimizers rely on that.
    """
    if isinstance(obj, Tensor):
        yield prefix or "param", obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{k}" if prefix else str(k))
    # scalars / config values are not parameters; skip silently


def tensors_of(obj) -> list[Tensor]:
    return [t for _, t in named_tensors(obj)]
