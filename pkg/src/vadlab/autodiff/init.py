"""Seeded parameter initialisation.

All randomness comes from numpy's PCG64 bit generator seeded with a 64-bit
integer, drawn sequentially in a fixed parameter order.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              name: str | None = None) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    data = rng.standard_normal(shape) * std
    return Tensor(data.astype(default_dtype()), requires_grad=True, name=name)


def constant(shape: tuple[int, ...], value: float, name: str | None = None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=default_dtype()), requires_grad=True, name=name)
