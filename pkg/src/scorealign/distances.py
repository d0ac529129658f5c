"""Distance functions on score differences and their derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SquaredL2:
    def value(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return (y * y).sum(axis=-1)

    def grad(self, y) -> np.ndarray:
        return 2.0 * np.asarray(y, dtype=np.float64)

    def grad_tensor(self, y) -> ad.Tensor:
        return ad.mul(y, 2.0)


@dataclass(frozen=True)
class PseudoHuber:
    """``sqrt(||y||^2 + c^2) - c`` per row; gradient norm is always below 1."""

    c: float = 0.1

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ValueError(f"pseudo-Huber c must be positive, got {self.c}")

    def value(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.sqrt((y * y).sum(axis=-1) + self.c**2) - self.c

    def grad(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return y / np.sqrt((y * y).sum(axis=-1, keepdims=True) + self.c**2)

    def grad_tensor(self, y) -> ad.Tensor:
        norm = ad.sqrt(ad.add(ad.sum(ad.square(y), axis=-1, keepdims=True), self.c**2))
        return ad.div(y, norm)


DistanceFunction = SquaredL2 | PseudoHuber


def distance_grad(d: DistanceFunction, y) -> np.ndarray:
    return d.grad(y)
