"""Forward diffusion processes, time distributions and weighting functions.

Every process here is of the scale-and-noise form
``x_t = alpha(t) x_0 + beta(t) eps``. The EDM process (``alpha = 1``,
``beta = t``) is the one used for training; ``vp`` is the same process viewed
through its data-prediction reparameterisation, which only differs in
truncating sampled noise levels to ``[0.01, 156.6155]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

SIGMA_MIN = 0.01
SIGMA_MAX = 156.6155


@dataclass(frozen=True)
class ForwardProcess:
    kind: str = "edm"
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    alpha_fn: Callable | None = None
    beta_fn: Callable | None = None
    horizon: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("edm", "vp", "linear"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.kind == "linear" and (self.alpha_fn is None or self.beta_fn is None or self.horizon is None):
            raise ValueError("linear process needs alpha_fn, beta_fn and horizon")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    @classmethod
    def linear(cls, alpha_fn: Callable, beta_fn: Callable, horizon: float) -> "ForwardProcess":
        """General scale-and-noise process given vectorised ``alpha(t)``, ``beta(t)``."""
        return cls(kind="linear", alpha_fn=alpha_fn, beta_fn=beta_fn, horizon=float(horizon))

    @property
    def T(self) -> float:
        return self.horizon if self.kind == "linear" else self.sigma_max

    @property
    def is_edm(self) -> bool:
        return self.kind in ("edm", "vp")

    @property
    def clamps(self) -> bool:
        return self.kind == "vp"

    def alpha(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.is_edm:
            return np.ones_like(t)
        return np.asarray(self.alpha_fn(t), dtype=np.float64)

    def beta(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.is_edm:
            return t.copy()
        return np.asarray(self.beta_fn(t), dtype=np.float64)

    def check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(~(t > 0)) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"time must lie in (0, {self.T}], got range [{t.min()}, {t.max()}]")
        return t


def _rows(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t


def diffuse(process: ForwardProcess, x0, t, eps) -> ad.Tensor:
    """``alpha(t) x0 + beta(t) eps`` with ``t`` scalar or one value per row.

    Gradient flows through ``x0`` only.
    """
    x0 = ad.as_tensor(x0)
    eps = np.asarray(ad.as_tensor(eps).value)
    if eps.shape != x0.shape:
        raise ad.ShapeError(f"diffuse: noise shape {eps.shape} != data shape {x0.shape}")
    t = process.check_time(t)
    a, b = process.alpha(t), process.beta(t)
    if t.ndim == 1 and x0.ndim == 2:
        a, b = a[:, None], b[:, None]
    return ad.add(ad.mul(x0, a), b * eps)


def transition_score(process: ForwardProcess, x_t, x0, t) -> np.ndarray:
    """``grad_{x_t} log q_t(x_t | x_0) = -(x_t - alpha x_0) / beta^2``, always detached."""
    xt = np.asarray(ad.as_tensor(x_t).value)
    x0 = np.asarray(ad.as_tensor(x0).value)
    t = process.check_time(t)
    a, b = process.alpha(t), process.beta(t)
    if t.ndim == 1 and xt.ndim == 2:
        a, b = a[:, None], b[:, None]
    return -(xt - a * x0) / (b * b)


def transition_score_tensor(process: ForwardProcess, x_t, x0, t) -> ad.Tensor:
    """Same quantity built from tape ops, so gradients through ``x_t``/``x0`` are tracked."""
    x_t, x0 = ad.as_tensor(x_t), ad.as_tensor(x0)
    t = process.check_time(t)
    a, b = process.alpha(t), process.beta(t)
    if t.ndim == 1 and x_t.ndim == 2:
        a, b = a[:, None], b[:, None]
    return ad.mul(ad.sub(x_t, ad.mul(x0, a)), -1.0 / (b * b))


# --- time distributions -----------------------------------------------------


@dataclass(frozen=True)
class LogNormalTime:
    p_mean: float = -2.0
    p_std: float = 2.0

    def from_normal(self, n: np.ndarray) -> np.ndarray:
        return np.exp(self.p_mean + self.p_std * np.asarray(n, dtype=np.float64))


@dataclass(frozen=True)
class UniformTime:
    low: float = 0.0
    high: float = 1.0

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return self.low + (self.high - self.low) * np.asarray(u, dtype=np.float64)


TimeDistribution = LogNormalTime | UniformTime


def clamp_time(process: ForwardProcess, t) -> np.ndarray:
    """Keep sampled times inside the process range.

    ``vp`` truncates to ``[sigma_min, sigma_max]``; other kinds only cap at
    the horizon and floor at the smallest positive double.
    """
    t = np.asarray(t, dtype=np.float64)
    if process.clamps:
        return np.clip(t, process.sigma_min, process.sigma_max)
    return np.clip(t, np.finfo(float).tiny, process.T)


def sample_time(dist: TimeDistribution, rng: np.random.Generator, size: int, process: ForwardProcess | None = None):
    if isinstance(dist, LogNormalTime):
        t = dist.from_normal(rng.standard_normal(size))
    elif isinstance(dist, UniformTime):
        t = dist.from_uniform(rng.uniform(size=size))
    else:
        raise TypeError(f"unsupported time distribution {dist!r}")
    return t if process is None else clamp_time(process, t)


# --- weighting functions ----------------------------------------------------


@dataclass(frozen=True)
class EdmLambda:
    sigma_data: float = 0.5

    def __call__(self, t, gap=None) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t <= 0):
            raise ValueError("EDM weighting needs t > 0")
        return (t * t + self.sigma_data**2) / (t * self.sigma_data) ** 2


@dataclass(frozen=True)
class ConstantWeight:
    value: float = 1.0

    def __call__(self, t, gap=None) -> np.ndarray:
        return np.full(np.shape(t), float(self.value))


@dataclass(frozen=True)
class AdaptiveGenWeight:
    """``1 / ||d_assistant(x_t) - d_ref(x_t)||`` per sample, with a floor on the gap."""

    floor: float = 1e-8

    def __call__(self, t, gap=None) -> np.ndarray:
        if gap is None:
            raise ValueError("adaptive weighting needs the denoiser gap vectors")
        gap = np.asarray(gap, dtype=np.float64)
        norm = np.sqrt((gap * gap).sum(axis=-1)) if gap.ndim >= 1 else np.abs(gap)
        return 1.0 / np.maximum(norm, self.floor)


WeightingFunction = EdmLambda | ConstantWeight | AdaptiveGenWeight


def weight(wf: WeightingFunction, t, gap=None) -> np.ndarray:
    return wf(t, gap)
