"""Training objectives: weighted DSM, the score-divergence regulariser,
the classifier-free-guidance reward, explicit rewards and the integral-KL baseline.

Every generator-side loss takes a :class:`NoiseBatch` holding the latent
draws, forward-process noise, times, classes and optional per-row weights,
so callers control randomness exactly (common random numbers, quadrature
nodes). All losses return a scalar :class:`~scorealign.autodiff.Tensor`
that is a weighted mean over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distances import DistanceFunction, PseudoHuber, SquaredL2, distance_grad
from .models import NULL_CLASS, Generator, ScoreFn, ScoreModel
from .processes import (
    AdaptiveGenWeight,
    ForwardProcess,
    TimeDistribution,
    WeightingFunction,
    diffuse,
    sample_time,
    transition_score_tensor,
)

__all__ = [
    "ClassLogit",
    "DistanceFunction",
    "LossBreakdown",
    "ModeAffinity",
    "NegSquaredDistance",
    "NoiseBatch",
    "PseudoHuber",
    "SquaredL2",
    "cfg_reward_loss",
    "di_star_reg_loss",
    "dipp_kl_loss",
    "distance_grad",
    "dsm_loss",
    "explicit_reward_loss",
]


def check_finite(name: str, t: ad.Tensor) -> ad.Tensor:
    if not np.all(np.isfinite(t.value)):
        raise FloatingPointError(f"non-finite value in {name} loss")
    return t


@dataclass
class NoiseBatch:
    z: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    classes: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.z.shape[0]
        self.t = np.broadcast_to(np.asarray(self.t, dtype=np.float64), (n,))
        self.classes = np.broadcast_to(np.asarray(self.classes, dtype=np.int64), (n,))
        self.weight = np.ones(n) if self.weight is None else np.broadcast_to(np.asarray(self.weight, float), (n,))
        if self.eps.shape[0] != n:
            raise ad.ShapeError(f"noise batch: eps rows {self.eps.shape[0]} != z rows {n}")

    def __len__(self) -> int:
        return self.z.shape[0]

    @classmethod
    def sample(
        cls,
        gen: Generator,
        n: int,
        classes,
        time_dist: TimeDistribution,
        process: ForwardProcess,
        latent_rng: np.random.Generator,
        time_rng: np.random.Generator | None = None,
        noise_rng: np.random.Generator | None = None,
    ) -> "NoiseBatch":
        time_rng = time_rng or latent_rng
        noise_rng = noise_rng or latent_rng
        z = gen.sample_latent(n, latent_rng)
        c = np.asarray(classes, dtype=np.int64)
        if c.ndim == 1 and c.size != n:
            c = latent_rng.choice(c, size=n)
        t = sample_time(time_dist, time_rng, n, process)
        eps = noise_rng.standard_normal((n, gen.data_dim))
        return cls(z, eps, t, c)


def _weighted_mean(per_row: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.mean(ad.mul(per_row, w))


def _row_sum(x: ad.Tensor) -> ad.Tensor:
    return ad.sum(x, axis=-1)


# --- assistant / reference training -----------------------------------------


def dsm_loss(
    model: ScoreModel,
    params,
    x0,
    classes,
    t,
    eps,
    process: ForwardProcess,
    lam: WeightingFunction,
    row_weight=None,
) -> ad.Tensor:
    """Weighted denoising score matching, gradient w.r.t. ``params`` only.

    Edm-parameterised models regress the denoiser onto ``x0`` with weight
    ``lam(t)``; direct models regress the score onto the transition score
    with weight ``lam(t)``. The two differ by the factor ``t^4``.
    """
    x0 = ad.detach(x0)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    xt = diffuse(process, x0, t, eps)
    lw = np.asarray(lam(t), dtype=np.float64)
    if row_weight is not None:
        lw = lw * row_weight
    if model.parameterization == "edm":
        err = ad.sub(model.denoise(params, xt, t, classes), x0)
    else:
        err = ad.sub(model.score(params, xt, t, classes), transition_score_tensor(process, xt, x0, t))
    return check_finite("dsm", _weighted_mean(_row_sum(ad.square(err)), lw))


# --- generator losses ---------------------------------------------------------


def _denoiser_gap(process: ForwardProcess, y: np.ndarray, t: np.ndarray) -> np.ndarray:
    # d = (x + beta^2 s) / alpha, so d_a - d_r = beta^2 (s_a - s_r) / alpha
    return y * (process.beta(t) ** 2 / process.alpha(t))[:, None]


def _space_scale(process: ForwardProcess, t: np.ndarray, space: str) -> np.ndarray:
    """Factor turning a score difference into the matching denoiser difference."""
    if space == "score":
        return np.ones_like(t)
    if space == "denoiser":
        return process.beta(t) ** 2 / process.alpha(t)
    raise ValueError(f"unknown loss space {space!r}")


def _time_weight(w: WeightingFunction, process, t, y_value) -> np.ndarray:
    if isinstance(w, AdaptiveGenWeight):
        return w(t, _denoiser_gap(process, y_value, t))
    return np.asarray(w(t), dtype=np.float64)


def di_star_reg_loss(
    gen: Generator,
    gen_params,
    assistant: ScoreFn,
    reference: ScoreFn,
    distance: DistanceFunction,
    process: ForwardProcess,
    w: WeightingFunction,
    batch: NoiseBatch,
    *,
    detach_direction: bool = False,
    space: str = "score",
) -> ad.Tensor:
    """Score-divergence regulariser ``-w(t) d'(y)^T (s_a(x_t) - grad log q_t(x_t|x_0))``.

    ``y = s_a(x_t) - s_ref(x_t)``. Both score functions must have frozen
    parameters; ``x_t`` stays attached so the generator gradient reaches
    them through their input. ``d'(y)`` is itself a function of the
    attached ``x_t`` (its parameters frozen), which is what makes the
    gradient equal that of the divergence under a frozen sampling
    distribution. ``detach_direction=True`` treats ``d'(y)`` as a constant
    instead.

    ``space="denoiser"`` applies the distance to the denoiser gap
    ``k y`` with ``k = beta^2 / alpha``, i.e. ``-w d'(d_a - d_ref)^T (d_a - x_0) / alpha``.
    That is the same objective with the time-dependent distance
    ``y -> d(k y)``, so the gradient identity is unchanged, but the
    ``1/t^2`` growth of score residuals at small ``t`` is gone.
    """
    x0 = gen(gen_params, batch.z, batch.classes)
    xt = diffuse(process, x0, batch.t, batch.eps)
    s_a = assistant(xt, batch.t, batch.classes)
    s_r = reference(xt, batch.t, batch.classes)
    y = ad.sub(s_a, s_r)
    k = _space_scale(process, batch.t, space)[:, None]
    y_in = ad.detach(y) if detach_direction else y
    u = ad.mul(distance.grad_tensor(ad.mul(y_in, k)), k)
    resid = ad.sub(s_a, transition_score_tensor(process, xt, x0, batch.t))
    wt = _time_weight(w, process, batch.t, y.value) * batch.weight
    return check_finite("reg", _weighted_mean(ad.neg(ad.dot(u, resid)), wt))


def dipp_kl_loss(
    gen: Generator,
    gen_params,
    assistant: ScoreFn,
    reference: ScoreFn,
    process: ForwardProcess,
    w: WeightingFunction,
    batch: NoiseBatch,
    *,
    space: str = "score",
) -> ad.Tensor:
    """Integral-KL surrogate ``w(t) (s_a - s_ref)(sg[x_t])^T x_t``.

    ``space="denoiser"`` uses the denoiser gap, i.e. an extra ``beta^2 / alpha`` weight.
    """
    x0 = gen(gen_params, batch.z, batch.classes)
    xt = diffuse(process, x0, batch.t, batch.eps)
    xs = ad.detach(xt)
    y = assistant(xs, batch.t, batch.classes).value - reference(xs, batch.t, batch.classes).value
    wt = _time_weight(w, process, batch.t, y) * batch.weight * _space_scale(process, batch.t, space)
    return check_finite("kl", _weighted_mean(ad.dot(ad.Tensor(y), xt), wt))


def cfg_reward_loss(
    gen: Generator,
    gen_params,
    reference: ScoreFn,
    process: ForwardProcess,
    w: WeightingFunction,
    batch: NoiseBatch,
    omega: float = 1.0,
    *,
    space: str = "score",
) -> ad.Tensor:
    """Negative implicit guidance reward ``-w(t) omega (s_ref(sg[x_t]|c) - s_ref(sg[x_t]|null))^T x_t``.

    Its generator gradient is that of ``-E w(t) log p_ref(x_t|c)/p_ref(x_t)``.
    ``space="denoiser"`` uses the denoiser difference (extra ``beta^2 / alpha`` weight).
    """
    x0 = gen(gen_params, batch.z, batch.classes)
    xt = diffuse(process, x0, batch.t, batch.eps)
    xs = ad.detach(xt)
    n = len(batch)
    s_c = reference(xs, batch.t, batch.classes).value
    s_null = reference(xs, batch.t, np.full(n, NULL_CLASS)).value
    direction = omega * (s_c - s_null)
    wt = _time_weight(w, process, batch.t, direction) * batch.weight * _space_scale(process, batch.t, space)
    return check_finite("cfg", ad.neg(_weighted_mean(ad.dot(ad.Tensor(direction), xt), wt)))


# --- explicit rewards ---------------------------------------------------------


def _per_class(targets, classes) -> np.ndarray:
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[0] == 1:
        return np.broadcast_to(targets[0], (len(classes), targets.shape[1]))
    return targets[np.asarray(classes, dtype=np.int64)]


@dataclass(frozen=True)
class ModeAffinity:
    """``exp(-||x - mu_c||^2 / (2 h^2))``, bounded in (0, 1]."""

    targets: np.ndarray
    bandwidth: float = 1.0

    def __call__(self, x, classes) -> ad.Tensor:
        x = ad.as_tensor(x)
        mu = _per_class(self.targets, np.broadcast_to(classes, (x.shape[0],)))
        sq = _row_sum(ad.square(ad.sub(x, mu)))
        return ad.exp(ad.mul(sq, -0.5 / self.bandwidth**2))


@dataclass(frozen=True)
class NegSquaredDistance:
    targets: np.ndarray

    def __call__(self, x, classes) -> ad.Tensor:
        x = ad.as_tensor(x)
        mu = _per_class(self.targets, np.broadcast_to(classes, (x.shape[0],)))
        return ad.neg(_row_sum(ad.square(ad.sub(x, mu))))


@dataclass(frozen=True)
class ClassLogit:
    """Log-softmax of a linear classifier at the requested class."""

    weights: np.ndarray
    bias: np.ndarray

    def __call__(self, x, classes) -> ad.Tensor:
        x = ad.as_tensor(x)
        W = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        logits = ad.add(ad.matmul(x, W.T), np.asarray(self.bias, dtype=np.float64))
        onehot = np.eye(W.shape[0])[np.broadcast_to(classes, (x.shape[0],))]
        return ad.sub(_row_sum(ad.mul(logits, onehot)), ad.logsumexp(logits, axis=-1))


RewardFunction = ModeAffinity | NegSquaredDistance | ClassLogit


def explicit_reward_loss(gen: Generator, gen_params, reward: RewardFunction, batch: NoiseBatch) -> ad.Tensor:
    """``-mean r(g(z|c), c)``, differentiable through the generator."""
    x0 = gen(gen_params, batch.z, batch.classes)
    return check_finite("reward", ad.neg(_weighted_mean(reward(x0, batch.classes), batch.weight)))


@dataclass
class LossBreakdown:
    reg: float = 0.0
    reward: float = 0.0
    cfg: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.reg + self.reward + self.cfg
