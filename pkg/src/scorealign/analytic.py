"""Closed-form Gaussian / Gaussian-mixture oracles.

Scores, diffused marginals, affine-generator pushforwards, and a direct
estimate of the time-integral score divergence between an affine
generator and a mixture reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .distances import DistanceFunction, SquaredL2
from .processes import ForwardProcess


class MixtureError(ValueError):
    pass


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    labels: np.ndarray | None = None
    check: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = covs
        K, d = self.means.shape
        if self.weights.shape != (K,) or self.covs.shape != (K, d, d):
            raise MixtureError(
                f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, covs {self.covs.shape}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (K,):
                raise MixtureError(f"labels shape {self.labels.shape} != ({K},)")
        if not self.check:
            return
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise MixtureError(f"weights must be positive and sum to 1, got {self.weights}")
        for k, c in enumerate(self.covs):
            if not np.allclose(c, c.T, atol=1e-12):
                raise MixtureError(f"covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise MixtureError(f"covariance {k} is not positive definite") from None

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(np.ones(1), mean[None], np.atleast_2d(cov)[None])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def classes(self) -> list[int]:
        return [] if self.labels is None else sorted(set(int(c) for c in self.labels))

    def conditional(self, c: int) -> "GaussianMixture":
        """Sub-mixture of components labelled ``c``, weights renormalised."""
        if self.labels is None:
            raise MixtureError("mixture has no class labels")
        sel = self.labels == c
        if not sel.any():
            raise MixtureError(f"no component carries class {c}")
        w = self.weights[sel]
        return GaussianMixture(w / w.sum(), self.means[sel], self.covs[sel], self.labels[sel])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, dev, dev)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)
        return x, comp

    def evaluate(self, x, process: ForwardProcess | None = None, t=None, want_hess: bool = False):
        """``(logpdf, score, hessian, responsibilities)`` of the mixture, diffused to ``t`` if given."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        if process is None:
            a, b = np.ones(n), np.zeros(n)
        else:
            t = np.broadcast_to(process.check_time(t), (n,))
            a, b = process.alpha(t), process.beta(t)
        return kernels.gmm_eval(x, a, b, self.weights, self.means, self.covs, want_hess)

    def log_prob(self, x, process=None, t=None) -> np.ndarray:
        return self.evaluate(x, process, t)[0]

    def score(self, x, process=None, t=None) -> np.ndarray:
        return self.evaluate(x, process, t)[1]

    def assign(self, x) -> np.ndarray:
        """Most probable component index per row."""
        return np.argmax(self.evaluate(x)[3], axis=1)

    def diffused(self, process: ForwardProcess, t: float) -> "GaussianMixture":
        t = float(process.check_time(t))
        a, b = float(process.alpha(t)), float(process.beta(t))
        return GaussianMixture(
            self.weights.copy(),
            a * self.means,
            a * a * self.covs + b * b * np.eye(self.dim),
            None if self.labels is None else self.labels.copy(),
            check=self.check,
        )


def gaussian_score(mu, cov, x) -> np.ndarray:
    """``-cov^{-1} (x - mu)``, row-wise for 2-D ``x``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise MixtureError("covariance is singular or not positive definite") from None
    diff = np.atleast_2d(x) - np.asarray(mu, dtype=np.float64)
    out = -np.linalg.solve(cov, diff.T).T
    return out.reshape(x.shape) if x.ndim == 1 else out


def gmm_score(gmm: GaussianMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = gmm.score(np.atleast_2d(x))
    return out.reshape(x.shape) if x.ndim == 1 else out


def diffused_gmm(gmm: GaussianMixture, process: ForwardProcess, t: float) -> GaussianMixture:
    return gmm.diffused(process, t)


def load_gmm(path) -> GaussianMixture:
    """Parse a mixture file.

    Format, one ``key = value`` per line, ``#`` starts a comment::

        weights = 0.5, 0.5
        mean.0 = -2.0, 0.0
        cov.0  = 0.25, 0.0; 0.0, 0.25     # rows separated by ';'
        label.0 = 0                        # optional, all-or-none
    """
    return parse_gmm(Path(path).read_text(), source=str(path))


def parse_gmm(text: str, source: str = "<string>") -> GaussianMixture:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MixtureError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        entries[k] = v

    def floats(s: str) -> list[float]:
        return [float(p) for p in s.split(",") if p.strip()]

    if "weights" not in entries:
        raise MixtureError(f"{source}: missing 'weights'")
    weights = floats(entries.pop("weights"))
    K = len(weights)
    try:
        means = [floats(entries.pop(f"mean.{k}")) for k in range(K)]
        covs = [[floats(r) for r in entries.pop(f"cov.{k}").split(";")] for k in range(K)]
    except KeyError as exc:
        raise MixtureError(f"{source}: missing {exc.args[0]!r}") from None
    labels = None
    if any(k.startswith("label.") for k in entries):
        try:
            labels = [int(entries.pop(f"label.{k}")) for k in range(K)]
        except KeyError as exc:
            raise MixtureError(f"{source}: labels must be given for every component, missing {exc.args[0]!r}") from None
    if entries:
        raise MixtureError(f"{source}: unknown keys {sorted(entries)}")
    try:
        return GaussianMixture(np.array(weights), np.array(means), np.array(covs), labels)
    except ValueError as exc:
        raise MixtureError(f"{source}: {exc}") from None


def format_gmm(gmm: GaussianMixture) -> str:
    lines = ["weights = " + ", ".join(repr(float(w)) for w in gmm.weights)]
    for k in range(gmm.n_components):
        lines.append(f"mean.{k} = " + ", ".join(repr(float(v)) for v in gmm.means[k]))
        rows = ("; ".join(", ".join(repr(float(v)) for v in row) for row in gmm.covs[k]))
        lines.append(f"cov.{k} = {rows}")
        if gmm.labels is not None:
            lines.append(f"label.{k} = {int(gmm.labels[k])}")
    return "\n".join(lines) + "\n"


# --- affine generator -------------------------------------------------------


@dataclass
class AffineGenerator:
    """``x0 = A z + b`` with ``z ~ N(0, sigma_init^2 I)``."""

    A: np.ndarray
    b: np.ndarray
    sigma_init: float = 2.5

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError(f"A rows {self.A.shape[0]} != b length {self.b.shape[0]}")
        if not self.sigma_init > 0:
            raise ValueError("sigma_init must be positive")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sigma_init * rng.standard_normal((n, self.latent_dim))

    def __call__(self, z) -> np.ndarray:
        return np.asarray(z) @ self.A.T + self.b

    def pushforward_cov(self) -> np.ndarray:
        return self.sigma_init**2 * self.A @ self.A.T

    def marginal(self, process: ForwardProcess, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the diffused pushforward at time ``t``."""
        t = float(process.check_time(t))
        a, b = float(process.alpha(t)), float(process.beta(t))
        return a * self.b, a * a * self.pushforward_cov() + b * b * np.eye(self.dim)

    def evaluate(self, x, process: ForwardProcess, t, want_hess: bool = False):
        """Diffused pushforward log-density/score/Hessian, row-wise times allowed."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(process.check_time(t), (x.shape[0],))
        return kernels.gmm_eval(
            x, process.alpha(t), process.beta(t), np.ones(1), self.b[None], self.pushforward_cov()[None], want_hess
        )

    def score(self, x, process: ForwardProcess, t) -> np.ndarray:
        return self.evaluate(x, process, t)[1]


def geometric_time_grid(lo: float, hi: float, n: int = 64) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 1:
        return np.ones(1)
    h = np.diff(grid)
    q = np.zeros_like(grid)
    q[:-1] += h / 2
    q[1:] += h / 2
    return q


@dataclass
class DivergenceEstimate:
    value: float
    stderr: float
    method: str
    fallback: bool = False


def _exact_sqr_l2(p: AffineGenerator, q_mean, q_cov, process, t, sampler: AffineGenerator) -> float:
    mp, Sp = p.marginal(process, t)
    m0, S0 = sampler.marginal(process, t)
    a, b = float(process.alpha(t)), float(process.beta(t))
    mq = a * q_mean
    Sq = a * a * q_cov + b * b * np.eye(p.dim)
    Pp, Pq = np.linalg.inv(Sp), np.linalg.inv(Sq)
    # s_p - s_q = M x + v
    M = Pq - Pp
    v = Pp @ mp - Pq @ mq
    r = M @ m0 + v
    return float(np.trace(M @ S0 @ M.T) + r @ r)


def divergence_oracle(
    p: AffineGenerator,
    q: GaussianMixture,
    process: ForwardProcess,
    distance: DistanceFunction,
    w,
    time_grid,
    n_mc: int = 10_000,
    rng: np.random.Generator | None = None,
    *,
    sampler: AffineGenerator | None = None,
    method: str = "auto",
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> DivergenceEstimate:
    """Time-integral score divergence between ``p``'s pushforward and ``q``.

    Samples ``x_t`` from ``sampler`` (default ``p``): passing the centre
    generator freezes the sampling distribution while ``p`` varies.
    Trapezoid over ``time_grid`` with weight ``w(t)``, Monte Carlo over
    ``x_t`` using one ``(z, eps)`` draw reused at every grid time. ``noise``
    supplies that draw explicitly for common random numbers.

    ``method="exact"`` (or ``"auto"`` when applicable) uses the closed form
    for squared-L2 against a single Gaussian.
    """
    sampler = p if sampler is None else sampler
    grid = np.asarray(time_grid, dtype=np.float64)
    process.check_time(grid)
    tw = trapezoid_weights(grid) * np.asarray(w(grid), dtype=np.float64)
    exact_ok = isinstance(distance, SquaredL2) and q.n_components == 1
    if method == "exact" and not exact_ok:
        warnings.warn("exact divergence path needs squared-L2 and a single Gaussian; using Monte Carlo")
        method, fallback = "mc", True
    else:
        fallback = False
    if method == "auto":
        method = "exact" if exact_ok else "mc"
    if method == "exact":
        vals = [_exact_sqr_l2(p, q.means[0], q.covs[0], process, t, sampler) for t in grid]
        return DivergenceEstimate(float(np.dot(tw, vals)), 0.0, "exact", fallback)

    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        z = sampler.sample_latent(n_mc, rng)
        eps = rng.standard_normal((n_mc, p.dim))
    else:
        z, eps = noise
    x0 = sampler(z)
    per_sample = np.zeros(z.shape[0])
    for t, wt in zip(grid, tw):
        xt = float(process.alpha(t)) * x0 + float(process.beta(t)) * eps
        y = p.score(xt, process, t) - q.score(xt, process, t)
        per_sample += wt * distance.value(y)
    n = per_sample.size
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return DivergenceEstimate(float(per_sample.mean()), se, "mc", fallback)


# --- differentiable score evaluation ----------------------------------------


def mixture_score_op(gmm: GaussianMixture, x, process: ForwardProcess, t) -> ad.Tensor:
    """Mixture score at (possibly attached) ``x``; parameters are constants.

    Gradient w.r.t. ``x`` uses the analytic Hessian of the log-density.
    """
    x = ad.as_tensor(x)
    if not x.attached:
        return ad.Tensor(gmm.evaluate(x.value, process, t)[1])
    _, score, hess, _ = gmm.evaluate(x.value, process, t, want_hess=True)
    return ad.custom("gmm_score", score, (x,), lambda g: (np.einsum("nij,nj->ni", hess, g),))


def affine_score_op(gen: AffineGenerator, x, process: ForwardProcess, t) -> ad.Tensor:
    x = ad.as_tensor(x)
    if not x.attached:
        return ad.Tensor(gen.evaluate(x.value, process, t)[1])
    _, score, hess, _ = gen.evaluate(x.value, process, t, want_hess=True)
    return ad.custom("affine_score", score, (x,), lambda g: (np.einsum("nij,nj->ni", hess, g),))
