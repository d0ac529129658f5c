"""One-step generator, score/denoiser networks and the analytic reference adapter.

Class ids are ints in ``[0, n_classes)``; ``NULL_CLASS`` (-1) selects the
unconditional branch, which networks realise as a dedicated embedding row.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from . import autodiff as ad
from .analytic import AffineGenerator, GaussianMixture
from .nn import Mlp, Params
from .processes import ForwardProcess

NULL_CLASS = -1


class ScoreFn(Protocol):
    def __call__(self, x, t: np.ndarray, classes: np.ndarray) -> ad.Tensor: ...


def _check_classes(classes, n_classes: int, n: int, allow_null: bool) -> np.ndarray:
    c = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
    lo = NULL_CLASS if allow_null else 0
    bad = (c < lo) | (c >= n_classes)
    if bad.any():
        raise ValueError(f"unknown class id {int(c[bad][0])} (model has {n_classes} classes)")
    return c


def _embed_rows(c: np.ndarray, n_classes: int) -> np.ndarray:
    return np.where(c == NULL_CLASS, n_classes, c)


def _edm_coeffs(t: np.ndarray, sigma_data: float):
    s2 = t * t + sigma_data**2
    c_skip = sigma_data**2 / s2
    c_out = t * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    return c_skip, c_out, c_in


class Generator:
    """``x0 = g(z | c)``.

    ``backbone="mlp"``: an EDM-style denoiser evaluated at the fixed noise
    level ``sigma_init``, ``g(z) = c_skip z + c_out F([c_in z, e_c])`` with
    ``z ~ N(0, sigma_init^2 I)``. ``backbone="affine"``: ``A z + b`` exactly,
    class ignored.
    """

    def __init__(
        self,
        data_dim: int,
        latent_dim: int | None = None,
        hidden: tuple[int, ...] = (64, 64),
        n_classes: int = 1,
        embed_dim: int = 4,
        sigma_init: float = 2.5,
        sigma_data: float = 0.5,
        backbone: str = "mlp",
    ) -> None:
        if not sigma_init > 0:
            raise ValueError("sigma_init must be positive")
        if backbone not in ("mlp", "affine"):
            raise ValueError(f"unknown generator backbone {backbone!r}")
        self.data_dim = int(data_dim)
        self.latent_dim = int(latent_dim or data_dim)
        if backbone == "mlp" and self.latent_dim != self.data_dim:
            raise ValueError("mlp generator needs latent_dim == data_dim (denoiser form)")
        self.n_classes = int(n_classes)
        self.embed_dim = int(embed_dim)
        self.sigma_init = float(sigma_init)
        self.sigma_data = float(sigma_data)
        self.backbone = backbone
        self.mlp = Mlp([self.latent_dim + self.embed_dim, *hidden, self.data_dim]) if backbone == "mlp" else None

    def spec(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "latent_dim": self.latent_dim,
            "hidden": list(self.mlp.widths[1:-1]) if self.mlp else [],
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "sigma_init": self.sigma_init,
            "sigma_data": self.sigma_data,
            "backbone": self.backbone,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "Generator":
        return cls(**{**spec, "hidden": tuple(spec["hidden"])})

    def init(self, rng: np.random.Generator, out_scale: float = 0.1) -> Params:
        if self.backbone == "affine":
            return {"A": np.eye(self.data_dim, self.latent_dim), "b": np.zeros(self.data_dim)}
        params = {"embed": rng.normal(0.0, 1.0, size=(self.n_classes + 1, self.embed_dim))}
        params.update(self.mlp.init(rng, out_scale=out_scale))
        return params

    @classmethod
    def from_affine(cls, gen: AffineGenerator) -> tuple["Generator", Params]:
        g = cls(gen.dim, gen.latent_dim, sigma_init=gen.sigma_init, backbone="affine")
        return g, {"A": gen.A.copy(), "b": gen.b.copy()}

    def sample_latent(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sigma_init * rng.standard_normal((n, self.latent_dim))

    def __call__(self, params, z, classes=0) -> ad.Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ad.ShapeError(f"generator: latent width {z.shape[-1]} != {self.latent_dim}")
        if self.backbone == "affine":
            return ad.add(ad.matmul(z, ad.transpose(params["A"])), params["b"])
        c = _check_classes(classes, self.n_classes, z.shape[0], allow_null=False)
        c_skip, c_out, c_in = _edm_coeffs(np.float64(self.sigma_init), self.sigma_data)
        h = ad.concat([ad.mul(z, c_in), ad.take(params["embed"], c)], axis=-1)
        return ad.add(ad.mul(z, c_skip), ad.mul(self.mlp.forward(h, params), c_out))


class ScoreModel:
    """Time- and class-conditional score network.

    ``parameterization="edm"``: denoiser ``d = c_skip x + c_out F(...)``
    with score ``(d - x) / t^2``. ``"direct"``: the backbone output is the
    score. Inputs are ``[c_in x, log(t) / 4, e_c]`` (``c_in = 1`` for direct).
    Only defined for ``alpha = 1, beta = t`` processes.
    """

    def __init__(
        self,
        data_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        n_classes: int = 1,
        embed_dim: int = 4,
        parameterization: str = "edm",
        sigma_data: float = 0.5,
    ) -> None:
        if parameterization not in ("edm", "direct"):
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        self.embed_dim = int(embed_dim)
        self.parameterization = parameterization
        self.sigma_data = float(sigma_data)
        self.mlp = Mlp([self.data_dim + 1 + self.embed_dim, *hidden, self.data_dim])

    def spec(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "hidden": list(self.mlp.widths[1:-1]),
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "parameterization": self.parameterization,
            "sigma_data": self.sigma_data,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "ScoreModel":
        return cls(**{**spec, "hidden": tuple(spec["hidden"])})

    def init(self, rng: np.random.Generator, out_scale: float = 1.0, in_scale: float = 1.0) -> Params:
        params = {"embed": rng.normal(0.0, 1.0, size=(self.n_classes + 1, self.embed_dim))}
        params.update(self.mlp.init(rng, out_scale=out_scale, in_scale=in_scale))
        return params

    def _features(self, params, x: ad.Tensor, t: np.ndarray, classes) -> tuple[ad.Tensor, np.ndarray]:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(t <= 0):
            raise ValueError("score model needs t > 0")
        c = _check_classes(classes, self.n_classes, n, allow_null=True)
        emb = ad.take(params["embed"], _embed_rows(c, self.n_classes))
        if self.parameterization == "edm":
            xin = ad.mul(x, _edm_coeffs(t, self.sigma_data)[2][:, None])
        else:
            xin = x
        return ad.concat([xin, (0.25 * np.log(t))[:, None], emb], axis=-1), t

    def denoise(self, params, x, t, classes=NULL_CLASS) -> ad.Tensor:
        if self.parameterization != "edm":
            raise ValueError("denoise() needs the edm parameterization")
        x = ad.as_tensor(x)
        h, t = self._features(params, x, t, classes)
        c_skip, c_out, _ = _edm_coeffs(t, self.sigma_data)
        return ad.add(ad.mul(x, c_skip[:, None]), ad.mul(self.mlp.forward(h, params), c_out[:, None]))

    def score(self, params, x, t, classes=NULL_CLASS) -> ad.Tensor:
        x = ad.as_tensor(x)
        if self.parameterization == "direct":
            h, _ = self._features(params, x, t, classes)
            return self.mlp.forward(h, params)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return denoiser_to_score(self.denoise(params, x, t, classes), x, t)

    def bind(self, params) -> ScoreFn:
        """Score function with ``params`` held fixed (no parameter gradients)."""
        frozen = {k: np.asarray(ad.as_tensor(v).value) for k, v in params.items()}
        return lambda x, t, classes: self.score(frozen, x, t, classes)


def denoiser_to_score(d, x, t) -> ad.Tensor:
    """``(d - x) / t^2``"""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("denoiser conversion needs t > 0")
    inv = 1.0 / (t * t)
    if inv.ndim == 1:
        inv = inv[:, None]
    return ad.mul(ad.sub(d, x), inv)


def score_to_denoiser(s, x, t) -> ad.Tensor:
    """``x + t^2 s``"""
    t2 = np.asarray(t, dtype=np.float64) ** 2
    if t2.ndim == 1:
        t2 = t2[:, None]
    return ad.add(x, ad.mul(s, t2))


def score_at(model: ScoreModel, params, x, t, c=NULL_CLASS) -> ad.Tensor:
    return model.score(params, x, t, c)


class AnalyticReference:
    """Serves closed-form mixture scores through the network score interface.

    Rows with ``NULL_CLASS`` (or any class when the mixture is unlabelled)
    use the full mixture; other rows use the class-conditional sub-mixture.
    The result is differentiable w.r.t. an attached ``x`` through the
    analytic Hessian.
    """

    def __init__(self, gmm: GaussianMixture, process: ForwardProcess) -> None:
        self.gmm = gmm
        self.process = process
        self._cond = {c: gmm.conditional(c) for c in gmm.classes}

    def mixture_for(self, c: int) -> GaussianMixture:
        if c == NULL_CLASS or self.gmm.labels is None:
            return self.gmm
        if c not in self._cond:
            raise ValueError(f"reference has no class {c}")
        return self._cond[c]

    def evaluate(self, x, t, classes, want_hess=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        c = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
        logp = np.empty(n)
        score = np.empty((n, d))
        hess = np.zeros((n, d, d))
        for cls in np.unique(c):
            rows = np.nonzero(c == cls)[0]
            lp, s, h, _ = self.mixture_for(int(cls)).evaluate(x[rows], self.process, t[rows], want_hess)
            logp[rows], score[rows], hess[rows] = lp, s, h
        return logp, score, hess

    def log_prob(self, x, t, classes=NULL_CLASS) -> np.ndarray:
        return self.evaluate(x, t, classes)[0]

    def __call__(self, x, t, classes=NULL_CLASS) -> ad.Tensor:
        x = ad.as_tensor(x)
        if not x.attached:
            return ad.Tensor(self.evaluate(x.value, t, classes)[1])
        _, score, hess = self.evaluate(x.value, t, classes, want_hess=True)
        return ad.custom("analytic_score", score, (x,), lambda g: (np.einsum("nij,nj->ni", hess, g),))


def affine_reference(gen: AffineGenerator, process: ForwardProcess) -> AnalyticReference:
    """Analytic score of an affine generator's pushforward (frozen parameters)."""
    gm = GaussianMixture(np.ones(1), gen.b[None], gen.pushforward_cov()[None], check=False)
    return AnalyticReference(gm, process)


def cfg_score(score_fn: ScoreFn, x, t, c, omega: float) -> np.ndarray:
    """``s(null) + omega (s(c) - s(null))``, detached."""
    if omega < 0:
        raise ValueError("guidance scale must be non-negative")
    x = ad.detach(x)
    n = x.shape[0]
    s_null = score_fn(x, t, np.full(n, NULL_CLASS)).value
    s_c = score_fn(x, t, np.broadcast_to(np.asarray(c), (n,))).value
    return s_null + omega * (s_c - s_null)
