"""Executable checks of the gradient identities, each with a negative control.

Every check returns a :class:`CheckReport`. Gradient checks compare a
backward pass against central finite differences of an independently
computed objective; Monte Carlo objectives use common random numbers, and
the random stream position after the plus and minus evaluations is asserted
equal.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import autodiff as ad
from .analytic import (
    AffineGenerator,
    GaussianMixture,
    divergence_oracle,
    geometric_time_grid,
    trapezoid_weights,
)
from .distances import PseudoHuber, SquaredL2
from .losses import NoiseBatch, cfg_reward_loss, di_star_reg_loss
from .models import NULL_CLASS, AnalyticReference, Generator, ScoreModel, affine_reference
from .processes import ConstantWeight, ForwardProcess, diffuse
from .training import ScoreTrainConfig, ScoreTraining

FD_STEP = 1e-3
FD_HALVING_LIMIT = 0.10


@dataclass
class CheckReport:
    name: str
    estimate: float | list
    oracle: float | list
    error: float
    tolerance: float
    stderr: float | None
    passed: bool
    n: int
    seed: int
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=_jsonable, sort_keys=True)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


class CrnViolation(AssertionError):
    pass


def _flat(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(d[k]) for k in sorted(d)])


def gradient_error(estimate: np.ndarray, oracle: np.ndarray) -> float:
    """Largest component error, relative to the largest oracle component."""
    scale = float(np.max(np.abs(oracle)))
    diff = float(np.max(np.abs(estimate - oracle)))
    return diff / scale if scale > 0 else diff


def central_fd(f: Callable[[dict], float], params: dict[str, np.ndarray], h: float) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v, dtype=np.float64)
        for idx in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in params.items()}
            minus = {kk: vv.copy() for kk, vv in params.items()}
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        out[k] = g
    return out


def validated_fd(f, params, h: float = FD_STEP) -> tuple[dict[str, np.ndarray], float, bool]:
    """Central FD at ``h`` and ``h/2``; returns (fd, change, step_ok).

    ``step_ok`` is False when halving moves the estimate by more than 10%.
    The returned gradient is the Richardson combination ``(4 g(h/2) - g(h)) / 3``,
    which cancels the ``h^2`` truncation term of the two central differences.
    """
    g1 = central_fd(f, params, h)
    g2 = central_fd(f, params, h / 2)
    a, b = _flat(g1), _flat(g2)
    scale = max(float(np.max(np.abs(b))), 1e-12)
    change = float(np.max(np.abs(a - b))) / scale
    fd = {k: (4 * g2[k] - g1[k]) / 3 for k in g1}
    return fd, change, change <= FD_HALVING_LIMIT


class CrnStream:
    """Hands out one fixed noise draw and records the stream position after each use."""

    def __init__(self, seed: int, draw: Callable[[np.random.Generator], tuple]):
        self.seed = seed
        self.draw = draw
        self.positions: list = []

    def __call__(self):
        rng = np.random.default_rng(self.seed)
        out = self.draw(rng)
        self.positions.append(rng.bit_generator.state["state"]["state"])
        return out

    def assert_aligned(self) -> None:
        if len(set(self.positions)) > 1:
            raise CrnViolation("finite-difference evaluations consumed different noise")


def _affine_params(gen: AffineGenerator) -> dict[str, np.ndarray]:
    return {"A": gen.A.copy(), "b": gen.b.copy()}


# --- score projection --------------------------------------------------------


def make_field(kind: str, dim: int, seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Fixed test vector fields: constant, linear or tanh-warped."""
    rng = np.random.default_rng([seed, 11])
    if kind == "constant":
        c = rng.normal(size=dim)
        return lambda x: np.broadcast_to(c, x.shape)
    if kind == "linear":
        M, c = rng.normal(size=(dim, dim)), rng.normal(size=dim)
        return lambda x: x @ M.T + c
    if kind == "identity":
        return lambda x: x
    if kind == "tanh":
        W, c = rng.normal(size=(dim, dim)), rng.normal(size=dim)
        return lambda x: np.tanh(x @ W.T + c)
    raise ValueError(f"unknown field kind {kind!r}")


def check_score_projection(
    p: AffineGenerator,
    process: ForwardProcess,
    t: float,
    field: str = "linear",
    n: int = 1_000_000,
    seed: int = 0,
    *,
    score_shift: float = 0.0,
    k_se: float = 4.0,
    name: str | None = None,
) -> CheckReport:
    """MC estimate of ``E u(x_t)^T (s_p(x_t) - grad log q_t(x_t|x_0))``, which is 0.

    ``score_shift`` evaluates the score of ``p`` with its mean moved by that
    amount along every axis (a broken oracle for negative controls), in which
    case the check passes when the estimate is *beyond* ``k_se`` standard errors.
    """
    rng = np.random.default_rng(seed)
    u = make_field(field, p.dim, seed)
    x0 = p(p.sample_latent(n, rng))
    eps = rng.standard_normal((n, p.dim))
    a, b = float(process.alpha(t)), float(process.beta(t))
    xt = a * x0 + b * eps
    scorer = p if score_shift == 0 else AffineGenerator(p.A, p.b + score_shift, p.sigma_init)
    resid = scorer.score(xt, process, t) + eps / b
    vals = np.einsum("ni,ni->n", u(xt), resid)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n))
    z = abs(est) / se
    control = score_shift != 0
    passed = z > 10.0 if control else z <= k_se
    return CheckReport(
        name or f"score_projection[{field},d={p.dim}]",
        est, 0.0, z, 10.0 if control else k_se, se, passed, n, seed,
        {"t": t, "units": "standard errors", "negative_control": control},
    )


# --- Theorem 1 ---------------------------------------------------------------


def _gauss_hermite_batch(latent_dim: int, dim: int, sigma_init: float, grid, points: int = 4):
    nodes, w = hermegauss(points)
    w = w / w.sum()
    k = latent_dim + dim
    pts = np.array(list(itertools.product(nodes, repeat=k)))
    pw = np.prod(np.array(list(itertools.product(w, repeat=k))), axis=1)
    return pts[:, :latent_dim] * sigma_init, pts[:, latent_dim:], pw


def _grid_batch(z, eps, node_w, grid, tw) -> NoiseBatch:
    """Stack every (z, eps) row at every grid time, weighted so the row mean is the quadrature."""
    G, M = len(grid), z.shape[0]
    return NoiseBatch(
        np.tile(z, (G, 1)),
        np.tile(eps, (G, 1)),
        np.repeat(grid, M),
        0,
        np.repeat(tw, M) * np.tile(node_w, G) * G * M,
    )


def check_theorem1(
    p: AffineGenerator,
    q: GaussianMixture,
    process: ForwardProcess,
    distance=None,
    n: int = 100_000,
    fd_step: float = FD_STEP,
    seed: int = 0,
    *,
    path: str = "mc",
    time_grid=None,
    tolerance: float | None = None,
    detach_direction: bool = False,
    name: str | None = None,
) -> CheckReport:
    """Backward gradient of the regulariser vs FD of the divergence.

    The assistant is the analytic score of ``p`` frozen at the centre, and
    the divergence oracle samples ``x_t`` from the centre generator too, so
    only the score argument moves under the FD perturbation.

    ``path="exact"``: Gauss-Hermite quadrature over ``(z, eps)`` for the loss
    and the closed-form divergence (squared-L2, single Gaussian) for the oracle.
    ``path="mc"``: ``n`` shared ``(z, eps)`` draws for both sides.
    """
    distance = distance or SquaredL2()
    w = ConstantWeight()
    grid = geometric_time_grid(0.05, 5.0, 12) if time_grid is None else np.asarray(time_grid, float)
    tw = trapezoid_weights(grid) * w(grid)
    gen, theta0 = Generator.from_affine(p)
    assistant = affine_reference(p, process)
    reference = AnalyticReference(q, process)

    if path == "exact":
        z, eps, node_w = _gauss_hermite_batch(p.latent_dim, p.dim, p.sigma_init, grid)
        tol = 1e-4 if tolerance is None else tolerance
        method, stream = "exact", None
    elif path == "mc":
        stream = CrnStream(seed, lambda rng: (p.sample_latent(n, rng), rng.standard_normal((n, p.dim))))
        z, eps = stream()
        node_w = np.full(n, 1.0 / n)
        tol = 2e-2 if tolerance is None else tolerance
        method = "mc"
    else:
        raise ValueError(f"unknown path {path!r}")

    batch = _grid_batch(z, eps, node_w, grid, tw)
    tape = ad.Tape()
    P = tape.watch_all(theta0)
    loss = di_star_reg_loss(
        gen, P, assistant, reference, distance, process, w, batch, detach_direction=detach_direction
    )
    tape.backward(loss)
    grad = tape.grads(P)

    def objective(theta):
        noise = None if stream is None else stream()
        pt = AffineGenerator(theta["A"], theta["b"], p.sigma_init)
        return divergence_oracle(
            pt, q, process, distance, w, grid, sampler=p, method=method, noise=noise
        ).value

    fd, change, step_ok = validated_fd(objective, _affine_params(p), fd_step)
    if stream is not None:
        stream.assert_aligned()
    est, orc = _flat(grad), _flat(fd)
    err = gradient_error(est, orc)
    return CheckReport(
        name or f"theorem1[{path},{type(distance).__name__},d={p.dim}]",
        est.tolist(), orc.tolist(), err, tol, None, bool(err <= tol and step_ok),
        n if path == "mc" else int(z.shape[0]), seed,
        {"fd_step": fd_step, "fd_halving_change": change, "fd_step_ok": step_ok,
         "detach_direction": detach_direction, "grid_points": len(grid)},
    )


# --- Theorem 2 ---------------------------------------------------------------


def implicit_reward(
    gen: AffineGenerator, ref: AnalyticReference, process, c: int, grid, tw, z, eps, node_w
) -> float:
    """``E w(t) log p(x_t|c) / p(x_t)`` by quadrature over ``(z, eps, t)``."""
    x0 = gen(z)
    total = 0.0
    for t, wt in zip(grid, tw):
        xt = float(process.alpha(t)) * x0 + float(process.beta(t)) * eps
        lr = ref.log_prob(xt, t, c) - ref.log_prob(xt, t, -1)
        total += wt * float(np.dot(node_w, lr))
    return total


def check_theorem2(
    gen: AffineGenerator,
    ref: GaussianMixture,
    process: ForwardProcess,
    c: int = 1,
    time_grid=None,
    n: int = 100_000,
    fd_step: float = FD_STEP,
    seed: int = 0,
    *,
    flip_sign: bool = False,
    tolerance: float = 2e-2,
    name: str | None = None,
) -> CheckReport:
    """Backward gradient of the guidance loss vs FD of the negative implicit reward.

    Includes the sign test: shifting the generator mean toward the class-``c``
    mean increases the reward (Gauss-Hermite evaluation).
    ``flip_sign`` negates the loss (negative control).
    """
    w = ConstantWeight()
    grid = geometric_time_grid(0.05, 5.0, 12) if time_grid is None else np.asarray(time_grid, float)
    tw = trapezoid_weights(grid) * w(grid)
    reference = AnalyticReference(ref, process)
    g, theta0 = Generator.from_affine(gen)
    stream = CrnStream(seed, lambda rng: (gen.sample_latent(n, rng), rng.standard_normal((n, gen.dim))))
    z, eps = stream()
    node_w = np.full(n, 1.0 / n)
    batch = _grid_batch(z, eps, node_w, grid, tw)
    tape = ad.Tape()
    P = tape.watch_all(theta0)
    loss = cfg_reward_loss(g, P, reference, process, w, NoiseBatch(batch.z, batch.eps, batch.t, c, batch.weight))
    if flip_sign:
        loss = ad.neg(loss)
    tape.backward(loss)
    est = _flat(tape.grads(P))

    def objective(theta):
        zz, ee = stream()
        gt = AffineGenerator(theta["A"], theta["b"], gen.sigma_init)
        return -implicit_reward(gt, reference, process, c, grid, tw, zz, ee, node_w)

    fd, change, step_ok = validated_fd(objective, _affine_params(gen), fd_step)
    stream.assert_aligned()
    orc = _flat(fd)
    err = gradient_error(est, orc)

    # sign test on an exact-quadrature reward
    gz, ge, gw = _gauss_hermite_batch(gen.latent_dim, gen.dim, gen.sigma_init, grid, points=12)
    target = ref.conditional(c).mean()
    moved = AffineGenerator(gen.A, gen.b + 0.25 * (target - gen.b), gen.sigma_init)
    r0 = implicit_reward(gen, reference, process, c, grid, tw, gz, ge, gw)
    r1 = implicit_reward(moved, reference, process, c, grid, tw, gz, ge, gw)
    sign_ok = r1 > r0
    return CheckReport(
        name or f"theorem2[d={gen.dim}]",
        est.tolist(), orc.tolist(), err, tolerance, None, bool(err <= tolerance and step_ok and sign_ok),
        n, seed,
        {"fd_step": fd_step, "fd_halving_change": change, "fd_step_ok": step_ok, "sign_test": bool(sign_ok),
         "reward_before": r0, "reward_after_shift": r1, "flip_sign": flip_sign},
    )


# --- DSM recovery ------------------------------------------------------------


def central_mass_grid(gmm: GaussianMixture, process, t: float, mass: float = 0.95, side: int = 41, seed: int = 0):
    """Regular grid points inside the highest-density region holding ``mass`` of the diffused mixture."""
    diffused = gmm.diffused(process, t)
    rng = np.random.default_rng([seed, 3])
    xs, _ = diffused.sample(20_000, rng)
    level = np.quantile(diffused.log_prob(xs), 1.0 - mass)
    lo, hi = xs.min(axis=0), xs.max(axis=0)
    axes = [np.linspace(a, b, side) for a, b in zip(lo, hi)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    return pts[diffused.log_prob(pts) >= level]


def score_relative_error(model: ScoreModel, params, gmm: GaussianMixture, process, t: float, seed: int = 0) -> float:
    """RMS score error over the central-mass grid, relative to the RMS true score."""
    pts = central_mass_grid(gmm, process, t, seed=seed)
    truth = gmm.score(pts, process, t)
    got = model.score(params, pts, np.full(len(pts), t)).value
    return float(np.sqrt(np.sum((got - truth) ** 2) / np.sum(truth**2)))


@dataclass
class DsmRecoveryConfig:
    gmm: GaussianMixture
    steps: int = 2000
    batch_size: int = 1024
    lr: float = 3e-3
    hidden: tuple[int, ...] = (128, 128, 128)
    in_scale: float = 3.0
    sigma_data: float = 0.5
    times: tuple[float, ...] = (0.1, 0.5, 2.0)
    tolerance: float = 0.10
    seed: int = 0
    train: bool = True


def train_score_model(cfg: DsmRecoveryConfig):
    """Unconditional DSM training on ``cfg.gmm``; returns (model, params)."""
    unlabelled = GaussianMixture(cfg.gmm.weights, cfg.gmm.means, cfg.gmm.covs)
    trainer = ScoreTraining(
        ScoreTrainConfig(
            iterations=cfg.steps if cfg.train else 0,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            hidden=cfg.hidden,
            in_scale=cfg.in_scale,
            sigma_data=cfg.sigma_data,
            seed=cfg.seed,
        ),
        unlabelled,
    )
    state, _ = trainer.run()
    return trainer.model, state.params


def check_dsm_recovery(cfg: DsmRecoveryConfig, name: str | None = None) -> CheckReport:
    """Train a score network by DSM and compare it to the analytic diffused-mixture score.

    With ``cfg.train=False`` the untrained network is scored instead and the
    check passes when its error exceeds 50% (negative control).
    """
    process = ForwardProcess("edm")
    model, params = train_score_model(cfg)
    errs = {t: score_relative_error(model, params, cfg.gmm, process, t, cfg.seed) for t in cfg.times}
    worst = max(errs.values())
    if cfg.train:
        passed, tol = worst < cfg.tolerance, cfg.tolerance
    else:
        passed, tol = worst > 0.5, 0.5
    return CheckReport(
        name or ("dsm_recovery" if cfg.train else "dsm_recovery[untrained]"),
        worst, 0.0, worst, tol, None, bool(passed), cfg.steps * cfg.batch_size, cfg.seed,
        {"relative_error_by_t": {str(t): e for t, e in errs.items()},
         "smoother_at_large_t": errs[max(cfg.times)] < errs[min(cfg.times)], "negative_control": not cfg.train},
    )


# --- autodiff ----------------------------------------------------------------

AUTODIFF_STEP = 1e-4
AUTODIFF_TOL = 1e-4


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    """Every differentiable op as ``(fn(**inputs) -> Tensor, inputs)``."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    m, v = rng.normal(size=(4, 2)), rng.normal(size=4)
    row = rng.normal(size=(1, 4))
    idx = np.array([0, 2, 2, 1])
    return {
        "add": (lambda a, r: ad.add(a, r), {"a": a, "r": row}),
        "sub": (lambda a, r: ad.sub(a, r), {"a": a, "r": row}),
        "mul": (lambda a, b: ad.mul(a, b), {"a": a, "b": b}),
        "div": (lambda a, p: ad.div(a, p), {"a": a, "p": pos}),
        "neg": (lambda a: ad.neg(a), {"a": a}),
        "matmul": (lambda a, m: ad.matmul(a, m), {"a": a, "m": m}),
        "matmul[vector]": (lambda v, m: ad.matmul(v, m), {"v": v, "m": m}),
        "affine": (lambda a, m, c: ad.affine(a, m, c), {"a": a, "m": m, "c": rng.normal(size=2)}),
        "transpose": (lambda a: ad.transpose(a), {"a": a}),
        "sum": (lambda a: ad.sum(a, axis=0), {"a": a}),
        "mean": (lambda a: ad.mean(a, axis=-1, keepdims=True), {"a": a}),
        "square": (lambda a: ad.square(a), {"a": a}),
        "sqrt": (lambda p: ad.sqrt(p), {"p": pos}),
        "exp": (lambda a: ad.exp(a), {"a": a}),
        "log": (lambda p: ad.log(p), {"p": pos}),
        "softplus": (lambda a: ad.softplus(ad.mul(a, 5.0)), {"a": a}),
        "tanh": (lambda a: ad.tanh(a), {"a": a}),
        "dot": (lambda a, b: ad.dot(a, b), {"a": a, "b": b}),
        "concat": (lambda a, b: ad.concat([a, b], axis=0), {"a": a, "b": b}),
        "take": (lambda a: ad.take(a, idx), {"a": a}),
        "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), {"a": a}),
    }


def _loss_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    """Composed training losses on small MLPs, each as a function of all network parameters."""
    from .losses import ModeAffinity, dsm_loss, explicit_reward_loss
    from .processes import EdmLambda

    process = ForwardProcess("edm")
    data = GaussianMixture(np.array([0.4, 0.6]), np.array([[-1.0, 0.5], [1.0, 0.0]]),
                           np.array([np.eye(2) * 0.3] * 2), labels=np.array([0, 1]))
    gen = Generator(2, hidden=(6, 6), n_classes=2, embed_dim=2)
    score = ScoreModel(2, hidden=(6, 6), n_classes=2, embed_dim=2)
    gp = gen.init(rng, out_scale=1.0)
    sp = score.init(rng)
    n = 16
    batch = NoiseBatch(gen.sample_latent(n, rng), rng.normal(size=(n, 2)), rng.uniform(0.2, 2.0, n),
                       rng.integers(0, 2, n))
    x0 = data.sample(n, rng)[0]
    assistant = score.bind(sp)
    reference = AnalyticReference(data, process)
    # the guidance direction is evaluated at sg[x_t]; freeze it at the base point so FD sees the same surrogate
    xt0 = diffuse(process, gen(gp, batch.z, batch.classes).value, batch.t, batch.eps).value
    s_cond, s_null = reference(xt0, batch.t, batch.classes), reference(xt0, batch.t)

    def frozen(x, t, classes):
        return s_null if np.all(np.asarray(classes) == NULL_CLASS) else s_cond

    return {
        "dsm_loss": (lambda **p: dsm_loss(score, p, x0, batch.classes, batch.t, batch.eps, process, EdmLambda(0.5)), sp),
        "di_star_reg_loss": (
            lambda **p: di_star_reg_loss(gen, p, assistant, reference, PseudoHuber(0.1), process,
                                         ConstantWeight(), batch, space="denoiser"), gp),
        "cfg_reward_loss": (lambda **p: cfg_reward_loss(gen, p, frozen, process, ConstantWeight(), batch, 1.5), gp),
        "explicit_reward_loss": (
            lambda **p: explicit_reward_loss(gen, p, ModeAffinity(np.array([[1.0, 0.0]]), 1.0), batch), gp),
    }


def _gradcheck(fn: Callable, inputs: dict[str, np.ndarray], proj: np.ndarray | None, h: float) -> float:
    def scalar(vals: dict) -> ad.Tensor:
        out = fn(**vals)
        return ad.sum(out if proj is None else ad.mul(out, proj))

    tape = ad.Tape()
    leaves = tape.watch_all(inputs)
    tape.backward(scalar(leaves))
    est = _flat(tape.grads(leaves))
    fd = _flat(central_fd(lambda vals: float(scalar(vals).value), inputs, h))
    return gradient_error(est, fd)


def _stop_gradient_leaks() -> dict[str, float]:
    """Largest gradient reaching a leaf whose only path to the loss goes through ``detach``."""
    rng = np.random.default_rng(11)
    x, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
    tape = ad.Tape()
    X, W = tape.watch(x), tape.watch(w)
    loss = ad.sum(ad.mul(ad.matmul(ad.detach(X), W), ad.detach(ad.exp(ad.matmul(X, W)))))
    loss = ad.add(loss, ad.sum(ad.square(ad.detach(ad.matmul(X, W)))))
    tape.backward(loss)
    leaks = {"matmul-through-detach": float(np.max(np.abs(tape.grad(X))))}

    process = ForwardProcess("edm")
    data = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[[0.5]], [[0.5]]]),
                           labels=np.array([0, 1]))
    score = ScoreModel(1, hidden=(4,), n_classes=2, embed_dim=2)
    gen = Generator(1, hidden=(4,), n_classes=2, embed_dim=2)
    sp, gp = score.init(rng), gen.init(rng)
    batch = NoiseBatch(gen.sample_latent(8, rng), rng.normal(size=(8, 1)), rng.uniform(0.2, 2.0, 8), 1)
    tape = ad.Tape()
    S, G = tape.watch_all(sp), tape.watch_all(gp)
    reg = di_star_reg_loss(gen, G, score.bind({k: ad.detach(v) for k, v in S.items()}),
                           AnalyticReference(data, process), SquaredL2(), process, ConstantWeight(), batch)
    tape.backward(reg)
    leaks["frozen-assistant"] = max(float(np.max(np.abs(g))) for g in tape.grads(S).values())
    return leaks


def check_autodiff(seed: int = 0, h: float = AUTODIFF_STEP, tolerance: float = AUTODIFF_TOL) -> CheckReport:
    """Backward vs central FD for every op and the composed losses; stop-gradient leaks must be exactly 0."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (fn, inputs) in _op_cases(rng).items():
        proj = rng.normal(size=fn(**inputs).shape)
        errors[name] = _gradcheck(fn, inputs, proj, h)
    for name, (fn, inputs) in _loss_cases(rng).items():
        errors[name] = _gradcheck(fn, inputs, None, h)
    leaks = _stop_gradient_leaks()
    worst = max(errors.values())
    passed = worst <= tolerance and all(v == 0.0 for v in leaks.values())
    return CheckReport("autodiff", worst, 0.0, worst, tolerance, None, bool(passed), len(errors), seed,
                       {"errors": errors, "stop_gradient_leaks": leaks, "fd_step": h})


# --- battery -----------------------------------------------------------------


def two_mode_gmm() -> GaussianMixture:
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[-2.0, 0.0], [2.0, 0.0]]), np.array([np.eye(2) * 0.25] * 2))


def two_class_1d() -> GaussianMixture:
    return GaussianMixture(
        np.array([0.5, 0.5]), np.array([[-1.5], [1.5]]), np.array([[[0.5]], [[0.5]]]), labels=np.array([0, 1])
    )


def _cases():
    p1 = AffineGenerator([[0.4]], [0.5], 2.5)  # N(0.5, 1)
    q1 = GaussianMixture.gaussian([0.0], [[1.0]])
    p2 = AffineGenerator([[0.5, 0.1], [-0.1, 0.3]], [0.4, -0.2], 2.5)
    q2 = GaussianMixture.gaussian([0.0, 0.3], [[1.0, 0.2], [0.2, 0.7]])
    q2m = GaussianMixture(np.array([0.4, 0.6]), np.array([[-1.0, 0.0], [1.0, 0.5]]), np.array([np.eye(2) * 0.5] * 2))
    return p1, q1, p2, q2, q2m


def run_battery(seed: int = 0, negative_controls: bool = False, quick: bool = False) -> list[CheckReport]:
    """Full set of checks; with ``negative_controls`` the broken-oracle variants instead.

    Negative-control reports carry ``passed=True`` when the control failed
    the underlying check as designed.

    ``quick`` shrinks the Monte Carlo sample sizes fivefold and widens the
    Monte Carlo gradient tolerances by the matching ``sqrt(5)``. DSM recovery
    keeps its full step budget.
    """
    process = ForwardProcess("edm")
    p1, q1, p2, q2, q2m = _cases()
    n_proj = 200_000 if quick else 1_000_000
    n_mc = 20_000 if quick else 100_000
    mc_tol = 2e-2 * math.sqrt(100_000 / n_mc)
    reports = []
    if not negative_controls:
        reports.append(check_autodiff(seed))
        reports.append(check_score_projection(p1, process, 0.5, "constant", n_proj, seed))
        reports.append(check_score_projection(p2, process, 0.7, "identity", n_proj, seed))
        reports.append(check_score_projection(p2, process, 1.5, "tanh", n_proj, seed))
        for p, q in ((p1, q1), (p2, q2)):
            reports.append(check_theorem1(p, q, process, SquaredL2(), path="exact", seed=seed))
            reports.append(check_theorem1(p, q, process, SquaredL2(), n_mc, seed=seed, tolerance=mc_tol))
        reports.append(check_theorem1(p2, q2m, process, PseudoHuber(0.1), n_mc, seed=seed, tolerance=mc_tol))
        reports.append(check_theorem2(AffineGenerator([[0.4]], [0.3], 2.5), two_class_1d(), process, 1, n=n_mc,
                                      seed=seed, tolerance=mc_tol))
        reports.append(check_dsm_recovery(DsmRecoveryConfig(two_mode_gmm(), seed=seed)))
        return reports
    reports.append(check_score_projection(p2, process, 0.7, "linear", n_proj, seed, score_shift=1.0,
                                          name="score_projection[shifted-score control]"))
    r = check_theorem1(p2, q2, process, SquaredL2(), path="exact", seed=seed, detach_direction=True)
    reports.append(_invert(r, "theorem1[detached-direction control]"))
    r = check_theorem2(AffineGenerator([[0.4]], [0.3], 2.5), two_class_1d(), process, 1, n=n_mc, seed=seed, flip_sign=True)
    reports.append(_invert(r, "theorem2[flipped-sign control]"))
    reports.append(check_dsm_recovery(DsmRecoveryConfig(two_mode_gmm(), steps=0, seed=seed, train=False)))
    return reports


def _invert(r: CheckReport, name: str) -> CheckReport:
    r.name = name
    r.passed = not r.passed
    r.details["negative_control"] = True
    return r
