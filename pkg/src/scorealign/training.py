"""Alternating assistant / generator training.

Each iteration runs ``k_ta`` denoising-score-matching steps of the
assistant on fresh generator samples (generator frozen), then one
generator step on ``alpha_rew * L_rew + alpha_cfg * L_cfg + L_reg``
(assistant and reference frozen), followed by an EMA update of the
generator.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .analytic import GaussianMixture
from .distances import PseudoHuber, SquaredL2
from .losses import (
    LossBreakdown,
    NoiseBatch,
    RewardFunction,
    cfg_reward_loss,
    di_star_reg_loss,
    dipp_kl_loss,
    dsm_loss,
    explicit_reward_loss,
)
from .models import AnalyticReference, Generator, ScoreFn, ScoreModel
from .nn import AdamState, EmaState, Params, adam_step, ema_update, params_hash
from .processes import (
    AdaptiveGenWeight,
    ConstantWeight,
    EdmLambda,
    ForwardProcess,
    LogNormalTime,
    sample_time,
)

PRESETS = {
    "dit-style": {"alpha_rew": 10.0, "alpha_cfg": 4.5},
    "sd15-style": {"alpha_rew": 1000.0, "alpha_cfg": 1.5},
}

METRIC_COLUMNS = [
    "iter",
    "loss_dsm",
    "loss_reg",
    "loss_reward",
    "loss_cfg",
    "reward_mean",
    "target_mode_fraction",
    "energy_distance",
    "grad_norm_gen",
    "grad_norm_assistant",
]

STREAMS = ("init", "assistant-noise", "generator-noise", "time", "eval")


class TrainingError(RuntimeError):
    pass


@dataclass
class AlignmentConfig:
    alpha_rew: float = 0.0
    alpha_cfg: float = 0.0
    k_ta: int = 1
    distance: str = "pseudo-huber"
    huber_c: float = 0.1
    omega: float = 1.0
    baseline: str = "di-star"
    detach_direction: bool = False
    loss_space: str = "denoiser"
    lr_gen: float = 1e-3
    lr_assistant: float = 1e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.95
    process: str = "edm"
    p_mean: float = -2.0
    p_std: float = 2.0
    lam: str = "edm"
    w: str = "constant"
    sigma_data: float = 1.0
    sigma_init: float = 2.5
    batch_size: int = 256
    iterations: int = 1000
    seed: int = 0
    classes: tuple[int, ...] = (0,)
    gen_hidden: tuple[int, ...] = (64, 64)
    assistant_hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 4
    gen_init_scale: float = 0.1
    assistant_pretrain_steps: int = 500
    assistant_warm_start: str = "generator"
    antithetic: bool = True
    target_component: int = 0
    eval_every: int = 100
    eval_samples: int = 1000

    def validate(self) -> None:
        if self.alpha_rew < 0 or self.alpha_cfg < 0 or self.omega < 0:
            raise ValueError("alpha_rew, alpha_cfg and omega must be >= 0")
        if self.k_ta < 1:
            raise ValueError("k_ta must be >= 1")
        if self.distance not in ("pseudo-huber", "squared-l2"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.loss_space not in ("score", "denoiser"):
            raise ValueError(f"unknown loss space {self.loss_space!r}")
        if self.baseline not in ("di-star", "dipp-kl"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.lam not in ("edm", "constant"):
            raise ValueError(f"unknown lambda weighting {self.lam!r}")
        if self.w not in ("constant", "adaptive", "edm"):
            raise ValueError(f"unknown generator weighting {self.w!r}")
        if self.assistant_warm_start not in ("generator", "reference"):
            raise ValueError(f"unknown assistant warm start {self.assistant_warm_start!r}")
        if self.antithetic and self.batch_size % 2:
            raise ValueError("antithetic sampling needs an even batch_size")
        if self.process not in ("edm", "vp"):
            raise ValueError(f"unknown process {self.process!r}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr_gen <= 0 or self.lr_assistant <= 0:
            raise ValueError("learning rates must be positive")

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[name].items():
            setattr(self, k, v)

    def make_distance(self):
        return PseudoHuber(self.huber_c) if self.distance == "pseudo-huber" else SquaredL2()

    def make_process(self) -> ForwardProcess:
        return ForwardProcess(self.process)

    def make_time(self) -> LogNormalTime:
        return LogNormalTime(self.p_mean, self.p_std)

    def make_lambda(self):
        return EdmLambda(self.sigma_data) if self.lam == "edm" else ConstantWeight()

    def make_w(self):
        return {"constant": ConstantWeight(), "adaptive": AdaptiveGenWeight(), "edm": EdmLambda(self.sigma_data)}[self.w]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    gen_params: Params
    gen_adam: AdamState
    gen_ema: EmaState
    asst_params: Params
    asst_adam: AdamState
    iteration: int
    rngs: dict[str, np.random.Generator]

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, p in (("gen", self.gen_params), ("gen_ema", self.gen_ema.shadow), ("asst", self.asst_params)):
            out.update({f"{prefix}.{k}": v for k, v in p.items()})
        for prefix, st in (("gen_adam", self.gen_adam), ("asst_adam", self.asst_adam)):
            out.update({f"{prefix}.m.{k}": v for k, v in st.m.items()})
            out.update({f"{prefix}.v.{k}": v for k, v in st.v.items()})
        return out

    def to_meta(self) -> dict:
        return {
            "iteration": self.iteration,
            "gen_adam_step": self.gen_adam.step,
            "asst_adam_step": self.asst_adam.step,
            "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
        }



def _split(tensors: dict[str, np.ndarray], prefix: str) -> Params:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def _make_rngs(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        for i, name in enumerate(STREAMS)
    }


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


class Alignment:
    """Models, reference, reward and config for one training run."""

    def __init__(
        self,
        config: AlignmentConfig,
        data: GaussianMixture,
        reference: ScoreFn | None = None,
        reward: RewardFunction | None = None,
        reference_model: tuple[ScoreModel, Params] | None = None,
    ) -> None:
        config.validate()
        self.config = config
        self.data = data
        self.process = config.make_process()
        self.time_dist = config.make_time()
        self.lam = config.make_lambda()
        self.w = config.make_w()
        self.distance = config.make_distance()
        self.reward = reward
        n_classes = max(len(data.classes), max(config.classes) + 1, 1)
        self.n_classes = n_classes
        self.generator = Generator(
            data.dim,
            hidden=tuple(config.gen_hidden),
            n_classes=n_classes,
            embed_dim=config.embed_dim,
            sigma_init=config.sigma_init,
            sigma_data=config.sigma_data,
        )
        if reference_model is not None:
            self.assistant, ref_params = reference_model
            self._reference_params = ref_params
            self.reference = reference or self.assistant.bind(ref_params)
        else:
            self.assistant = ScoreModel(
                data.dim,
                hidden=tuple(config.assistant_hidden),
                n_classes=n_classes,
                embed_dim=config.embed_dim,
                sigma_data=config.sigma_data,
            )
            self._reference_params = None
            self.reference = reference or AnalyticReference(data, self.process)
        self.classes = np.asarray(config.classes, dtype=np.int64)

    # -- state ----------------------------------------------------------------

    def init_state(self, gen_params: Params | None = None) -> TrainState:
        cfg = self.config
        rngs = _make_rngs(cfg.seed)
        init = rngs["init"]
        if gen_params is None:
            gen_params = self.generator.init(init, out_scale=cfg.gen_init_scale)
        else:
            self.generator.init(init)  # keep the init stream position independent of warm start
        if self._reference_params is not None:
            asst = {k: v.copy() for k, v in self._reference_params.items()}
        else:
            asst = self.assistant.init(init)
        gen_adam = AdamState(cfg.lr_gen, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        asst_adam = AdamState(cfg.lr_assistant, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        state = TrainState(
            dict(gen_params), gen_adam, EmaState.from_params(gen_params, cfg.ema_decay), asst, asst_adam, 0, rngs
        )
        if self._reference_params is None and cfg.assistant_pretrain_steps > 0:
            self._pretrain_assistant(state, cfg.assistant_pretrain_steps)
        return state

    def state_from_checkpoint(self, tensors: dict[str, np.ndarray], meta: dict) -> TrainState:
        cfg = self.config
        gen_adam = AdamState(cfg.lr_gen, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, int(meta["gen_adam_step"]))
        asst_adam = AdamState(cfg.lr_assistant, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, int(meta["asst_adam_step"]))
        gen_adam.m, gen_adam.v = _split(tensors, "gen_adam.m"), _split(tensors, "gen_adam.v")
        asst_adam.m, asst_adam.v = _split(tensors, "asst_adam.m"), _split(tensors, "asst_adam.v")
        rngs = {}
        for name in STREAMS:
            bg = np.random.PCG64()
            bg.state = meta["rng"][name]
            rngs[name] = np.random.Generator(bg)
        state = TrainState(
            _split(tensors, "gen"),
            gen_adam,
            EmaState(cfg.ema_decay, _split(tensors, "gen_ema")),
            _split(tensors, "asst"),
            asst_adam,
            int(meta["iteration"]),
            rngs,
        )
        for what, got, want in (
            ("generator", state.gen_params, self.generator.init(np.random.default_rng(0))),
            ("assistant", state.asst_params, self.assistant.init(np.random.default_rng(0))),
        ):
            if {k: v.shape for k, v in got.items()} != {k: v.shape for k, v in want.items()}:
                raise TrainingError(f"checkpoint {what} parameters do not match the configured {what}")
        return state

    def _pretrain_assistant(self, state: TrainState, steps: int) -> None:
        """DSM warm start on either the initial generator's samples or reference draws."""
        rng = state.rngs["init"]
        cfg = self.config
        labels = self.data.labels
        for _ in range(steps):
            if cfg.assistant_warm_start == "generator":
                x0, c = self.sample(state.gen_params, cfg.batch_size, rng)
            else:
                x0, comp = self.data.sample(cfg.batch_size, rng)
                c = labels[comp] if labels is not None else np.zeros(cfg.batch_size, dtype=np.int64)
            self._assistant_step(state, x0, c, rng)

    # -- updates --------------------------------------------------------------

    def _assistant_step(self, state: TrainState, x0, classes, rng) -> tuple[float, float]:
        n = x0.shape[0]
        t = sample_time(self.time_dist, rng, n, self.process)
        eps = rng.standard_normal(x0.shape)
        tape = ad.Tape()
        P = tape.watch_all(state.asst_params)
        loss = dsm_loss(self.assistant, P, x0, classes, t, eps, self.process, self.lam)
        tape.backward(loss)
        grads = tape.grads(P)
        state.asst_params = adam_step(state.asst_params, grads, state.asst_adam)
        return float(loss.value), _grad_norm(grads)

    def _sample_classes(self, n: int, rng) -> np.ndarray:
        if self.classes.size == 1:
            return np.full(n, int(self.classes[0]))
        return rng.choice(self.classes, size=n)

    def update_assistant(self, state: TrainState) -> tuple[float, float]:
        """``k_ta`` DSM steps on generator samples; returns mean loss and last grad norm."""
        rng = state.rngs["assistant-noise"]
        losses, gnorm = [], 0.0
        for _ in range(self.config.k_ta):
            n = self.config.batch_size
            c = self._sample_classes(n, rng)
            z = self.generator.sample_latent(n, rng)
            x0 = self.generator(state.gen_params, z, c).value
            try:
                loss, gnorm = self._assistant_step(state, x0, c, rng)
            except FloatingPointError as exc:
                raise TrainingError(f"iteration {state.iteration}: assistant update: {exc}") from exc
            losses.append(loss)
        return float(np.mean(losses)), gnorm

    def generator_batch(self, state: TrainState) -> NoiseBatch:
        """Fresh generator-step noise.

        With ``antithetic`` the second half of the batch repeats the first
        half's latents, classes and times with negated forward noise. The
        estimator stays unbiased; the ``eps / t`` part of the transition
        score, whose variance grows as ``1/t^2``, largely cancels in pairs.
        """
        n = self.config.batch_size
        rng = state.rngs["generator-noise"]
        m = n // 2 if self.config.antithetic else n
        c = self._sample_classes(m, rng)
        z = self.generator.sample_latent(m, rng)
        eps = rng.standard_normal((m, self.generator.data_dim))
        t = sample_time(self.time_dist, state.rngs["time"], m, self.process)
        if self.config.antithetic:
            c, z, t = np.concatenate([c, c]), np.concatenate([z, z]), np.concatenate([t, t])
            eps = np.concatenate([eps, -eps])
        return NoiseBatch(z, eps, t, c)

    def generator_objective(self, params, asst_params, batch: NoiseBatch) -> tuple[ad.Tensor, LossBreakdown]:
        cfg = self.config
        assistant = self.assistant.bind(asst_params)
        if cfg.baseline == "di-star":
            reg = di_star_reg_loss(
                self.generator, params, assistant, self.reference, self.distance, self.process, self.w, batch,
                detach_direction=cfg.detach_direction, space=cfg.loss_space,
            )
        else:
            reg = dipp_kl_loss(
                self.generator, params, assistant, self.reference, self.process, self.w, batch, space=cfg.loss_space
            )
        total = reg
        parts = LossBreakdown(reg=float(reg.value))
        if cfg.alpha_rew > 0 and self.reward is not None:
            rew = ad.mul(explicit_reward_loss(self.generator, params, self.reward, batch), cfg.alpha_rew)
            parts.reward = float(rew.value)
            total = ad.add(total, rew)
        if cfg.alpha_cfg > 0:
            cfg_term = ad.mul(
                cfg_reward_loss(
                    self.generator, params, self.reference, self.process, self.w, batch, cfg.omega, space=cfg.loss_space
                ),
                cfg.alpha_cfg,
            )
            parts.cfg = float(cfg_term.value)
            total = ad.add(total, cfg_term)
        return total, parts

    def update_generator(self, state: TrainState) -> LossBreakdown:
        batch = self.generator_batch(state)
        tape = ad.Tape()
        P = tape.watch_all(state.gen_params)
        try:
            total, parts = self.generator_objective(P, state.asst_params, batch)
            tape.backward(total)
            grads = tape.grads(P)
            state.gen_params = adam_step(state.gen_params, grads, state.gen_adam)
        except FloatingPointError as exc:
            raise TrainingError(f"iteration {state.iteration}: generator update: {exc}") from exc
        ema_update(state.gen_ema, state.gen_params)
        parts.grad_norms["gen"] = _grad_norm(grads)
        return parts

    # -- evaluation -----------------------------------------------------------

    def sample(self, params: Params, n: int, rng: np.random.Generator, classes=None) -> tuple[np.ndarray, np.ndarray]:
        c = self._sample_classes(n, rng) if classes is None else np.broadcast_to(np.asarray(classes, np.int64), (n,))
        z = self.generator.sample_latent(n, rng)
        return self.generator(params, z, c).value, np.array(c)

    def reference_samples(self, n: int, seed_offset: int = 0) -> np.ndarray:
        """Reference draws restricted to the training classes."""
        rng = np.random.default_rng([self.config.seed, 7919, seed_offset])
        data = self.data
        if data.labels is not None and set(self.classes.tolist()) != set(data.classes):
            keep = np.isin(data.labels, self.classes)
            w = data.weights[keep]
            data = GaussianMixture(w / w.sum(), data.means[keep], data.covs[keep], data.labels[keep])
        return data.sample(n, rng)[0]

    def target_mode_fraction(self, x: np.ndarray) -> float:
        return float(np.mean(self.data.assign(x) == self.config.target_component))

    def mean_reward(self, x: np.ndarray, classes) -> float:
        if self.reward is None:
            return float("nan")
        return float(np.mean(self.reward(x, classes).value))

    def guidance_log_ratio(self, params: Params, n: int, rng, times=(0.1, 0.3, 1.0, 3.0)) -> float:
        """``E log p(x_t|c) - log p(x_t)`` under the analytic reference, averaged over ``times``."""
        if not isinstance(self.reference, AnalyticReference):
            raise TrainingError("the guidance log-ratio needs an analytic reference")
        x0, c = self.sample(params, n, rng)
        eps = rng.standard_normal(x0.shape)
        out = []
        for t in times:
            xt = float(self.process.alpha(t)) * x0 + float(self.process.beta(t)) * eps
            tt = np.full(n, t)
            out.append(np.mean(self.reference.log_prob(xt, tt, c) - self.reference.log_prob(xt, tt)))
        return float(np.mean(out))

    def energy_distance(self, params: Params, n: int, rng) -> float:
        x, _ = self.sample(params, n, rng)
        return kernels.energy_distance(x, self.reference_samples(n))

    # -- loop -----------------------------------------------------------------

    def run(
        self,
        state: TrainState | None = None,
        iterations: int | None = None,
        on_step: Callable[[TrainState, dict], None] | None = None,
    ) -> tuple[TrainState, list[dict]]:
        """Alternate assistant and generator updates until ``iterations`` is reached.

        ``iterations`` is the absolute iteration count (defaults to the config's);
        a resumed state continues from its own counter.
        """
        state = self.init_state() if state is None else state
        stop = self.config.iterations if iterations is None else iterations
        cfg = self.config
        rows = []
        while state.iteration < stop:
            gen_hash = params_hash(state.gen_params)
            loss_dsm, gn_a = self.update_assistant(state)
            if params_hash(state.gen_params) != gen_hash:
                raise TrainingError("generator parameters changed during the assistant phase")
            asst_hash = params_hash(state.asst_params)
            parts = self.update_generator(state)
            if params_hash(state.asst_params) != asst_hash:
                raise TrainingError("assistant parameters changed during the generator phase")
            state.iteration += 1
            row = {
                "iter": state.iteration,
                "loss_dsm": loss_dsm,
                "loss_reg": parts.reg,
                "loss_reward": parts.reward,
                "loss_cfg": parts.cfg,
                "reward_mean": "",
                "target_mode_fraction": "",
                "energy_distance": "",
                "grad_norm_gen": parts.grad_norms["gen"],
                "grad_norm_assistant": gn_a,
            }
            if cfg.eval_every > 0 and (state.iteration % cfg.eval_every == 0 or state.iteration == stop):
                erng = np.random.default_rng([cfg.seed, 104729, state.iteration])
                x, c = self.sample(state.gen_params, cfg.eval_samples, erng)
                row["reward_mean"] = self.mean_reward(x, c) if self.reward is not None else ""
                row["target_mode_fraction"] = self.target_mode_fraction(x)
                row["energy_distance"] = kernels.energy_distance(x, self.reference_samples(cfg.eval_samples))
            rows.append(row)
            if on_step is not None:
                on_step(state, row)
        return state, rows


def run(
    config: AlignmentConfig,
    data: GaussianMixture,
    reward: RewardFunction | None = None,
    **kwargs,
) -> tuple[TrainState, list[dict]]:
    return Alignment(config, data, reward=reward, **kwargs).run()




# --- reference score pretraining ----------------------------------------------


@dataclass
class ScoreTrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: tuple[int, ...] = (128, 128, 128)
    in_scale: float = 3.0
    embed_dim: int = 4
    parameterization: str = "edm"
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    cond_drop: float = 0.2
    cosine: bool = True
    seed: int = 0


@dataclass
class ScoreTrainState:
    params: Params
    adam: AdamState
    iteration: int
    rng: np.random.Generator

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors = {f"p.{k}": v for k, v in self.params.items()}
        tensors.update({f"m.{k}": v for k, v in self.adam.m.items()})
        tensors.update({f"v.{k}": v for k, v in self.adam.v.items()})
        return tensors

    def to_meta(self) -> dict:
        return {"iteration": self.iteration, "adam_step": self.adam.step, "rng": self.rng.bit_generator.state}


class ScoreTraining:
    """DSM training of a (class-conditional) score model on mixture samples.

    With a labelled mixture each row keeps its class with probability
    ``1 - cond_drop`` and is otherwise trained as the null class, so the
    model serves both the conditional and unconditional scores.
    """

    def __init__(self, config: ScoreTrainConfig, data: GaussianMixture) -> None:
        self.config = config
        self.data = data
        self.process = ForwardProcess("edm")
        self.model = ScoreModel(
            data.dim,
            hidden=tuple(config.hidden),
            n_classes=max(len(data.classes), 1),
            embed_dim=config.embed_dim,
            parameterization=config.parameterization,
            sigma_data=config.sigma_data,
        )
        self.time_dist = LogNormalTime(config.p_mean, config.p_std)
        self.lam = EdmLambda(config.sigma_data)

    def init_state(self) -> ScoreTrainState:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.config.seed, spawn_key=(99,))))
        params = self.model.init(rng, in_scale=self.config.in_scale)
        adam = AdamState(self.config.lr, self.config.beta1, self.config.beta2)
        return ScoreTrainState(params, adam, 0, rng)

    def state_from_checkpoint(self, tensors: dict[str, np.ndarray], meta: dict) -> ScoreTrainState:
        adam = AdamState(self.config.lr, self.config.beta1, self.config.beta2, step=int(meta["adam_step"]))
        adam.m, adam.v = _split(tensors, "m"), _split(tensors, "v")
        bg = np.random.PCG64()
        bg.state = meta["rng"]
        return ScoreTrainState(_split(tensors, "p"), adam, int(meta["iteration"]), np.random.Generator(bg))

    def step(self, state: ScoreTrainState) -> float:
        cfg, rng = self.config, state.rng
        x0, comp = self.data.sample(cfg.batch_size, rng)
        if self.data.labels is None:
            c = np.full(cfg.batch_size, -1)
        else:
            c = np.where(rng.random(cfg.batch_size) < cfg.cond_drop, -1, self.data.labels[comp])
        t = sample_time(self.time_dist, rng, cfg.batch_size, self.process)
        eps = rng.standard_normal(x0.shape)
        if cfg.cosine:
            state.adam.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * state.iteration / max(cfg.iterations, 1)))
        tape = ad.Tape()
        P = tape.watch_all(state.params)
        try:
            loss = dsm_loss(self.model, P, x0, c, t, eps, self.process, self.lam)
            tape.backward(loss)
            state.params = adam_step(state.params, tape.grads(P), state.adam)
        except FloatingPointError as exc:
            raise TrainingError(f"iteration {state.iteration}: score update: {exc}") from exc
        state.iteration += 1
        return float(loss.value)

    def run(self, state: ScoreTrainState | None = None, on_step=None) -> tuple[ScoreTrainState, list[dict]]:
        state = self.init_state() if state is None else state
        rows = []
        while state.iteration < self.config.iterations:
            row = {"iter": state.iteration + 1, "loss_dsm": self.step(state)}
            rows.append(row)
            if on_step is not None:
                on_step(state, row)
        return state, rows
