"""Flat ``section.key = value`` run configuration.

Every key has a type, a default and a one-line description (see
:data:`SCHEMA`); unknown keys are rejected. :meth:`RunConfig.echo` renders
the fully resolved config, and parsing that text gives back an equal config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analytic import GaussianMixture, load_gmm
from .losses import ClassLogit, ModeAffinity, NegSquaredDistance
from .training import PRESETS, AlignmentConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | ints | floats | matrix
    default: object
    doc: str


SCHEMA: dict[str, Key] = {
    # run
    "run.seed": Key("int", 0, "master seed; every random stream derives from it"),
    "run.out": Key("str", "runs/default", "output directory (relative paths go under $SCOREALIGN_OUT_ROOT when set)"),
    "run.checkpoint_every": Key("int", 0, "write a resumable checkpoint every N iterations (0: only at the end)"),
    "run.sample_every": Key("int", 0, "dump generator samples every N iterations (0: only at the end)"),
    "run.sample_n": Key("int", 1000, "samples per dump"),
    # reference
    "reference.gmm": Key("str", "", "data mixture: built-in name or path to a mixture file (required)"),
    "reference.checkpoint": Key("str", "", "trained score-model checkpoint to use as reference (empty: analytic)"),
    # generator
    "generator.hidden": Key("ints", (64, 64), "hidden widths of the generator MLP"),
    "generator.embed_dim": Key("int", 4, "class embedding width"),
    "generator.sigma_init": Key("float", 2.5, "latent noise scale and fixed denoiser level of the generator"),
    "generator.init_scale": Key("float", 0.1, "output-layer init scale"),
    "generator.init_checkpoint": Key("str", "", "warm-start generator parameters from this checkpoint"),
    # assistant
    "assistant.hidden": Key("ints", (64, 64), "hidden widths of the assistant score network"),
    "assistant.lr": Key("float", 1e-3, "assistant learning rate"),
    "assistant.k_ta": Key("int", 1, "assistant updates per generator update"),
    "assistant.pretrain_steps": Key("int", 500, "DSM warm-start steps for an analytic reference"),
    "assistant.warm_start": Key("str", "generator", "warm-start data: generator | reference"),
    # align
    "align.preset": Key("str", "", "named (alpha_rew, alpha_cfg) preset: dit-style | sd15-style"),
    "align.alpha_rew": Key("float", 0.0, "explicit reward scale"),
    "align.alpha_cfg": Key("float", 0.0, "guidance reward scale"),
    "align.omega": Key("float", 1.0, "guidance strength inside the implicit reward"),
    "align.distance": Key("str", "pseudo-huber", "score distance: pseudo-huber | squared-l2"),
    "align.huber_c": Key("float", 0.1, "pseudo-Huber constant"),
    "align.baseline": Key("str", "di-star", "regulariser: di-star | dipp-kl"),
    "align.loss_space": Key("str", "denoiser", "generator losses on denoiser or score differences"),
    "align.detach_direction": Key("bool", False, "treat the distance gradient as a constant"),
    "align.antithetic": Key("bool", True, "antithetic forward noise in generator batches"),
    "align.lr": Key("float", 1e-3, "generator learning rate"),
    "align.iterations": Key("int", 1000, "generator updates"),
    "align.batch_size": Key("int", 256, "batch size for both networks"),
    "align.classes": Key("ints", (0,), "classes the generator is trained on"),
    "align.target_component": Key("int", 0, "mixture component counted by target_mode_fraction"),
    # reward
    "reward.kind": Key("str", "none", "none | mode-affinity | neg-sq-distance | class-logit"),
    "reward.targets": Key("matrix", (), "reward targets, one row per class (rows separated by ';')"),
    "reward.bandwidth": Key("float", 1.5, "mode-affinity bandwidth"),
    "reward.bias": Key("floats", (), "class-logit biases (targets are the weight rows)"),
    # optimiser
    "optim.beta1": Key("float", 0.0, "Adam beta1"),
    "optim.beta2": Key("float", 0.999, "Adam beta2"),
    "optim.eps": Key("float", 1e-8, "Adam epsilon"),
    "optim.ema_decay": Key("float", 0.95, "generator EMA decay"),
    # diffusion
    "diffusion.process": Key("str", "edm", "forward process: edm | vp"),
    "diffusion.p_mean": Key("float", -2.0, "log-normal time mean"),
    "diffusion.p_std": Key("float", 2.0, "log-normal time std"),
    "diffusion.lam": Key("str", "edm", "DSM weighting: edm | constant"),
    "diffusion.w": Key("str", "constant", "generator weighting: constant | adaptive | edm"),
    "diffusion.sigma_data": Key("float", 1.0, "data scale used by preconditioning and the EDM weighting"),
    # eval
    "eval.every": Key("int", 100, "metric evaluation cadence (0: never)"),
    "eval.samples": Key("int", 1000, "samples per metric evaluation"),
    # train-score
    "score.iterations": Key("int", 2000, "DSM steps for the reference score model"),
    "score.batch_size": Key("int", 1024, "DSM batch size"),
    "score.lr": Key("float", 3e-3, "DSM peak learning rate (cosine decay)"),
    "score.hidden": Key("ints", (128, 128, 128), "score model hidden widths"),
    "score.sigma_data": Key("float", 0.5, "data scale of the score model's preconditioning"),
    "score.parameterization": Key("str", "edm", "edm | direct"),
    "score.p_mean": Key("float", -1.2, "log-normal time mean for reference training"),
    "score.p_std": Key("float", 1.2, "log-normal time std for reference training"),
    # verify
    "verify.quick": Key("bool", False, "smaller sample sizes"),
}

BUILTIN_GMMS = {
    "two-mode-2d": lambda: GaussianMixture(
        np.array([0.5, 0.5]), np.array([[-2.0, 0.0], [2.0, 0.0]]), np.array([np.eye(2) * 0.25] * 2)
    ),
    "three-component-2d": lambda: GaussianMixture(
        np.ones(3) / 3,
        np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.5]]),
        np.array([np.eye(2) * 0.25] * 3),
        labels=np.array([0, 0, 1]),
    ),
    "two-class-1d": lambda: GaussianMixture(
        np.array([0.5, 0.5]), np.array([[-1.5], [1.5]]), np.array([[[0.5]], [[0.5]]]), labels=np.array([0, 1])
    ),
}


def _parse_value(key: str, kind: str, text: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind == "matrix":
            rows = [r for r in text.split(";") if r.strip()]
            return tuple(tuple(float(v) for v in r.split(",")) for r in rows)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    raise AssertionError(kind)


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind in ("ints", "floats"):
        return ", ".join(repr(v) for v in value)
    if kind == "matrix":
        return "; ".join(", ".join(repr(float(v)) for v in row) for row in value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None) -> None:
        self.values = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and SCHEMA[key].kind != "str":
            value = _parse_value(key, SCHEMA[key].kind, value)
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.echo() == other.echo()

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            cfg.values[key] = _parse_value(key, SCHEMA[key].kind, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def echo(self) -> str:
        return "".join(f"{k} = {_format_value(SCHEMA[k].kind, self.values[k])}\n" for k in sorted(SCHEMA))

    def digest(self) -> str:
        """Hash of the resolved config, excluding the output location."""
        text = "".join(line for line in self.echo().splitlines(True) if not line.startswith("run.out "))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(f"align.preset: unknown preset {name!r} (choose from {', '.join(sorted(PRESETS))})")
        for k, v in PRESETS[name].items():
            key = f"align.{k}"
            if self.values[key] not in (v, SCHEMA[key].default):
                raise ConfigError(f"{key}: {self.values[key]} conflicts with align.preset = {name} ({v})")
        self.values["align.preset"] = name
        for k, v in PRESETS[name].items():
            self.values[f"align.{k}"] = v

    # -- builders ----------------------------------------------------------

    def gmm(self) -> GaussianMixture:
        name = self["reference.gmm"]
        if not name:
            raise ConfigError("reference.gmm is required (built-in name or mixture file)")
        if name in BUILTIN_GMMS:
            return BUILTIN_GMMS[name]()
        try:
            return load_gmm(name)
        except OSError as exc:
            raise ConfigError(f"reference.gmm: cannot read {name!r}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"reference.gmm: {exc}") from None

    def reward(self):
        kind = self["reward.kind"]
        targets = np.array(self["reward.targets"], dtype=np.float64)
        if kind == "none":
            return None
        if targets.size == 0:
            raise ConfigError(f"reward.targets is required for reward.kind = {kind}")
        if kind == "mode-affinity":
            return ModeAffinity(targets, self["reward.bandwidth"])
        if kind == "neg-sq-distance":
            return NegSquaredDistance(targets)
        if kind == "class-logit":
            bias = np.array(self["reward.bias"] or [0.0] * len(targets), dtype=np.float64)
            return ClassLogit(targets, bias)
        raise ConfigError(f"reward.kind: unknown reward {kind!r}")

    def alignment(self) -> AlignmentConfig:
        v = self.values
        if v["align.preset"]:
            for k, val in PRESETS.get(v["align.preset"], {}).items():
                if v[f"align.{k}"] != val:
                    raise ConfigError(f"align.{k}: conflicts with align.preset = {v['align.preset']}")
        cfg = AlignmentConfig(
            alpha_rew=v["align.alpha_rew"],
            alpha_cfg=v["align.alpha_cfg"],
            k_ta=v["assistant.k_ta"],
            distance=v["align.distance"],
            huber_c=v["align.huber_c"],
            omega=v["align.omega"],
            baseline=v["align.baseline"],
            detach_direction=v["align.detach_direction"],
            loss_space=v["align.loss_space"],
            lr_gen=v["align.lr"],
            lr_assistant=v["assistant.lr"],
            adam_beta1=v["optim.beta1"],
            adam_beta2=v["optim.beta2"],
            adam_eps=v["optim.eps"],
            ema_decay=v["optim.ema_decay"],
            process=v["diffusion.process"],
            p_mean=v["diffusion.p_mean"],
            p_std=v["diffusion.p_std"],
            lam=v["diffusion.lam"],
            w=v["diffusion.w"],
            sigma_data=v["diffusion.sigma_data"],
            sigma_init=v["generator.sigma_init"],
            batch_size=v["align.batch_size"],
            iterations=v["align.iterations"],
            seed=v["run.seed"],
            classes=tuple(v["align.classes"]),
            gen_hidden=tuple(v["generator.hidden"]),
            assistant_hidden=tuple(v["assistant.hidden"]),
            embed_dim=v["generator.embed_dim"],
            gen_init_scale=v["generator.init_scale"],
            assistant_pretrain_steps=v["assistant.pretrain_steps"],
            assistant_warm_start=v["assistant.warm_start"],
            antithetic=v["align.antithetic"],
            target_component=v["align.target_component"],
            eval_every=v["eval.every"],
            eval_samples=v["eval.samples"],
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg


def schema_doc() -> str:
    """Markdown table of every key, its default and description."""
    lines = ["| key | default | description |", "| --- | --- | --- |"]
    for k in sorted(SCHEMA):
        spec = SCHEMA[k]
        default = _format_value(spec.kind, spec.default) or '""'
        lines.append(f"| `{k}` | `{default}` | {spec.doc} |")
    return "\n".join(lines)
