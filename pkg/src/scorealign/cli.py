"""Command-line harness: ``scorealign {train-score,align,verify,sample}``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .models import Generator, ScoreModel
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .training import (
    METRIC_COLUMNS,
    Alignment,
    ScoreTrainConfig,
    ScoreTraining,
    TrainingError,
)
from .verify import run_battery

OUT_ROOT_ENV = "SCOREALIGN_OUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


# --- output helpers ----------------------------------------------------------


def out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg["run.seed"], "version": __version__}


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """CSV with a ``#`` provenance line, then the header, then one row per step.

    Appends when resuming into a directory that already holds the file.
    """

    def __init__(self, path: Path, columns: list[str], cfg: RunConfig, append: bool = False) -> None:
        self.path = path
        self.columns = columns
        if not (append and path.exists()):
            p = provenance(cfg)
            path.write_text(
                f"# scorealign {p['version']} config_hash={p['config_hash']} seed={p['seed']}\n"
                + ",".join(columns) + "\n"
            )
        self._fh = path.open("a")

    def write(self, row: dict) -> None:
        self._fh.write(",".join(_cell(row.get(c, "")) for c in self.columns) + "\n")

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV written by this tool (skips ``#`` lines)."""
    import csv

    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_samples(path: Path, x: np.ndarray, classes: np.ndarray, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {
        "format": "scorealign-samples",
        **provenance(cfg),
        **(extra or {}),
        "n": int(x.shape[0]),
        "samples": np.asarray(x, dtype=np.float64).tolist(),
        "classes": np.asarray(classes, dtype=np.int64).tolist(),
        "config": cfg.echo(),
    }
    path.write_text(json.dumps(doc) + "\n")


def _meta(cfg: RunConfig, kind: str, **kw) -> dict:
    return {"kind": kind, **provenance(cfg), **kw}


# --- config resolution -------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    preset = getattr(args, "preset", None) or cfg["align.preset"]
    if preset:
        cfg.apply_preset(preset)
    if getattr(args, "baseline", None):
        cfg.set("align.baseline", args.baseline)
    if getattr(args, "seed", None) is not None:
        cfg.set("run.seed", args.seed)
    if getattr(args, "out", None):
        cfg.set("run.out", args.out)
    return cfg


def _prepare(cfg: RunConfig) -> Path:
    d = out_dir(cfg["run.out"])
    (d / "config.resolved").write_text(cfg.echo())
    return d


# --- subcommands -------------------------------------------------------------


def score_config(cfg: RunConfig) -> ScoreTrainConfig:
    return ScoreTrainConfig(
        iterations=cfg["score.iterations"],
        batch_size=cfg["score.batch_size"],
        lr=cfg["score.lr"],
        hidden=tuple(cfg["score.hidden"]),
        parameterization=cfg["score.parameterization"],
        sigma_data=cfg["score.sigma_data"],
        p_mean=cfg["score.p_mean"],
        p_std=cfg["score.p_std"],
        seed=cfg["run.seed"],
    )


def cmd_train_score(args) -> int:
    cfg = resolve_config(args)
    gmm = cfg.gmm()
    scfg = score_config(cfg)
    if scfg.parameterization not in ("edm", "direct"):
        raise ConfigError(f"score.parameterization: unknown value {scfg.parameterization!r}")
    d = _prepare(cfg)
    trainer = ScoreTraining(scfg, gmm)
    state = None
    if args.resume:
        tensors, meta = load_checkpoint(args.resume)
        if meta.get("kind") != "score-state":
            raise CheckpointError(f"{args.resume}: not a score-training state checkpoint")
        state = trainer.state_from_checkpoint(tensors, meta)
    metrics = MetricsWriter(d / "metrics.csv", ["iter", "loss_dsm"], cfg, append=bool(args.resume))
    every = cfg["run.checkpoint_every"]

    def save_state(st):
        save_checkpoint(d / "score_state.ckpt.json", st.to_tensors(), _meta(cfg, "score-state", **st.to_meta()))

    def on_step(st, row):
        metrics.write(row)
        if every and st.iteration % every == 0:
            save_state(st)

    try:
        state, _ = trainer.run(state, on_step)
    finally:
        metrics.close()
    save_state(state)
    save_checkpoint(
        d / "score.ckpt.json", state.params, _meta(cfg, "score-model", model=trainer.model.spec(), iteration=state.iteration)
    )
    print(f"train-score: {state.iteration} iterations -> {d / 'score.ckpt.json'}")
    return EXIT_OK


def load_score_model(path) -> tuple[ScoreModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "score-model":
        raise CheckpointError(f"{path}: not a score-model checkpoint")
    if meta.get("version") != __version__:
        raise CheckpointError(f"{path}: written by version {meta.get('version')}, this is {__version__}")
    return ScoreModel.from_spec(meta["model"]), tensors


def load_generator(path) -> tuple[Generator, dict, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise CheckpointError(f"{path}: not a generator checkpoint")
    if meta.get("version") != __version__:
        raise CheckpointError(f"{path}: written by version {meta.get('version')}, this is {__version__}")
    return Generator.from_spec(meta["generator"]), tensors, meta


def cmd_align(args) -> int:
    cfg = resolve_config(args)
    gmm = cfg.gmm()
    reward = cfg.reward()
    acfg = cfg.alignment()
    reference_model = None
    if cfg["reference.checkpoint"]:
        reference_model = load_score_model(cfg["reference.checkpoint"])
    d = _prepare(cfg)
    al = Alignment(acfg, gmm, reward=reward, reference_model=reference_model)

    if args.resume:
        tensors, meta = load_checkpoint(args.resume)
        if meta.get("kind") != "align-state":
            raise CheckpointError(f"{args.resume}: not an alignment state checkpoint")
        if meta.get("version") != __version__:
            raise CheckpointError(f"{args.resume}: written by version {meta.get('version')}, this is {__version__}")
        state = al.state_from_checkpoint(tensors, meta)
    else:
        warm = None
        if cfg["generator.init_checkpoint"]:
            gen, warm, _ = load_generator(cfg["generator.init_checkpoint"])
            if gen.spec() != al.generator.spec():
                raise CheckpointError("generator.init_checkpoint: architecture differs from the configured generator")
        state = al.init_state(warm)

    metrics = MetricsWriter(d / "metrics.csv", METRIC_COLUMNS, cfg, append=bool(args.resume))
    ck_every, s_every, s_n = cfg["run.checkpoint_every"], cfg["run.sample_every"], cfg["run.sample_n"]
    gen_meta = {"generator": al.generator.spec()}

    def save_state(st):
        save_checkpoint(d / "state.ckpt.json", st.to_tensors(), _meta(cfg, "align-state", **st.to_meta()))

    def dump(st, tag):
        x, c = al.sample(st.gen_params, s_n, np.random.default_rng([cfg["run.seed"], 17, st.iteration]))
        write_samples(d / f"samples_{tag}.json", x, c, cfg, {"iteration": st.iteration})

    def on_step(st, row):
        metrics.write(row)
        if ck_every and st.iteration % ck_every == 0:
            save_state(st)
        if s_every and st.iteration % s_every == 0:
            dump(st, f"{st.iteration:06d}")

    try:
        state, _ = al.run(state, on_step=on_step)
    finally:
        metrics.close()
    save_state(state)
    save_checkpoint(d / "generator_final.ckpt.json", state.gen_params,
                    _meta(cfg, "generator", iteration=state.iteration, **gen_meta))
    save_checkpoint(d / "generator_ema.ckpt.json", state.gen_ema.shadow,
                    _meta(cfg, "generator", iteration=state.iteration, ema=True, **gen_meta))
    dump(state, "final")
    if args.export_curves:
        export_curves(d, cfg)
    print(f"align: {state.iteration} iterations ({acfg.baseline}, alpha_rew={acfg.alpha_rew}, "
          f"alpha_cfg={acfg.alpha_cfg}) -> {d}")
    return EXIT_OK


def export_curves(d: Path, cfg: RunConfig) -> None:
    """(iteration, reward_mean) and (iteration, energy_distance) series from the metrics file."""
    rows = read_metrics(d / "metrics.csv")
    p = provenance(cfg)
    for col, name in (("reward_mean", "curve_reward.csv"), ("energy_distance", "curve_energy.csv")):
        lines = [f"# scorealign {p['version']} config_hash={p['config_hash']} seed={p['seed']} "
                 f"baseline={cfg['align.baseline']}\n", f"iter,{col}\n"]
        lines += [f"{r['iter']},{r[col]}\n" for r in rows if r[col] != ""]
        (d / name).write_text("".join(lines))


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    d = _prepare(cfg)
    reports = run_battery(cfg["run.seed"], negative_controls=args.negative_controls, quick=cfg["verify.quick"])
    p = provenance(cfg)
    with (d / "verify.jsonl").open("w") as fh:
        for r in reports:
            r.details.update(p)
            fh.write(r.to_json() + "\n")
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: error={r.error:.3g} tolerance={r.tolerance:g}")
    failed = [r for r in reports if not r.passed]
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    gen, params, meta = load_generator(args.checkpoint)
    d = out_dir(cfg["run.out"])
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    if args.class_ == "all":
        classes = list(range(gen.n_classes))
    else:
        try:
            classes = [int(args.class_)]
        except ValueError:
            raise ConfigError(f"--class expects an int or 'all', got {args.class_!r}") from None
    for c in classes:
        if not 0 <= c < gen.n_classes:
            raise ConfigError(f"--class {c}: generator has {gen.n_classes} classes")
        rng = np.random.default_rng([cfg["run.seed"], 23, c])
        z = gen.sample_latent(args.n, rng)
        x = gen(params, z, np.full(args.n, c)).value if args.n else np.zeros((0, gen.data_dim))
        name = "samples.json" if len(classes) == 1 else f"samples_class{c}.json"
        write_samples(d / name, x, np.full(args.n, c), cfg,
                      {"class": c, "checkpoint": str(args.checkpoint), "checkpoint_config_hash": meta.get("config_hash")})
        print(f"sample: {args.n} samples of class {c} -> {d / name}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scorealign", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"scorealign {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        if out:
            p.add_argument("--out", metavar="DIR", help="overrides run.out")

    p = sub.add_parser("train-score", help="DSM-train a reference score model on the configured mixture")
    common(p)
    p.add_argument("--resume", metavar="PATH", help="continue from a score_state checkpoint")
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("align", help="run reward-aligned distillation")
    common(p)
    p.add_argument("--preset", choices=["dit-style", "sd15-style"], help="named (alpha_rew, alpha_cfg) pair")
    p.add_argument("--baseline", choices=["di-star", "dipp-kl"], help="regulariser")
    p.add_argument("--resume", metavar="PATH", help="continue from a state checkpoint")
    p.add_argument("--export-curves", action="store_true", help="write reward and energy-distance curves")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("verify", help="run the gradient-identity check battery")
    common(p)
    p.add_argument("--negative-controls", action="store_true", help="run the broken-oracle controls instead")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sample", help="draw samples from a generator checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--class", dest="class_", default="0", help="class id or 'all' for one file per class")
    p.set_defaults(func=cmd_sample)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CheckpointError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
