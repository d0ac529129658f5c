"""MLP backbone, Adam, EMA and JSON parameter checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

Params = dict[str, np.ndarray]


class Mlp:
    """Fully connected network with softplus hidden activations and a linear head.

    Parameters are held outside the object so the same network can be
    evaluated with raw arrays (detached) or with tape-attached tensors.
    """

    def __init__(self, widths: list[int]) -> None:
        if len(widths) < 2 or any(int(w) <= 0 for w in widths):
            raise ValueError(f"layer widths must be >= 2 positive ints, got {widths}")
        self.widths = [int(w) for w in widths]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def init(self, rng: np.random.Generator, out_scale: float = 1.0, in_scale: float = 1.0) -> Params:
        """Normal ``1/sqrt(fan_in)`` weights, zero biases.

        ``in_scale`` widens the first layer's weights and gives it biases of
        the same spread, which places its kinks across the input range and
        helps the network resolve sharp features early.
        """
        params: Params = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            scale = 1.0 / math.sqrt(a)
            if i == self.n_layers - 1:
                scale *= out_scale
            if i == 0 and in_scale != 1.0:
                scale *= in_scale
            params[f"w{i}"] = rng.normal(0.0, scale, size=(a, b))
            params[f"b{i}"] = rng.normal(0.0, in_scale, size=b) if i == 0 and in_scale != 1.0 else np.zeros(b)
        return params

    def forward(self, x, params: Mapping) -> ad.Tensor:
        h = ad.as_tensor(x)
        if h.shape[-1] != self.widths[0]:
            raise ad.ShapeError(f"mlp: input width {h.shape[-1]} != {self.widths[0]}")
        for i in range(self.n_layers):
            h = ad.affine(h, params[f"w{i}"], params[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.softplus(h)
        return h


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> Params:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameters."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"adam: non-finite gradient in '{k}' ({bad} entries)")
        if g.shape != params[k].shape:
            raise ad.ShapeError(f"adam: grad shape {g.shape} != param shape {params[k].shape} for '{k}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out: Params = {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / c1
        denom = np.sqrt(v / c2) + state.eps
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = np.where(denom > 0, mhat / np.where(denom > 0, denom, 1.0), 0.0)
        out[k] = p - state.lr * upd
    return out


@dataclass
class EmaState:
    decay: float
    shadow: Params

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], decay: float) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        return cls(decay, {k: np.array(v, copy=True) for k, v in params.items()})


def ema_update(state: EmaState, params: Mapping[str, np.ndarray]) -> Params:
    """shadow <- decay * shadow + (1 - decay) * params"""
    if not 0.0 <= state.decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {state.decay}")
    for k, p in params.items():
        if state.shadow[k].shape != p.shape:
            raise ad.ShapeError(f"ema: shape {p.shape} != shadow shape {state.shadow[k].shape} for '{k}'")
        state.shadow[k] = state.decay * state.shadow[k] + (1.0 - state.decay) * p
    return state.shadow


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in params:
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


# --- checkpoints -----------------------------------------------------------
#
# {"format": "scorealign-checkpoint", "version": 1, "meta": {...},
#  "tensors": [{"name": str, "shape": [int, ...], "values": [float, ...]}, ...]}
#
# Tensor order is the insertion order of the mapping passed to ``save``;
# floats are written with repr so they re-parse bit-identically.

CHECKPOINT_FORMAT = "scorealign-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> list[dict]:
    return [
        {"name": k, "shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
        for k, v in tensors.items()
    ]


def decode_tensors(entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        vals = np.asarray(e["values"], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor '{e['name']}': {vals.size} values for shape {shape}")
        out[e["name"]] = vals.reshape(shape)
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": encode_tensors(tensors),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    return decode_tensors(doc["tensors"]), doc.get("meta", {})
