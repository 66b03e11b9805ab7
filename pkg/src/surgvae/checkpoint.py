"""Checkpoint and report documents (JSON; floats written with shortest round-trip repr)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import NormStats
from .errors import ConfigError, ParseError
from .losses import LossWeights
from .model import ModelConfig, Parameters, param_shapes

FORMAT = "surgvae-checkpoint"


@dataclass
class Checkpoint:
    params: Parameters
    norm: NormStats
    seed: int
    weights: LossWeights
    fold: int | None = None
    target_group: int = 0

    @property
    def cfg(self) -> ModelConfig:
        return self.params.cfg


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    return {
        "format": FORMAT,
        "version": __version__,
        "fold": ck.fold,
        "target_group": ck.target_group,
        "seed": ck.seed,
        "model": ck.cfg.to_dict(),
        "loss_weights": ck.weights.to_dict(),
        "norm": ck.norm.to_dict(),
        "params": [
            {"name": k, "shape": list(v.shape), "values": [float(t) for t in v.ravel()]}
            for k, v in ck.params.values.items()
        ],
    }


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    try:
        if doc.get("format") != FORMAT:
            raise ParseError("not a surgvae checkpoint")
        cfg = ModelConfig(**doc["model"])
        shapes = param_shapes(cfg)
        values = {}
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            if shapes.get(entry["name"]) != shape:
                raise ParseError(f"parameter {entry['name']} has shape {shape}, config implies "
                                 f"{shapes.get(entry['name'])}")
            values[entry["name"]] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        norm = NormStats.from_dict(doc["norm"])
        if norm.mean.shape != (cfg.n_features,):
            raise ParseError("normalizer length does not match n_features")
        return Checkpoint(Parameters(cfg, values), norm, int(doc["seed"]), LossWeights(**doc["loss_weights"]),
                          doc.get("fold"), int(doc.get("target_group", 0)))
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from exc


def dump_json(doc, path) -> None:
    """Deterministic JSON: fixed key order, repr floats, trailing newline."""
    text = json.dumps(doc, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def save_checkpoint(ck: Checkpoint, path) -> None:
    doc = checkpoint_to_dict(ck)
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    return checkpoint_from_dict(doc)
