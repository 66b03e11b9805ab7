"""Run configuration: a JSON document with sections model, train, loss_weights, data, synth."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import OUTCOMES, SynthConfig, outcome_index
from .errors import ConfigError, SurgVAEError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "loss_weights", "data", "synth")


@dataclass(frozen=True)
class DataConfig:
    k: int = 5
    target_group: int = 0
    strat_outcome: str = "y_arrest"
    fold_seed: int = 0
    sensitivity: float = 0.85
    baseline_l2: float = 1e-2

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("data.k must be >= 2")
        if not 0.0 < self.sensitivity <= 1.0:
            raise ConfigError("data.sensitivity must lie in (0, 1]")
        if not self.baseline_l2 > 0:
            raise ConfigError("data.baseline_l2 must be positive")
        try:
            outcome_index(self.strat_outcome)
        except SurgVAEError as exc:
            raise ConfigError(f"data.strat_outcome: {exc}") from exc

    @property
    def strat_index(self) -> int:
        return outcome_index(self.strat_outcome)


@dataclass(frozen=True)
class RunConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides; n_features comes from the data
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def weights(self) -> LossWeights:
        return self.train.weights

    def model_config(self, n_features: int, n_groups: int | None = None) -> ModelConfig:
        opts = dict(self.model)
        if "n_features" in opts and opts["n_features"] != n_features:
            raise ConfigError(f"model.n_features={opts['n_features']} but the data has {n_features} features")
        opts["n_features"] = n_features
        opts.setdefault("n_outcomes", len(OUTCOMES))
        if n_groups is not None:
            opts.setdefault("n_groups", n_groups)
        cfg = ModelConfig(**opts)
        try:
            cfg.validate()
        except SurgVAEError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def to_dict(self) -> dict:
        """Effective configuration with every default resolved."""
        model = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "n_features"}
        model.update(self.model)
        synth = dataclasses.asdict(self.synth)
        synth["rates"] = list(synth["rates"])
        return {
            "model": model,
            "train": self.train.to_dict(),
            "loss_weights": self.train.weights.to_dict(),
            "data": dataclasses.asdict(self.data),
            "synth": synth,
        }


def _build(cls, section: str, values, exclude=()):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, SurgVAEError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    model = doc.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("section 'model' must be an object")
    bad = sorted(set(model) - {f.name for f in dataclasses.fields(ModelConfig)})
    if bad:
        raise ConfigError(f"unknown key(s) in 'model': {', '.join(bad)}")
    for key, val in model.items():
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(f"model.{key} must be an integer")
    weights = _build(LossWeights, "loss_weights", doc.get("loss_weights", {}))
    train = dict(doc.get("train", {})) if isinstance(doc.get("train", {}), dict) else doc["train"]
    if isinstance(train, dict):
        if "weights" in train:
            raise ConfigError("unknown key(s) in 'train': weights (use the 'loss_weights' section)")
        train["weights"] = weights
    train_cfg = _build(TrainConfig, "train", train)
    data = _build(DataConfig, "data", doc.get("data", {}))
    synth_doc = doc.get("synth", {})
    if isinstance(synth_doc, dict) and "rates" in synth_doc:
        synth_doc = {**synth_doc, "rates": tuple(synth_doc["rates"])}
    synth = _build(SynthConfig, "synth", synth_doc)
    try:
        synth.validate()
    except SurgVAEError as exc:
        raise ConfigError(f"invalid 'synth' section: {exc}") from exc
    return RunConfig(model=dict(model), train=train_cfg, data=data, synth=synth)


def load_config(path) -> RunConfig:
    """Parse a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)
