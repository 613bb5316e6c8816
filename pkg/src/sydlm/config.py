"""Model and training configuration, plus the key = value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

SUPERVISION_MODES = ("split-head", "one-set-of-trees", "vanilla-multitask", "none")
TREE_SOURCES = ("gold", "random", "none")
PAIR_MODES = ("as-written", "symmetric")
MODEL_KINDS = ("onlstm-syd", "prpn", "prpn-syd")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture plus every ablation switch."""

    vocab_size: int = 0
    model: str = "onlstm-syd"
    n_layers: int = 3
    embedding_size: int = 400
    hidden_size: int = 1150
    chunk_factor: int = 1
    supervision_layer: int = 3
    supervision_mode: str = "split-head"
    tie_embeddings: bool = True
    # PRPN family
    prpn_lookback: int = 5
    prpn_temperature: float = 10.0
    prpn_conv_window: int = 3
    prpn_ff_hidden: int = 64

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError("model must be one of %s, got %r" % (MODEL_KINDS, self.model))
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ConfigError("supervision_mode must be one of %s" % (SUPERVISION_MODES,))
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover the special ids")
        if self.model == "onlstm-syd":
            if not 1 <= self.supervision_layer <= self.n_layers:
                raise ConfigError("supervision_layer %d outside 1..%d"
                                  % (self.supervision_layer, self.n_layers))
            for layer in range(self.n_layers):
                hidden = self.layer_hidden(layer)
                if hidden % self.chunk_factor != 0:
                    raise ConfigError("hidden size %d of layer %d not divisible by chunk_factor %d"
                                      % (hidden, layer + 1, self.chunk_factor))
        if self.model in ("prpn", "prpn-syd"):
            if self.prpn_lookback < 1:
                raise ConfigError("prpn_lookback must be >= 1")
            if self.prpn_temperature <= 0:
                raise ConfigError("prpn_temperature must be positive")
            if self.model == "prpn" and self.supervision_mode not in ("none",):
                raise ConfigError("model 'prpn' has no supervised distance stream; use prpn-syd")
            if self.model == "prpn-syd" and self.supervision_mode not in ("split-head", "none"):
                raise ConfigError("prpn-syd supports supervision_mode split-head or none")

    def layer_hidden(self, layer: int) -> int:
        # last layer emits embedding-sized states when the decoder is tied
        if layer == self.n_layers - 1 and self.tie_embeddings:
            return self.embedding_size
        return self.hidden_size

    def layer_input(self, layer: int) -> int:
        return self.embedding_size if layer == 0 else self.layer_hidden(layer - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainConfig:
    """Optimization, batching, supervision source, and regularization."""

    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.75
    tree_source: str = "gold"
    pair_mode: str = "symmetric"
    bptt_length: int = 70
    batch_size: int = 20
    epochs: int = 10
    lr: float = 1.0
    lr_decay: float = 0.25
    lr_patience: int = 2
    clip_norm: float = 0.25
    averaging: bool = False
    average_from_epoch: Optional[int] = None
    seed: int = 141
    # dropout: word vectors, recurrent-state stand-in, between layers,
    # final output, embedding rows
    dropout_words: float = 0.5
    dropout_recurrent: float = 0.45
    dropout_layers: float = 0.3
    dropout_output: float = 0.45
    dropout_embedding: float = 0.125

    def validate(self) -> None:
        self.model.validate()
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.tree_source not in TREE_SOURCES:
            raise ConfigError("tree_source must be one of %s" % (TREE_SOURCES,))
        if self.pair_mode not in PAIR_MODES:
            raise ConfigError("pair_mode must be one of %s" % (PAIR_MODES,))
        if (self.model.supervision_mode == "none") != (self.tree_source == "none"):
            raise ConfigError("supervision_mode none requires tree_source none and vice versa")
        if self.bptt_length < 2:
            raise ConfigError("bptt_length must be >= 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        for name in ("dropout_words", "dropout_recurrent", "dropout_layers",
                     "dropout_output", "dropout_embedding"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("%s must be in [0, 1)" % name)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known and k != "model"}
        model = ModelConfig.from_dict(data.get("model", {}))
        return cls(model=model, **kwargs)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"}


def _coerce(name: str, text: str, typ) -> object:
    text = text.strip()
    if typ is bool or typ == "bool":
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError("%s expects a boolean, got %r" % (name, text))
    if typ is int or typ == "int":
        return int(text)
    if typ is float or typ == "float":
        return float(text)
    if typ in (Optional[int], "Optional[int]", "int | None"):
        return None if text.lower() in ("none", "") else int(text)
    return text


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse `key = value` lines (# comments) into a TrainConfig."""
    cfg = base if base is not None else TrainConfig(model=ModelConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key = value, got %r" % (lineno, raw))
        key, value = (part.strip() for part in line.split("=", 1))
        apply_setting(cfg, key, value)
    return cfg


def apply_setting(cfg: TrainConfig, key: str, value: str) -> None:
    if key in _TRAIN_FIELDS:
        setattr(cfg, key, _coerce(key, value, _TRAIN_FIELDS[key].type))
    elif key in _MODEL_FIELDS:
        setattr(cfg.model, key, _coerce(key, value, _MODEL_FIELDS[key].type))
    else:
        raise ConfigError("unknown config key %r" % key)
