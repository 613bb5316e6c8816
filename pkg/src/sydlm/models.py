"""Model construction from configuration."""

from __future__ import annotations

from .config import ModelConfig
from .onlstm import OnLstmLM
from .prpn import PrpnLM


def build_model(config: ModelConfig, seed: int):
    config.validate()
    if config.model == "onlstm-syd":
        return OnLstmLM(config, seed)
    return PrpnLM(config, seed)
