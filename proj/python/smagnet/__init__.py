"""Masked gated SAR/MSI fusion for flood segmentation."""

import json

from ._smagnet import (
    ConfigError,
    DataError,
    Model as _Model,
    NumericError,
    evaluate,
    gen_data,
    generate_scene,
    load_scene,
    mannwhitney_u,
    metrics,
    ndvi,
    select_threshold,
    sweep,
)
from ._smagnet import train as _train

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "evaluate",
    "gen_data",
    "generate_scene",
    "load_scene",
    "mannwhitney_u",
    "metrics",
    "ndvi",
    "select_threshold",
    "sweep",
    "train",
]


def train(config, out):
    """Train from a RunConfig dict (or JSON string) into run directory `out`."""
    if not isinstance(config, str):
        config = json.dumps(config)
    return _train(config, str(out))


class Model(_Model):
    """Inference model; `config` is a model-section dict or JSON string."""

    def __init__(self, config=None):
        if config is None:
            config = ""
        elif not isinstance(config, str):
            config = json.dumps(config)
        super().__init__(config)
