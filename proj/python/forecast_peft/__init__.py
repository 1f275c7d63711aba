"""Masked-autoencoder trajectory forecasting with parameter-efficient finetuning.

Each command mirrors the ``forecast-peft`` CLI: it writes its artifacts and
``metrics.json`` into ``out`` and returns the metrics as a dict.
"""

import json

from . import _core
from ._core import ConfigError, DataError, cosine_lr, read_predictions, read_scenes

__all__ = [
    "ConfigError",
    "DataError",
    "ablate",
    "cosine_lr",
    "evaluate",
    "finetune",
    "gen_data",
    "metrics",
    "params",
    "pretrain",
    "read_predictions",
    "read_scenes",
]


def _run(command, **kwargs):
    kwargs = {k: (str(v) if k in _PATHS and v is not None else v) for k, v in kwargs.items()}
    return json.loads(_core.run(command, **kwargs))


_PATHS = {"config", "out", "plugin", "resume", "checkpoint"}


def gen_data(config=None, out=".", seed=None, profile=None):
    return _run("gen-data", config=config, out=out, seed=seed, profile=profile)


def pretrain(config=None, out=".", seed=None, resume=None):
    return _run("pretrain", config=config, out=out, seed=seed, resume=resume)


def finetune(config=None, out=".", mode=None, seed=None, resume=None):
    return _run("finetune", config=config, out=out, mode=mode, seed=seed, resume=resume)


def evaluate(config=None, out=".", plugin=None, checkpoint=None, horizon=None):
    return _run("eval", config=config, out=out, plugin=plugin, checkpoint=checkpoint, horizon=horizon)


def params(config=None, out=".", mode=None):
    return _run("params", config=config, out=out, mode=mode)


def ablate(config=None, out=".", mode=None, seed=None):
    return _run("ablate", config=config, out=out, mode=mode, seed=seed)


def metrics(traj, conf, gt, horizon=0, miss_threshold=2.0):
    """minADE, minFDE, MR and b-minFDE for traj [S, K, T, 2], conf [S, K], gt [S, T, 2]."""
    return json.loads(_core.metrics(traj, conf, gt, horizon, miss_threshold))
