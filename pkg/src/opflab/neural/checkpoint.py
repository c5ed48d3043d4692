"""JSON checkpoints for trained models.

Format (``schema_version`` 1)::

    {"schema_version": 1, "kind": "fcc" | "rnn", "config": {...},
     "params": {name: {"shape": [...], "values": [...row-major...]}},
     "buffers": {name: {"shape": [...], "values": [...]}},
     "extra": {...}}

``config`` holds the architecture (widths/activation/bias for FCC; sizes,
``T`` and ``set_idx`` for RNN). ``extra`` carries training metadata such as
the head layout and final multipliers.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from opflab.neural.fcc import FccModel
from opflab.neural.rnn import RnnModel

SCHEMA_VERSION = 1
_BUFFERS = ("x_shift", "x_scale", "y_shift", "y_scale")


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=float).reshape(d["shape"])


def model_to_dict(model, extra: dict = None) -> dict:
    if isinstance(model, FccModel):
        kind = "fcc"
        config = {"widths": model.widths, "activation": model.activation, "bias": model.bias}
    elif isinstance(model, RnnModel):
        kind = "rnn"
        config = {"n_in": model.n_in, "n_out": model.n_out, "set_idx": model.set_idx.tolist(),
                  "hidden": model.hidden, "embed": model.embed, "T": model.T}
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "params": {k: _pack(v) for k, v in model.params.items()},
        "buffers": {k: _pack(getattr(model, k)) for k in _BUFFERS},
        "extra": extra or {},
    }


def model_from_dict(d: dict) -> Tuple[Union[FccModel, RnnModel], dict]:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {d.get('schema_version')}")
    params = {k: _unpack(v) for k, v in d["params"].items()}
    buffers = {k: _unpack(v) for k, v in d["buffers"].items()}
    cfg = d["config"]
    if d["kind"] == "fcc":
        model = FccModel(cfg["widths"], cfg["activation"], cfg["bias"], params, **buffers)
    elif d["kind"] == "rnn":
        model = RnnModel(cfg["n_in"], cfg["n_out"], cfg["set_idx"], cfg["hidden"], cfg["embed"], cfg["T"],
                         params, **buffers)
    else:
        raise ValueError(f"unknown model kind {d['kind']!r}")
    return model, d.get("extra", {})


def save_checkpoint(path: Union[str, Path], model, extra: dict = None):
    text = json.dumps(model_to_dict(model, extra), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path: Union[str, Path]):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
