"""Checkpoint files: one .npz holding every named parameter plus a JSON header.

Layout (schema 1): the ``__meta__`` entry is a JSON string with keys
``schema_version``, ``step`` and ``config`` (the full resolved experiment
config, enough to rebuild the sampler); each parameter array is stored under
the key ``param::<name>``.
"""

import json

import numpy as np

SCHEMA_VERSION = 1


def save_checkpoint(path, config, params, step=None):
    meta = {"schema_version": SCHEMA_VERSION, "step": step, "config": config,
            "param_names": [p.name for p in params]}
    arrays = {f"param::{p.name}": p.value for p in params}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema_version')}")
        params = {name: np.array(data[f"param::{name}"]) for name in meta["param_names"]}
    return meta, params


def restore_parameters(sampler, params):
    """Load stored arrays into a freshly built sampler, strictly by name."""
    mine = {p.name: p for p in sampler.parameters()}
    missing = sorted(set(mine) - set(params))
    extra = sorted(set(params) - set(mine))
    if missing or extra:
        raise ValueError(f"checkpoint/model parameter mismatch: missing={missing} extra={extra}")
    for name, value in params.items():
        if mine[name].value.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{mine[name].value.shape} vs {value.shape}")
        mine[name].value = value.copy()
