"""Versioned named-array checkpoint files.

A checkpoint is a NumPy ``.npz`` archive. Array keys are

* ``model/<name>/<state-key>`` for each module's ``state_dict`` entries,
* ``optim/<name>/<param-index>/<field>`` for optimizer moment tensors,
* ``array/<key>`` for free-form arrays (e.g. RNG state bytes),

and the single key ``__meta__`` holds a JSON document with
``format``, ``version``, ``step``, per-model build specs and dtypes,
optimizer hyper-parameters and any caller metadata.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "rpnet-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    states: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def spec(self, name="model") -> dict:
        return self.meta["models"][name]["spec"]


def _optim_to_arrays(name, opt):
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v) and v.dim() > 0:
                arrays[f"optim/{name}/{idx}/{k}"] = v.detach().cpu().numpy()
            else:
                scalars.setdefault(str(idx), {})[k] = float(v)
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def save_checkpoint(path, models: dict, specs: dict, step: int = 0, optimizers=None,
                    meta=None, arrays=None) -> Path:
    """Atomically write ``models`` (name -> module or state dict) and optional optimizers to ``path``."""
    path = Path(path)
    out, doc = {}, {"format": FORMAT, "version": VERSION, "step": int(step),
                    "models": {}, "optimizers": {}, "meta": meta or {}}
    for name, module in models.items():
        # a module or an already-extracted state dict
        state = module.state_dict() if isinstance(module, torch.nn.Module) else module
        for k, v in state.items():
            out[f"model/{name}/{k}"] = v.detach().cpu().numpy()
        dtype = next(v.dtype for v in state.values() if v.is_floating_point())
        doc["models"][name] = {"spec": specs[name], "dtype": str(dtype).replace("torch.", "")}
    for name, opt in (optimizers or {}).items():
        a, info = _optim_to_arrays(name, opt)
        out.update(a)
        doc["optimizers"][name] = info
    for k, v in (arrays or {}).items():
        out[f"array/{k}"] = np.asarray(v)
    out["__meta__"] = np.array(json.dumps(doc, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **out)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ValueError(f"{path} is not a checkpoint (no __meta__ entry)")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version", 0) > VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer "
                             f"than supported version {VERSION}")
        ck = Checkpoint(meta)
        for key in z.files:
            if key == "__meta__":
                continue
            kind, rest = key.split("/", 1)
            if kind == "model":
                name, k = rest.split("/", 1)
                ck.states.setdefault(name, {})[k] = torch.from_numpy(z[key].copy())
            elif kind == "optim":
                name, idx, k = rest.split("/")
                ck.optim.setdefault(name, {}).setdefault(int(idx), {})[k] = \
                    torch.from_numpy(z[key].copy())
            elif kind == "array":
                ck.arrays[rest] = z[key].copy()
    return ck


def restore_optimizer(opt: torch.optim.Optimizer, ck: Checkpoint, name: str) -> None:
    info = ck.meta["optimizers"][name]
    state = {}
    for idx, tensors in ck.optim.get(name, {}).items():
        state[idx] = dict(tensors)
    for idx, scalars in info["scalars"].items():
        st = state.setdefault(int(idx), {})
        for k, v in scalars.items():
            st[k] = torch.tensor(v, dtype=torch.float32)
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})


def restore_module(module: torch.nn.Module, ck: Checkpoint, name: str):
    dtype = getattr(torch, ck.meta["models"][name]["dtype"])
    module.to(dtype=dtype)
    module.load_state_dict(ck.states[name])
    return module
