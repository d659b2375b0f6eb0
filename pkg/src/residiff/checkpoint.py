"""Versioned checkpoint container: model/optimizer tensors plus config and history.

A checkpoint is a zip archive holding ``meta.json`` and one binary entry
per tensor, each serialized in the same format as dataset tensors.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .data import read_tensor, write_tensor
from .errors import DataError

CKPT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                      # "seg" | "diff" | "joint"
    config: ExperimentConfig
    seg_state: dict | None = None  # param name -> float32 ndarray
    diff_state: dict | None = None
    seg_opt: dict | None = None    # param name -> {step, exp_avg, exp_avg_sq}
    diff_opt: dict | None = None
    history: list = field(default_factory=list)
    version: int = CKPT_VERSION


def state_to_numpy(model: torch.nn.Module) -> dict:
    return {name: p.detach().numpy().astype(np.float32).copy() for name, p in model.state_dict().items()}


def load_state_into(model: torch.nn.Module, state: dict) -> None:
    tensors = {name: torch.from_numpy(np.asarray(arr)) for name, arr in state.items()}
    model.load_state_dict(tensors)


def adam_state_to_numpy(optimizer: torch.optim.Optimizer, model: torch.nn.Module) -> dict:
    by_param = {id(p): name for name, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            out[by_param[id(p)]] = {
                "step": float(st["step"]),
                "exp_avg": st["exp_avg"].numpy().astype(np.float32).copy(),
                "exp_avg_sq": st["exp_avg_sq"].numpy().astype(np.float32).copy(),
            }
    return out


def restore_adam_state(optimizer: torch.optim.Optimizer, model: torch.nn.Module, state: dict) -> None:
    params = dict(model.named_parameters())
    for name, st in state.items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": torch.from_numpy(np.asarray(st["exp_avg"])).clone(),
            "exp_avg_sq": torch.from_numpy(np.asarray(st["exp_avg_sq"])).clone(),
        }


def _collect_tensors(ckpt: Checkpoint) -> dict:
    tensors = {}
    for prefix, state in (("seg", ckpt.seg_state), ("diff", ckpt.diff_state)):
        if state:
            for name, arr in state.items():
                tensors[f"{prefix}/{name}"] = arr
    for prefix, opt in (("opt_seg", ckpt.seg_opt), ("opt_diff", ckpt.diff_opt)):
        if opt:
            for name, st in opt.items():
                tensors[f"{prefix}/{name}/exp_avg"] = st["exp_avg"]
                tensors[f"{prefix}/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = _collect_tensors(ckpt)
    entry_names = {key: f"tensors/{i:05d}.bin" for i, key in enumerate(sorted(tensors))}
    meta = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "config": config_to_dict(ckpt.config),
        "history": ckpt.history,
        "tensors": entry_names,
        "opt_steps": {
            prefix: {name: st["step"] for name, st in opt.items()}
            for prefix, opt in (("opt_seg", ckpt.seg_opt), ("opt_diff", ckpt.diff_opt))
            if opt
        },
        "has": {
            "seg_state": ckpt.seg_state is not None,
            "diff_state": ckpt.diff_state is not None,
            "seg_opt": ckpt.seg_opt is not None,
            "diff_opt": ckpt.diff_opt is not None,
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1))
        for key, entry in entry_names.items():
            buf = io.BytesIO()
            write_tensor(buf, tensors[key])
            zf.writestr(entry, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    with zipfile.ZipFile(p) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        tensors = {}
        for key, entry in meta["tensors"].items():
            tensors[key] = read_tensor(io.BytesIO(zf.read(entry)))

    def take(prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}

    has = meta["has"]
    seg_state = take("seg") if has["seg_state"] else None
    diff_state = take("diff") if has["diff_state"] else None

    def take_opt(prefix: str) -> dict:
        steps = meta["opt_steps"].get(prefix, {})
        out = {}
        for name, step in steps.items():
            out[name] = {
                "step": float(step),
                "exp_avg": tensors[f"{prefix}/{name}/exp_avg"],
                "exp_avg_sq": tensors[f"{prefix}/{name}/exp_avg_sq"],
            }
        return out

    return Checkpoint(
        kind=meta["kind"],
        config=config_from_dict(meta["config"]),
        seg_state=seg_state,
        diff_state=diff_state,
        seg_opt=take_opt("opt_seg") if has["seg_opt"] else None,
        diff_opt=take_opt("opt_diff") if has["diff_opt"] else None,
        history=meta["history"],
        version=meta["version"],
    )
