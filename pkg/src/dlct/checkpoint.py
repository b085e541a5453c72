"""Checkpoint directories.

Layout::

    manifest.json      model/train config, loop state, parameter file index
    params/<name>.dlt  every parameter as a DLT1 float32 tensor (portable)
    state.npz          exact float64 parameters and optimiser moments (resume)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import DLCT, ModelConfig
from .numerics import Tensor, load_tensor, save_tensor

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _fname(name: str) -> str:
    return name.replace("/", "_") + ".dlt"


def save_checkpoint(path, model: DLCT, optimizer=None, state: dict | None = None,
                    train_config: dict | None = None, data_hash: str | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    index = {}
    for name, p in model.params.items():
        save_tensor(path / "params" / _fname(name), p.data)
        index[name] = f"params/{_fname(name)}"
    arrays = {f"p/{k}": p.data for k, p in model.params.items()}
    if optimizer is not None:
        arrays.update({f"opt/{k}": v for k, v in optimizer.state_arrays().items()})
    np.savez(path / "state.npz", **arrays)
    manifest = {
        "format": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "state": state or {},
        "params": index,
        "data_hash": data_hash,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint_state(path) -> tuple[dict, dict]:
    """(manifest, arrays) where arrays come from state.npz."""
    path = Path(path)
    manifest = read_manifest(path)
    with np.load(path / "state.npz") as z:
        arrays = {k: z[k] for k in z.files}
    return manifest, arrays


def restore(model: DLCT, optimizer, arrays: dict) -> None:
    for k, p in model.params.items():
        p.data = np.array(arrays[f"p/{k}"], dtype=np.float64)
        p.grad = None
    if optimizer is not None:
        optimizer.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})


def load_model(path, exact: bool = True) -> DLCT:
    """Rebuild a model. ``exact`` reads float64 state when present, else the DLT1 tensors."""
    path = Path(path)
    manifest = read_manifest(path)
    cfg = ModelConfig(**manifest["model_config"])
    model = DLCT(cfg)
    if exact and (path / "state.npz").exists():
        _, arrays = load_checkpoint_state(path)
        restore(model, None, arrays)
        return model
    for name, rel in manifest["params"].items():
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        arr = load_tensor(path / rel)
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name] = Tensor(arr, requires_grad=True)
    return model
