"""Checkpoint container: named parameter arrays + JSON metadata in one .npz.

Parameters are stored as ``param/<state_dict_name>`` float arrays; metadata
(model kind, config, config hash, metric snapshot, trainability flags) rides
along as a JSON string under ``__meta__``. The format is torch-free on disk
so checkpoints can be inspected with numpy alone.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

PARAM_PREFIX = "param/"


class CheckpointError(Exception):
    """Raised for missing or malformed checkpoint files."""


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, state_dict: dict, meta: dict) -> None:
    arrays = {PARAM_PREFIX + k: v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
              for k, v in state_dict.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf8"),
                                       dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)
    if path.suffix != ".npz":  # numpy appends .npz when missing
        Path(str(path) + ".npz").replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: missing metadata block")
        meta = json.loads(bytes(data["__meta__"]).decode("utf8"))
        params = {k[len(PARAM_PREFIX):]: data[k] for k in data.files
                  if k.startswith(PARAM_PREFIX)}
    return params, meta


def load_into_module(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.items()}
    missing_or_extra = set(state) ^ set(module.state_dict())
    if missing_or_extra:
        raise CheckpointError(f"state dict mismatch on keys: {sorted(missing_or_extra)}")
    module.load_state_dict(state)


def state_checksum(module: torch.nn.Module) -> str:
    """Order-stable digest of all parameters; used for determinism checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf8"))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
