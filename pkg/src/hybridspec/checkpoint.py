"""Checkpoint container: a ``.npz`` archive with a JSON header and raw fp32 arrays."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import Backbone
from .config import ModelConfig

FORMAT = "hybridspec-checkpoint"
VERSION = 1
_META = "__meta__"


class CheckpointError(RuntimeError):
    pass


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = arrays[name]
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def save_checkpoint(backbone: Backbone, path: str | Path, extra: Optional[dict] = None) -> Path:
    arrays = {k: v.detach().cpu().numpy().copy() for k, v in backbone.state_dict().items()}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": backbone.config.to_dict(),
        "shapes": {k: list(a.shape) for k, a in arrays.items()},
        "sha256": _digest(arrays),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays, **{_META: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)})
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if _META not in files:
        raise CheckpointError(f"{path}: missing metadata header")
    try:
        meta = json.loads(files.pop(_META).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata header") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    for name, shape in meta["shapes"].items():
        if name not in files or list(files[name].shape) != shape:
            raise CheckpointError(f"{path}: array {name!r} missing or shape mismatch")
    if _digest(files) != meta["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return meta, files


def load_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    """Rebuild the backbone; returns it with the ``extra`` metadata dict."""
    meta, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = Backbone(config)
    expected = model.state_dict()
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    state = {}
    for k, ref in expected.items():
        if tuple(ref.shape) != arrays[k].shape:
            raise CheckpointError(f"{path}: shape mismatch for {k}")
        state[k] = torch.from_numpy(arrays[k].copy())
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("extra", {})
