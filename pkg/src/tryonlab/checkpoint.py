"""Checkpoint containers.

A checkpoint is a directory::

    arch.json        architecture descriptor (enough to rebuild the module)
    meta.json        {role, seed, step, loss, fingerprint, ...}
    tensors/*.f32    one header-prefixed float32 file per state-dict entry
"""
import hashlib
import shutil
from pathlib import Path

import numpy as np
import torch

from . import io
from .errors import DependencyError


def state_hash(module_or_state):
    """SHA-256 over every tensor of a module (or state dict), name-sorted."""
    if isinstance(module_or_state, torch.nn.Module):
        state = module_or_state.state_dict()
    else:
        state = module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def save(path, module, arch, meta):
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    (path / "tensors").mkdir(parents=True)
    state = module.state_dict()
    for name, t in state.items():
        io.save_tensor(path / "tensors" / f"{name}.f32", t.detach().cpu().numpy(), name)
    io.write_json(path / "arch.json", arch)
    meta = dict(meta)
    meta["param_hash"] = state_hash(state)
    io.write_json(path / "meta.json", meta)
    return path


def read(path, role=None):
    """Return ``(arch, meta, state)`` with ``state`` a dict of float32 tensors."""
    path = Path(path)
    if not (path / "meta.json").exists():
        what = role or path.name
        raise DependencyError(f"missing {what} checkpoint at {path}")
    arch = io.read_json(path / "arch.json")
    meta = io.read_json(path / "meta.json")
    state = {}
    for f in sorted((path / "tensors").glob("*.f32")):
        arr, header = io.load_tensor(f, with_header=True)
        state[header["field"]] = torch.from_numpy(arr)
    return arch, meta, state


def load_into(module, state):
    module.load_state_dict(state, strict=True)
    return module


def files_hash(path):
    """Hash of every file under a checkpoint directory (byte-level audit)."""
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()
